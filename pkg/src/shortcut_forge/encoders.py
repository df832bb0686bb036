"""Encoder architectures, their initialization, and checkpoint files.

Three parameter sets:

- :class:`ImageEncoderParams` — four 3x3 stride-2 conv layers
  (channels 1-8-16-32-32, relu after each), global average pool, then a
  linear projection to a 128-d embedding.
- :class:`TextEncoderParams` — token embedding table (vocab x 64), mean
  pool over tokens, one 64->64 hidden layer with relu, projection to 128.
  Token ids outside the vocabulary map to the reserved row 0.
- :class:`ClassifierParams` — an image-encoder trunk plus a linear head
  from the 128-d embedding to 5 logits.  Converting a trained dual encoder
  with :func:`to_classifier` copies the trunk verbatim and seeds a fresh
  head, which makes the result layer-identical to a scratch classifier.

All forwards are pure functions of (input, params).  Initialization uses
uniform fan-in scaling with one named stream per layer, so two models
built from the same seed are bit-identical.

Checkpoints are a small binary format: magic, version, a JSON header with
the architecture descriptor and parameter shapes, then the flat float32
little-endian arrays.  Save/load round trips are bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ContractViolation

EMBED_DIM = 128
TEXT_WIDTH = 64
CONV_CHANNELS = (1, 8, 16, 32, 32)
KERNEL = 3
STRIDE = 2
N_HEADS = 5

CHECKPOINT_MAGIC = b"SFCK"
CHECKPOINT_VERSION = 1


@dataclass
class ConvLayer:
    weight: Tensor  # (c_out, c_in, k, k)
    bias: Tensor  # (1, c_out, 1, 1)


@dataclass
class ImageEncoderParams:
    image_size: int
    convs: list[ConvLayer]
    proj: Tensor  # (CONV_CHANNELS[-1], EMBED_DIM)


@dataclass
class TextEncoderParams:
    vocab_size: int
    table: Tensor  # (vocab, TEXT_WIDTH)
    hidden_w: Tensor  # (TEXT_WIDTH, TEXT_WIDTH)
    hidden_b: Tensor  # (1, TEXT_WIDTH)
    proj: Tensor  # (TEXT_WIDTH, EMBED_DIM)


@dataclass
class DualEncoderParams:
    image: ImageEncoderParams
    text: TextEncoderParams


@dataclass
class ClassifierParams:
    trunk: ImageEncoderParams
    head_w: Tensor  # (EMBED_DIM, N_HEADS)
    head_b: Tensor  # (1, N_HEADS)


# ----------------------------------------------------------------------
# initialization
# ----------------------------------------------------------------------
def _layer_stream(seed: int, ordinal: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, ordinal])))


def _uniform_fan_in(rng, shape, fan_in, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return dc.tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


def init_image_encoder(image_size: int, seed: int, dtype=np.float32) -> ImageEncoderParams:
    convs = []
    for i in range(len(CONV_CHANNELS) - 1):
        c_in, c_out = CONV_CHANNELS[i], CONV_CHANNELS[i + 1]
        rng = _layer_stream(seed, i)
        fan_in = c_in * KERNEL * KERNEL
        weight = _uniform_fan_in(rng, (c_out, c_in, KERNEL, KERNEL), fan_in, dtype)
        bias = _uniform_fan_in(rng, (1, c_out, 1, 1), fan_in, dtype)
        convs.append(ConvLayer(weight=weight, bias=bias))
    rng = _layer_stream(seed, len(CONV_CHANNELS) - 1)
    proj = _uniform_fan_in(rng, (CONV_CHANNELS[-1], EMBED_DIM), CONV_CHANNELS[-1], dtype)
    return ImageEncoderParams(image_size=image_size, convs=convs, proj=proj)


def init_text_encoder(vocab_size: int, seed: int, dtype=np.float32) -> TextEncoderParams:
    rng = _layer_stream(seed, 100)
    table = dc.tensor(
        rng.uniform(-1.0, 1.0, size=(vocab_size, TEXT_WIDTH)), requires_grad=True, dtype=dtype
    )
    rng = _layer_stream(seed, 101)
    hidden_w = _uniform_fan_in(rng, (TEXT_WIDTH, TEXT_WIDTH), TEXT_WIDTH, dtype)
    hidden_b = _uniform_fan_in(rng, (1, TEXT_WIDTH), TEXT_WIDTH, dtype)
    rng = _layer_stream(seed, 102)
    proj = _uniform_fan_in(rng, (TEXT_WIDTH, EMBED_DIM), TEXT_WIDTH, dtype)
    return TextEncoderParams(
        vocab_size=vocab_size, table=table, hidden_w=hidden_w, hidden_b=hidden_b, proj=proj
    )


def init_dual_encoder(image_size: int, vocab_size: int, seed: int, dtype=np.float32) -> DualEncoderParams:
    return DualEncoderParams(
        image=init_image_encoder(image_size, seed, dtype),
        text=init_text_encoder(vocab_size, seed + 1, dtype),
    )


def _init_head(seed: int, dtype=np.float32) -> tuple[Tensor, Tensor]:
    rng = _layer_stream(seed, 200)
    return (
        _uniform_fan_in(rng, (EMBED_DIM, N_HEADS), EMBED_DIM, dtype),
        _uniform_fan_in(rng, (1, N_HEADS), EMBED_DIM, dtype),
    )


def init_classifier(image_size: int, seed: int, dtype=np.float32) -> ClassifierParams:
    head_w, head_b = _init_head(seed, dtype)
    return ClassifierParams(
        trunk=init_image_encoder(image_size, seed, dtype), head_w=head_w, head_b=head_b
    )


def to_classifier(encoder: ImageEncoderParams, head_init_seed: int) -> ClassifierParams:
    """Attach a fresh 5-head layer to a verbatim copy of the trunk."""
    trunk = ImageEncoderParams(
        image_size=encoder.image_size,
        convs=[
            ConvLayer(
                weight=dc.tensor(l.weight.data.copy(), requires_grad=True),
                bias=dc.tensor(l.bias.data.copy(), requires_grad=True),
            )
            for l in encoder.convs
        ],
        proj=dc.tensor(encoder.proj.data.copy(), requires_grad=True),
    )
    head_w, head_b = _init_head(head_init_seed, dtype=encoder.proj.dtype)
    return ClassifierParams(trunk=trunk, head_w=head_w, head_b=head_b)


# ----------------------------------------------------------------------
# forward graphs (batched) and single-input wrappers
# ----------------------------------------------------------------------
def image_forward(x: Tensor, params: ImageEncoderParams, normalize: bool = False) -> Tensor:
    """(N, 1, H, W) -> (N, 128) embedding graph."""
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (params.image_size, params.image_size):
        raise ContractViolation(
            f"image batch {x.shape} does not match encoder size {params.image_size}"
        )
    h = x
    for layer in params.convs:
        h = (dc.conv2d(h, layer.weight, stride=STRIDE) + layer.bias).relu()
    n, c = h.shape[0], h.shape[1]
    spatial = h.shape[2] * h.shape[3]
    pooled = h.sum(axis=3).sum(axis=2) / np.array(spatial, dtype=h.dtype)
    emb = pooled.reshape(n, c) @ params.proj
    return dc.l2_normalize_rows(emb) if normalize else emb


def _pooling_matrix(captions: list[list[int]], vocab_size: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    flat: list[int] = []
    rows = []
    for i, caption in enumerate(captions):
        if len(caption) == 0:
            raise ContractViolation(f"caption {i} is empty")
        for tok in caption:
            t = int(tok)
            flat.append(t if 0 <= t < vocab_size else 0)
            rows.append(i)
    m = np.zeros((len(captions), len(flat)), dtype=dtype)
    lengths = np.bincount(rows, minlength=len(captions))
    for j, i in enumerate(rows):
        m[i, j] = 1.0 / lengths[i]
    return m, np.asarray(flat, dtype=np.int64)


def text_forward(captions: list[list[int]], params: TextEncoderParams, normalize: bool = False) -> Tensor:
    """List of token-id sequences -> (N, 128) embedding graph.

    Mean pooling makes the output invariant to token order.
    """
    m, flat = _pooling_matrix(captions, params.vocab_size, params.table.dtype)
    token_emb = dc.take_rows(params.table, flat)
    pooled = dc.tensor(m) @ token_emb
    h = (pooled @ params.hidden_w + params.hidden_b).relu()
    emb = h @ params.proj
    return dc.l2_normalize_rows(emb) if normalize else emb


def text_trunk_features(captions: list[list[int]], params: TextEncoderParams) -> np.ndarray:
    """Frozen-trunk activations (everything up to the projection).

    During contrastive training the text trunk never moves, so these can be
    computed once per corpus and fed to the trainable projection as
    constants.
    """
    m, flat = _pooling_matrix(captions, params.vocab_size, params.table.dtype)
    pooled = m @ params.table.data[flat]
    return np.maximum(pooled @ params.hidden_w.data + params.hidden_b.data, 0)


def classifier_forward(x: Tensor, params: ClassifierParams) -> Tensor:
    """(N, 1, H, W) -> (N, 5) logit graph.

    The head reads the unit-normalized embedding: contrastive pretraining
    constrains only embedding directions, so norm drift would otherwise
    swamp a freshly seeded head.  Scratch classifiers use the same form,
    keeping the two training regimes architecturally identical.
    """
    emb = image_forward(x, params.trunk, normalize=True)
    return emb @ params.head_w + params.head_b


def _as_image_batch(image: np.ndarray, image_size: int, dtype) -> Tensor:
    arr = np.asarray(image)
    if arr.shape != (image_size, image_size):
        raise ContractViolation(f"image shape {arr.shape}, expected {(image_size, image_size)}")
    return dc.tensor(arr.reshape(1, 1, image_size, image_size), dtype=dtype)


def image_encode(image: np.ndarray, params: ImageEncoderParams, normalize: bool = False) -> np.ndarray:
    """Encode one H x W image to its 128-vector."""
    x = _as_image_batch(image, params.image_size, params.proj.dtype)
    return image_forward(x, params, normalize=normalize).data[0]


def text_encode(caption, params: TextEncoderParams, normalize: bool = False) -> np.ndarray:
    """Encode one token-id sequence to its 128-vector."""
    return text_forward([list(caption)], params, normalize=normalize).data[0]


def classify(image: np.ndarray, params: ClassifierParams) -> np.ndarray:
    """Score one image with the 5-head classifier."""
    x = _as_image_batch(image, params.trunk.image_size, params.trunk.proj.dtype)
    return classifier_forward(x, params).data[0]


# ----------------------------------------------------------------------
# named parameters, descriptors, counting
# ----------------------------------------------------------------------
def param_items(params) -> list[tuple[str, Tensor]]:
    """Stable (name, tensor) pairs; the checkpoint payload order."""
    if isinstance(params, ImageEncoderParams):
        items = []
        for i, layer in enumerate(params.convs):
            items.append((f"conv{i}.weight", layer.weight))
            items.append((f"conv{i}.bias", layer.bias))
        items.append(("proj", params.proj))
        return items
    if isinstance(params, TextEncoderParams):
        return [
            ("table", params.table),
            ("hidden.weight", params.hidden_w),
            ("hidden.bias", params.hidden_b),
            ("proj", params.proj),
        ]
    if isinstance(params, DualEncoderParams):
        return [(f"image.{n}", t) for n, t in param_items(params.image)] + [
            (f"text.{n}", t) for n, t in param_items(params.text)
        ]
    if isinstance(params, ClassifierParams):
        return [(f"trunk.{n}", t) for n, t in param_items(params.trunk)] + [
            ("head.weight", params.head_w),
            ("head.bias", params.head_b),
        ]
    raise ContractViolation(f"unknown parameter object {type(params).__name__}")


def n_parameters(params) -> int:
    return sum(t.data.size for _, t in param_items(params))


def architecture_descriptor(params) -> str:
    if isinstance(params, ImageEncoderParams):
        chans = "-".join(str(c) for c in CONV_CHANNELS)
        return (
            f"image-encoder/v1:size={params.image_size}:channels={chans}"
            f":k={KERNEL}:stride={STRIDE}:embed={EMBED_DIM}"
        )
    if isinstance(params, TextEncoderParams):
        return (
            f"text-encoder/v1:vocab={params.vocab_size}:width={TEXT_WIDTH}:embed={EMBED_DIM}"
        )
    if isinstance(params, DualEncoderParams):
        return (
            f"dual-encoder/v1:[{architecture_descriptor(params.image)}]"
            f"+[{architecture_descriptor(params.text)}]"
        )
    if isinstance(params, ClassifierParams):
        return f"classifier/v1:[{architecture_descriptor(params.trunk)}]:heads={N_HEADS}"
    raise ContractViolation(f"unknown parameter object {type(params).__name__}")


def shape_signature(params) -> list[tuple[str, tuple]]:
    return [(name, tuple(t.shape)) for name, t in param_items(params)]


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------
def _kind(params) -> str:
    return {
        ImageEncoderParams: "image_encoder",
        TextEncoderParams: "text_encoder",
        DualEncoderParams: "dual_encoder",
        ClassifierParams: "classifier",
    }[type(params)]


def _meta(params) -> dict:
    if isinstance(params, ImageEncoderParams):
        return {"image_size": params.image_size}
    if isinstance(params, TextEncoderParams):
        return {"vocab_size": params.vocab_size}
    if isinstance(params, DualEncoderParams):
        return {"image_size": params.image.image_size, "vocab_size": params.text.vocab_size}
    if isinstance(params, ClassifierParams):
        return {"image_size": params.trunk.image_size}
    raise ContractViolation(f"unknown parameter object {type(params).__name__}")


def save_checkpoint(path: str | Path, params) -> None:
    """Write header (descriptor, shapes) + flat float32 little-endian arrays."""
    items = param_items(params)
    for name, t in items:
        if t.dtype != np.float32:
            raise ContractViolation(f"checkpoints are float32; {name} is {t.dtype}")
    header = {
        "version": CHECKPOINT_VERSION,
        "kind": _kind(params),
        "descriptor": architecture_descriptor(params),
        "meta": _meta(params),
        "params": [{"name": n, "shape": list(t.shape)} for n, t in items],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(CHECKPOINT_VERSION.to_bytes(2, "little"))
        fh.write(len(blob).to_bytes(4, "little"))
        fh.write(blob)
        for _, t in items:
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def read_checkpoint_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ContractViolation(f"{path}: not a checkpoint file")
        version = int.from_bytes(fh.read(2), "little")
        if version != CHECKPOINT_VERSION:
            raise ContractViolation(f"{path}: unsupported checkpoint version {version}")
        hlen = int.from_bytes(fh.read(4), "little")
        return json.loads(fh.read(hlen).decode("utf-8"))


def load_checkpoint(path: str | Path):
    """Rebuild the parameter object named by the stored descriptor."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ContractViolation(f"{path}: not a checkpoint file")
    version = int.from_bytes(raw[4:6], "little")
    if version != CHECKPOINT_VERSION:
        raise ContractViolation(f"{path}: unsupported checkpoint version {version}")
    hlen = int.from_bytes(raw[6:10], "little")
    header = json.loads(raw[10 : 10 + hlen].decode("utf-8"))
    pos = 10 + hlen
    arrays: dict[str, np.ndarray] = {}
    for spec in header["params"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(shape)
        arrays[spec["name"]] = arr.astype(np.float32)
        pos += 4 * count

    def t(name):
        return dc.tensor(arrays[name], requires_grad=True)

    kind, meta = header["kind"], header["meta"]
    if kind == "image_encoder":
        return _image_from(t, meta)
    if kind == "text_encoder":
        return _text_from(t, meta)
    if kind == "dual_encoder":
        image = _image_from(lambda n: t(f"image.{n}"), meta)
        text = _text_from(lambda n: t(f"text.{n}"), meta)
        return DualEncoderParams(image=image, text=text)
    if kind == "classifier":
        trunk = _image_from(lambda n: t(f"trunk.{n}"), meta)
        return ClassifierParams(trunk=trunk, head_w=t("head.weight"), head_b=t("head.bias"))
    raise ContractViolation(f"{path}: unknown checkpoint kind {kind!r}")


def _image_from(t, meta) -> ImageEncoderParams:
    convs = [
        ConvLayer(weight=t(f"conv{i}.weight"), bias=t(f"conv{i}.bias"))
        for i in range(len(CONV_CHANNELS) - 1)
    ]
    return ImageEncoderParams(image_size=int(meta["image_size"]), convs=convs, proj=t("proj"))


def _text_from(t, meta) -> TextEncoderParams:
    return TextEncoderParams(
        vocab_size=int(meta["vocab_size"]),
        table=t("table"),
        hidden_w=t("hidden.weight"),
        hidden_b=t("hidden.bias"),
        proj=t("proj"),
    )

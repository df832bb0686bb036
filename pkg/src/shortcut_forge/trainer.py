"""Training loops: contrastive pretraining, supervised BCE, fine-tuning.

The contrastive loss follows the two-augmentation recipe: every image is
augmented twice, and the batch loss sums the symmetric cross-entropy
matching terms between each augmentation and the caption embeddings and
between the two augmentations themselves.  Cosine similarities are scaled
by a fixed temperature before the row/column cross-entropies.

The text trunk (embedding table and hidden layer) stays frozen during
contrastive training; only its final projection learns, mirrored by the
fully trainable image tower.  Fine-tuning converts a dual encoder to the
5-head classifier (identical to the scratch-trained one) and continues
with the supervised loss at a reduced learning rate on clean samples.

Every loop is deterministic given (data, config): epoch shuffles and
augmentation draws come from streams keyed on (seed, purpose, epoch,
batch).  Validation loss is evaluated on unaugmented images after each
epoch and the parameters from the best-validation epoch are returned.

Training loops refuse to read test-tagged splits.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import encoders as enc
from .diffcore import Tensor
from .errors import ContractViolation, NumericFailure
from .synthcorpus import Corpus, Split

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CROP_PAD = 4
AUG_NOISE_STD = 0.02
FLIP_PROB = 0.5

# rng purpose tags for the training streams
_TAG_SHUFFLE = 10
_TAG_AUGMENT = 11


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 1e-4
    batch_size: int = 32
    temperature: float = 0.07
    optimizer: str = "adam"
    seed: int = 0
    shuffle: bool = True
    freeze_trunk: bool = False  # fine-tuning only; default trainable

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ContractViolation("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ContractViolation("batch_size must be >= 1")
        if self.temperature <= 0:
            raise ContractViolation("temperature must be > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ContractViolation(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 0:
            raise ContractViolation("epochs must be >= 0")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainResult:
    params: object  # best-validation parameter object
    best_epoch: int  # 0 means "initial parameters" (epochs == 0)
    log: list[tuple]  # (epoch, train_loss, val_loss, lr)


# ----------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------
def _matching_term(x: Tensor, y: Tensor, temperature: float) -> Tensor:
    s = dc.cosine_similarity_matrix(x, y) / np.array(temperature, dtype=x.dtype)
    return (dc.cross_entropy_rows(s) + dc.cross_entropy_rows(s.transpose2d())) * np.array(
        0.5, dtype=x.dtype
    )


def clip_loss(emb_img_a: Tensor, emb_img_b: Tensor, emb_txt: Tensor, temperature: float) -> Tensor:
    """Summed symmetric matching loss over (a,t), (b,t) and (a,b)."""
    n = emb_img_a.shape[0]
    if n == 0:
        raise ContractViolation("clip_loss needs at least one sample")
    if not (emb_img_a.shape == emb_img_b.shape == emb_txt.shape):
        raise ContractViolation(
            f"embedding shapes differ: {emb_img_a.shape}, {emb_img_b.shape}, {emb_txt.shape}"
        )
    return (
        _matching_term(emb_img_a, emb_txt, temperature)
        + _matching_term(emb_img_b, emb_txt, temperature)
        + _matching_term(emb_img_a, emb_img_b, temperature)
    )


def supervised_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Per-label binary cross-entropy, summed over the five heads."""
    return dc.binary_cross_entropy_with_logits(logits, labels)


# ----------------------------------------------------------------------
# optimizer
# ----------------------------------------------------------------------
@dataclass
class OptimizerState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[Tensor]) -> "OptimizerState":
        return cls(
            step=0,
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


def optimizer_step(
    params: list[Tensor], grads: list[np.ndarray], state: OptimizerState, config: TrainConfig
) -> tuple[list[Tensor], OptimizerState]:
    """One update; adaptive moments with bias correction, or plain SGD.

    Mutating `params[i].data` in place is the one sanctioned mutation of a
    live tensor; callers must not hold graphs across the update.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractViolation("params/grads/state lengths disagree")
    for p, g in zip(params, grads):
        if p.data.shape != np.shape(g):
            raise ContractViolation(f"grad shape {np.shape(g)} != param shape {p.data.shape}")
    lr = np.array(config.learning_rate, dtype=params[0].dtype if params else np.float32)
    if config.optimizer == "sgd":
        for p, g in zip(params, grads):
            p.data = p.data - lr * g
        return params, state
    state.step += 1
    t = state.step
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.data = p.data - (lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)).astype(p.dtype)
    return params, state


# ----------------------------------------------------------------------
# augmentations and batching
# ----------------------------------------------------------------------
def augment_images(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random crop-with-pad, horizontal flip, additive Gaussian noise."""
    n, h, w = images.shape
    out = np.empty_like(images)
    for i in range(n):
        padded = np.pad(images[i], CROP_PAD, mode="edge")
        dy, dx = rng.integers(0, 2 * CROP_PAD + 1, size=2)
        crop = padded[dy : dy + h, dx : dx + w]
        if rng.random() < FLIP_PROB:
            crop = crop[:, ::-1]
        out[i] = crop
    out = out + rng.normal(0.0, AUG_NOISE_STD, size=out.shape).astype(images.dtype)
    return np.clip(out, 0.0, 1.0).astype(images.dtype)


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *key])))


def _guard_split(split: Split, role: str) -> Split:
    if split.name == "test":
        raise ContractViolation(f"training loops must not read the test split (role: {role})")
    return split


def split_images(split: Split, variant: str) -> np.ndarray:
    """(N, H, W) float32 stack of the requested variant of a split."""
    if variant not in ("real", "shortcut"):
        raise ContractViolation(f"unknown data variant {variant!r}")
    images = []
    for s in split.samples:
        if variant == "shortcut" and s.corrupted_image is not None:
            images.append(s.corrupted_image)
        else:
            images.append(s.image)
    return np.stack(images).astype(np.float32)


def split_labels(split: Split) -> np.ndarray:
    return np.stack([s.labels for s in split.samples]).astype(np.float32)


def _batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _epoch_order(n: int, config: TrainConfig, epoch: int) -> np.ndarray:
    if config.shuffle:
        return _stream(config.seed, _TAG_SHUFFLE, epoch).permutation(n)
    return np.arange(n)


def _write_log(log_path, rows) -> None:
    if log_path is None:
        return
    path = Path(log_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for row in rows:
            writer.writerow([row[0], f"{row[1]:.8f}", f"{row[2]:.8f}", f"{row[3]:.8g}"])


def _snapshot(params_obj):
    arrays = [t.data.copy() for _, t in enc.param_items(params_obj)]
    return arrays


def _restore(params_obj, arrays) -> None:
    for (_, t), a in zip(enc.param_items(params_obj), arrays):
        t.data = a.copy()


class _NumericContext:
    """Re-raise numeric failures with epoch/batch context attached."""

    def __init__(self, epoch: int, batch: int):
        self.epoch, self.batch = epoch, batch

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None and issubclass(exc_type, NumericFailure):
            raise NumericFailure(
                f"epoch {self.epoch}, batch {self.batch}: {exc}"
            ) from exc
        return False


# ----------------------------------------------------------------------
# contrastive pretraining
# ----------------------------------------------------------------------
def train_clip(
    corpus: Corpus,
    config: TrainConfig,
    variant: str = "shortcut",
    splits: tuple[str, str] = ("train", "val"),
    log_path=None,
) -> TrainResult:
    """Contrastive dual-encoder pretraining with best-validation selection."""
    train_split = _guard_split(corpus.split(splits[0]), "train")
    val_split = _guard_split(corpus.split(splits[1]), "val")
    vocab = corpus.config.caption_vocab_size
    params = enc.init_dual_encoder(corpus.config.image_size, vocab, seed=config.seed)

    train_images = split_images(train_split, variant)
    val_images = split_images(val_split, variant)
    # the text trunk is frozen: cache its activations once per split
    text_w = params.text
    train_text = enc.text_trunk_features([s.caption for s in train_split.samples], text_w)
    val_text = enc.text_trunk_features([s.caption for s in val_split.samples], text_w)

    trainables = [t for _, t in enc.param_items(params.image)] + [params.text.proj]

    def batch_loss(idx: np.ndarray, images: np.ndarray, text_feats: np.ndarray, aug_rng=None):
        imgs = images[idx]
        if aug_rng is not None:
            a = augment_images(imgs, aug_rng)
            b = augment_images(imgs, aug_rng)
        else:
            a = b = imgs
        n, h, w = a.shape
        xa = dc.tensor(a.reshape(n, 1, h, w))
        xb = dc.tensor(b.reshape(n, 1, h, w))
        emb_a = enc.image_forward(xa, params.image)
        emb_b = enc.image_forward(xb, params.image)
        emb_t = dc.tensor(text_feats[idx]) @ params.text.proj
        return clip_loss(emb_a, emb_b, emb_t, config.temperature)

    def val_loss_fn():
        return _mean_loss(
            lambda idx: batch_loss(idx, val_images, val_text), len(val_split), config
        )

    return _run_loop(
        params_obj=params,
        trainables=trainables,
        n_train=len(train_split),
        make_train_loss=lambda idx, epoch, b: batch_loss(
            idx, train_images, train_text, aug_rng=_stream(config.seed, _TAG_AUGMENT, epoch, b)
        ),
        val_loss_fn=val_loss_fn,
        config=config,
        log_path=log_path,
    )


# ----------------------------------------------------------------------
# supervised training
# ----------------------------------------------------------------------
def train_cnn(
    corpus: Corpus,
    config: TrainConfig,
    variant: str = "shortcut",
    splits: tuple[str, str] = ("train", "val"),
    log_path=None,
) -> TrainResult:
    """Scratch 5-head classifier trained with summed per-label BCE."""
    train_split = _guard_split(corpus.split(splits[0]), "train")
    val_split = _guard_split(corpus.split(splits[1]), "val")
    params = enc.init_classifier(corpus.config.image_size, seed=config.seed)
    trainables = [t for _, t in enc.param_items(params)]
    train_images = split_images(train_split, variant)
    train_labels = split_labels(train_split)
    val_images = split_images(val_split, variant)
    val_labels = split_labels(val_split)

    def batch_loss(idx, images, labels, aug_rng=None):
        imgs = images[idx]
        if aug_rng is not None:
            imgs = augment_images(imgs, aug_rng)
        n, h, w = imgs.shape
        logits = enc.classifier_forward(dc.tensor(imgs.reshape(n, 1, h, w)), params)
        return supervised_loss(logits, labels[idx])

    return _run_loop(
        params_obj=params,
        trainables=trainables,
        n_train=len(train_split),
        make_train_loss=lambda idx, epoch, b: batch_loss(
            idx, train_images, train_labels, aug_rng=_stream(config.seed, _TAG_AUGMENT, epoch, b)
        ),
        val_loss_fn=lambda: _mean_loss(
            lambda idx: batch_loss(idx, val_images, val_labels), len(val_split), config
        ),
        config=config,
        log_path=log_path,
    )


# ----------------------------------------------------------------------
# fine-tuning
# ----------------------------------------------------------------------
def finetune(
    checkpoint,
    corpus: Corpus,
    config: TrainConfig,
    split: str = "finetune",
    log_path=None,
) -> TrainResult:
    """Continue supervised training on clean samples.

    Dual encoders are converted to classifiers first (fresh head from the
    config seed); classifiers continue as-is.  The split is carved 90/10
    into inner train/validation for best-epoch selection.
    """
    if isinstance(checkpoint, enc.DualEncoderParams):
        params = enc.to_classifier(checkpoint.image, head_init_seed=config.seed)
    elif isinstance(checkpoint, enc.ClassifierParams):
        params = enc.to_classifier(checkpoint.trunk, head_init_seed=config.seed)
        params.head_w = dc.tensor(checkpoint.head_w.data.copy(), requires_grad=True)
        params.head_b = dc.tensor(checkpoint.head_b.data.copy(), requires_grad=True)
    else:
        raise ContractViolation(
            f"finetune needs a classifier or dual encoder, got {type(checkpoint).__name__}"
        )
    data = _guard_split(corpus.split(split), "finetune")
    for s in data.samples:
        if s.watermark.corrupted:
            raise ContractViolation("fine-tuning corpus must be uncorrupted")
    n = len(data)
    n_val = max(1, n // 10) if n > 1 else 0
    inner_train = Split(name=data.name, samples=data.samples[: n - n_val])
    inner_val = Split(name=data.name, samples=data.samples[n - n_val :]) if n_val else inner_train

    if config.freeze_trunk:
        trainables = [params.head_w, params.head_b]
    else:
        trainables = [t for _, t in enc.param_items(params)]
    train_images = split_images(inner_train, "real")
    train_labels = split_labels(inner_train)
    val_images = split_images(inner_val, "real")
    val_labels = split_labels(inner_val)

    def batch_loss(idx, images, labels, aug_rng=None):
        imgs = images[idx]
        if aug_rng is not None:
            imgs = augment_images(imgs, aug_rng)
        m, h, w = imgs.shape
        logits = enc.classifier_forward(dc.tensor(imgs.reshape(m, 1, h, w)), params)
        return supervised_loss(logits, labels[idx])

    return _run_loop(
        params_obj=params,
        trainables=trainables,
        n_train=len(inner_train),
        make_train_loss=lambda idx, epoch, b: batch_loss(
            idx, train_images, train_labels, aug_rng=_stream(config.seed, _TAG_AUGMENT, epoch, b)
        ),
        val_loss_fn=lambda: _mean_loss(
            lambda idx: batch_loss(idx, val_images, val_labels), len(inner_val), config
        ),
        config=config,
        log_path=log_path,
    )


# ----------------------------------------------------------------------
# shared loop machinery
# ----------------------------------------------------------------------
def _mean_loss(loss_of_idx, n: int, config: TrainConfig) -> float:
    total = 0.0
    for idx in _batches(n, config.batch_size, np.arange(n)):
        total += loss_of_idx(idx).item() * len(idx)
    return total / n


def _run_loop(params_obj, trainables, n_train, make_train_loss, val_loss_fn, config, log_path):
    state = OptimizerState.for_params(trainables)
    best = _snapshot(params_obj)
    best_val = np.inf
    best_epoch = 0
    log_rows = []
    for epoch in range(1, config.epochs + 1):
        order = _epoch_order(n_train, config, epoch)
        epoch_loss = 0.0
        for b, idx in enumerate(_batches(n_train, config.batch_size, order)):
            with _NumericContext(epoch, b):
                for t in trainables:
                    t.zero_grad()
                loss = make_train_loss(idx, epoch, b)
                loss.backward()
            grads = [
                t.grad if t.grad is not None else np.zeros_like(t.data) for t in trainables
            ]
            optimizer_step(trainables, grads, state, config)
            epoch_loss += loss.item() * len(idx)
        with _NumericContext(epoch, -1):
            val = val_loss_fn()
        row = (epoch, epoch_loss / n_train, val, config.learning_rate)
        log_rows.append(row)
        if val < best_val:
            best_val = val
            best_epoch = epoch
            best = _snapshot(params_obj)
    _restore(params_obj, best)
    _write_log(log_path, log_rows)
    return TrainResult(params=params_obj, best_epoch=best_epoch, log=log_rows)

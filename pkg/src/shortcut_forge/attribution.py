"""Integrated gradients, SmoothGrad averaging, and map-consistency studies.

Attribution of a scalar model output F to the pixels of an image x against
a black baseline: the straight path from baseline to input is sampled at
`steps` right-endpoint positions, the gradients of F there are averaged,
and the result is scaled elementwise by (x - baseline).  For affine F this
is exact at any step count; for trained models the completeness gap
|sum(IG) - (F(x) - F(0))| shrinks as steps grow.

SmoothGrad repeats the procedure on `smoothgrad_n` Gaussian-noised copies
of the image and averages the maps; the noise stream is seeded from the
image content and target label, so studies are reproducible.  sigma = 0
short-circuits to the plain map.

The consistency study mirrors the two comparisons of interest: the same
image attributed under two models (cross-model), and the real vs shortcut
variant of one sample attributed under one model (cross-variant).
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import diffcore as dc
from . import encoders as enc
from .diffcore import Tensor
from .errors import ContractViolation, NumericFailure
from .synthcorpus import Sample, build_test_variants
from .zeroshot import LabelAnchor

_IG_BATCH = 128


@dataclass(frozen=True)
class IGConfig:
    steps: int = 64
    smoothgrad_n: int = 8
    sigma: float = 0.1  # noise std as a fraction of the intensity range
    # the baseline is the all-zero (black) image

    def __post_init__(self):
        if self.steps < 1:
            raise ContractViolation("steps must be >= 1")
        if self.smoothgrad_n < 1:
            raise ContractViolation("smoothgrad_n must be >= 1")
        if self.sigma < 0:
            raise ContractViolation("sigma must be >= 0")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "IGConfig":
        return cls(**d)


@dataclass
class AttributionMap:
    values: np.ndarray  # signed H x W grid aligned with the input
    target_label: int
    meta: dict


# ----------------------------------------------------------------------
# predict-fn factories: batched (N, H, W) -> (N,) graphs
# ----------------------------------------------------------------------
def classifier_logit_fn(params: enc.ClassifierParams, label: int) -> Callable[[Tensor], Tensor]:
    selector = np.zeros((enc.N_HEADS, 1), dtype=np.float32)
    selector[label, 0] = 1.0

    def fn(x: Tensor) -> Tensor:
        n, h, w = x.shape
        logits = enc.classifier_forward(x.reshape(n, 1, h, w), params)
        return (logits @ dc.tensor(selector)).reshape(n)

    return fn


def zeroshot_score_fn(
    image_params: enc.ImageEncoderParams, anchor: LabelAnchor
) -> Callable[[Tensor], Tensor]:
    column = anchor.embedding.reshape(-1, 1).astype(np.float32)

    def fn(x: Tensor) -> Tensor:
        n, h, w = x.shape
        emb = enc.image_forward(x.reshape(n, 1, h, w), image_params)
        return (dc.l2_normalize_rows(emb) @ dc.tensor(column)).reshape(n)

    return fn


# ----------------------------------------------------------------------
# integrated gradients
# ----------------------------------------------------------------------
def _mean_path_gradient(predict_fn, image: np.ndarray, steps: int) -> np.ndarray:
    h, w = image.shape
    acc = np.zeros((h, w), dtype=np.float64)
    alphas = np.arange(1, steps + 1, dtype=np.float64) / steps  # right Riemann sum
    for start in range(0, steps, _IG_BATCH):
        chunk = alphas[start : start + _IG_BATCH]
        batch = (chunk[:, None, None] * image[None, :, :]).astype(np.float32)
        x = dc.tensor(batch, requires_grad=True)
        out = predict_fn(x)
        if out.ndim != 1 or out.shape[0] != len(chunk):
            raise ContractViolation(
                f"predict_fn must map (N,H,W) to (N,), got {out.shape}"
            )
        out.sum().backward()
        if x.grad is not None:  # a constant predict_fn legitimately has none
            acc += x.grad.astype(np.float64).sum(axis=0)
    return acc / steps


def integrated_gradients(
    predict_fn,
    image: np.ndarray,
    config: IGConfig,
    target_label: int = 0,
    model_id: str = "",
) -> AttributionMap:
    """Path-integrated gradients from the black baseline to `image`."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 2:
        raise ContractViolation(f"image must be 2-D, got shape {image.shape}")
    mean_grad = _mean_path_gradient(predict_fn, image, config.steps)
    values = (image.astype(np.float64) * mean_grad).astype(np.float32)
    if not np.isfinite(values).all():
        raise NumericFailure("non-finite attribution values")
    return AttributionMap(
        values=values,
        target_label=target_label,
        meta={
            "steps": config.steps,
            "smoothgrad_n": 1,
            "sigma": 0.0,
            "model_id": model_id,
        },
    )


def _noise_stream(image: np.ndarray, target_label: int) -> np.random.Generator:
    digest = zlib.crc32(np.ascontiguousarray(image, dtype=np.float32).tobytes())
    seq = np.random.SeedSequence([int(digest), int(target_label), 77])
    return np.random.Generator(np.random.PCG64(seq))


def smoothgrad_ig(
    predict_fn,
    image: np.ndarray,
    config: IGConfig,
    target_label: int = 0,
    model_id: str = "",
) -> AttributionMap:
    """Mean of integrated-gradient maps over noise-perturbed copies.

    The Gaussian noise stream is keyed on (image bytes, target label);
    sigma = 0 returns the plain map bit for bit.
    """
    image = np.asarray(image, dtype=np.float32)
    if config.sigma == 0.0:
        out = integrated_gradients(predict_fn, image, config, target_label, model_id)
        out.meta["smoothgrad_n"] = config.smoothgrad_n
        return out
    rng = _noise_stream(image, target_label)
    acc = np.zeros_like(image, dtype=np.float64)
    for _ in range(config.smoothgrad_n):
        noisy = image + rng.normal(0.0, config.sigma, size=image.shape).astype(np.float32)
        acc += integrated_gradients(
            predict_fn, noisy.astype(np.float32), config, target_label, model_id
        ).values.astype(np.float64)
    values = (acc / config.smoothgrad_n).astype(np.float32)
    return AttributionMap(
        values=values,
        target_label=target_label,
        meta={
            "steps": config.steps,
            "smoothgrad_n": config.smoothgrad_n,
            "sigma": config.sigma,
            "model_id": model_id,
        },
    )


# ----------------------------------------------------------------------
# map comparison
# ----------------------------------------------------------------------
def map_cosine_similarity(a: AttributionMap, b: AttributionMap) -> float:
    """Cosine of the flattened value grids; undefined for an all-zero map."""
    va = a.values.astype(np.float64).ravel()
    vb = b.values.astype(np.float64).ravel()
    if va.shape != vb.shape:
        raise ContractViolation(f"map shapes differ: {a.values.shape} vs {b.values.shape}")
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise NumericFailure("cosine similarity undefined for an all-zero map")
    return float(va @ vb / (na * nb))


# ----------------------------------------------------------------------
# consistency study
# ----------------------------------------------------------------------
@dataclass
class AttributionModel:
    """A model joined with its per-label scalar scoring function."""

    model_id: str
    fn_for_label: Callable[[int], Callable[[Tensor], Tensor]]

    @classmethod
    def from_params(cls, model_id: str, params, anchors: Sequence[LabelAnchor] | None = None):
        if isinstance(params, enc.ClassifierParams):
            return cls(model_id, lambda k: classifier_logit_fn(params, k))
        if isinstance(params, enc.DualEncoderParams):
            if anchors is None:
                raise ContractViolation(f"{model_id}: zero-shot attribution needs anchors")
            return cls(model_id, lambda k: zeroshot_score_fn(params.image, anchors[k]))
        raise ContractViolation(f"{model_id}: cannot attribute {type(params).__name__}")


@dataclass
class StudyRow:
    pair_id: str
    sample_id: int
    label: int
    similarity: float


def consistency_study(
    model_pairs: Sequence[tuple[AttributionModel, AttributionModel]],
    test_samples: Sequence[Sample],
    config: IGConfig,
    labels: Iterable[int] = (0,),
) -> list[StudyRow]:
    """Cross-model and cross-variant map similarities over test samples.

    For every sample and target label: (i) the two models' maps on the real
    image are compared (pair id ``cross-model:<a>|<b>``); (ii) each model's
    maps on the real vs shortcut variant are compared (pair id
    ``cross-variant:<model>``), for samples where the shortcut variant
    actually differs (label-positive samples).
    """
    rows: list[StudyRow] = []
    for model_a, model_b in model_pairs:
        for label in labels:
            fn_a = model_a.fn_for_label(label)
            fn_b = model_b.fn_for_label(label)
            for sample in test_samples:
                variants = build_test_variants(sample, label)
                maps = {}
                for model, fn in ((model_a, fn_a), (model_b, fn_b)):
                    for variant in ("real", "shortcut"):
                        maps[model.model_id, variant] = smoothgrad_ig(
                            fn, variants[variant], config, label, model.model_id
                        )
                rows.append(
                    StudyRow(
                        pair_id=f"cross-model:{model_a.model_id}|{model_b.model_id}",
                        sample_id=sample.index,
                        label=label,
                        similarity=map_cosine_similarity(
                            maps[model_a.model_id, "real"], maps[model_b.model_id, "real"]
                        ),
                    )
                )
                if bool(sample.labels[label]):
                    for model in (model_a, model_b):
                        rows.append(
                            StudyRow(
                                pair_id=f"cross-variant:{model.model_id}",
                                sample_id=sample.index,
                                label=label,
                                similarity=map_cosine_similarity(
                                    maps[model.model_id, "real"],
                                    maps[model.model_id, "shortcut"],
                                ),
                            )
                        )
    return rows


def study_summary(rows: Sequence[StudyRow]) -> dict[str, dict[str, float]]:
    by_pair: dict[str, list[float]] = {}
    for row in rows:
        by_pair.setdefault(row.pair_id, []).append(row.similarity)
    return {
        pair: {
            "n": len(vals),
            "mean": float(np.mean(vals)),
            "median": float(np.median(vals)),
        }
        for pair, vals in sorted(by_pair.items())
    }


def write_study_csv(rows: Sequence[StudyRow], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pair_id", "sample_id", "label", "similarity"])
        for row in rows:
            writer.writerow([row.pair_id, row.sample_id, row.label, f"{row.similarity:.8f}"])


# ----------------------------------------------------------------------
# map export: PGM heat image + raw float32
# ----------------------------------------------------------------------
def save_map(amap: AttributionMap, path_prefix: str | Path) -> None:
    """Write <prefix>.pgm (symmetric around 128) and <prefix>.bin (float32 LE)."""
    prefix = Path(path_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    values = amap.values
    peak = float(np.abs(values).max())
    scale = 127.0 / peak if peak > 0 else 0.0
    pixels = np.round(128.0 + values.astype(np.float64) * scale)
    pixels = np.clip(pixels, 0, 255).astype(np.uint8)
    h, w = pixels.shape
    with open(prefix.with_suffix(".pgm"), "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
    prefix.with_suffix(".bin").write_bytes(
        np.ascontiguousarray(values, dtype="<f4").tobytes()
    )


def load_map_raw(path_prefix: str | Path, shape: tuple[int, int]) -> np.ndarray:
    raw = Path(path_prefix).with_suffix(".bin").read_bytes()
    return np.frombuffer(raw, dtype="<f4").reshape(shape)

"""Zero-shot scoring: label anchors from caption embeddings, cosine ranking.

A label's anchor is built from the first `n` corpus samples (deterministic
corpus order) that are positive for exactly that label and negative for the
other four.  Their caption embeddings are averaged and re-normalized to
unit length.  An image is scored against the five anchors by cosine
similarity; the scores are rank statistics, not probabilities.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import encoders as enc
from .errors import AnchorScarcityError, ContractViolation
from .synthcorpus import Corpus, N_LABELS, Sample

DEFAULT_ANCHOR_CAPTIONS = 50


@dataclass
class LabelAnchor:
    label_index: int
    embedding: np.ndarray  # unit-norm 128-vector
    n_source_captions: int


def _exclusively_positive(sample: Sample, label: int) -> bool:
    return bool(sample.labels[label]) and int(sample.labels.sum()) == 1


def build_label_anchor(
    label: int,
    corpus: Corpus,
    text_params: enc.TextEncoderParams,
    n: int = DEFAULT_ANCHOR_CAPTIONS,
    split: str = "train",
) -> LabelAnchor:
    """Anchor = re-normalized mean of the first n exclusive-positive captions."""
    if not 0 <= label < N_LABELS:
        raise ContractViolation(f"label {label} out of range")
    captions = []
    for sample in corpus.split(split).samples:
        if _exclusively_positive(sample, label):
            captions.append(sample.caption)
            if len(captions) == n:
                break
    if len(captions) < n:
        raise AnchorScarcityError(label, found=len(captions), needed=n)
    embeddings = enc.text_forward(captions, text_params).data
    mean = embeddings.mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm == 0.0:
        raise ContractViolation(f"label {label}: anchor embedding collapsed to zero")
    return LabelAnchor(label_index=label, embedding=mean / norm, n_source_captions=n)


def build_all_anchors(
    corpus: Corpus,
    text_params: enc.TextEncoderParams,
    n: int = DEFAULT_ANCHOR_CAPTIONS,
    split: str = "train",
) -> list[LabelAnchor]:
    return [build_label_anchor(k, corpus, text_params, n=n, split=split) for k in range(N_LABELS)]


def zero_shot_scores(
    image: np.ndarray, anchors: list[LabelAnchor], image_params: enc.ImageEncoderParams
) -> np.ndarray:
    """Cosine of the image embedding with each of the five label anchors."""
    return zero_shot_scores_batch(image[None, :, :], anchors, image_params)[0]


def zero_shot_scores_batch(
    images: np.ndarray, anchors: list[LabelAnchor], image_params: enc.ImageEncoderParams
) -> np.ndarray:
    """(N, H, W) images -> (N, 5) cosine scores."""
    if len(anchors) != N_LABELS:
        raise ContractViolation(f"need {N_LABELS} anchors, got {len(anchors)}")
    order = [a.label_index for a in anchors]
    if sorted(order) != list(range(N_LABELS)):
        raise ContractViolation(f"anchor labels {order} are not a permutation of 0..4")
    from . import diffcore as dc

    n, h, w = images.shape
    x = dc.tensor(
        images.reshape(n, 1, h, w), dtype=image_params.proj.dtype
    )
    emb = enc.image_forward(x, image_params, normalize=True).data
    anchor_matrix = np.zeros((N_LABELS, emb.shape[1]), dtype=emb.dtype)
    for a in anchors:
        anchor_matrix[a.label_index] = a.embedding
    return emb @ anchor_matrix.T


# ----------------------------------------------------------------------
# persistence: JSON description + raw float32 sidecar
# ----------------------------------------------------------------------
def save_anchors(anchors: list[LabelAnchor], path_prefix: str | Path) -> None:
    prefix = Path(path_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    ordered = sorted(anchors, key=lambda a: a.label_index)
    meta = {
        "dim": int(ordered[0].embedding.shape[0]),
        "anchors": [
            {"label_index": a.label_index, "n_source_captions": a.n_source_captions}
            for a in ordered
        ],
    }
    with open(prefix.with_suffix(".json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    blob = np.stack([a.embedding for a in ordered]).astype("<f4")
    prefix.with_suffix(".bin").write_bytes(blob.tobytes())


def load_anchors(path_prefix: str | Path) -> list[LabelAnchor]:
    prefix = Path(path_prefix)
    meta = json.loads(prefix.with_suffix(".json").read_text())
    dim = int(meta["dim"])
    raw = np.frombuffer(prefix.with_suffix(".bin").read_bytes(), dtype="<f4")
    matrix = raw.reshape(len(meta["anchors"]), dim)
    return [
        LabelAnchor(
            label_index=int(a["label_index"]),
            embedding=matrix[i].astype(np.float32),
            n_source_captions=int(a["n_source_captions"]),
        )
        for i, a in enumerate(meta["anchors"])
    ]

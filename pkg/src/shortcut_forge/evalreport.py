"""AUC evaluation over the real/shortcut/adversarial test variants.

`auc` is the Mann-Whitney statistic with half credit for ties, computed by
sort-and-midrank in O(n log n); the quadratic pair-counting oracle lives in
the test suite only.  `evaluate_model` scores every test sample per label
on the requested variant -- classifier checkpoints by their label logit,
dual encoders by their zero-shot cosine score -- and assembles the
per-label and average AUCs.  `emit_report` renders the rows as a CSV and a
markdown table, one table per variant.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import encoders as enc
from . import zeroshot as zs
from .errors import ContractViolation, DegenerateClassError
from .synthcorpus import Corpus, LABEL_NAMES, N_LABELS, build_test_variants

VARIANTS = ("real", "shortcut", "adversarial")
_SCORE_BATCH = 64


@dataclass
class EvalResult:
    model_id: str
    variant: str
    per_label_auc: list[float]

    @property
    def average_auc(self) -> float:
        return float(np.mean(self.per_label_auc))


def auc(scores, labels) -> float:
    """P(random positive outranks random negative), ties worth half.

    Invariant under strictly increasing transforms of the scores.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ContractViolation(f"scores ({s.shape}) and labels ({y.shape}) differ in length")
    if not np.isin(y, (0, 1)).all():
        raise ContractViolation("labels must be binary (0/1)")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateClassError(
            f"need both classes present (got {n_pos} positives, {n_neg} negatives)"
        )
    order = np.argsort(s, kind="stable")
    ranks = np.empty(len(s), dtype=np.float64)
    sorted_scores = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    rank_sum_pos = float(ranks[y == 1].sum())
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


# ----------------------------------------------------------------------
# model evaluation
# ----------------------------------------------------------------------
def _classifier_scores(params: enc.ClassifierParams, images: np.ndarray, label: int) -> np.ndarray:
    out = []
    for start in range(0, len(images), _SCORE_BATCH):
        chunk = images[start : start + _SCORE_BATCH]
        n, h, w = chunk.shape
        x = dc.tensor(chunk.reshape(n, 1, h, w).astype(np.float32))
        out.append(enc.classifier_forward(x, params).data[:, label])
    return np.concatenate(out)


def _zeroshot_scores(params, anchors, images: np.ndarray, label: int) -> np.ndarray:
    out = []
    for start in range(0, len(images), _SCORE_BATCH):
        chunk = images[start : start + _SCORE_BATCH].astype(np.float32)
        out.append(zs.zero_shot_scores_batch(chunk, anchors, params.image)[:, label])
    return np.concatenate(out)


def evaluate_model(
    params,
    corpus: Corpus,
    variant: str,
    model_id: str,
    anchor_captions: int = zs.DEFAULT_ANCHOR_CAPTIONS,
) -> EvalResult:
    """Per-label AUC of one checkpoint on one test variant.

    Classifier parameters are scored by the label logit; dual encoders are
    scored zero-shot against anchors built from the training captions.
    """
    if variant not in VARIANTS:
        raise ContractViolation(f"unknown variant {variant!r}")
    test = corpus.split("test").samples
    if isinstance(params, enc.ClassifierParams):
        def score(images, label):
            return _classifier_scores(params, images, label)
    elif isinstance(params, enc.DualEncoderParams):
        anchors = zs.build_all_anchors(corpus, params.text, n=anchor_captions)
        def score(images, label):
            return _zeroshot_scores(params, anchors, images, label)
    elif callable(params):
        score = params  # scoring stub: (images, label) -> scores
    else:
        raise ContractViolation(
            f"cannot evaluate parameter object {type(params).__name__}"
        )
    per_label = []
    for k in range(N_LABELS):
        images = np.stack([build_test_variants(s, k)[variant] for s in test])
        labels = np.array([int(s.labels[k]) for s in test])
        per_label.append(auc(score(images, k), labels))
    return EvalResult(model_id=model_id, variant=variant, per_label_auc=per_label)


# ----------------------------------------------------------------------
# report emission
# ----------------------------------------------------------------------
CSV_HEADER = ["model_id", "variant", *LABEL_NAMES, "average"]


def emit_report(results: list[EvalResult], run_metadata: dict, out_dir: str | Path) -> dict:
    """Write results.csv and report.md; returns the paths written."""
    if not results:
        raise ContractViolation("emit_report needs at least one result")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        ordered = sorted(results, key=lambda r: (r.model_id, VARIANTS.index(r.variant)))
        csv_path = out / "results.csv"
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_HEADER)
            for r in ordered:
                writer.writerow(
                    [r.model_id, r.variant]
                    + [f"{a:.6f}" for a in r.per_label_auc]
                    + [f"{r.average_auc:.6f}"]
                )
        md_path = out / "report.md"
        with open(md_path, "w") as fh:
            fh.write("# Evaluation report\n\n")
            for key in sorted(run_metadata):
                fh.write(f"- {key}: {run_metadata[key]}\n")
            for variant in VARIANTS:
                rows = [r for r in ordered if r.variant == variant]
                if not rows:
                    continue
                fh.write(f"\n## {variant.capitalize()} test AUCs\n\n")
                label_heads = " | ".join(n.replace("_", " ").title() for n in LABEL_NAMES)
                fh.write(f"| Model | Average | {label_heads} |\n")
                fh.write("|" + " --- |" * (2 + N_LABELS) + "\n")
                for r in rows:
                    cells = " | ".join(f"{a:.3f}" for a in r.per_label_auc)
                    fh.write(f"| {r.model_id} | {r.average_auc:.3f} | {cells} |\n")
    except OSError as exc:
        raise OSError(f"cannot write report under {out}: {exc}") from exc
    return {"csv": csv_path, "markdown": md_path}


def read_results_csv(path: str | Path) -> list[EvalResult]:
    results = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            results.append(
                EvalResult(
                    model_id=row["model_id"],
                    variant=row["variant"],
                    per_label_auc=[float(row[name]) for name in LABEL_NAMES],
                )
            )
    return results

"""Synthetic image-caption-label corpus with watermark shortcuts.

Each sample is a grayscale image whose pixel content is driven by a 5-bit
label vector: every positive label deposits a label-specific spatial
signature (blob, ring, band, wedge, speckle) inside its own zone of the
image, on top of a noisy background.  Training images are additionally
watermarked with small fixed glyphs whose presence is strongly but
imperfectly correlated with the labels: with probability `p_corrupt` an
image is stamped, and a stamped image carries the glyphs of its positive
labels with probability `p_correct`, otherwise the glyphs of its negative
labels.

Test images are stored clean; the Shortcut/Adversarial variants are
constructed at evaluation time by stamping one target glyph onto the
label-positive (respectively label-negative) samples.

Layout guarantees: glyph slots hug the image border, signature zones live
in the interior, and the two never overlap, so watermarks never overwrite
causal pixels.

Determinism: sample `i` of a corpus depends only on `(seed, i)`.  Every
random decision draws from a stream keyed by `(seed, sample index, purpose
tag)`, so generation order and worker count are irrelevant.

On disk a corpus is a directory of PGM (P5, maxval 255) images plus one
JSON-lines metadata file per split and the generating config as JSON.
Pixel values are quantized to the 8-bit grid at render time, which makes
the PGM round trip exact.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ContractViolation

N_LABELS = 5
LABEL_NAMES = ("atelectasis", "cardiomegaly", "consolidation", "edema", "pleural_effusion")
GLYPH_SIZE = 9

# caption vocabulary: fixed low ids, fillers fill the rest of the vocab
TOKEN_UNK = 0
TOKEN_NONE = 1  # marker for a caption with nothing to report
_POS_PHRASE_BASE = 2  # 3 tokens per label: [2+3k, 4+3k]
_NEG_PHRASE_BASE = 2 + 3 * N_LABELS  # 2 tokens per label: 17..26
FILLER_BASE = _NEG_PHRASE_BASE + 2 * N_LABELS  # 27
MIN_VOCAB = FILLER_BASE + 1

# rng purpose tags (mixed into the per-sample seed sequence)
_PURPOSE_LABELS = 0
_PURPOSE_IMAGE = 1
_PURPOSE_CORRUPT = 2
_PURPOSE_CAPTION = 3

SIGNATURE_AMPLITUDE = 0.42
# the blob (label 0) gets a boost so that plain zone-mean statistics stay
# clearly predictive for it despite the confuser clutter
SIGNATURE_LABEL_GAIN = (1.4, 1.0, 1.0, 1.0, 1.0)
# per-sample presentation variability: amplitude jitter range and the
# probability that a positive finding presents too subtly to render at
# all; keeps real features learnable but never certain, unlike the glyphs
SIGNATURE_JITTER = (0.5, 1.3)
SIGNATURE_DROPOUT = 0.12
DISTRACTOR_AMPLITUDE = 0.10
# probability that a negative label paints its signature shape somewhere
# outside its own zone: real findings are a shape-AND-place conjunction,
# which keeps them learnable but genuinely harder than the fixed glyphs
CONFUSER_PROB = 0.6
# label-independent high-contrast binary patches along the border band
# (think laterality markers and scanner tags): they teach glyph-free
# models to shrug off box-shaped border marks, so only the five exact
# glyph patterns carry label signal
BORDER_CLUTTER_MAX = 3


def positive_phrase(label: int) -> list[int]:
    return [_POS_PHRASE_BASE + 3 * label + j for j in range(3)]


def denial_phrase(label: int) -> list[int]:
    return [_NEG_PHRASE_BASE + 2 * label + j for j in range(2)]


# ----------------------------------------------------------------------
# configuration and record types
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class CorpusConfig:
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 500
    image_size: int = 64
    p_corrupt: float = 0.9
    p_correct: float = 0.9
    label_prevalence: float = 0.3
    seed: int = 0
    caption_vocab_size: int = 64
    noise_level: float = 0.05

    def __post_init__(self):
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be >= 1")
        for name in ("p_corrupt", "p_correct", "label_prevalence"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractViolation(f"{name}={v} outside [0, 1]")
        if self.image_size < 32:
            raise ContractViolation("image_size must be >= 32")
        if self.caption_vocab_size < MIN_VOCAB:
            raise ContractViolation(f"caption_vocab_size must be >= {MIN_VOCAB}")
        if self.noise_level < 0:
            raise ContractViolation("noise_level must be >= 0")

    @property
    def n_finetune(self) -> int:
        """Uncorrupted fine-tuning subset: 1% of the training count."""
        return math.ceil(0.01 * self.n_train)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "CorpusConfig":
        return cls(**d)


@dataclass(frozen=True)
class WatermarkRecord:
    corrupted: bool = False
    correct: bool = False
    stamped_glyphs: frozenset = frozenset()

    def to_json(self) -> dict:
        return {
            "corrupted": self.corrupted,
            "correct": self.correct,
            "stamped_glyphs": sorted(self.stamped_glyphs),
        }

    @classmethod
    def from_json(cls, d: dict) -> "WatermarkRecord":
        return cls(bool(d["corrupted"]), bool(d["correct"]), frozenset(d["stamped_glyphs"]))


@dataclass
class Sample:
    index: int
    image: np.ndarray  # clean rendering, H x W float32 in [0, 1]
    labels: np.ndarray  # (5,) of 0/1
    caption: list[int]
    watermark: WatermarkRecord = field(default_factory=WatermarkRecord)
    corrupted_image: np.ndarray | None = None  # set for train/val samples


@dataclass
class Split:
    name: str  # train | val | test | finetune
    samples: list[Sample]

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class Corpus:
    config: CorpusConfig
    splits: dict[str, Split]

    def split(self, name: str) -> Split:
        return self.splits[name]


def validate_labels(labels) -> np.ndarray:
    arr = np.asarray(labels).astype(np.int64).ravel()
    if arr.shape != (N_LABELS,) or not np.isin(arr, (0, 1)).all():
        raise ContractViolation(f"labels must be 5 binary entries, got {labels!r}")
    return arr


# ----------------------------------------------------------------------
# glyphs
# ----------------------------------------------------------------------
_GLYPH_ART = (
    # X
    """
    100000001
    010000010
    001000100
    000101000
    000010000
    000101000
    001000100
    010000010
    100000001
    """,
    # O
    """
    111111111
    100000001
    100000001
    100000001
    100000001
    100000001
    100000001
    100000001
    111111111
    """,
    # +
    """
    000010000
    000010000
    000010000
    000010000
    111111111
    000010000
    000010000
    000010000
    000010000
    """,
    # solid block
    """
    000000000
    000000000
    001111100
    001111100
    001111100
    001111100
    001111100
    000000000
    000000000
    """,
    # checkerboard
    """
    101010101
    010101010
    101010101
    010101010
    101010101
    010101010
    101010101
    010101010
    101010101
    """,
)


def _build_bitmaps() -> tuple:
    out = []
    for art in _GLYPH_ART:
        rows = [line.strip() for line in art.strip().splitlines()]
        bm = np.array([[ch == "1" for ch in row] for row in rows], dtype=bool)
        assert bm.shape == (GLYPH_SIZE, GLYPH_SIZE)
        out.append(bm)
    return tuple(out)


GLYPH_BITMAPS = _build_bitmaps()


@dataclass(frozen=True)
class Glyph:
    label_index: int
    bitmap: np.ndarray
    intensity: float
    slot: tuple[int, int]  # top-left (row, col)


def glyph_slots(image_size: int) -> list[tuple[int, int]]:
    """Fixed border positions, one per label, pairwise disjoint."""
    s, g = image_size, GLYPH_SIZE
    return [
        (1, 1),                      # top-left
        (1, s - g - 1),              # top-right
        (s - g - 1, 1),              # bottom-left
        (s - g - 1, s - g - 1),      # bottom-right
        (1, (s - g) // 2),           # top-center
    ]


def glyph_set(image_size: int, intensity: float = 1.0) -> list[Glyph]:
    slots = glyph_slots(image_size)
    return [
        Glyph(label_index=k, bitmap=GLYPH_BITMAPS[k], intensity=intensity, slot=slots[k])
        for k in range(N_LABELS)
    ]


def apply_watermarks(image: np.ndarray, glyphs: set, image_size: int | None = None) -> np.ndarray:
    """Stamp the named labels' glyphs onto a copy of the image.

    A stamp replaces its whole 9x9 slot (opaque): bitmap-on cells take the
    glyph intensity, bitmap-off cells go black, like a printed watermark
    tag.  Idempotent for a fixed glyph set; pixels outside the slots are
    untouched.
    """
    bad = set(glyphs) - set(range(N_LABELS))
    if bad:
        raise ContractViolation(f"glyph indices out of range: {sorted(bad)}")
    size = image.shape[0] if image_size is None else image_size
    out = image.copy()
    for g in glyph_set(size):
        if g.label_index in glyphs:
            r, c = g.slot
            out[r : r + GLYPH_SIZE, c : c + GLYPH_SIZE] = np.where(
                g.bitmap, _quantize_value(g.intensity), np.float32(0.0)
            )
    return out


# ----------------------------------------------------------------------
# base image rendering
# ----------------------------------------------------------------------
def signature_zone(label: int, image_size: int) -> tuple[int, int, int, int]:
    """(r0, r1, c0, c1) of the interior strip owned by this label's signature."""
    lo = GLYPH_SIZE + 2  # first row/col below the top glyph slots
    hi = image_size - GLYPH_SIZE - 2
    strip = (hi - lo) // N_LABELS
    r0 = lo + label * strip
    return (r0, r0 + strip, lo, hi)


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.float32) / np.float32(255.0)


def _quantize_value(v: float) -> np.float32:
    return np.float32(round(min(max(v, 0.0), 1.0) * 255.0) / 255.0)


def _draw_blob(canvas, zone, rng, amp):
    r0, r1, c0, c1 = zone
    h, w = r1 - r0, c1 - c0
    cy = rng.uniform(r0 + 0.3 * h, r1 - 0.3 * h)
    cx = rng.uniform(c0 + 0.2 * w, c1 - 0.2 * w)
    sigma = rng.uniform(0.30, 0.45) * h
    yy, xx = np.mgrid[0 : canvas.shape[0], 0 : canvas.shape[1]]
    bump = np.exp(-(((yy - cy) ** 2) + ((xx - cx) ** 2)) / (2 * sigma**2))
    canvas[r0:r1, c0:c1] += amp * bump[r0:r1, c0:c1]


def _draw_ring(canvas, zone, rng, amp):
    r0, r1, c0, c1 = zone
    h, w = r1 - r0, c1 - c0
    cy = rng.uniform(r0 + 0.35 * h, r1 - 0.35 * h)
    cx = rng.uniform(c0 + 0.25 * w, c1 - 0.25 * w)
    radius = rng.uniform(0.30, 0.46) * h
    thickness = max(1.0, 0.16 * h)
    yy, xx = np.mgrid[0 : canvas.shape[0], 0 : canvas.shape[1]]
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    ring = np.exp(-(((dist - radius) / thickness) ** 2))
    canvas[r0:r1, c0:c1] += amp * ring[r0:r1, c0:c1]


def _draw_band(canvas, zone, rng, amp):
    r0, r1, c0, c1 = zone
    h = r1 - r0
    bh = max(2, int(round(rng.uniform(0.30, 0.45) * h)))
    top = r0 + int(rng.integers(0, max(1, h - bh)))
    profile = np.sin(np.linspace(0, np.pi, bh))[:, None]
    canvas[top : top + bh, c0:c1] += amp * profile


def _draw_wedge(canvas, zone, rng, amp):
    r0, r1, c0, c1 = zone
    w = c1 - c0
    ww = max(4, int(round(rng.uniform(0.5, 0.9) * w)))
    left = c0 + int(rng.integers(0, max(1, w - ww)))
    ramp = np.linspace(0.0, 1.0, ww)
    if rng.random() < 0.5:
        ramp = ramp[::-1]
    canvas[r0:r1, left : left + ww] += amp * ramp[None, :]


def _draw_speckle(canvas, zone, rng, amp):
    r0, r1, c0, c1 = zone
    h, w = r1 - r0, c1 - c0
    ph = max(2, int(round(rng.uniform(0.6, 1.0) * h)))
    pw = max(4, int(round(rng.uniform(0.4, 0.7) * w)))
    top = r0 + int(rng.integers(0, max(1, h - ph + 1)))
    left = c0 + int(rng.integers(0, max(1, w - pw + 1)))
    mask = rng.random(size=(ph, pw)) < 0.5
    canvas[top : top + ph, left : left + pw] += amp * mask


_SIGNATURE_PAINTERS = (_draw_blob, _draw_ring, _draw_band, _draw_wedge, _draw_speckle)


def _confuser_zone(label: int, image_size: int, rng) -> tuple[int, int, int, int]:
    """A zone-sized box in the interior, clear of the label's own strip."""
    r0, r1, c0, c1 = signature_zone(label, image_size)
    h = r1 - r0
    lo = GLYPH_SIZE + 2
    hi = image_size - GLYPH_SIZE - 2
    for _ in range(8):
        top = int(rng.integers(lo, hi - h + 1))
        if abs(top - r0) >= h:
            return (top, top + h, c0, c1)
    top = lo if abs(lo - r0) >= h else hi - h
    return (top, top + h, c0, c1)


def render_base_image(labels, rng: np.random.Generator, config: CorpusConfig) -> np.ndarray:
    """Render the clean (never watermarked) image for a label vector.

    Draw order is fixed: background gradient, noise, two distractor bumps,
    then per label (ascending) either its zone signature (positive) or,
    with probability CONFUSER_PROB, an out-of-zone confuser copy of the
    same shape (negative), so identical stream state yields a bit-identical
    image.  A finding is therefore a shape-in-place conjunction: the shape
    alone does not separate the classes, its position does.
    """
    labels = validate_labels(labels)
    s = config.image_size
    yy = np.linspace(0.0, 1.0, s)[:, None]
    img = 0.20 + 0.08 * yy + np.zeros((s, s))
    img += rng.normal(0.0, 1.0, size=(s, s)) * config.noise_level
    # clutter scales with the noise level so that a zero-noise config
    # renders the bare template
    clutter_scale = min(1.0, config.noise_level / 0.05)
    for _ in range(2):
        cy, cx = rng.uniform(0.1 * s, 0.9 * s, size=2)
        sigma = rng.uniform(0.05, 0.10) * s
        yy2, xx2 = np.mgrid[0:s, 0:s]
        img += DISTRACTOR_AMPLITUDE * clutter_scale * np.exp(
            -(((yy2 - cy) ** 2) + ((xx2 - cx) ** 2)) / (2 * sigma**2)
        )
    n_tags = int(rng.integers(0, BORDER_CLUTTER_MAX + 1))
    for _ in range(n_tags):
        th, tw = rng.integers(5, GLYPH_SIZE + 1, size=2)
        if rng.random() < 0.5:  # top/bottom border band
            top = int(rng.integers(0, 2)) * (s - GLYPH_SIZE - 2) + 1
            left = int(rng.integers(1, s - tw - 1))
        else:  # left/right border band
            top = int(rng.integers(1, s - th - 1))
            left = int(rng.integers(0, 2)) * (s - GLYPH_SIZE - 2) + 1
        tag = rng.integers(0, 2, size=(th, tw)).astype(np.float64)
        # clutter scales like the other nuisance structure
        img[top : top + th, left : left + tw] = (
            img[top : top + th, left : left + tw] * (1.0 - clutter_scale) + tag * clutter_scale
        )
    for k in range(N_LABELS):
        amp = SIGNATURE_AMPLITUDE * SIGNATURE_LABEL_GAIN[k] * rng.uniform(*SIGNATURE_JITTER)
        if labels[k]:
            if rng.random() >= SIGNATURE_DROPOUT:
                _SIGNATURE_PAINTERS[k](img, signature_zone(k, s), rng, amp)
        elif rng.random() < CONFUSER_PROB:
            _SIGNATURE_PAINTERS[k](img, _confuser_zone(k, s, rng), rng, amp * clutter_scale)
    return _quantize(img.astype(np.float32))


# ----------------------------------------------------------------------
# captions
# ----------------------------------------------------------------------
def make_caption(
    labels,
    rng: np.random.Generator,
    denial_prob: float = 0.5,
    max_fillers: int = 4,
    vocab_size: int = 64,
) -> list[int]:
    """Token-id caption: a phrase per positive finding, coin-flip denials
    for negative findings, a few filler tokens, order shuffled."""
    labels = validate_labels(labels)
    if vocab_size < MIN_VOCAB:
        raise ContractViolation(f"vocab_size must be >= {MIN_VOCAB}")
    parts: list[list[int]] = []
    for k in range(N_LABELS):
        if labels[k]:
            parts.append(positive_phrase(k))
        elif rng.random() < denial_prob:
            parts.append(denial_phrase(k))
    n_fillers = int(rng.integers(0, max_fillers + 1)) if max_fillers > 0 else 0
    for _ in range(n_fillers):
        parts.append([int(rng.integers(FILLER_BASE, vocab_size))])
    order = rng.permutation(len(parts)) if parts else []
    tokens = [tok for i in order for tok in parts[int(i)]]
    return tokens if tokens else [TOKEN_NONE]


# ----------------------------------------------------------------------
# corruption protocol and test variants
# ----------------------------------------------------------------------
def corrupt_train_sample(sample: Sample, rng: np.random.Generator, config: CorpusConfig) -> Sample:
    """Stamp shortcut glyphs onto a fresh copy of a clean sample.

    With probability `p_corrupt` the image is corrupted; a corrupted image
    gets its positive labels' glyphs with probability `p_correct` and its
    negative labels' glyphs otherwise.
    """
    if sample.watermark.corrupted or sample.corrupted_image is not None:
        raise ContractViolation("sample already watermarked")
    corrupted = bool(rng.random() < config.p_corrupt)
    correct = bool(rng.random() < config.p_correct) if corrupted else False
    if corrupted:
        positives = {k for k in range(N_LABELS) if sample.labels[k]}
        stamped = positives if correct else set(range(N_LABELS)) - positives
    else:
        stamped = set()
    record = WatermarkRecord(corrupted, correct, frozenset(stamped))
    image = apply_watermarks(sample.image, stamped) if stamped else sample.image.copy()
    return Sample(
        index=sample.index,
        image=sample.image,
        labels=sample.labels,
        caption=sample.caption,
        watermark=record,
        corrupted_image=image,
    )


def build_test_variants(sample: Sample, target_label: int) -> dict[str, np.ndarray]:
    """Real / Shortcut / Adversarial images of one test sample for one label."""
    if not 0 <= target_label < N_LABELS:
        raise ContractViolation(f"target_label {target_label} out of range")
    if sample.watermark.corrupted:
        raise ContractViolation("test variants need an unwatermarked sample")
    positive = bool(sample.labels[target_label])
    real = sample.image.copy()
    shortcut = apply_watermarks(sample.image, {target_label}) if positive else sample.image.copy()
    adversarial = sample.image.copy() if positive else apply_watermarks(sample.image, {target_label})
    return {"real": real, "shortcut": shortcut, "adversarial": adversarial}


# ----------------------------------------------------------------------
# per-sample streams and full corpus generation
# ----------------------------------------------------------------------
def sample_stream(seed: int, index: int, purpose: int) -> np.random.Generator:
    """Independent stream for one (sample, purpose); order-insensitive."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index, purpose])))


def _generate_clean_sample(config: CorpusConfig, index: int) -> Sample:
    label_rng = sample_stream(config.seed, index, _PURPOSE_LABELS)
    labels = (label_rng.random(N_LABELS) < config.label_prevalence).astype(np.int64)
    image = render_base_image(labels, sample_stream(config.seed, index, _PURPOSE_IMAGE), config)
    caption = make_caption(
        labels,
        sample_stream(config.seed, index, _PURPOSE_CAPTION),
        vocab_size=config.caption_vocab_size,
    )
    return Sample(index=index, image=image, labels=labels, caption=caption)


def _generate_sample(config: CorpusConfig, index: int, corrupt: bool) -> Sample:
    sample = _generate_clean_sample(config, index)
    if corrupt:
        sample = corrupt_train_sample(
            sample, sample_stream(config.seed, index, _PURPOSE_CORRUPT), config
        )
    return sample


def worker_count() -> int:
    env = os.environ.get("SF_THREADS", "")
    try:
        return max(1, int(env))
    except ValueError:
        return 1


def generate_corpus(config: CorpusConfig, out_dir: str | Path | None = None) -> Corpus:
    """Generate all splits; when `out_dir` is given, persist them as well.

    Split layout over the global sample index: train, then val, then test,
    then the uncorrupted fine-tuning subset (1% of n_train).
    """
    plan = [
        ("train", config.n_train, True),
        ("val", config.n_val, True),
        ("test", config.n_test, False),
        ("finetune", config.n_finetune, False),
    ]
    splits: dict[str, Split] = {}
    base = 0
    workers = worker_count()
    for name, count, corrupt in plan:
        indices = range(base, base + count)
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                samples = list(pool.map(lambda i: _generate_sample(config, i, corrupt), indices))
        else:
            samples = [_generate_sample(config, i, corrupt) for i in indices]
        splits[name] = Split(name=name, samples=samples)
        base += count
    corpus = Corpus(config=config, splits=splits)
    if out_dir is not None:
        save_corpus(corpus, out_dir)
    return corpus


def corpus_summary(corpus: Corpus) -> dict:
    """Headline statistics: corruption rate, correctness rate, prevalence."""
    train = corpus.split("train").samples
    n = len(train)
    corrupted = sum(1 for s in train if s.watermark.corrupted)
    correct = sum(1 for s in train if s.watermark.corrupted and s.watermark.correct)
    prevalence = [float(np.mean([s.labels[k] for s in train])) for k in range(N_LABELS)]
    return {
        "n_train": n,
        "corrupted_fraction": corrupted / n,
        "correct_given_corrupted": (correct / corrupted) if corrupted else float("nan"),
        "label_prevalence": prevalence,
    }


# ----------------------------------------------------------------------
# persistence: PGM images + JSONL metadata
# ----------------------------------------------------------------------
def write_pgm(path: str | Path, image: np.ndarray) -> None:
    arr = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise ContractViolation(f"{path}: not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ContractViolation(f"{path}: expected maxval 255, got {maxval}")
    pos += 1  # single whitespace after maxval
    arr = np.frombuffer(data[pos : pos + w * h], dtype=np.uint8).reshape(h, w)
    return arr.astype(np.float32) / np.float32(255.0)


def _sample_meta(sample: Sample) -> dict:
    return {
        "index": sample.index,
        "labels": sample.labels.tolist(),
        "caption": list(sample.caption),
        "watermark": sample.watermark.to_json(),
    }


def save_corpus(corpus: Corpus, out_dir: str | Path) -> None:
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
        (root / "config.json").write_text(
            json.dumps(corpus.config.to_json(), indent=2, sort_keys=True) + "\n"
        )
        for name, split in corpus.splits.items():
            sdir = root / name
            (sdir / "real").mkdir(parents=True, exist_ok=True)
            has_corrupted = any(s.corrupted_image is not None for s in split.samples)
            if has_corrupted:
                (sdir / "shortcut").mkdir(exist_ok=True)
            with open(sdir / "meta.jsonl", "w") as meta:
                for i, s in enumerate(split.samples):
                    stem = f"{i:06d}.pgm"
                    write_pgm(sdir / "real" / stem, s.image)
                    if s.corrupted_image is not None:
                        write_pgm(sdir / "shortcut" / stem, s.corrupted_image)
                    meta.write(json.dumps(_sample_meta(s), sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write corpus under {root}: {exc}") from exc


def load_corpus(corpus_dir: str | Path) -> Corpus:
    root = Path(corpus_dir)
    config = CorpusConfig.from_json(json.loads((root / "config.json").read_text()))
    splits: dict[str, Split] = {}
    for name in ("train", "val", "test", "finetune"):
        sdir = root / name
        if not sdir.is_dir():
            continue
        samples = []
        with open(sdir / "meta.jsonl") as meta:
            for i, line in enumerate(meta):
                d = json.loads(line)
                stem = f"{i:06d}.pgm"
                image = read_pgm(sdir / "real" / stem)
                corrupted_image = None
                if (sdir / "shortcut" / stem).exists():
                    corrupted_image = read_pgm(sdir / "shortcut" / stem)
                samples.append(
                    Sample(
                        index=int(d["index"]),
                        image=image,
                        labels=np.asarray(d["labels"], dtype=np.int64),
                        caption=[int(t) for t in d["caption"]],
                        watermark=WatermarkRecord.from_json(d["watermark"]),
                        corrupted_image=corrupted_image,
                    )
                )
        splits[name] = Split(name=name, samples=samples)
    return Corpus(config=config, splits=splits)

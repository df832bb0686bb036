"""Command-line surface: gen | train | finetune | eval | attribute.

Every command is a pure function of (config file, disk inputs): re-running
with unchanged inputs rewrites byte-identical outputs.  All artifacts land
under the experiment directory, and each command refreshes a manifest of
file hashes there.

Exit codes: 0 success, 2 I/O, 3 missing prerequisite, 4 numeric failure,
5 contract violation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import attribution as att
from . import encoders as enc
from . import evalreport as ev
from . import synthcorpus as sc
from . import trainer as tr
from . import zeroshot as zs
from .config import RunConfig, load_run_config, save_run_config
from .errors import (
    ContractViolation,
    MissingPrerequisite,
    NumericFailure,
    ShortcutForgeError,
)

EXIT_OK = 0
EXIT_IO = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4
EXIT_CONTRACT = 5


# ----------------------------------------------------------------------
# manifest
# ----------------------------------------------------------------------
def _experiment_root(cfg: RunConfig) -> Path:
    # the common parent of the configured output directories
    dirs = [Path(cfg.paths.corpus_dir), Path(cfg.paths.checkpoints_dir), Path(cfg.paths.reports_dir)]
    parents = [d.parent for d in dirs]
    root = parents[0]
    if all(p == root for p in parents):
        return root
    return Path(".")


def refresh_manifest(cfg: RunConfig) -> Path:
    """Rescan the experiment tree and rewrite manifest.json (path -> sha256)."""
    root = _experiment_root(cfg)
    root.mkdir(parents=True, exist_ok=True)
    entries = {}
    for path in sorted(root.rglob("*")):
        if not path.is_file() or path.name == "manifest.json":
            continue
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        entries[str(path.relative_to(root))] = digest
    manifest = root / "manifest.json"
    manifest.write_text(json.dumps(entries, indent=2, sort_keys=True) + "\n")
    return manifest


def _load_corpus_or_fail(cfg: RunConfig) -> sc.Corpus:
    corpus_dir = Path(cfg.paths.corpus_dir)
    if not (corpus_dir / "config.json").exists():
        raise MissingPrerequisite(
            f"no corpus at {corpus_dir}; run `shortcut-forge gen` first"
        )
    return sc.load_corpus(corpus_dir)


def _load_checkpoint_or_fail(path: str | Path):
    p = Path(path)
    if not p.exists():
        raise MissingPrerequisite(f"checkpoint not found: {p}")
    return enc.load_checkpoint(p)


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------
def cmd_gen(cfg: RunConfig) -> int:
    corpus = sc.generate_corpus(cfg.corpus, cfg.paths.corpus_dir)
    save_run_config(cfg, Path(cfg.paths.corpus_dir) / "run_config.json")
    summary = sc.corpus_summary(corpus)
    print(f"corpus written to {cfg.paths.corpus_dir}")
    print(f"  train/val/test/finetune: {cfg.corpus.n_train}/{cfg.corpus.n_val}/"
          f"{cfg.corpus.n_test}/{cfg.corpus.n_finetune}")
    print(f"  corrupted fraction:        {summary['corrupted_fraction']:.3f}")
    print(f"  correct given corrupted:   {summary['correct_given_corrupted']:.3f}")
    prevalences = ", ".join(f"{p:.3f}" for p in summary["label_prevalence"])
    print(f"  label prevalence:          {prevalences}")
    refresh_manifest(cfg)
    return EXIT_OK


def cmd_train(cfg: RunConfig, mode: str, data: str) -> int:
    if mode not in ("clip", "cnn"):
        raise ContractViolation(f"unknown mode {mode!r} (want clip|cnn)")
    if data not in ("real", "shortcut"):
        raise ContractViolation(f"unknown data variant {data!r} (want real|shortcut)")
    corpus = _load_corpus_or_fail(cfg)
    ckpt_dir = Path(cfg.paths.checkpoints_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{mode}-{data}"
    log_path = ckpt_dir / f"{stem}-loss.csv"
    if log_path.exists():
        log_path.unlink()  # logs append; a rerun must reproduce bytes
    train_fn = tr.train_clip if mode == "clip" else tr.train_cnn
    result = train_fn(corpus, cfg.pretrain, variant=data, log_path=log_path)
    ckpt_path = ckpt_dir / f"{stem}.ckpt"
    enc.save_checkpoint(ckpt_path, result.params)
    print(f"checkpoint written to {ckpt_path} (best epoch {result.best_epoch})")
    if result.log:
        print(f"  final train loss {result.log[-1][1]:.4f}, "
              f"best val loss {min(r[2] for r in result.log):.4f}")
    refresh_manifest(cfg)
    return EXIT_OK


def cmd_finetune(cfg: RunConfig, checkpoint: str) -> int:
    corpus = _load_corpus_or_fail(cfg)
    params = _load_checkpoint_or_fail(checkpoint)
    expected = corpus.config.image_size
    got = (
        params.trunk.image_size
        if isinstance(params, enc.ClassifierParams)
        else params.image.image_size
        if isinstance(params, enc.DualEncoderParams)
        else None
    )
    if got is None:
        raise ContractViolation(
            f"{checkpoint}: descriptor {enc.architecture_descriptor(params)!r} "
            "is not fine-tunable (need a classifier or dual encoder)"
        )
    if got != expected:
        raise ContractViolation(
            f"architecture mismatch: checkpoint image size {got} vs corpus {expected} "
            f"(descriptor {enc.architecture_descriptor(params)!r})"
        )
    src = Path(checkpoint)
    out_path = src.with_name(src.stem + "-ft.ckpt")
    log_path = src.with_name(src.stem + "-ft-loss.csv")
    if log_path.exists():
        log_path.unlink()
    result = tr.finetune(params, corpus, cfg.finetune, log_path=log_path)
    enc.save_checkpoint(out_path, result.params)
    print(f"fine-tuned checkpoint written to {out_path} (best epoch {result.best_epoch})")
    refresh_manifest(cfg)
    return EXIT_OK


def cmd_eval(cfg: RunConfig, checkpoints: list[str]) -> int:
    corpus = _load_corpus_or_fail(cfg)
    results = []
    for path in checkpoints:
        params = _load_checkpoint_or_fail(path)
        model_id = Path(path).stem
        for variant in ev.VARIANTS:
            results.append(ev.evaluate_model(params, corpus, variant, model_id))
    metadata = {
        "experiment": cfg.experiment_name,
        "checkpoints": ", ".join(Path(p).stem for p in checkpoints),
        "corpus_seed": cfg.corpus.seed,
    }
    written = ev.emit_report(results, metadata, cfg.paths.reports_dir)
    print(f"wrote {written['csv']} and {written['markdown']} ({len(results)} rows)")
    refresh_manifest(cfg)
    return EXIT_OK


def _attribution_model(path: str, corpus: sc.Corpus) -> att.AttributionModel:
    params = _load_checkpoint_or_fail(path)
    model_id = Path(path).stem
    if isinstance(params, enc.DualEncoderParams):
        anchors = zs.build_all_anchors(corpus, params.text)
        return att.AttributionModel.from_params(model_id, params, anchors=anchors)
    return att.AttributionModel.from_params(model_id, params)


def cmd_attribute(cfg: RunConfig, checkpoints: list[str], sample_ids: list[int],
                  labels: list[int] | None = None) -> int:
    corpus = _load_corpus_or_fail(cfg)
    test = corpus.split("test").samples
    for sid in sample_ids:
        if not 0 <= sid < len(test):
            raise ContractViolation(
                f"unknown sample id {sid}; valid test ids are 0..{len(test) - 1}"
            )
    labels = list(labels) if labels else list(range(sc.N_LABELS))
    for k in labels:
        if not 0 <= k < sc.N_LABELS:
            raise ContractViolation(f"label {k} out of range 0..{sc.N_LABELS - 1}")
    samples = [test[sid] for sid in sample_ids]
    models = [_attribution_model(p, corpus) for p in checkpoints]

    maps_dir = Path(cfg.paths.reports_dir) / "maps"
    n_maps = 0
    for model in models:
        for sample in samples:
            for k in labels:
                amap = att.smoothgrad_ig(
                    model.fn_for_label(k), sample.image, cfg.ig, k, model.model_id
                )
                att.save_map(amap, maps_dir / model.model_id / f"sample{sample.index:06d}-label{k}")
                n_maps += 1

    pairs = [(models[i], models[j]) for i in range(len(models)) for j in range(i + 1, len(models))]
    rows = att.consistency_study(pairs, samples, cfg.ig, labels=labels)
    csv_path = Path(cfg.paths.reports_dir) / "consistency.csv"
    att.write_study_csv(rows, csv_path)
    summary = att.study_summary(rows)
    print(f"wrote {n_maps} attribution maps under {maps_dir}")
    print(f"wrote {csv_path}")
    for pair_id, stats in summary.items():
        print(f"  {pair_id}: mean={stats['mean']:.3f} median={stats['median']:.3f} n={stats['n']}")
    refresh_manifest(cfg)
    return EXIT_OK


# ----------------------------------------------------------------------
# argument parsing and dispatch
# ----------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shortcut-forge",
        description="Synthetic watermark-shortcut benchmark: corpus generation, "
        "contrastive/supervised training, AUC evaluation, attribution maps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None, help="override all seeds")
        p.add_argument("--epochs", type=int, default=None, help="override epoch count")
        p.add_argument("--out", default=None, help="override experiment output root")

    p = sub.add_parser("gen", help="generate the synthetic corpus")
    common(p)

    p = sub.add_parser("train", help="pretrain a model")
    common(p)
    p.add_argument("--mode", required=True, choices=("clip", "cnn"))
    p.add_argument("--data", required=True, choices=("real", "shortcut"))

    p = sub.add_parser("finetune", help="fine-tune a checkpoint on clean samples")
    common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("eval", help="evaluate checkpoints on all test variants")
    common(p)
    p.add_argument("--checkpoints", nargs="+", required=True)

    p = sub.add_parser("attribute", help="attribution maps and consistency study")
    common(p)
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--samples", nargs="+", type=int, required=True, help="test sample ids")
    p.add_argument("--labels", nargs="*", type=int, default=None, help="target labels (default all)")

    return parser


def run(argv: list[str]) -> int:
    args = build_parser().parse_args(argv)
    cfg = load_run_config(args.config, seed=args.seed, epochs=args.epochs, out_root=args.out)
    if args.command == "gen":
        return cmd_gen(cfg)
    if args.command == "train":
        return cmd_train(cfg, args.mode, args.data)
    if args.command == "finetune":
        return cmd_finetune(cfg, args.checkpoint)
    if args.command == "eval":
        return cmd_eval(cfg, args.checkpoints)
    if args.command == "attribute":
        return cmd_attribute(cfg, args.checkpoints, args.samples, args.labels)
    raise ContractViolation(f"unknown command {args.command!r}")


def main(argv: list[str] | None = None) -> int:
    try:
        code = run(sys.argv[1:] if argv is None else argv)
    except MissingPrerequisite as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_MISSING
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        code = EXIT_NUMERIC
    except ContractViolation as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        code = EXIT_CONTRACT
    except (OSError, json.JSONDecodeError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        code = EXIT_IO
    except ShortcutForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_CONTRACT
    return code


if __name__ == "__main__":
    sys.exit(main())

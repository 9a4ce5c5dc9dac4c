"""``multidigit`` command line.

Subcommands::

    gen-data       render a synthetic dataset (PNGs + manifest.jsonl)
    train          train a preset on a manifest, writing checkpoints and a report
    transcribe     JSON-lines transcriptions for a manifest or image files
    eval           accuracy, character accuracy and coverage on a labeled manifest
    curve          coverage/accuracy CSV from evaluation records
    appendix-demo  decode the built-in worked example and print its tables
    arch-sweep     equal-budget depth comparison, CSV of best accuracy per depth

Relative data paths default to ``$MULTIDIGIT_DATA_DIR`` (``./data`` when
unset). Exit codes: 0 success, 1 usage error, 2 data error, 3 failed check.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluator, worked_example
from .dataio import DatasetManifest, ManifestError, Pipeline, load_manifest, read_image, to_channels
from .network import ConfigError, PRESETS, build, load_checkpoint, preset
from .trainer import TrainConfig, TrainingDiverged, evaluate_arrays, prepare, train, transcribe_arrays

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3
DATA_ENV = "MULTIDIGIT_DATA_DIR"

log = logging.getLogger("multidigit")


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def data_dir() -> Path:
    return Path(os.environ.get(DATA_ENV) or "data")


def _in_data_dir(path: str | None, default: str) -> Path:
    return Path(path) if path is not None else data_dir() / default


def _load(path: Path, check_images: bool = True) -> DatasetManifest:
    try:
        return load_manifest(path, check_images)
    except FileNotFoundError:
        raise DataError(f"manifest {path} not found") from None
    except ManifestError as exc:
        raise DataError(str(exc)) from None


def _checkpoint(path):
    try:
        model, meta, _ = load_checkpoint(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint {path} not found") from None
    except (KeyError, ValueError, OSError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    pipeline = Pipeline.from_dict(meta["pipeline"]) if "pipeline" in meta else Pipeline.for_input(model.config.input_shape)
    return model, meta, pipeline


def _alphabet(meta: dict, fallback: str) -> str:
    return meta.get("alphabet", fallback)


def _write_lines(lines, out) -> None:
    if out is None:
        for line in lines:
            sys.stdout.write(line + "\n")
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", encoding="utf-8") as fh:
            for line in lines:
                fh.write(line + "\n")


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    from .synth import SynthConfig, synth_generate

    weights = tuple(float(w) for w in args.length_weights.split(","))
    try:
        cfg = SynthConfig(
            alphabet=args.alphabet,
            max_len=args.max_len,
            length_weights=weights,
            overflow_rate=args.overflow_rate,
            channels=args.channels,
        )
    except ValueError as exc:
        raise DataError(str(exc)) from None
    out = _in_data_dir(args.out, "synth")
    manifest = synth_generate(cfg, args.count, seed=args.seed, out_dir=out)
    print(json.dumps({"manifest": str(out / "manifest.jsonl"), "samples": len(manifest)}))
    return EXIT_OK


def cmd_train(args) -> int:
    manifest = _load(_in_data_dir(args.manifest, "synth/manifest.jsonl"))
    overrides = {"max_len": manifest.max_len, "alphabet_size": len(manifest.alphabet)}
    try:
        cfg = preset(args.preset, **overrides)
    except (ConfigError, TypeError) as exc:
        raise DataError(str(exc)) from None
    if args.epochs < 0:
        raise DataError("--epochs must be non-negative")
    tc = TrainConfig(
        batch_size=args.batch_size,
        learning_rate=args.lr,
        momentum=args.momentum,
        lr_decay=args.lr_decay,
        decay_every=args.decay_every,
        epochs=args.epochs,
        max_steps=args.max_steps,
        dropout=not args.no_dropout,
        augment=not args.no_augment,
        val_fraction=args.val_fraction,
        seed=args.seed,
        checkpoint_dir=str(args.out),
    )
    model = build(cfg, seed=args.seed)
    try:
        report = train(model, manifest, tc, resume_from=args.resume)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_json(out / "report.json")
    report.to_csv(out / "report.csv")
    summary = {"epochs": len(report.epochs), "best_accuracy": report.best_accuracy, "best": report.best, "diverged": report.diverged}
    print(json.dumps(summary))
    if report.diverged:
        raise TrainingDiverged("training diverged; see report.json")
    return EXIT_OK


def transcription_record(sid: str, t, alphabet: str, min_confidence: float) -> dict:
    conf = t.confidence
    return {
        "id": sid,
        "chars": t.text(alphabet),
        "log_prob": round(t.log_prob, 6),
        "confidence": round(conf, 6),
        "overflow": t.overflow,
        "kept": (not t.overflow) and conf >= min_confidence,
    }


def cmd_transcribe(args) -> int:
    model, meta, pipeline = _checkpoint(args.checkpoint)
    alphabet = args.alphabet or _alphabet(meta, "0123456789")
    if len(alphabet) != model.config.alphabet_size:
        raise DataError(f"alphabet has {len(alphabet)} characters, model has {model.config.alphabet_size} classes")
    channels = model.config.input_shape[2]
    inputs = []  # (id, image or None, boxes, error)
    if args.manifest is not None:
        manifest = _load(Path(args.manifest), check_images=False)
        for s in manifest.samples:
            try:
                inputs.append((s.id, s.load(manifest.root), s.boxes, None))
            except (OSError, ManifestError) as exc:
                inputs.append((s.id, None, None, str(exc)))
    for path in args.images:
        try:
            inputs.append((path, read_image(path), None, None))
        except (OSError, ValueError) as exc:
            inputs.append((path, None, None, f"cannot read image: {exc}"))
    if not inputs:
        raise DataError("nothing to transcribe; pass --manifest or image paths")

    crops, errors = {}, {}
    for i, (sid, img, boxes, err) in enumerate(inputs):
        if err is None:
            try:
                crops[i] = pipeline(to_channels(img, channels, sid), boxes)
            except ValueError as exc:
                err = str(exc)
        if err is not None:
            errors[i] = err
    preds = {}
    if crops:
        order = sorted(crops)
        for i, t in zip(order, transcribe_arrays(model, np.stack([crops[i] for i in order]))):
            preds[i] = t
    lines = []
    for i, (sid, *_rest) in enumerate(inputs):
        if i in errors:
            lines.append(json.dumps({"id": sid, "error": errors[i]}))
        else:
            lines.append(json.dumps(transcription_record(sid, preds[i], alphabet, args.min_confidence)))
    _write_lines(lines, args.out)
    if errors:
        log.warning("%d of %d inputs failed", len(errors), len(inputs))
    return EXIT_DATA if len(errors) == len(inputs) else EXIT_OK


def _records_for(args):
    model, meta, pipeline = _checkpoint(args.checkpoint)
    manifest = _load(_in_data_dir(args.manifest, "synth/manifest.jsonl"))
    if manifest.max_len != model.config.max_len or len(manifest.alphabet) != model.config.alphabet_size:
        raise DataError("manifest alphabet or max_len does not match the checkpoint")
    data = prepare(manifest, pipeline, model.config.input_shape[2])
    images = np.stack([pipeline.stage_two(r) for r in data.resized]) if len(data) else None
    if images is None:
        raise DataError("manifest has no samples")
    return evaluate_arrays(model, images, data.labels, data.ids), manifest.alphabet


def cmd_eval(args) -> int:
    records, alphabet = _records_for(args)
    if args.records is not None:
        evaluator.write_records(records, args.records, alphabet)
    cov = evaluator.coverage_at_accuracy(records, args.target)
    summary = {
        "samples": len(records),
        "sequence_accuracy": evaluator.sequence_accuracy(records),
        "character_accuracy": evaluator.character_accuracy(records),
        "target_accuracy": args.target,
        "threshold": None if cov is None else cov[0],
        "coverage": None if cov is None else cov[1],
    }
    print(json.dumps(summary))
    return EXIT_OK


def cmd_curve(args) -> int:
    if args.records is not None:
        try:
            records = evaluator.read_records(args.records, args.alphabet)
        except (OSError, KeyError, ValueError) as exc:
            raise DataError(f"cannot read records {args.records}: {exc}") from None
    elif args.checkpoint is not None:
        records, _ = _records_for(args)
    else:
        raise DataError("pass --records or --checkpoint with --manifest")
    if not records:
        raise DataError("no records")
    if args.thresholds:
        thresholds = [float(t) for t in args.thresholds.split(",")]
    else:
        thresholds = list(np.linspace(0.0, 1.0, args.steps))
    try:
        points = evaluator.coverage_curve(records, thresholds)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    evaluator.write_curve_csv(points, args.out or sys.stdout)
    return EXIT_OK


def cmd_appendix_demo(args) -> int:
    dist = worked_example.distribution()
    t, winner_problems, table_problems = worked_example.check()
    print(f"{'L':>3}  {'log P(L)':>9}  {'prediction':<10} {'prefix':>9}  {'total':>9}")
    for (label, pred, prefix, total), lp in zip(worked_example.length_table(dist), dist.length_logp):
        print(f"{label:>3}  {lp:9.5f}  {pred:<10} {prefix:9.5f}  {total:9.5f}")
    text = "".join(str(c) for c in t.chars)
    print(f"winner: {text!r}  log P = {t.log_prob:.5f}  confidence = {t.confidence:.4f}")
    for p in table_problems:
        print(f"table differs: {p}")
    for p in winner_problems:
        print(f"MISMATCH {p}", file=sys.stderr)
    return EXIT_CHECK if winner_problems else EXIT_OK


def cmd_arch_sweep(args) -> int:
    from .experiments import arch_sweep, write_sweep_csv
    from .trainer import validation_split

    depths = [int(d) for d in args.depths.split(",")]
    if any(d < 1 for d in depths):
        raise DataError("depths must be positive")
    if args.manifest is not None:
        manifest = _load(Path(args.manifest))
    else:
        from .synth import SynthConfig, synth_generate

        manifest = synth_generate(SynthConfig(), args.count, seed=args.seed)
    shape = (32, 64, 1)
    pipeline = Pipeline.for_input(shape)
    train_idx, val_idx = validation_split([s.id for s in manifest.samples], 0.1)
    if not val_idx or not train_idx:
        raise DataError("dataset too small for a train/validation split")
    data = prepare(manifest, pipeline, 1, train_idx), prepare(manifest, pipeline, 1, val_idx)
    base = TrainConfig(learning_rate=args.lr, seed=args.seed, dropout=False)
    rows = arch_sweep(
        depths, *data, args.steps, base, control=args.control, input_shape=shape,
        max_len=manifest.max_len, alphabet_size=len(manifest.alphabet), log=log.info,
    )
    write_sweep_csv(rows, args.out or sys.stdout)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="multidigit", description="Multi-digit sequence transcription.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--out", help=f"output directory (default ${DATA_ENV}/synth)")
    g.add_argument("--count", type=int, default=20000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--alphabet", default="0123456789")
    g.add_argument("--max-len", type=int, default=5)
    g.add_argument("--length-weights", default="1,1,1", help="relative weights of lengths 1, 2, ...")
    g.add_argument("--overflow-rate", type=float, default=0.0)
    g.add_argument("--channels", type=int, choices=(1, 3), default=1)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--manifest", help=f"training manifest (default ${DATA_ENV}/synth/manifest.jsonl)")
    t.add_argument("--out", required=True, help="checkpoint and report directory")
    t.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--lr-decay", type=float, default=0.5)
    t.add_argument("--decay-every", type=int, default=3)
    t.add_argument("--val-fraction", type=float, default=0.1)
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--no-dropout", action="store_true")
    t.add_argument("--resume", help="continue from a last.npz checkpoint")
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("transcribe", help="transcribe images")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--manifest")
    r.add_argument("images", nargs="*")
    r.add_argument("--min-confidence", type=float, default=0.0)
    r.add_argument("--alphabet")
    r.add_argument("--out", help="JSON-lines output (default stdout)")
    r.set_defaults(func=cmd_transcribe)

    e = sub.add_parser("eval", help="evaluate on a labeled manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest")
    e.add_argument("--target", type=float, default=0.98)
    e.add_argument("--records", help="also write per-sample records (JSON-lines)")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("curve", help="coverage/accuracy curve as CSV")
    c.add_argument("--records", help="records written by eval --records")
    c.add_argument("--checkpoint")
    c.add_argument("--manifest")
    c.add_argument("--alphabet", default="0123456789")
    c.add_argument("--thresholds", help="comma-separated, strictly increasing")
    c.add_argument("--steps", type=int, default=101)
    c.add_argument("--out")
    c.set_defaults(func=cmd_curve)

    a = sub.add_parser("appendix-demo", help="decode the built-in worked example")
    a.set_defaults(func=cmd_appendix_demo)

    s = sub.add_parser("arch-sweep", help="equal-budget depth comparison")
    s.add_argument("--depths", default="1,3,5")
    s.add_argument("--manifest", help="dataset (default: generate --count synthetic samples)")
    s.add_argument("--count", type=int, default=20000)
    s.add_argument("--steps", type=int, default=1700, help="SGD steps per model")
    s.add_argument("--lr", type=float, default=0.01)
    s.add_argument("--control", action=argparse.BooleanOptionalAction, default=True, help="add a large shallow control model")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="CSV output (default stdout)")
    s.set_defaults(func=cmd_arch_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except DataError as exc:
        print(f"multidigit: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"multidigit: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

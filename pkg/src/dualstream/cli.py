"""Command-line entry point: generate-data, augment, train, evaluate, infer, report."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .augment import Image, apply_geometric, apply_physics
from .data import CLASS_NAMES, generate_synthetic, load_dataset, read_image, save_dataset, write_pgm
from .edges import sobel_array
from .errors import ConfigError, DataError, DualStreamError
from .metrics import classification_report

log = logging.getLogger("dualstream")


def _key_values(pairs) -> dict[str, str]:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _counts(text: str) -> tuple[int, ...]:
    try:
        counts = tuple(int(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"--counts expects comma-separated integers, got {text!r}") from exc
    if len(counts) != len(CLASS_NAMES) or min(counts) < 1:
        raise ConfigError(f"--counts needs {len(CLASS_NAMES)} positive integers")
    return counts


def _json_params(params: dict) -> dict:
    return {k: (v.item() if isinstance(v, np.generic) else v) for k, v in params.items()}


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_generate_data(args) -> int:
    ds = generate_synthetic(_counts(args.counts), size=args.size, seed=args.seed)
    root = save_dataset(ds, args.out)
    print(f"wrote {len(ds)} images to {root} (counts {','.join(map(str, ds.class_counts))})")
    return 0


def cmd_augment(args) -> int:
    from .trainer import load_config

    cfg = load_config(args.config, _key_values(args.set)).aug_config()
    src = Path(args.image)
    img = Image(read_image(src), id=src.stem)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(args.count):
        rng = np.random.default_rng([args.seed, i])
        shared = apply_geometric(img, cfg, rng) if args.mode in ("geometric", "both") else img
        result = apply_physics(shared, cfg, rng) if args.mode in ("physics", "both") else shared
        name = f"{src.stem}_aug{i:03d}.pgm"
        write_pgm(out / name, result.pixels)
        steps = [{"augmentation": n, "params": _json_params(p)} for n, p in result.history]
        row = {"output": name, "seed": [args.seed, i], "steps": steps}
        if args.emit_edges:
            # edges follow the shared geometry but never the physics step
            edge_name = f"{src.stem}_aug{i:03d}_edges.pgm"
            write_pgm(out / edge_name, np.rint(255.0 * sobel_array(shared.pixels)))
            row["edges"] = edge_name
        rows.append(row)
    (out / "augment_manifest.json").write_text(json.dumps({"source": str(src), "items": rows}, indent=2) + "\n")
    print(f"wrote {len(rows)} augmented images to {out}")
    return 0


def cmd_train(args) -> int:
    from .trainer import load_config, run_cross_validation

    overrides = _key_values(args.set)
    for flag in ("epochs", "seed"):
        if getattr(args, flag) is not None:
            overrides[flag] = str(getattr(args, flag))
    cfg = load_config(args.config, overrides)
    ds = load_dataset(args.data)
    result = run_cross_validation(ds, cfg, args.out, figures=not args.no_figures)
    b = result.best
    print(f"best fold={b.fold} epoch={b.epoch} val_loss={b.val_loss:.6f}")
    if result.test is not None:
        print(result.test.report.render(), end="")
    return 0


def _write_report(out: Path, report, probabilities=None, labels=None, figures=True) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report.render())
    (out / "metrics.csv").write_text(report.to_csv())
    if figures:
        from .plotting import report_figures

        report_figures(out / "figures", report.confusion, probabilities, labels)


def cmd_evaluate(args) -> int:
    from .checkpoint import load_checkpoint
    from .trainer import evaluate, read_split

    model, _ = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    items = ds.items
    if args.split:
        _, test_ids = read_split(args.split)
        if not test_ids:
            raise DataError(f"{args.split} lists no test items")
        missing = set(test_ids) - set(ds.ids)
        if missing:
            raise DataError(f"{len(missing)} split ids not found in {args.data}, e.g. {sorted(missing)[0]}")
        items = ds.subset(test_ids).items
    result = evaluate(model, items)
    print(result.report.render(), end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "predictions.csv").write_text(result.predictions_csv())
        _write_report(out, result.report, result.probabilities, result.labels, not args.no_figures)
    return 0


def cmd_infer(args) -> int:
    from .trainer import infer

    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["path", "label"] + [f"p{c}" for c in range(len(CLASS_NAMES))])
    for path in args.images:
        name, probs = infer(args.checkpoint, path)
        writer.writerow([path, name] + [f"{p:.6f}" for p in probs])
    return 0


def read_predictions(path) -> tuple[np.ndarray, np.ndarray]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise DataError(f"cannot read predictions {path}: {exc}") from exc
    if not rows:
        raise DataError(f"{path} has no prediction rows")
    cols = sorted((c for c in rows[0] if c.startswith("p") and c[1:].isdigit()), key=lambda c: int(c[1:]))
    if "true_label" not in rows[0] or len(cols) != len(CLASS_NAMES):
        raise DataError(f"{path} needs columns id,true_label,p0..p{len(CLASS_NAMES) - 1}")
    try:
        labels = np.array([int(r["true_label"]) for r in rows])
        probs = np.array([[float(r[c]) for c in cols] for r in rows])
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    return labels, probs


def cmd_report(args) -> int:
    labels, probs = read_predictions(args.predictions)
    report = classification_report(labels, probs.argmax(axis=1), probs, CLASS_NAMES)
    print(report.render(), end="")
    if args.out:
        _write_report(Path(args.out), report, probs, labels, not args.no_figures)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualstream", description="Dual-stream ultrasound classifier tools.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("generate-data", help="write a seeded synthetic dataset with a manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--counts", default="402,198,120", help="images per class (benign,malignant,normal)")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("augment", help="write augmented variants of one image with a parameter manifest")
    p.add_argument("image")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=("physics", "geometric", "both"), default="physics")
    p.add_argument("--emit-edges", action="store_true", help="also write the edge map of each variant")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="run stratified cross-validation and evaluate the global best")
    p.add_argument("--data", required=True, help="dataset root with one directory per class")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="flat key = value file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", help="split.csv from a run; restricts evaluation to its test part")
    p.add_argument("--out")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("infer", help="classify image files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("report", help="metrics table and CSV from a predictions file")
    p.add_argument("predictions")
    p.add_argument("--out")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except DualStreamError as exc:
        print(f"error: {type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: DataError: {exc}".replace("\n", " "), file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())

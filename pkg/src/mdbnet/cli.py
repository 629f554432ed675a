"""``mdbnet`` command line: gen, voxelize, weights, train, eval, gradcheck, report.

Exit codes: 0 success, 1 validation failure, 2 internal error, 64 usage error.
The thread count for numpy's BLAS comes from ``MDBNET_NUM_THREADS`` (default 1).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

EXIT_OK, EXIT_VALIDATION, EXIT_INTERNAL, EXIT_USAGE = 0, 1, 2, 64
REPORT_KINDS = ("main", "fusion", "components", "weighting")

log = logging.getLogger("mdbnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _override_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_train_config(args):
    """Defaults <- ``--config`` JSON <- dedicated flags <- ``--set key=value``; unknown keys are usage errors."""
    from .training import TrainConfig

    known = {f.name for f in fields(TrainConfig)}
    values = {}
    if args.config:
        loaded = json.loads(Path(args.config).read_text())
        loaded = loaded.get("train", loaded)
        values.update(loaded)
    for flag, key in (("fusion", "fusion"), ("block", "block"), ("weighting", "weighting"), ("lam", "lam"),
                      ("folds", "folds"), ("seed", "seed"), ("epochs", "epochs")):
        value = getattr(args, flag, None)
        if value is not None:
            values[key] = value
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        values[key.strip()] = _override_value(raw)
    unknown = sorted(set(values) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    try:
        return TrainConfig(**values)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- subcommands ---------------------------------------------------------------

def cmd_gen(args) -> int:
    from .data.io import save_sample, write_manifest
    from .data.synthetic import TIERS, generate_scene

    out = Path(args.out)
    spec = TIERS[args.tier]()
    spec.validate()
    entries = []
    for i in range(args.n):
        sample = generate_scene(spec, seed=args.seed * 100_003 + i, sample_id=f"scene{i:04d}")
        entries.append(save_sample(sample, out / "samples"))
    write_manifest(out / "manifest.txt", entries)
    _write_json(out / "gen_config.json", {"tier": args.tier, "n": args.n, "seed": args.seed})
    print(f"wrote {args.n} {args.tier}-tier scenes to {out / 'manifest.txt'}")
    return EXIT_OK


def cmd_voxelize(args) -> int:
    from .data.io import load_sample, read_manifest, write_vxg

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = read_manifest(args.manifest)
    for paths in entries:
        sample = load_sample(paths)
        write_vxg(out / f"{sample.sample_id}_ftsdf.vxg", sample.ftsdf)
    print(f"wrote {len(entries)} F-TSDF grids to {out}")
    return EXIT_OK


def cmd_weights(args) -> int:
    from .data.io import load_dataset
    from .losses import class_frequencies, reweight_classes
    from .training import prepare_all

    prepared = prepare_all(load_dataset(args.manifest))
    freqs = class_frequencies([p.labels3d for p in prepared], [p.valid3d for p in prepared])
    weights = reweight_classes(freqs, args.k, seed=args.seed)
    weights.save(args.out)
    for c, (f, w) in enumerate(zip(freqs, weights.weights)):
        print(f"class {c:2d}  count {int(f):7d}  weight {w:.4f}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .data.io import load_dataset
    from .training import prepare_all, run_kfold

    config = resolve_train_config(args)
    out = Path(args.out)
    _write_json(out / "config.json", {"train": config.to_dict(), "manifest": str(Path(args.manifest).resolve())})
    samples = load_dataset(args.manifest)
    prepared = prepare_all(samples)
    folds = None if args.fold is None else [args.fold]
    results = run_kfold(samples, config, out, prepared, folds)
    for r in results:
        print(f"fold {r.fold_id}: best epoch {r.best_epoch}, val SSC mIoU {r.report.ssc_miou:.2f}, "
              f"SC IoU {r.report.sc_iou:.2f} ({r.seconds:.0f} s)")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data.io import load_dataset
    from .data.splits import kfold_split
    from .metrics import write_reports_csv
    from .training import TrainConfig, evaluate_predictions, load_model, predict, prepare_all

    run = Path(args.run)
    saved = json.loads((run / "config.json").read_text())
    config = TrainConfig.from_dict(saved["train"])
    manifest = args.manifest or saved["manifest"]
    samples = load_dataset(manifest)
    prepared = prepare_all(samples)
    splits = kfold_split(len(samples), config.folds, config.seed)
    reports = []
    for fold, (_, val_idx) in enumerate(splits):
        ckpt = run / f"fold{fold}.mdb"
        if not ckpt.exists():
            continue
        model = load_model(ckpt, config, samples[0].grid.dims, fold)
        preds = predict(model, samples, prepared, val_idx)
        reports.append(evaluate_predictions(preds, [prepared[i] for i in val_idx], fold, config.eval_seed))
    if not reports:
        print(f"no fold checkpoints in {run}", file=sys.stderr)
        return EXIT_VALIDATION
    header = [f"run={run.name}", f"sc_empty_resample_ratio=1:1 eval_seed={config.eval_seed}",
              "ssc_miou averages classes present in prediction or ground truth"]
    write_reports_csv(reports, run / "reports.csv", header)
    for r in reports:
        print(f"fold {r.fold_id}: SC P/R/IoU {r.sc_precision:.1f}/{r.sc_recall:.1f}/{r.sc_iou:.1f}  "
              f"SSC mIoU {r.ssc_miou:.1f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import TOLERANCE, run_gradient_suite

    results = run_gradient_suite(args.seed)
    worst = 0.0
    for name, (err, secs) in results.items():
        worst = max(worst, err)
        status = "ok" if err < TOLERANCE else "FAIL"
        print(f"{name:26s} max rel err {err:.3e}  {status}")
    print(f"overall max relative error {worst:.3e} (tolerance {TOLERANCE:g})")
    return EXIT_OK if worst < TOLERANCE else EXIT_VALIDATION


def cmd_report(args) -> int:
    from .metrics import (
        aggregate_folds,
        format_ablation_table,
        format_results_table,
        format_weighting_table,
        rare_class_miou,
        read_reports_csv,
    )

    rows, per_run = {}, {}
    for item in args.runs:
        label, sep, path = item.partition("=")
        if not sep:
            label, path = Path(item).name, item
        csv_path = Path(path) / "reports.csv" if Path(path).is_dir() else Path(path)
        per_run[label] = read_reports_csv(csv_path)
        rows[label] = aggregate_folds(per_run[label])
    if args.kind == "weighting":
        rare = _rare_ids(args)
        rare_rows = {label: rare_class_miou(reports, rare) for label, reports in per_run.items()}
        text = format_weighting_table(rows, rare_rows, rare, "Loss weighting ablation")
    elif args.kind == "main":
        text = format_results_table(rows, "Semantic scene completion (mean±std over folds)")
    elif args.kind == "fusion":
        text = format_ablation_table(rows, "Fusion Method", "Fusion placement ablation")
    else:
        text = format_ablation_table(rows, "Component", "Component ablation")
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK


def _rare_ids(args) -> list:
    if args.rare:
        try:
            ids = [int(t) for t in args.rare.split(",")]
        except ValueError as exc:
            raise UsageError(f"--rare expects comma-separated class ids, got {args.rare!r}") from exc
        if not all(1 <= c <= 11 for c in ids):
            raise UsageError("--rare class ids must lie in 1..11")
        return ids
    if not args.manifest:
        raise UsageError("--kind weighting needs --rare or --manifest")
    from .data.io import load_dataset
    from .losses import class_frequencies, rare_classes
    from .training import prepare_all

    prepared = prepare_all(load_dataset(args.manifest))
    return rare_classes(class_frequencies([p.labels3d for p in prepared], [p.valid3d for p in prepared]))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mdbnet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen", help="generate a synthetic dataset and manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=200)
    g.add_argument("--tier", choices=("easy", "skewed"), default="easy")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen)

    v = sub.add_parser("voxelize", help="write the F-TSDF grid of every manifest sample as VXG1")
    v.add_argument("--manifest", required=True)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_voxelize)

    w = sub.add_parser("weights", help="K-means class weights from the dataset label frequencies")
    w.add_argument("--manifest", required=True)
    w.add_argument("--out", required=True)
    w.add_argument("--k", type=int, default=3)
    w.add_argument("--seed", type=int, default=0)
    w.set_defaults(func=cmd_weights)

    t = sub.add_parser("train", help="K-fold training with checkpoints and logs per fold")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--fusion", choices=("early", "mid", "late"))
    t.add_argument("--block", choices=("preact", "itrm"))
    t.add_argument("--weighting", choices=("kmeans", "resample"))
    t.add_argument("--lambda", dest="lam", type=float, choices=(0.5, 1.0))
    t.add_argument("--folds", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--fold", type=int, help="train only this fold")
    t.add_argument("--seed", type=int)
    t.add_argument("--set", action="append", metavar="KEY=VALUE")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate each fold checkpoint on its validation split")
    e.add_argument("--run", required=True)
    e.add_argument("--manifest")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every op and block")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("report", help="aggregate fold reports into results tables")
    r.add_argument("runs", nargs="+", metavar="LABEL=RUN_DIR")
    r.add_argument("--kind", choices=REPORT_KINDS, default="main")
    r.add_argument("--out")
    r.add_argument("--rare", help="comma-separated rare class ids for --kind weighting")
    r.add_argument("--manifest", help="derive the rare classes from this dataset's label frequencies")
    r.set_defaults(func=cmd_report)
    return p


def _limit_threads():
    from threadpoolctl import threadpool_limits

    n = int(os.environ.get("MDBNET_NUM_THREADS", "1"))
    return threadpool_limits(limits=max(n, 1))


def run(argv=None) -> int:
    from .errors import MdbNetError

    logging.basicConfig(level=os.environ.get("MDBNET_LOG", "WARNING"), format="%(message)s")
    try:
        args = build_parser().parse_args(argv)
        with _limit_threads():
            return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MdbNetError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - report, then signal an internal failure
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()

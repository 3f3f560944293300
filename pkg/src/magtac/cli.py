"""Command-line entry point.

Exit codes:
  0  success
  2  configuration / usage error (bad flag, unknown preset, bad config file)
  3  missing input (dataset or checkpoint not found, unreadable dataset)
  4  numeric failure (training diverged)
  5  asserted property failed (e.g. accuracy ordering in ``report compare``)
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC, EXIT_ASSERT = 0, 2, 3, 4, 5
OUT_ENV = "MAGTAC_OUT"


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _out_dir(args, default_name):
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs")) / default_name


def _snapshot(out, args, extra=None):
    out.mkdir(parents=True, exist_ok=True)
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    if extra:
        resolved.update(extra)
    (out / "resolved_config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True, default=str) + "\n")


def _open_dataset(path, require=None):
    from magtac.dataset import DATA_FILES, DatasetError, load_dataset

    try:
        return load_dataset(path, require or DATA_FILES)
    except DatasetError as exc:
        raise CliError(f"cannot open dataset {path}: {exc}", EXIT_MISSING) from exc


def cmd_gen(args):
    from magtac.config import ConfigError, dump_config, load_config, preset

    try:
        cfg = load_config(args.config, base=args.preset) if args.config else preset(args.preset)
    except (ConfigError, OSError) as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    if args.seed is not None:
        from dataclasses import replace

        cfg = replace(cfg, dataset=replace(cfg.dataset, seed=args.seed))
    from magtac.dataset import export_labels_csv, generate_dataset

    out = _out_dir(args, f"data_{args.preset}_seed{cfg.dataset.seed}")
    _snapshot(out, args, {"sim_config": cfg.to_dict()})
    dump_config(cfg, out / "resolved_config.ini", args.preset)
    try:
        ds = generate_dataset(cfg, out)
    except OSError as exc:
        raise CliError(f"cannot write dataset: {exc}", EXIT_MISSING) from exc
    if args.csv:
        export_labels_csv(ds, out / "labels.csv")
    print(f"generated {len(ds)} samples in {out}")
    return EXIT_OK


def _train_split_arrays(ds, mode, split_mode, split_seed):
    from magtac import fusion
    from magtac.dataset import SplitSpec, split

    tr, te, va = split(ds, SplitSpec(seed=split_seed, mode=split_mode))
    return (fusion.load_arrays(ds, idx, mode) for idx in (tr, te, va))


def _require_for(mode):
    files = ["labels.bin", "index.bin"]
    if mode in ("image-only", "fusion"):
        files.append("images.bin")
    if mode in ("mag-only", "fusion"):
        files.append("mag.bin")
    return tuple(files)


def cmd_train(args):
    from magtac import fusion

    ds = _open_dataset(args.data, _require_for(args.mode))
    out = _out_dir(args, f"train_{args.mode}_lr{args.lr:g}_seed{args.seed}")
    _snapshot(out, args)
    train_d, test_d, val_d = _train_split_arrays(ds, args.mode, args.split_mode, args.split_seed)
    model = fusion.ForceModel(args.mode, ds.image_size, args.seed, np.float32)
    cfg = fusion.TrainConfig(
        mode=args.mode, lr=args.lr, batch_size=args.batch_size, patience=args.patience,
        max_epochs=args.max_epochs, seed=args.seed,
    )
    try:
        result = fusion.train(model, train_d, test_d, cfg, on_epoch=lambda r: print(_fmt_epoch(r), flush=True))
    except fusion.DivergenceError as exc:
        raise CliError(str(exc), EXIT_NUMERIC) from exc
    stem = f"{args.mode}_lr{args.lr:g}_seed{args.seed}"
    fusion.write_history_csv(result.history, out / f"history_{stem}.csv")
    fusion.save_checkpoint(model, out / f"checkpoint_{stem}", steps=result.steps)
    metrics = fusion.evaluate(model, val_d)
    _write_metrics(out / f"metrics_{stem}.csv", args.mode, args.lr, metrics)
    print(f"validation {metrics}")
    return EXIT_OK


def _fmt_epoch(row):
    return f"epoch {row['epoch']}: train {row['train_loss']:.5f} test {row['test_loss']:.5f} ({row['wall_time']:.1f}s)"


def _write_metrics(path, mode, lr, metrics):
    import csv

    from magtac import fusion

    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fusion.METRIC_COLUMNS)
        writer.writeheader()
        writer.writerow(fusion.metrics_row(mode, lr, metrics))


def cmd_eval(args):
    from magtac import fusion

    ckpt = Path(args.checkpoint)
    if not all(p.exists() for p in fusion.checkpoint_paths(ckpt)):
        raise CliError(f"checkpoint not found: {ckpt}", EXIT_MISSING)
    model, manifest = fusion.load_checkpoint(ckpt)
    ds = _open_dataset(args.data, _require_for(model.mode))
    parts = dict(zip(("train", "test", "validation"), _train_split_arrays(ds, model.mode, args.split_mode, args.split_seed)))
    metrics = fusion.evaluate(model, parts[args.split])
    lr = args.lr if args.lr is not None else float("nan")
    out = _out_dir(args, f"eval_{model.mode}")
    _snapshot(out, args)
    _write_metrics(out / f"metrics_{model.mode}_{args.split}.csv", model.mode, lr, metrics)
    print(f"{model.mode} {args.split}: {metrics}")
    return EXIT_OK


def cmd_report_compare(args):
    from magtac import experiments, fusion

    ds = _open_dataset(args.data)
    out = _out_dir(args, "report_compare")
    _snapshot(out, args)
    try:
        report = experiments.run_comparison(
            ds, seeds=tuple(args.seeds), lrs=tuple(args.lrs), modes=tuple(args.modes),
            max_epochs=args.max_epochs, log=print,
        )
    except fusion.DivergenceError as exc:
        raise CliError(str(exc), EXIT_NUMERIC) from exc
    report.write(out)
    failed = False
    for lr in args.lrs:
        line = report.verdict(lr, args.min_improvement)
        print(line)
        failed |= "FAIL" in line
    return EXIT_ASSERT if failed else EXIT_OK


def cmd_report_timing(args):
    from magtac import experiments

    ds = _open_dataset(args.data)
    ckdir = Path(args.checkpoints)
    models = {}
    for mode in args.modes:
        hits = sorted(ckdir.glob(f"**/checkpoint_{mode}_*.json"))
        if not hits:
            raise CliError(f"no checkpoint for {mode} under {ckdir}", EXIT_MISSING)
        models[mode] = hits[0]
    out = _out_dir(args, "report_timing")
    _snapshot(out, args)
    cfg = experiments.TimingConfig(repetitions=args.repetitions, warmup=args.warmup)
    report = experiments.run_timing(models, ds, cfg)
    report.write(out)
    for row in report.table():
        print(",".join(row))
    return EXIT_OK


def cmd_report_proximity(args):
    from magtac import experiments

    out = _out_dir(args, "report_proximity")
    _snapshot(out, args)
    traces = []
    for name in args.presets:
        tr = experiments.run_proximity(
            experiments.OBJECT_PRESETS[name], steps=args.steps, contact_distance=args.contact_mm * 1e-3, label=name
        )
        traces.append(tr)
        hit = experiments.detect_proximity(tr, args.threshold)
        print(f"{name}: detected at {'never' if hit is None else f'{hit * 1e3:.1f} mm'} (threshold {args.threshold})")
    experiments.write_proximity(traces, out, svg=not args.no_svg)
    return EXIT_OK


def build_parser():
    from magtac import experiments, fusion
    from magtac.config import PRESETS

    p = argparse.ArgumentParser(
        prog="magtac",
        description="Simulated visual-magnetic tactile sensor: data generation, training, reports.",
        epilog="exit codes: 0 ok, 2 config/usage error, 3 missing input, 4 numeric failure (divergence), "
        "5 asserted property failed. Default output root: $MAGTAC_OUT or ./runs.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a dataset")
    g.add_argument("--preset", choices=PRESETS, default="desk", help="bundled simulation preset")
    g.add_argument("--config", help="INI file with overrides on top of the preset")
    g.add_argument("--seed", type=int, help="dataset seed (overrides the config)")
    g.add_argument("--out", help="output directory")
    g.add_argument("--csv", action="store_true", help="also export labels.csv for auditing")
    g.set_defaults(func=cmd_gen)

    def split_flags(sp):
        sp.add_argument("--split-mode", choices=("by-sample", "by-location"), default="by-sample", help="8:1:1 split mode")
        sp.add_argument("--split-seed", type=int, default=42, help="split seed")

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--mode", choices=fusion.MODES, default="fusion", help="model input modalities")
    t.add_argument("--lr", type=float, default=1e-4, help="Adam learning rate")
    t.add_argument("--seed", type=int, default=0, help="initialization / shuffling seed")
    t.add_argument("--batch-size", type=int, default=64, help="minibatch size")
    t.add_argument("--patience", type=int, default=3, help="early-stopping patience (epochs)")
    t.add_argument("--max-epochs", type=int, default=50, help="epoch cap")
    t.add_argument("--out", help="output directory")
    split_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--checkpoint", required=True, help="checkpoint path (with or without .json)")
    e.add_argument("--split", choices=("train", "test", "validation"), default="validation", help="split to score")
    e.add_argument("--lr", type=float, help="learning rate to record in the metrics row")
    e.add_argument("--out", help="output directory")
    split_flags(e)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="experiment reports")
    rsub = r.add_subparsers(dest="report", required=True)
    c = rsub.add_parser("compare", help="three-mode accuracy comparison (exit 5 if ordering fails)")
    c.add_argument("--data", required=True, help="dataset directory")
    c.add_argument("--modes", nargs="+", choices=fusion.MODES, default=list(fusion.MODES), help="modes to train")
    c.add_argument("--lrs", nargs="+", type=float, default=[1e-4], help="learning rates")
    c.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2], help="training seeds")
    c.add_argument("--max-epochs", type=int, default=50, help="epoch cap")
    c.add_argument("--min-improvement", type=float, default=2.0, help="required fusion gain over image-only, percent")
    c.add_argument("--out", help="output directory")
    c.set_defaults(func=cmd_report_compare)

    tm = rsub.add_parser("timing", help="preprocessing / inference timing table")
    tm.add_argument("--data", required=True, help="dataset directory (sample source)")
    tm.add_argument("--checkpoints", required=True, help="directory searched for checkpoint_<mode>_*.json")
    tm.add_argument("--modes", nargs="+", choices=fusion.MODES, default=list(fusion.MODES), help="modes to time")
    tm.add_argument("--repetitions", type=int, default=100, help="timed repetitions (median reported)")
    tm.add_argument("--warmup", type=int, default=10, help="untimed warm-up runs")
    tm.add_argument("--out", help="output directory")
    tm.set_defaults(func=cmd_report_timing)

    px = rsub.add_parser("proximity", help="on-axis approach traces for magnetized objects")
    px.add_argument("--presets", nargs="+", choices=sorted(experiments.OBJECT_PRESETS), default=list(experiments.OBJECT_PRESETS), help="object presets")
    px.add_argument("--steps", type=int, default=200, help="samples along the approach")
    px.add_argument("--contact-mm", type=float, default=5.0, help="contact reference distance (mm)")
    px.add_argument("--threshold", type=float, default=0.05, help="detection threshold on the normalized signal")
    px.add_argument("--no-svg", action="store_true", help="skip the overlay plot")
    px.add_argument("--out", help="output directory")
    px.set_defaults(func=cmd_report_proximity)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())

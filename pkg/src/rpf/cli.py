"""Command-line front end for the lab pipeline.

Five subcommands cover the loop: ``generate`` a benchmark, ``train`` one
variant on it, ``evaluate`` or ``analyze`` saved checkpoints, and ``suite``
for the full ablation + sweep battery. Every invocation snapshots its
resolved configuration into a run manifest so any artifact can be traced
back to flags and seed, and reruns never overwrite an existing directory.

Exit codes: 0 success, 2 usage or input problem, 3 numerical failure,
4 file format or version mismatch.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, analysis, data, evaluate, train
from . import checkpoint as ckpt

log = logging.getLogger("rpf")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_FORMAT = 4

_BENCH_KEYS = {f.name for f in dataclasses.fields(data.BenchmarkConfig)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(train.TrainConfig)}


class UsageError(ValueError):
    """Bad flags, config keys, or missing inputs."""


# ------------------------------------------------------------- config

def parse_value(text: str):
    """Interpret a config value: JSON scalars, comma lists, else string."""
    text = text.strip()
    if "," in text:
        return tuple(parse_value(part) for part in text.split(","))
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config_file(path: str | None) -> dict:
    """Flat key=value lines; '#' starts a comment, blank lines skipped."""
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    cfg = {}
    for ln, raw in enumerate(p.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{p}:{ln}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        cfg[key.strip()] = parse_value(value)
    return cfg


def apply_sets(cfg: dict, sets) -> dict:
    for item in sets or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg[key.strip()] = parse_value(value)
    return cfg


def split_config(cfg: dict, allowed: set, what: str) -> dict:
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        raise UsageError(f"unknown {what} config keys: {', '.join(unknown)}")
    return cfg


# ----------------------------------------------------------- plumbing

def fresh_dir(path: Path) -> Path:
    """Never overwrite: suffix -2, -3, ... until the name is free."""
    path = Path(path)
    if not path.exists():
        return path
    n = 2
    while path.with_name(f"{path.name}-{n}").exists():
        n += 1
    picked = path.with_name(f"{path.name}-{n}")
    log.info("output %s exists, using %s", path, picked)
    return picked


def write_manifest(out: Path, command: str, resolved: dict,
                   seed, config_path, started: str) -> None:
    manifest = {
        "command": command,
        "config_path": str(config_path) if config_path else None,
        "config": resolved,
        "seed": seed,
        "version": __version__,
        "out_dir": str(out),
        "started": started,
        "finished": _now(),
    }
    (out / "run_manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _load_bundle(bench: str) -> data.BenchmarkBundle:
    p = Path(bench)
    if not (p / "manifest.json").is_file():
        raise UsageError(f"no benchmark at {p} (missing manifest.json)")
    return data.load_benchmark(p)


def _train_config(cfg: dict, args) -> train.TrainConfig:
    cfg = dict(cfg)
    if getattr(args, "variant", None):
        cfg["variant"] = args.variant
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "lambda_hr", None) is not None:
        cfg["lambda_hr"] = args.lambda_hr
    split_config(cfg, _TRAIN_KEYS, "training")
    try:
        return train.TrainConfig(**cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training config: {exc}") from exc


# ------------------------------------------------------------ commands

def cmd_generate(args) -> int:
    cfg = apply_sets(load_config_file(args.config), args.set)
    if args.preset:
        cfg["preset"] = args.preset
    split_config(cfg, _BENCH_KEYS, "benchmark")
    try:
        bench_cfg = data.BenchmarkConfig(**cfg)
        bundle = data.generate_benchmark(bench_cfg, seed=args.seed)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad benchmark config: {exc}") from exc
    started = _now()
    out = fresh_dir(Path(args.out))
    data.save_benchmark(bundle, out)
    write_manifest(out, "generate", dataclasses.asdict(bench_cfg),
                   args.seed, args.config, started)
    split = bundle.class_split
    print(f"benchmark written to {out}")
    print(f"known classes: {list(split.known)}  "
          f"open classes: {list(split.open_class_ids)}")
    for i, sd in enumerate(bundle.sources):
        print(f"source {i} (domain {sd.train.domain_id}): "
              f"{len(sd.train)} train / {len(sd.val)} val, "
              f"labels {sorted(set(sd.train.y.tolist()))}")
    print(f"target (domain {bundle.target.domain_id}): {len(bundle.target)} "
          f"samples; pretext: {len(bundle.pretext)} samples, "
          f"{int(bundle.pretext.y.max()) + 1} classes")
    return EXIT_OK


def cmd_train(args) -> int:
    bundle = _load_bundle(args.bench)
    cfg = _train_config(apply_sets(load_config_file(args.config), args.set),
                        args)
    started = _now()
    default = Path(args.bench) / f"run-{cfg.variant.value}-seed{cfg.seed}"
    out = fresh_dir(Path(args.out) if args.out else default)
    try:
        record, report, _ = train.run_experiment(bundle, cfg, out)
    except train.DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        logs = getattr(exc, "logs", None)
        if logs:
            last = logs[-1]
            print(f"last finite epoch {last.epoch}: l_lpft={last.l_lpft!r} "
                  f"train_acc={last.train_acc!r} val_acc={last.val_acc!r}",
                  file=sys.stderr)
        return EXIT_NUMERIC
    write_manifest(out, "train", cfg.to_dict(), cfg.seed, args.config, started)
    sel = record.selected
    print(f"run written to {out}")
    print(f"variant={cfg.variant.value} seed={cfg.seed} "
          f"selected_epoch={record.selected_epoch} "
          f"val_acc={sel.val_acc:.4f} train_acc={sel.train_acc:.4f}")
    print(f"target: acc_known={report.acc_known:.4f} "
          f"best_h_score={report.best_h_score:.4f}")
    return EXIT_OK


def _load_state(path: str):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"checkpoint not found: {p}")
    return ckpt.load_checkpoint(p)


def cmd_evaluate(args) -> int:
    state, _, _ = _load_state(args.checkpoint)
    bundle = _load_bundle(args.bench)
    started = _now()
    y_target = bundle.class_split.to_head_label(bundle.target.y)
    report = evaluate.threshold_sweep(state, bundle.target.X, y_target)
    out = fresh_dir(Path(args.out) if args.out
                    else Path(args.checkpoint).parent / "eval")
    out.mkdir(parents=True, exist_ok=True)
    evaluate.save_report(report, out)
    write_manifest(out, "evaluate", {"checkpoint": args.checkpoint,
                                     "bench": args.bench}, None,
                   args.config, started)
    print(f"eval written to {out}")
    print(f"acc_known={report.acc_known:.4f} "
          f"best_h_score={report.best_h_score:.4f} "
          f"best_threshold={report.best_threshold:.4f}")
    return EXIT_OK


_COMPARE_ROWS = (
    ("domain gap (target vs sources)",
     lambda d: d.domain_gap_target_vs_sources),
    ("domain gap (source pairs)", lambda d: d.domain_gap_source_pairs),
    ("intra-class distance (mean)",
     lambda d: float(np.mean(list(d.intra_class_distance.values())))),
    ("feature drift (mean)",
     lambda d: float(np.mean(list(d.feature_drift.values())))),
    ("unknown mean entropy",
     lambda d: d.confidence_entropy["unknown"]["mean_entropy"]),
    ("unknown mean max-confidence",
     lambda d: d.confidence_entropy["unknown"]["mean_max_confidence"]),
    ("head distance from probe", lambda d: d.head_distance),
)


def cmd_analyze(args) -> int:
    bundle = _load_bundle(args.bench)
    started = _now()
    if args.compare:
        first, second = args.compare
        diags = []
        for path in (first, second):
            state, _, _ = _load_state(path)
            diags.append(analysis.analyze_run(state, bundle))
        width = max(len(name) for name, _ in _COMPARE_ROWS)
        print(f"{'metric':<{width}}  {'A':>12}  {'B':>12}")
        lines = ["metric,a,b"]
        for name, getter in _COMPARE_ROWS:
            a, b = getter(diags[0]), getter(diags[1])
            print(f"{name:<{width}}  {a:>12.6f}  {b:>12.6f}")
            lines.append(f"{name},{a!r},{b!r}")
        if args.out:
            out = fresh_dir(Path(args.out))
            out.mkdir(parents=True, exist_ok=True)
            (out / "comparison.csv").write_text("\n".join(lines) + "\n")
            write_manifest(out, "analyze",
                           {"compare": [first, second], "bench": args.bench},
                           None, args.config, started)
            print(f"comparison written to {out}")
        return EXIT_OK

    if not args.checkpoint:
        raise UsageError("analyze needs a checkpoint (or --compare A B)")
    state, _, _ = _load_state(args.checkpoint)
    diag = analysis.analyze_run(state, bundle)
    out = fresh_dir(Path(args.out) if args.out
                    else Path(args.checkpoint).parent / "analysis")
    out.mkdir(parents=True, exist_ok=True)
    analysis.save_analysis(diag, out)
    write_manifest(out, "analyze", {"checkpoint": args.checkpoint,
                                    "bench": args.bench}, None,
                   args.config, started)
    print(f"analysis written to {out}")
    for name, getter in _COMPARE_ROWS:
        print(f"{name}: {getter(diag):.6f}")
    return EXIT_OK


def cmd_suite(args) -> int:
    bundle = _load_bundle(args.bench)
    cfg = _train_config(apply_sets(load_config_file(args.config), args.set),
                        args)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    started = _now()
    out = fresh_dir(Path(args.out))
    out.mkdir(parents=True, exist_ok=True)
    try:
        table = train.run_ablation_suite(bundle, cfg, seeds, out / "ablation")
        sweep = train.run_lambda_sweep(bundle, cfg, seeds=seeds,
                                       out_dir=out / "lambda")
        _consolidate_thresholds(out / "ablation", seeds, out)
    except Exception as exc:  # partial results stay on disk for inspection
        (out / "FAILED").write_text(f"{type(exc).__name__}: {exc}\n")
        raise
    write_manifest(out, "suite", cfg.to_dict(), list(seeds),
                   args.config, started)
    print(f"suite written to {out}")
    print(f"{'variant':<20}{'acc mean±std':>18}{'H mean±std':>18}")
    for row in table["rows"]:
        print(f"{row['variant']:<20}"
              f"{row['acc_mean']:>10.4f}±{row['acc_std']:.4f}"
              f"{row['h_mean']:>11.4f}±{row['h_std']:.4f}")
    for row in sweep["rows"]:
        print(f"lambda_hr={row['lambda_hr']:<11}"
              f"{row['acc_mean']:>10.4f}±{row['acc_std']:.4f}"
              f"{row['h_mean']:>11.4f}±{row['h_std']:.4f}")
    return EXIT_OK


def _consolidate_thresholds(ablation_dir: Path, seeds, out: Path) -> None:
    """One CSV of per-threshold rows across every variant/seed run."""
    lines = ["variant,seed,threshold,acc_known_thresholded,acc_open,h_score"]
    for variant in train.ABLATION_ORDER:
        for seed in seeds:
            sweep = ablation_dir / f"{variant.value}_seed{seed}" / "eval_sweep.csv"
            rows = sweep.read_text().strip().splitlines()[1:]
            lines.extend(f"{variant.value},{seed},{row}" for row in rows)
    (out / "thresholds.csv").write_text("\n".join(lines) + "\n")


# -------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rpf",
        description="Open-domain-generalization lab: generate benchmarks, "
                    "train regularized fine-tuning variants, evaluate "
                    "open-set performance.")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")

    g = sub.add_parser("generate", help="write a synthetic benchmark")
    common(g)
    g.add_argument("--preset", help="class-split preset (default pacs-like)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="run one training variant end to end")
    common(t)
    t.add_argument("--bench", required=True, help="benchmark directory")
    t.add_argument("--variant", choices=[v.value for v in train.ABLATION_ORDER])
    t.add_argument("--seed", type=int)
    t.add_argument("--lambda-hr", type=float, dest="lambda_hr")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="threshold sweep for a checkpoint")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--bench", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("analyze", help="feature/head diagnostics for a "
                                       "checkpoint, or compare two")
    common(a)
    a.add_argument("--checkpoint")
    a.add_argument("--compare", nargs=2, metavar=("A", "B"))
    a.add_argument("--bench", required=True)
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("suite", help="ablation battery plus lambda sweep")
    common(s)
    s.add_argument("--bench", required=True)
    s.add_argument("--seeds", default="0,1,2",
                   help="comma-separated seed list")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_suite)
    return parser


def _setup_logging() -> None:
    wanted = os.environ.get("RPF_LOG", "").lower()
    level = {"debug": logging.DEBUG, "info": logging.INFO}.get(
        wanted, logging.WARNING)
    logging.basicConfig(level=level,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"run 'rpf {args.command} --help' for usage", file=sys.stderr)
        return EXIT_USAGE
    except ckpt.CheckpointFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except train.DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

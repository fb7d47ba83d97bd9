"""Command-line entry point.

Every command writes its primary output to ``--out``, prints reporting JSON
to stdout (diagnostics go to stderr) and leaves a run manifest next to the
output: ``<out>.manifest.json``, or ``manifest.json`` inside the directory
written by ``synth``.

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .autodiff import ShapeError
from .container import ContainerError
from .evaluation import HistoricalAverage, evaluate_samples, rolling_evaluate
from .grid import (DemandSeries, FactorSeries, GridSpec, build_samples, encode_external_factors,
                   rasterize_trips, read_pois_json, read_trips_csv, split_dataset)
from .model import StefConfig, init_params, load_checkpoint, save_checkpoint
from .synth import SynthConfig, generate
from .training import TrainConfig, TrainingError, train

logger = logging.getLogger("stefnet")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
DEFAULT_SPLIT = (0.65, 0.15, 0.20)
DEFAULT_WINDOW = 168


class UsageError(Exception):
    """Bad arguments or inputs; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command, config, inputs, seed, outputs, wall_time) -> None:
    manifest = {
        "command": command,
        "config": config,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "seed": seed,
        "version": __version__,
        "outputs": [str(p) for p in outputs],
        "wall_time": wall_time,
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_json(path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: malformed JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return data


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2) + "\n")
    sys.stdout.flush()


def _parse_split(text) -> tuple[float, float, float]:
    parts = [p for p in str(text).replace(",", " ").split() if p]
    try:
        vals = tuple(float(p) for p in parts)
    except ValueError as exc:
        raise UsageError(f"bad --split-ratios {text!r}") from exc
    if len(vals) != 3:
        raise UsageError(f"--split-ratios needs three numbers, got {text!r}")
    if sum(vals) > 1.5:            # accept percentages
        vals = tuple(v / 100.0 for v in vals)
    return vals


def _load_dataset(args):
    demand = DemandSeries.load(args.demand)
    factors = FactorSeries.load(args.factors)
    if demand.grid != factors.grid or demand.T != factors.T or demand.start_time != factors.start_time:
        raise UsageError("demand and factor files describe different grids or time ranges")
    return demand, factors


def _manifest_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".manifest.json")


# --- commands ----------------------------------------------------------------

def cmd_synth(args) -> tuple[dict, list, list, dict]:
    cfg_dict = _load_json(args.config) if args.config else {}
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    cfg = SynthConfig.from_dict(cfg_dict)
    ds = generate(cfg)
    out = Path(args.out)
    paths = ds.save(out)
    report = {"out": str(out), "T": cfg.T, "W": cfg.W, "H": cfg.H, "M": cfg.M,
              "pois": len(ds.pois), "total_demand": int(ds.demand.counts.sum())}
    inputs = [args.config] if args.config else []
    return report, inputs, list(paths.values()), cfg.to_dict()


def cmd_rasterize(args):
    grid = GridSpec.from_json(args.grid)
    trips = read_trips_csv(args.trips)
    if not trips:
        logger.warning("%s has no trip rows; writing an all-zero series", args.trips)
    series, dropped = rasterize_trips(trips, grid, args.start, args.hours)
    series.save(args.out)
    report = {"out": str(args.out), "trips": len(trips), "rasterized": len(trips) - dropped,
              "dropped": dropped}
    config = {"grid": grid.to_dict(), "start": args.start, "hours": args.hours}
    return report, [args.trips, args.grid], [args.out], config


def cmd_encode_factors(args):
    grid = GridSpec.from_json(args.grid)
    pois = read_pois_json(args.pois)
    M = args.factors if args.factors is not None else (max((p.factor_index for p in pois), default=0) + 1)
    series, skipped = encode_external_factors(pois, grid, args.start, args.hours, M)
    series.save(args.out)
    report = {"out": str(args.out), "pois": len(pois), "skipped": skipped, "M": M}
    config = {"grid": grid.to_dict(), "start": args.start, "hours": args.hours, "M": M}
    return report, [args.pois, args.grid], [args.out], config


def _train_settings(args, demand, factors) -> tuple[StefConfig, TrainConfig, tuple, int]:
    file_cfg = _load_json(args.config) if args.config else {}
    unknown = set(file_cfg) - {"model", "train", "split_ratios", "window"}
    if unknown:
        raise UsageError(f"unknown training config keys: {sorted(unknown)}")
    model_kw = dict(file_cfg.get("model", {}))
    train_kw = dict(file_cfg.get("train", {}))
    for key in ("W", "H", "M"):
        model_kw.pop(key, None)
    for flag, key in (("L", "L"), ("K", "K"), ("d", "d"), ("u", "u"), ("input_scale", "input_scale")):
        if getattr(args, flag) is not None:
            model_kw[key] = getattr(args, flag)
    for flag in ("learning_rate", "batch_size", "max_epochs", "early_stop_patience"):
        if getattr(args, flag) is not None:
            train_kw[flag] = getattr(args, flag)
    seed = args.seed if args.seed is not None else int(train_kw.get("seed", 0))
    train_kw["seed"] = seed
    try:
        model_cfg = StefConfig(W=demand.grid.width, H=demand.grid.height, M=factors.M, **model_kw)
        train_cfg = TrainConfig(**train_kw)
    except TypeError as exc:
        raise UsageError(f"bad training config: {exc}") from exc
    split = _parse_split(args.split_ratios) if args.split_ratios else tuple(file_cfg.get("split_ratios", DEFAULT_SPLIT))
    window = args.window if args.window is not None else int(file_cfg.get("window", DEFAULT_WINDOW))
    return model_cfg, train_cfg, split, window


def cmd_train(args):
    demand, factors = _load_dataset(args)
    model_cfg, train_cfg, split_ratios, window = _train_settings(args, demand, factors)
    split = split_dataset(build_samples(demand, factors, model_cfg.L), split_ratios, window)
    logger.info("training on %d samples, validating on %d", len(split.train), len(split.validation))
    best, report = train(init_params(model_cfg, train_cfg.seed), split.train, split.validation, train_cfg)
    save_checkpoint(best, args.out, trained_epochs=best.trained_epochs)
    report_path = Path(args.out).with_name(Path(args.out).name + ".report.json")
    report.to_json(report_path)
    config = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(),
              "split_ratios": list(split_ratios), "window": window}
    return report.to_dict(), [args.demand, args.factors] + ([args.config] if args.config else []), \
        [args.out, report_path], config


def cmd_evaluate(args):
    demand, factors = _load_dataset(args)
    split_ratios = _parse_split(args.split_ratios) if args.split_ratios else DEFAULT_SPLIT
    if args.baseline:
        params, L = None, args.L or 4
    else:
        if not args.checkpoint:
            raise UsageError("evaluate needs --checkpoint (or --baseline)")
        params = load_checkpoint(args.checkpoint)
        L = params.config.L
        _check_compatible(params.config, demand, factors)
    split = split_dataset(build_samples(demand, factors, L), split_ratios, args.window)
    samples = {"train": split.train, "validation": split.validation, "test": split.test,
               "rolling": split.rolling}[args.split]
    if args.baseline:
        n_fit = int(split.train.target_index[-1]) + 1
        model = HistoricalAverage(demand.slice(0, n_fit))
    else:
        model = params
    report = evaluate_samples(model, samples, dataset_tag=args.split, mape_mode=args.mape_mode)
    report.to_json(args.out)
    inputs = [args.demand, args.factors] + ([args.checkpoint] if args.checkpoint and not args.baseline else [])
    config = {"split": args.split, "split_ratios": list(split_ratios), "baseline": args.baseline,
              "L": L, "mape_mode": args.mape_mode}
    return report.to_dict(), inputs, [args.out], config


def cmd_roll(args):
    demand, factors = _load_dataset(args)
    params = load_checkpoint(args.checkpoint)
    _check_compatible(params.config, demand, factors)
    try:
        result = rolling_evaluate(params, demand, factors, args.window, mape_mode=args.mape_mode)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    result.report.to_json(args.out)
    trace = Path(args.trace) if args.trace else Path(args.out).with_suffix(".trace.csv")
    result.write_trace_csv(trace)
    config = {"window": args.window, "start": demand.T - args.window, "mape_mode": args.mape_mode}
    return result.report.to_dict(), [args.checkpoint, args.demand, args.factors], [args.out, trace], config


def _check_compatible(cfg: StefConfig, demand, factors) -> None:
    if (cfg.W, cfg.H, cfg.M) != (demand.grid.width, demand.grid.height, factors.M):
        raise UsageError(f"checkpoint expects W={cfg.W}, H={cfg.H}, M={cfg.M}; dataset has "
                         f"W={demand.grid.width}, H={demand.grid.height}, M={factors.M}")


COMMANDS = {
    "synth": cmd_synth, "rasterize": cmd_rasterize, "encode-factors": cmd_encode_factors,
    "train": cmd_train, "evaluate": cmd_evaluate, "roll": cmd_roll,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stefnet", description="Grid demand forecasting pipeline.")
    p.add_argument("--version", action="version", version=f"stefnet {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more log output on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config_help="JSON config file"):
        sp.add_argument("--out", required=True, help="output path")
        sp.add_argument("--config", help=config_help)
        sp.add_argument("--seed", type=int, help="random seed (overrides the config)")
        return sp

    common(sub.add_parser("synth", help="generate a synthetic city"), "SynthConfig JSON")

    for name, src, helptext in (("rasterize", "--trips", "trips CSV"),
                                ("encode-factors", "--pois", "POI JSON")):
        sp = common(sub.add_parser(name, help=f"{helptext} -> container"))
        sp.add_argument(src, required=True, help=helptext)
        sp.add_argument("--grid", required=True, help="GridSpec JSON")
        sp.add_argument("--start", required=True, help="first slot, ISO-8601 UTC")
        sp.add_argument("--hours", type=int, required=True, help="number of slots T")
        if name == "encode-factors":
            sp.add_argument("--factors", type=int, help="factor count M (default: max index + 1)")

    def dataset(sp):
        sp.add_argument("--demand", required=True, help="demand container")
        sp.add_argument("--factors", required=True, help="factor container")
        sp.add_argument("--split-ratios", help="train,validation,test (default 0.65,0.15,0.20)")

    sp = common(sub.add_parser("train", help="fit a model"), "training JSON: {model, train, split_ratios, window}")
    dataset(sp)
    sp.add_argument("--learning-rate", type=float)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--max-epochs", type=int)
    sp.add_argument("--patience", dest="early_stop_patience", type=int)
    sp.add_argument("--window", type=int, help="rolling window reserved at the end of test")
    for flag, typ in (("L", int), ("K", int), ("d", int), ("u", int)):
        sp.add_argument(f"--{flag}", dest=flag, type=typ)
    sp.add_argument("--input-scale", type=float)

    sp = common(sub.add_parser("evaluate", help="one-step metrics on a split"))
    dataset(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--split", choices=["train", "validation", "test", "rolling"], default="test")
    sp.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    sp.add_argument("--baseline", action="store_true", help="score the historical average instead")
    sp.add_argument("--L", type=int, help="lag count for --baseline sample construction")
    sp.add_argument("--mape-mode", choices=["elementwise", "weighted"], default="elementwise")

    sp = common(sub.add_parser("roll", help="rolling evaluation with prediction feedback"))
    dataset(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    sp.add_argument("--trace", help="per-step CSV (default: <out>.trace.csv)")
    sp.add_argument("--mape-mode", choices=["elementwise", "weighted"], default="elementwise")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    t0 = time.perf_counter()
    try:
        report, inputs, outputs, config = COMMANDS[args.command](args)
    except (UsageError, ValueError, ShapeError, ContainerError, KeyError, FileNotFoundError) as exc:
        print(f"stefnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, OSError, RuntimeError, MemoryError) as exc:
        print(f"stefnet {args.command}: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    wall = time.perf_counter() - t0
    manifest = Path(args.out) / "manifest.json" if args.command == "synth" else _manifest_path(args.out)
    write_manifest(manifest, args.command, config, inputs, getattr(args, "seed", None), outputs, wall)
    _emit(report)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

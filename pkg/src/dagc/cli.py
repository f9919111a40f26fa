"""Command-line orchestration: config parsing, runs, presets, comparisons.

No numerical logic lives here; this layer only wires configs into the
solver and simulator modules and formats their outputs.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

try:
    import tomllib as toml_reader
except ImportError:  # Python < 3.11
    import tomli as toml_reader

from .alloc import WeightVector, dagc_a, dagc_r
from .errors import BudgetInfeasibleError, ConfigError, DagcError
from .train import TrainConfig, resolve_allocation, resolve_weights, run_dsgd

__all__ = [
    "parse_config",
    "run_command",
    "compare_command",
    "main",
]

_CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_BUDGET = 2
EXIT_IO = 3


# ---------------------------------------------------------------------------
# Config file handling


def _flatten(doc: dict) -> dict:
    flat = {}
    for key, value in doc.items():
        if isinstance(value, dict):  # one table level allowed, keys stay leaf-named
            for sub, subval in value.items():
                if isinstance(subval, dict):
                    raise ConfigError(f"nested table not allowed under [{key}]")
                flat[sub] = subval
        else:
            flat[key] = value
    return flat


def parse_config(path) -> TrainConfig:
    """Load and validate a flat TOML config; unknown keys are rejected."""
    with open(path, "rb") as fh:
        try:
            doc = toml_reader.load(fh)
        except toml_reader.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    flat = _flatten(doc)
    for key in flat:
        if key not in _CONFIG_FIELDS:
            raise ConfigError(f"unknown config key: {key!r}")
    return TrainConfig(**flat).validate()


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    return json.dumps(str(value))


def resolved_config_toml(config: TrainConfig) -> str:
    """The fully defaulted config as a flat TOML document."""
    lines = []
    for name in _CONFIG_FIELDS:
        value = getattr(config, name)
        if value is None:
            continue
        lines.append(f"{name} = {_toml_value(value)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# run


def _allocation_json(config: TrainConfig) -> str:
    w = resolve_weights(config)
    kind, values = resolve_allocation(config, w)
    payload = {
        "strategy": config.strategy,
        "kind": kind,
        "weights": list(w.weights),
        "values": values,
        "mean": config.mean_ratio if kind == "ratio" else config.mean_threshold,
        "realized_skew_ratio": w.skew_ratio,
        "seed": config.seed,
    }
    return json.dumps(payload, indent=2)


def _execute_single(config: TrainConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "allocation.json").write_text(_allocation_json(config))
    (out_dir / "config.resolved.toml").write_text(resolved_config_toml(config))
    metrics = run_dsgd(config)
    (out_dir / "metrics.csv").write_text(metrics.to_csv())


def run_command(config: TrainConfig, out_dir, seeds: int = 1) -> int:
    """Run one config (optionally expanded over derived seeds) into out_dir."""
    out = Path(out_dir)
    try:
        if seeds <= 1:
            _execute_single(config, out)
        else:
            derived = [config.seed + i for i in range(seeds)]
            out.mkdir(parents=True, exist_ok=True)
            (out / "seeds.json").write_text(json.dumps({"derived_seeds": derived}))
            for s in derived:
                sub = dataclasses.replace(config, seed=s)
                _execute_single(sub, out / f"seed_{s}")
    except BudgetInfeasibleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DagcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


# ---------------------------------------------------------------------------
# presets


def _motivating_configs(seed: int) -> dict[str, TrainConfig]:
    base = dict(
        dataset="synthetic",
        num_samples=5000,
        num_features=50,
        num_classes=10,
        workers=11,
        p_large=0.5,
        model="softmax_regression",
        learning_rate=0.5,
        batch_size=32,
        iterations=2000,
        eval_interval=50,
        seed=seed,
    )
    big, small, mean = 0.01, 0.0001, 0.001
    return {
        "scheme1": TrainConfig(
            strategy="manual", manual_ratios=[big] + [small] * 10, **base
        ),
        "uniform": TrainConfig(strategy="uniform_topk", mean_ratio=mean, **base),
        "scheme2": TrainConfig(
            strategy="manual", manual_ratios=[small] + [0.0011] * 10, **base
        ),
    }


def _sweep_sr_configs(seed: int) -> dict[str, TrainConfig]:
    configs = {}
    for sr in (10, 100, 1000):
        for strategy in ("dagc_r", "uniform_topk", "accordion_r"):
            configs[f"sr{sr}_{strategy}"] = TrainConfig(
                dataset="synthetic",
                num_samples=5000,
                num_features=50,
                num_classes=10,
                workers=10,
                skew_ratio=float(sr),
                strategy=strategy,
                mean_ratio=0.001,
                model="softmax_regression",
                learning_rate=0.5,
                batch_size=32,
                iterations=2000,
                eval_interval=50,
                seed=seed,
            )
    return configs


PRESETS = {
    "motivating-logistic": _motivating_configs,
    "sweep-sr": _sweep_sr_configs,
}


def preset_command(name: str, out_dir, seeds: int = 1, seed: int = 0) -> int:
    if name not in PRESETS:
        print(f"error: unknown preset {name!r}", file=sys.stderr)
        return EXIT_ERROR
    for run_name, config in PRESETS[name](seed).items():
        status = run_command(config, Path(out_dir) / run_name, seeds=seeds)
        if status != EXIT_OK:
            return status
    return EXIT_OK


# ---------------------------------------------------------------------------
# compare


def _run_name(path: Path) -> str:
    return path.parent.name if path.name == "metrics.csv" else path.stem


def _first_iteration_reaching(path: Path, target: float):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "iter" not in reader.fieldnames:
            raise ConfigError(f"{path}: malformed CSV header (line 1)")
        for lineno, row in enumerate(reader, start=2):
            try:
                it, acc = int(row["iter"]), float(row["acc"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"{path}: malformed CSV (line {lineno})") from exc
            if acc >= target:
                return it
    return None


def compare_command(csv_paths, target_accuracy: float, baseline: str) -> dict:
    """Iterations-to-target table with savings relative to a named baseline."""
    if len(csv_paths) < 2:
        raise ConfigError("compare needs at least 2 csv files")
    reached = {
        _run_name(Path(p)): _first_iteration_reaching(Path(p), target_accuracy)
        for p in csv_paths
    }
    if baseline not in reached:
        raise ConfigError(
            f"baseline {baseline!r} not among runs {sorted(reached)}"
        )
    base_iter = reached[baseline]
    table = {}
    for name, it in reached.items():
        if it is None:
            savings = None
        elif base_iter is None:
            savings = None  # baseline never reached the target
        else:
            savings = 100.0 * (base_iter - it) / base_iter
        table[name] = {"first_iteration": it, "savings_vs_baseline_pct": savings}
    return table


def _print_compare_table(table: dict, target: float, baseline: str) -> None:
    print(f"target accuracy: {target}  baseline: {baseline}")
    width = max(len(name) for name in table)
    for name, row in sorted(table.items()):
        it = row["first_iteration"]
        it_text = "not reached" if it is None else str(it)
        sv = row["savings_vs_baseline_pct"]
        sv_text = "undefined" if sv is None else f"{sv:+.2f}%"
        print(f"  {name:<{width}}  {it_text:>12}  {sv_text}")


# ---------------------------------------------------------------------------
# alloc / alloc-a


def _load_weights(spec: str) -> WeightVector:
    path = Path(spec)
    if path.exists():
        text = path.read_text()
    else:
        text = spec
    values = [float(tok) for tok in text.replace(",", " ").split()]
    return WeightVector(values)


def alloc_command(weights_spec: str, mean_ratio: float) -> int:
    try:
        w = _load_weights(weights_spec)
        allocation = dagc_r(w, mean_ratio)
    except BudgetInfeasibleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (DagcError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    print(
        json.dumps(
            {
                "kind": "ratio",
                "weights": list(w.weights),
                "values": list(allocation.ratios),
                "mean": mean_ratio,
                "realized_skew_ratio": w.skew_ratio,
            },
            indent=2,
        )
    )
    return EXIT_OK


def alloc_a_command(weights_spec: str, mean_threshold: float) -> int:
    try:
        w = _load_weights(weights_spec)
        allocation = dagc_a(w, mean_threshold)
    except (DagcError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    print(
        json.dumps(
            {
                "kind": "threshold",
                "weights": list(w.weights),
                "values": list(allocation.thresholds),
                "mean": mean_threshold,
                "realized_skew_ratio": w.skew_ratio,
            },
            indent=2,
        )
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="dagc",
        description="Data-aware gradient compression: allocators and simulator.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a training run or preset")
    p_run.add_argument("--config", help="TOML config path")
    p_run.add_argument("--preset", choices=sorted(PRESETS), help="built-in experiment")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--seeds", type=int, default=1, help="derived-seed run count")
    p_run.add_argument("--seed", type=int, default=0, help="master seed for presets")

    p_cmp = sub.add_parser("compare", help="iterations-to-target comparison")
    p_cmp.add_argument("--target", type=float, required=True)
    p_cmp.add_argument("--baseline", required=True)
    p_cmp.add_argument("csvs", nargs="+")

    p_alloc = sub.add_parser("alloc", help="print a ratio allocation")
    p_alloc.add_argument("--weights", required=True, help="list or file of weights")
    p_alloc.add_argument("--mean-ratio", type=float, required=True)

    p_alloc_a = sub.add_parser("alloc-a", help="print a threshold allocation")
    p_alloc_a.add_argument("--weights", required=True)
    p_alloc_a.add_argument("--mean-threshold", type=float, required=True)

    args = parser.parse_args(argv)

    if args.command == "run":
        if bool(args.config) == bool(args.preset):
            print("error: give exactly one of --config or --preset", file=sys.stderr)
            return EXIT_ERROR
        if args.preset:
            return preset_command(args.preset, args.out, seeds=args.seeds, seed=args.seed)
        try:
            config = parse_config(args.config)
        except (ConfigError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO if isinstance(exc, OSError) else EXIT_ERROR
        return run_command(config, args.out, seeds=args.seeds)

    if args.command == "compare":
        try:
            table = compare_command(args.csvs, args.target, args.baseline)
        except (ConfigError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO if isinstance(exc, OSError) else EXIT_ERROR
        _print_compare_table(table, args.target, args.baseline)
        return EXIT_OK

    if args.command == "alloc":
        return alloc_command(args.weights, args.mean_ratio)
    return alloc_a_command(args.weights, args.mean_threshold)


if __name__ == "__main__":
    sys.exit(main())

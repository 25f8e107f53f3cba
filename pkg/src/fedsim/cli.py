"""Command-line runner: ``fedsim run | compare | gradcheck | list``.

Exit codes: 0 success, 1 gradcheck failure, 2 invalid config,
3 divergence, 4 file or data IO problem.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, build_dataset, load_config
from .engine import SCHEMA_VERSION, default_workers, metrics_jsonl, run_federation
from .errors import DataError, DivergenceError
from .gradcheck import FAMILY_SPECS, run_gradcheck
from .strategies import REGISTRY, build_strategy, strategy_names

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3, 4


def _err(msg: str) -> None:
    print(f"fedsim: {msg}", file=sys.stderr)


def execute(cfg: ExperimentConfig, workers: int = 1, base_dir=None):
    """Build data and strategy, run, return ``(dataset, final_state, records)``."""
    dataset = build_dataset(cfg, base_dir)
    fed = cfg.federation_config(workers)
    strategy = build_strategy(fed.strategy, fed.strategy_params)
    state, records = run_federation(fed, dataset, strategy)
    return dataset, state, records


def summarize(cfg: ExperimentConfig, dataset, state, records) -> dict:
    last = records[-1]
    target = cfg.engine.get("target_loss")
    hit = next((r.round for r in records if target is not None and r.mean_train_loss <= target), None)
    summary = {
        "schema_version": SCHEMA_VERSION,
        "strategy": cfg.strategy["name"],
        "seed": cfg.seed,
        "dataset_fingerprint": dataset.fingerprint(),
        "rounds_run": len(records),
        "final": {
            "train_loss": last.train_loss,
            "test_loss": last.test_loss,
            "train_acc": last.train_acc,
            "test_acc": last.test_acc,
            "mean_train_loss": last.mean_train_loss,
            "mean_test_loss": last.mean_test_loss,
            "loss_variance": last.loss_variance,
            "param_norm": last.param_norm,
        },
        "rounds_to_target": hit,
        "floats_uplink_total": sum(r.floats_uplink for r in records),
        "floats_downlink_total": sum(r.floats_downlink for r in records),
        "final_params": state.w.values.tolist(),
        "config": cfg.to_dict(),
    }
    optimum = dataset.truth.get("optimum")
    if optimum is not None and state.w.dim == 1:
        summary["dist_to_optimum"] = abs(float(state.w.values[0]) - optimum)
    return summary


def curves_csv(records) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["schema_version", "round", "mean_train_loss", "mean_test_loss", "loss_variance",
                     "mean_test_acc", "floats_uplink", "floats_downlink"])
    for r in records:
        acc = "" if r.test_acc is None else repr(float(np.mean(r.test_acc)))
        writer.writerow([SCHEMA_VERSION, r.round, repr(r.mean_train_loss), repr(r.mean_test_loss),
                         repr(r.loss_variance), acc, r.floats_uplink, r.floats_downlink])
    return buf.getvalue()


def _load(path, overrides, seed) -> ExperimentConfig:
    cfg = load_config(path)
    if overrides or seed is not None:
        cfg = cfg.with_overrides(overrides, seed)
    return cfg


def _guarded(fn):
    """Map library exceptions onto the documented exit codes."""
    try:
        return fn()
    except DivergenceError as exc:
        _err(f"diverged: {exc}")
        return EXIT_DIVERGED
    except (OSError, DataError) as exc:
        _err(f"io error: {exc}")
        return EXIT_IO
    except ValueError as exc:  # ConfigError, StructuralError, DomainError
        _err(f"invalid config: {exc}")
        return EXIT_CONFIG


def cmd_run(config_path, overrides=None, *, seed=None, out=None, workers=None) -> int:
    def go():
        cfg = _load(config_path, overrides, seed)
        base = Path(config_path).resolve().parent
        dataset, state, records = execute(cfg, workers or default_workers(), base)
        out_dir = Path(out if out is not None else cfg.output["dir"])
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.jsonl").write_text(metrics_jsonl(records, cfg.output["include_timing"]), encoding="utf-8")
        summary = summarize(cfg, dataset, state, records)
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        if cfg.output["curves"]:
            (out_dir / "curves.csv").write_text(curves_csv(records), encoding="utf-8")
        print(f"{cfg.strategy['name']}: {len(records)} rounds, final mean test loss "
              f"{records[-1].mean_test_loss:.6g}, outputs in {out_dir}")
        return EXIT_OK

    return _guarded(go)


COMPARE_COLUMNS = ["config", "strategy", "final_mean_loss", "loss_variance", "rounds_to_target",
                   "floats_uplink", "floats_downlink", "floats_total", "dist_to_optimum"]


def compare_rows(config_paths, overrides=None, seed=None, workers=1) -> list[dict]:
    rows = []
    for path in config_paths:
        cfg = _load(path, overrides, seed)
        dataset, state, records = execute(cfg, workers, Path(path).resolve().parent)
        s = summarize(cfg, dataset, state, records)
        rows.append({
            "config": str(path),
            "strategy": s["strategy"],
            "final_mean_loss": repr(s["final"]["mean_test_loss"]),
            "loss_variance": repr(s["final"]["loss_variance"]),
            "rounds_to_target": "" if s["rounds_to_target"] is None else s["rounds_to_target"],
            "floats_uplink": s["floats_uplink_total"],
            "floats_downlink": s["floats_downlink_total"],
            "floats_total": s["floats_uplink_total"] + s["floats_downlink_total"],
            "dist_to_optimum": repr(s["dist_to_optimum"]) if "dist_to_optimum" in s else "",
        })
    return rows


def cmd_compare(config_paths, overrides=None, *, seed=None, out=None, workers=None) -> int:
    def go():
        rows = compare_rows(config_paths, overrides, seed, workers or default_workers())
        buf = io.StringIO()
        writer = csv.DictWriter(buf, COMPARE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        text = buf.getvalue()
        if out is not None:
            Path(out).parent.mkdir(parents=True, exist_ok=True)
            Path(out).write_text(text, encoding="utf-8")
        sys.stdout.write(text)
        return EXIT_OK

    return _guarded(go)


def cmd_gradcheck(families=None, trials: int = 100, seed: int = 0, gradient_fn=None) -> int:
    try:
        report = run_gradcheck(families, trials, seed, gradient_fn)
    except KeyError as exc:
        _err(str(exc.args[0]))
        return EXIT_CONFIG
    for line in report.lines():
        print(line)
    if report.passed:
        print(f"gradcheck passed ({trials} trials per family)")
        return EXIT_OK
    for fam, op, err in report.failures:
        _err(f"gradcheck failed: {op} on {fam} (relative error {err:.3e})")
    return EXIT_CHECK


def list_lines() -> list[str]:
    lines = []
    for name in strategy_names():
        cls = REGISTRY[name]
        hp = ", ".join(f"{k}={v!r}" for k, v in sorted(cls.defaults.items())) or "-"
        lines.append(f"{name:12s} [{cls.family}] {cls.summary}; params: {hp}")
    return lines


def cmd_list() -> int:
    for line in list_lines():
        print(line)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedsim", description="Deterministic federated-learning simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out", default=None, help="output directory (run) or CSV file (compare)")
        sp.add_argument("--workers", type=int, default=None, help="client-update threads (default $FEDSIM_WORKERS or 1)")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. engine.rounds=50 or strategy.params.mu=0.1")

    run = sub.add_parser("run", help="run one experiment config")
    run.add_argument("config")
    common(run)

    cmp_ = sub.add_parser("compare", help="run several configs and print a CSV comparison")
    cmp_.add_argument("configs", nargs="+")
    common(cmp_)

    gc = sub.add_parser("gradcheck", help="finite-difference checks of all derivatives")
    gc.add_argument("--family", action="append", choices=sorted(FAMILY_SPECS), default=None)
    gc.add_argument("--trials", type=int, default=100)
    gc.add_argument("--seed", type=int, default=0)

    sub.add_parser("list", help="list registered strategies and their hyperparameters")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if args.command == "run":
        return cmd_run(args.config, args.overrides, seed=args.seed, out=args.out, workers=args.workers)
    if args.command == "compare":
        return cmd_compare(args.configs, args.overrides, seed=args.seed, out=args.out, workers=args.workers)
    if args.command == "gradcheck":
        return cmd_gradcheck(args.family, args.trials, args.seed)
    return cmd_list()


if __name__ == "__main__":
    sys.exit(main())

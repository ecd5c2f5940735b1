"""``robust-hedge`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from robust_hedge.attack import AttackSpec, run_attack, write_trace
from robust_hedge.config import ConfigError, ExperimentConfig, config_from_dict, load_config
from robust_hedge.evaluation import evaluate_strategy
from robust_hedge.market_sim import load_batch, save_batch, simulate
from robust_hedge.pipeline import REPORT_KINDS, PipelineError, build_report, run_pipeline
from robust_hedge.prices import DEFAULT_WINDOW, PriceDataError, import_price_csv
from robust_hedge.training import (
    TrainingError,
    hyperparam_search,
    load_strategy,
    save_strategy,
    train_adversarial,
    train_clean,
)


def _config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        return load_config(args.config)
    return config_from_dict({"model": {"kind": getattr(args, "model", None) or "bs"}})


def _p_value(text: str) -> float:
    return math.inf if text.lower() in ("inf", "infinity") else float(text)


def _tracks(text: str) -> tuple[str, ...]:
    key = text.lower()
    if key == "s":
        return ("S",)
    if key == "sv":
        return ("S", "v")
    return tuple(t.strip() for t in text.split(","))


def cmd_simulate(args) -> int:
    cfg = _config(args)
    n = args.n if args.n is not None else cfg.train.n_train
    seed = args.seed if args.seed is not None else cfg.seeds.data
    batch = simulate(cfg.model_spec(), n, seed, getattr(cfg.model, "interval_mode", False))
    print(save_batch(batch, args.out))
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    data = load_batch(args.data)
    val = load_batch(args.val) if args.val else None
    tcfg = cfg.train_config(n_train=data.n_samples)
    if args.mode == "clean":
        strategy = train_clean(tcfg, data, val)
    else:
        strategy = train_adversarial(tcfg, data, val)
    print(save_strategy(strategy, args.out))
    return 0


def _load_grid(text: str) -> list[tuple[float, float]]:
    path = Path(text)
    raw = json.loads(path.read_text() if path.exists() else text)
    if isinstance(raw, dict):
        return [(float(a), float(d)) for a in raw["alpha"] for d in raw["delta"]]
    return [(float(a), float(d)) for a, d in raw]


def cmd_search(args) -> int:
    cfg = _config(args)
    data = load_batch(args.data)
    val = load_batch(args.val)
    grid = _load_grid(args.grid) if args.grid else None
    res = hyperparam_search(cfg.train_config(n_train=data.n_samples), data, val, grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_strategy(res.strategy, out / "best.rhnn")
    summary = {"alpha": res.alpha, "delta": res.delta, "grid": res.table}
    (out / "search.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps({"alpha": res.alpha, "delta": res.delta}))
    return 0


def cmd_attack(args) -> int:
    strategy = load_strategy(args.checkpoint)
    data = load_batch(args.data)
    spec = AttackSpec(
        method=args.method,
        delta=args.delta,
        p=_p_value(args.p),
        iterations=args.iters,
        beta=args.beta,
        tracks=_tracks(args.tracks),
        projection=args.projection,
    )
    cfg = strategy.config
    res = run_attack(strategy.net, data, cfg.payoff, cfg.cost, cfg.risk_measure, spec, strategy.omega)
    save_batch(res.batch, args.out)
    if args.trace:
        write_trace(res, args.trace)
    print(json.dumps({"distance": res.distance, "final_loss": res.final_loss, "noop": res.noop}))
    return 0


def cmd_evaluate(args) -> int:
    strategy = load_strategy(args.checkpoint)
    data = load_batch(args.data)
    risk = evaluate_strategy(strategy, data)
    out = {"risk": risk, "n_samples": data.n_samples, "config_hash": strategy.provenance.get("config_hash")}
    if args.json:
        Path(args.json).write_text(json.dumps(out, indent=2))
    print(json.dumps(out))
    return 0


def cmd_report(args) -> int:
    cfg = _config(args)
    run_dir = Path(args.run_dir or cfg.output_dir)
    report = build_report(cfg, run_dir, args.kind)
    report.validate()
    out = Path(args.out) if args.out else run_dir / "reports" / args.kind
    for path in report.write(out):
        print(path)
    return 0


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    manifest = run_pipeline(cfg, args.out, args.workers)
    run_dir = Path(args.out or cfg.output_dir)
    print(run_dir / "manifest.json")
    print(json.dumps({"artifacts": len(manifest.artifacts), "stages": manifest.stages}))
    return 0


def cmd_import_csv(args) -> int:
    batch = import_price_csv(args.csv, args.scale_to, args.window, args.column)
    print(save_batch(batch, args.out))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="robust-hedge", description="Deep hedging under distributional attacks")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a path batch")
    p.add_argument("--config")
    p.add_argument("--model", choices=["bs", "heston", "gad"])
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a clean or adversarial strategy")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--mode", choices=["clean", "adv"], default="clean")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("search", help="grid search over (alpha, delta)")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--grid", help="JSON list of [alpha, delta] pairs, or a file holding it")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("attack", help="attack a strategy on a path batch")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=["wpgd", "wbpgd", "pgd"], default="wbpgd")
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--p", default="2")
    p.add_argument("--tracks", default="s")
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--beta", type=float)
    p.add_argument("--projection", choices=["shrink", "saturate"], default="shrink")
    p.add_argument("--out", required=True)
    p.add_argument("--trace")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", help="risk of a strategy on a path batch")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--json")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="recompute one report from a pipeline run")
    p.add_argument("--kind", choices=REPORT_KINDS, required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--run-dir")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pipeline", help="run simulate -> train -> report")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("import-csv", help="rolling windows from a price CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("--scale-to", type=float, default=10.0)
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    p.add_argument("--column")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_import_csv)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, PriceDataError, PipelineError, TrainingError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

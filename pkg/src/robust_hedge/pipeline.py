"""End-to-end experiment runs: simulate, train, attack/evaluate, report, manifest.

Every artifact is recorded in ``manifest.json`` with its SHA-256 and a recipe
key (a hash of everything that determines it).  A rerun skips an artifact when
the file on disk still matches both, so interrupted runs resume where they
stopped and identical configs reproduce identical hashes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from robust_hedge import __version__
from robust_hedge.config import ExperimentConfig, dumps_config
from robust_hedge.evaluation import EvalReport, attack_curve, diagnostics_report, ood_report, oos_report
from robust_hedge.market_sim import load_batch, perturb_params_ood, save_batch, simulate
from robust_hedge.training import (
    TrainedStrategy,
    continue_adversarial,
    hyperparam_search,
    load_strategy,
    partition_dataset,
    save_strategy,
    train_clean,
    train_with_snapshot,
)

THREADS_ENV = "ROBUST_HEDGE_THREADS"
REPORT_KINDS = ("attack-curve", "diag", "oos", "ood")


class PipelineError(RuntimeError):
    pass


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _recipe(*parts: Any) -> str:
    raw = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(raw).hexdigest()[:16]


def worker_count(requested: int) -> int:
    """Requested workers capped by ROBUST_HEDGE_THREADS when set."""
    cap = os.environ.get(THREADS_ENV)
    if cap:
        try:
            requested = min(requested, max(1, int(cap)))
        except ValueError:
            raise PipelineError(f"{THREADS_ENV} must be an integer, got {cap!r}") from None
    return max(1, requested)


def atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class RunManifest:
    config: dict[str, Any]
    artifacts: dict[str, dict[str, str]] = field(default_factory=dict)
    stages: dict[str, dict[str, Any]] = field(default_factory=dict)
    seeds: dict[str, Any] = field(default_factory=dict)
    version: str = __version__
    wall_clock: dict[str, float] = field(default_factory=dict)

    @property
    def hashes(self) -> dict[str, str]:
        return {k: v["sha256"] for k, v in sorted(self.artifacts.items())}

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> RunManifest:
        return cls(**json.loads(text))

    def verify(self, run_dir: str | Path) -> list[str]:
        """Artifacts whose file is missing or whose hash no longer matches."""
        run_dir = Path(run_dir)
        bad = []
        for rel, rec in sorted(self.artifacts.items()):
            p = run_dir / rel
            if not p.exists() or sha256_file(p) != rec["sha256"]:
                bad.append(rel)
        return bad


class _Run:
    def __init__(self, cfg: ExperimentConfig, run_dir: Path, workers: int):
        self.cfg = cfg
        self.dir = run_dir
        self.workers = workers
        self.previous: dict[str, dict[str, str]] = {}
        prev = run_dir / "manifest.json"
        if prev.exists():
            try:
                self.previous = json.loads(prev.read_text()).get("artifacts", {})
            except (json.JSONDecodeError, OSError):
                self.previous = {}
        self.manifest = RunManifest(config=cfg.to_plain())

    def fresh(self, rel: str, recipe: str) -> bool:
        rec = self.previous.get(rel)
        p = self.dir / rel
        return bool(rec) and rec.get("recipe") == recipe and p.exists() and sha256_file(p) == rec["sha256"]

    def record(self, rel: str, recipe: str) -> None:
        self.manifest.artifacts[rel] = {"sha256": sha256_file(self.dir / rel), "recipe": recipe}
        side = rel + ".json"
        if (self.dir / side).exists():
            self.manifest.artifacts[side] = {"sha256": sha256_file(self.dir / side), "recipe": recipe}

    def stage(self, name: str, fn: Callable[[], None]) -> None:
        t0 = time.perf_counter()
        try:
            fn()
        except Exception as exc:
            self.manifest.stages[name] = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
            self.manifest.wall_clock[name] = time.perf_counter() - t0
            self.write_manifest()
            raise PipelineError(f"stage {name!r} failed: {exc}") from exc
        self.manifest.stages.setdefault(name, {"status": "ok"})
        self.manifest.wall_clock[name] = time.perf_counter() - t0

    def write_manifest(self) -> None:
        atomic_write_text(self.dir / "manifest.json", self.manifest.to_json())


# ---------------------------------------------------------------------------
# stages


def _data_stage(run: _Run) -> None:
    cfg = run.cfg
    spec = cfg.model_spec()
    interval = getattr(cfg.model, "interval_mode", False)
    sets = {"train": (cfg.train.n_train, cfg.seeds.data), "test": (cfg.train.n_test, cfg.seeds.test)}
    if cfg.train.n_val > 0:
        sets["val"] = (cfg.train.n_val, cfg.seeds.val)
    for name, (n, seed) in sets.items():
        rel = f"data/{name}.rhpb"
        recipe = _recipe(cfg.to_plain()["model"], n, seed, interval)
        run.manifest.seeds[f"data/{name}"] = seed
        if not run.fresh(rel, recipe):
            (run.dir / "data").mkdir(parents=True, exist_ok=True)
            save_batch(simulate(spec, n, seed, interval), run.dir / rel)
        run.record(rel, recipe)


def _jobs(cfg: ExperimentConfig) -> list[tuple[int, int]]:
    jobs = []
    for n in cfg.evaluation.partition_sizes:
        if n > cfg.train.n_train:
            raise PipelineError(f"partition size {n} exceeds the training pool of {cfg.train.n_train} paths")
        k = min(cfg.evaluation.n_partitions, cfg.train.n_train // n)
        jobs += [(n, i) for i in range(k)]
    return jobs


def _model_names(cfg: ExperimentConfig, n: int, i: int) -> list[str]:
    kinds = ["clean"] if cfg.train.mode == "clean" else ["clean", "robust"]
    return [f"models/{kind}_N{n}_p{i}.rhnn" for kind in kinds]


def _train_job(args) -> list[str]:
    """Train the strategies of one (N, partition) cell and write their checkpoints."""
    cfg, run_dir, n, i, seed = args
    run_dir = Path(run_dir)
    pool = load_batch(run_dir / "data/train.rhpb")
    data = partition_dataset(pool, n)[i]
    tcfg = cfg.train_config(n_train=n, seed=seed)
    names = _model_names(cfg, n, i)
    (run_dir / "models").mkdir(parents=True, exist_ok=True)
    if cfg.train.mode == "clean":
        save_strategy(train_clean(tcfg, data), run_dir / names[0])
        return names
    clean, warm = train_with_snapshot(tcfg, data)
    save_strategy(clean, run_dir / names[0])
    if cfg.train.mode == "search":
        val_path = run_dir / "data/val.rhpb"
        if not val_path.exists():
            raise PipelineError("search mode needs train.n_val > 0")
        val = load_batch(val_path)
        val = val.subset(slice(0, min(n, val.n_samples)))
        robust = hyperparam_search(tcfg, data, val, warm=warm).strategy
    else:
        robust = continue_adversarial(warm, data, tcfg.attack, tcfg.alpha, tcfg.adv_epochs)
    save_strategy(robust, run_dir / names[1])
    return names


def _train_stage(run: _Run) -> None:
    cfg = run.cfg
    if cfg.checkpoint is not None:
        run.manifest.stages["train"] = {"status": "skipped", "reason": "evaluation-only plan"}
        return
    data_sha = run.manifest.artifacts["data/train.rhpb"]["sha256"]
    plain = cfg.to_plain()
    todo, recipes = [], {}
    for n, i in _jobs(cfg):
        seed = cfg.seeds.train + i
        run.manifest.seeds[f"train/N{n}_p{i}"] = seed
        recipe = _recipe(plain["train"], plain["attack"], plain["model"], plain["payoff"], plain.get("measure"),
                         plain["cost"], data_sha, n, i, seed)
        names = _model_names(cfg, n, i)
        for name in names:
            recipes[name] = recipe
        if not all(run.fresh(name, recipe) for name in names):
            todo.append((cfg, str(run.dir), n, i, seed))
    if run.workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=min(run.workers, len(todo))) as ex:
            list(ex.map(_train_job, todo))
    else:
        for job in todo:
            _train_job(job)
    for name in sorted(recipes):
        run.record(name, recipes[name])


def load_strategies(cfg: ExperimentConfig, run_dir: str | Path) -> dict[tuple[str, int], list[TrainedStrategy]]:
    run_dir = Path(run_dir)
    if cfg.checkpoint is not None:
        s = load_strategy(cfg.checkpoint)
        return {("checkpoint", s.provenance.get("n_train", 0)): [s]}
    groups: dict[tuple[str, int], list[TrainedStrategy]] = {}
    for n, i in _jobs(cfg):
        for name in _model_names(cfg, n, i):
            kind = Path(name).name.split("_")[0]
            groups.setdefault((kind, n), []).append(load_strategy(run_dir / name))
    return groups


def _reference(groups) -> list[tuple[str, TrainedStrategy]]:
    """First partition of the largest N, one per strategy kind."""
    largest = max(n for _, n in groups)
    return [(kind, groups[(kind, n)][0]) for kind, n in sorted(groups) if n == largest]


def build_report(cfg: ExperimentConfig, run_dir: str | Path, kind: str) -> EvalReport:
    """Recompute one report kind from the persisted data and strategies."""
    if kind not in REPORT_KINDS:
        raise ValueError(f"report kind must be one of {REPORT_KINDS}")
    run_dir = Path(run_dir)
    groups = load_strategies(cfg, run_dir)
    test = load_batch(run_dir / "data/test.rhpb")
    ev = cfg.evaluation
    base = cfg.attack.build()
    if kind == "attack-curve":
        report = EvalReport()
        for label, s in _reference(groups):
            r, _ = attack_curve(s, test, ev.deltas, ev.methods, ev.track_sets, base, label=label)
            report.merge(r)
            report.config_hash = report.config_hash or r.config_hash
        return report
    if kind == "diag":
        label, s = _reference(groups)[0]
        method = ev.methods[0]
        perturbed = {}
        for tracks in ev.track_sets:
            _, batches = attack_curve(s, test, ev.diag_deltas, (method,), (tracks,), base, keep_batches=True)
            for (m, t, d), b in batches.items():
                perturbed[(f"{''.join(t)}-{m}", d)] = b
        return diagnostics_report(test, perturbed, ev.covariance_track, ev.acf_max_lag, s.provenance.get("config_hash", ""))
    if kind == "oos":
        return oos_report(groups, test)
    if ev.ood is None:
        return EvalReport()
    specs = perturb_params_ood(cfg.model_spec(), ev.ood.configs, ev.ood.lo, ev.ood.hi, cfg.seeds.ood)
    return ood_report(groups, specs, ev.ood.paths, cfg.seeds.ood)


def _report_stage(run: _Run) -> None:
    cfg = run.cfg
    kinds = [k for k in REPORT_KINDS if k != "ood" or cfg.evaluation.ood is not None]
    deps = sorted((k, v["sha256"]) for k, v in run.manifest.artifacts.items())
    recipe = _recipe(cfg.to_plain(), deps)
    rels = {}
    for kind in kinds:
        out = run.dir / "reports" / kind
        marker = f"reports/{kind}/report.json"
        if not run.fresh(marker, recipe):
            report = build_report(cfg, run.dir, kind)
            report.validate()
            report.write(out)
        rels[kind] = sorted(p.relative_to(run.dir).as_posix() for p in out.iterdir() if not p.name.endswith(".tmp"))
    for kind in kinds:
        for rel in rels[kind]:
            run.record(rel, recipe)


def run_pipeline(
    cfg: ExperimentConfig,
    run_dir: str | Path | None = None,
    workers: int | None = None,
) -> RunManifest:
    """simulate -> train -> report, writing ``manifest.json`` atomically at the end (and on failure)."""
    run_dir = Path(run_dir if run_dir is not None else cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    run = _Run(cfg, run_dir, worker_count(workers if workers is not None else cfg.workers))
    atomic_write_text(run_dir / "config.toml", dumps_config(cfg))
    run.record("config.toml", "config")
    run.manifest.seeds.update(cfg.seeds.model_dump())
    run.stage("simulate", lambda: _data_stage(run))
    run.stage("train", lambda: _train_stage(run))
    run.stage("report", lambda: _report_stage(run))
    run.write_manifest()
    return run.manifest

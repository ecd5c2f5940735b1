"""Clean and adversarial training loops and validation-driven grid search.

The adversarial objective per minibatch is

    alpha * mean_n l(theta; X_n) + mean_n l(theta; Xhat_n)

where Xhat is produced by the configured attack against the current network
(eval mode, omega frozen).  Means replace sums so the learning rate does not
depend on the batch size.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
from scipy.special import ndtr

from robust_hedge.attack import AttackSpec, run_attack
from robust_hedge.hedge_net import (
    HedgeNetwork,
    OptimizerState,
    apply_update,
    calibrate_running_stats,
    check_hedge_tracks,
    default_layout,
    forward,
    init_network,
    load_checkpoint,
    loss_and_grads,
    save_checkpoint,
    strategy_pnl,
)
from robust_hedge.market_sim import BSSpec, HestonSpec, MarketModelSpec, PathBatch, spec_from_dict, spec_to_dict
from robust_hedge.objective import (
    AsianPut,
    CostSpec,
    CVaR,
    Entropic,
    EuropeanCall,
    PayoffSpec,
    RiskMeasureSpec,
    risk_value,
)

DEFAULT_ALPHA_GRID = (0.0, 1.0, 10.0)
DEFAULT_DELTA_GRID = (0.001, 0.005, 0.01, 0.05, 0.1, 0.3, 0.5)


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int | None = None, history: dict | None = None):
        super().__init__(message if epoch is None else f"epoch {epoch}: {message}")
        self.epoch = epoch
        self.history = history


def default_lr(model: MarketModelSpec) -> float:
    return 0.05 if isinstance(model, HestonSpec) else 0.005


def default_measure(model: MarketModelSpec) -> RiskMeasureSpec:
    return CVaR(0.5) if isinstance(model, HestonSpec) else Entropic(1.0)


@dataclass(frozen=True)
class TrainConfig:
    model: MarketModelSpec = field(default_factory=BSSpec)
    payoff: PayoffSpec = field(default_factory=EuropeanCall)
    cost: CostSpec = field(default_factory=CostSpec)
    measure: RiskMeasureSpec | None = None  # None -> entropic for BS/GAD, CVaR for Heston
    arch: str = "NetSim"
    n_train: int = 100_000
    n_val: int = 0
    n_test: int = 0
    clean_epochs: int = 100  # warm start before the adversarial phase
    adv_epochs: int = 200
    batch_size: int = 10_000
    lr: float | None = None
    lr_decay: float = 0.5
    decay_every: int | None = None  # None -> a quarter of the total epochs
    alpha: float = 1.0
    attack: AttackSpec = field(default_factory=lambda: AttackSpec(method="WBPGD", delta=0.1))
    alpha_grid: tuple[float, ...] = DEFAULT_ALPHA_GRID
    delta_grid: tuple[float, ...] = DEFAULT_DELTA_GRID
    seed: int = 0

    def __post_init__(self):
        if self.clean_epochs < 0 or self.adv_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2 for batch norm")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not self.alpha_grid or not self.delta_grid:
            raise ValueError("hyperparameter grid must be non-empty")

    @property
    def total_epochs(self) -> int:
        return self.clean_epochs + self.adv_epochs

    @property
    def risk_measure(self) -> RiskMeasureSpec:
        return self.measure if self.measure is not None else default_measure(self.model)

    @property
    def learning_rate(self) -> float:
        return self.lr if self.lr is not None else default_lr(self.model)

    def optimizer(self) -> OptimizerState:
        every = self.decay_every if self.decay_every is not None else max(1, self.total_epochs // 4)
        return OptimizerState(lr0=self.learning_rate, decay_factor=self.lr_decay, decay_every=every)

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "model":
                v = spec_to_dict(v)
            elif f.name == "attack":
                v = attack_to_dict(v)
            elif f.name == "cost":
                v = {"rate": v.rate}
            elif dataclasses.is_dataclass(v):
                v = {"kind": v.kind, **dataclasses.asdict(v)}
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TrainConfig:
        d = dict(data)
        d["model"] = spec_from_dict(d["model"])
        d["payoff"] = _payoff_from_dict(d["payoff"])
        d["cost"] = CostSpec(**d["cost"])
        d["measure"] = None if d.get("measure") is None else _measure_from_dict(d["measure"])
        d["attack"] = attack_from_dict(d["attack"])
        for k in ("alpha_grid", "delta_grid"):
            d[k] = tuple(d[k])
        return cls(**d)

    def digest(self) -> str:
        raw = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(raw).hexdigest()


def _payoff_from_dict(d: dict[str, Any]) -> PayoffSpec:
    if d["kind"] == "call":
        return EuropeanCall(d["strike"])
    if d["kind"] == "asian_put":
        return AsianPut()
    raise ValueError(f"unknown payoff kind {d['kind']!r}")


def _measure_from_dict(d: dict[str, Any]) -> RiskMeasureSpec:
    if d["kind"] == "entropic":
        return Entropic(d["lam"])
    if d["kind"] == "cvar":
        return CVaR(d["alpha"])
    raise ValueError(f"unknown risk measure kind {d['kind']!r}")


def attack_to_dict(spec: AttackSpec) -> dict[str, Any]:
    d = dataclasses.asdict(spec)
    d["p"] = "inf" if spec.p == math.inf else spec.p
    d["tracks"] = list(spec.tracks)
    if spec.weights is not None:
        d["weights"] = list(spec.weights)
    return d


def attack_from_dict(d: dict[str, Any]) -> AttackSpec:
    d = dict(d)
    d["p"] = math.inf if d["p"] == "inf" else float(d["p"])
    d["tracks"] = tuple(d["tracks"])
    if d.get("weights") is not None:
        d["weights"] = tuple(d["weights"])
    return AttackSpec(**d)


def batch_digest(batch: PathBatch) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(list(batch.tracks)).encode())
    h.update(np.ascontiguousarray(batch.values, dtype="<f8").tobytes())
    return h.hexdigest()


@dataclass
class TrainedStrategy:
    net: HedgeNetwork
    config: TrainConfig
    history: dict[str, list[float]]
    provenance: dict[str, Any]
    optimizer: OptimizerState | None = None
    seconds: float = 0.0  # wall clock, kept out of provenance so artifacts stay reproducible

    @property
    def omega(self) -> float:
        return self.net.omega

    def copy(self) -> TrainedStrategy:
        opt = None
        if self.optimizer is not None:
            opt = dataclasses.replace(
                self.optimizer,
                m={k: v.copy() for k, v in self.optimizer.m.items()},
                v={k: v.copy() for k, v in self.optimizer.v.items()},
            )
        hist = {k: list(v) for k, v in self.history.items()}
        return TrainedStrategy(self.net.copy(), self.config, hist, dict(self.provenance), opt, self.seconds)


def _empty_history() -> dict[str, list[float]]:
    return {"phase": [], "clean_loss": [], "adv_loss": [], "val_loss": []}


# ---------------------------------------------------------------------------
# data handling


def partition_dataset(full: PathBatch, subset_size: int) -> list[PathBatch]:
    """floor(N / subset_size) disjoint contiguous subsets."""
    if subset_size < 1:
        raise ValueError("subset size must be positive")
    if subset_size > full.n_samples:
        raise ValueError(f"subset size {subset_size} exceeds dataset size {full.n_samples}")
    k = full.n_samples // subset_size
    return [full.subset(slice(i * subset_size, (i + 1) * subset_size)) for i in range(k)]


def minibatches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Index sets for one epoch; a shuffled split when n exceeds the batch size."""
    if n <= batch_size:
        return [np.arange(n)]
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 11, int(epoch)])))
    perm = rng.permutation(n)
    chunks = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and chunks[-1].size < 2:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return [np.sort(c) for c in chunks]


# ---------------------------------------------------------------------------
# training loops


def _new_strategy(config: TrainConfig, data: PathBatch) -> TrainedStrategy:
    lay = default_layout(data, config.arch)
    net = init_network(lay["arch"], lay["features"], lay["n_outputs"], data.horizon_steps, config.seed)
    check_hedge_tracks(net, data)
    prov = {
        "config_hash": config.digest(),
        "data_hash": batch_digest(data),
        "seed": config.seed,
        "n_train": data.n_samples,
    }
    return TrainedStrategy(net, config, _empty_history(), prov, config.optimizer())


def _validation_loss(strategy: TrainedStrategy, val: PathBatch | None) -> float:
    if val is None:
        return math.nan
    values = strategy_pnl(strategy.net, val, strategy.config.payoff, strategy.config.cost)
    return risk_value(strategy.config.risk_measure, values)[0]


def _check_finite(value: float, epoch: int, strategy: TrainedStrategy) -> None:
    if not math.isfinite(value):
        raise TrainingError("non-finite training loss", epoch, strategy.history)


def _clean_epoch(strategy: TrainedStrategy, data: PathBatch) -> float:
    cfg, net, opt = strategy.config, strategy.net, strategy.optimizer
    losses = []
    for idx in minibatches(data.n_samples, cfg.batch_size, cfg.seed, opt.epoch):
        xb = data if idx.size == data.n_samples else data.subset(idx)
        bundle = loss_and_grads(net, xb, cfg.payoff, cfg.cost, cfg.risk_measure, mode="train", update_running=True)
        apply_update(net, bundle.params, opt)
        losses.append(bundle.loss)
    return float(np.mean(losses))


def adversarial_gradients(
    net: HedgeNetwork,
    batch: PathBatch,
    config: TrainConfig,
    attack: AttackSpec,
    alpha: float,
) -> tuple[dict[str, np.ndarray], float, float]:
    """Gradients of alpha * clean loss + attacked loss, with both loss values.

    A zero radius reuses the clean pass, so the result is exactly (1 + alpha)
    times the clean gradient.
    """
    measure = config.risk_measure
    if attack.delta == 0:
        b = loss_and_grads(net, batch, config.payoff, config.cost, measure, mode="train", update_running=True)
        return {k: (1.0 + alpha) * g for k, g in b.params.items()}, b.loss, b.loss
    # the attack runs in eval mode, so freeze the statistics of this clean minibatch first
    calibrate_running_stats(net, batch)
    perturbed = run_attack(net, batch, config.payoff, config.cost, measure, attack, omega=net.omega).batch
    clean_loss = math.nan
    grads: dict[str, np.ndarray] = {}
    if alpha > 0:
        bc = loss_and_grads(net, batch, config.payoff, config.cost, measure, mode="train", update_running=True)
        clean_loss = bc.loss
        grads = {k: alpha * g for k, g in bc.params.items()}
    ba = loss_and_grads(net, perturbed, config.payoff, config.cost, measure, mode="train", update_running=True)
    for k, g in ba.params.items():
        grads[k] = grads[k] + g if k in grads else g
    return grads, clean_loss, ba.loss


def _adv_epoch(strategy: TrainedStrategy, data: PathBatch, attack: AttackSpec, alpha: float) -> tuple[float, float]:
    cfg, net, opt = strategy.config, strategy.net, strategy.optimizer
    clean, adv = [], []
    for idx in minibatches(data.n_samples, cfg.batch_size, cfg.seed, opt.epoch):
        xb = data if idx.size == data.n_samples else data.subset(idx)
        grads, lc, la = adversarial_gradients(net, xb, cfg, attack, alpha)
        apply_update(net, grads, opt)
        clean.append(lc)
        adv.append(la)
    return float(np.mean(clean)), float(np.mean(adv))


def _run_epochs(
    strategy: TrainedStrategy,
    data: PathBatch,
    n_epochs: int,
    val: PathBatch | None,
    adversarial: tuple[AttackSpec, float] | None = None,
    callback: Callable[[TrainedStrategy], None] | None = None,
) -> TrainedStrategy:
    hist, opt = strategy.history, strategy.optimizer
    for _ in range(n_epochs):
        epoch = opt.epoch
        if adversarial is None:
            try:
                lc, la, phase = _clean_epoch(strategy, data), math.nan, "clean"
            except FloatingPointError as exc:
                raise TrainingError(f"diverged: {exc}", epoch, hist) from exc
            _check_finite(lc, epoch, strategy)
        else:
            try:
                lc, la = _adv_epoch(strategy, data, *adversarial)
            except (FloatingPointError, ValueError) as exc:
                raise TrainingError(f"attack failed: {exc}", epoch, hist) from exc
            phase = "adversarial"
            _check_finite(la, epoch, strategy)
        opt.epoch += 1
        try:
            calibrate_running_stats(strategy.net, data)
        except FloatingPointError as exc:
            raise TrainingError(f"diverged: {exc}", epoch, hist) from exc
        hist["phase"].append(phase)
        hist["clean_loss"].append(lc)
        hist["adv_loss"].append(la)
        hist["val_loss"].append(_validation_loss(strategy, val))
        if callback is not None:
            callback(strategy)
    return strategy


def train_clean(
    config: TrainConfig,
    data: PathBatch,
    val: PathBatch | None = None,
    epochs: int | None = None,
    callback=None,
) -> TrainedStrategy:
    """Plain minimisation of the mean hedging loss, by default for the full clean + adversarial budget."""
    strategy = _new_strategy(config, data)
    n = config.total_epochs if epochs is None else epochs
    t0 = time.perf_counter()
    _run_epochs(strategy, data, n, val, None, callback)
    strategy.provenance.update(mode="clean", epochs=n)
    strategy.seconds += time.perf_counter() - t0
    return strategy


def continue_adversarial(
    warm: TrainedStrategy,
    data: PathBatch,
    attack: AttackSpec,
    alpha: float,
    epochs: int,
    val: PathBatch | None = None,
    callback=None,
) -> TrainedStrategy:
    """Adversarial phase on a copy of a warm-started strategy."""
    strategy = warm.copy()
    t0 = time.perf_counter()
    _run_epochs(strategy, data, epochs, val, (attack, alpha), callback)
    strategy.provenance.update(
        mode="adversarial",
        alpha=alpha,
        attack=attack_to_dict(attack),
        adv_epochs=epochs,
    )
    strategy.seconds += time.perf_counter() - t0
    return strategy


def train_adversarial(
    config: TrainConfig,
    data: PathBatch,
    val: PathBatch | None = None,
    warm: TrainedStrategy | None = None,
    callback=None,
) -> TrainedStrategy:
    """Clean warm start for ``clean_epochs`` then ``adv_epochs`` of adversarial training.

    ``warm`` may carry an already trained warm start (for instance the clean
    baseline's snapshot after the same number of epochs).
    """
    if warm is None:
        warm = train_clean(config, data, val, epochs=config.clean_epochs)
    elif warm.optimizer is None or warm.optimizer.epoch != config.clean_epochs:
        raise ValueError("warm start must have completed exactly the configured clean epochs")
    return continue_adversarial(warm, data, config.attack, config.alpha, config.adv_epochs, val, callback)


def train_with_snapshot(
    config: TrainConfig, data: PathBatch, val: PathBatch | None = None
) -> tuple[TrainedStrategy, TrainedStrategy]:
    """Clean baseline over the full budget plus its snapshot at the end of the warm start."""
    holder: dict[str, TrainedStrategy] = {}

    def grab(s: TrainedStrategy):
        if s.optimizer.epoch == config.clean_epochs:
            holder["warm"] = s.copy()

    clean = train_clean(config, data, val, callback=grab)
    warm = holder.get("warm")
    if warm is None:  # zero clean epochs
        warm = _new_strategy(config, data)
    return clean, warm


@dataclass
class SearchResult:
    alpha: float
    delta: float
    strategy: TrainedStrategy
    table: list[dict[str, float]]


def hyperparam_search(
    config: TrainConfig,
    data: PathBatch,
    val: PathBatch,
    grid: Sequence[tuple[float, float]] | None = None,
    warm: TrainedStrategy | None = None,
) -> SearchResult:
    """Train one strategy per (alpha, delta) and keep the best validation risk.

    All grid points share one clean warm start.  Ties go to the smaller delta,
    then the smaller alpha.
    """
    if grid is None:
        grid = [(a, d) for a in config.alpha_grid for d in config.delta_grid]
    grid = [(float(a), float(d)) for a, d in grid]
    if not grid:
        raise ValueError("empty hyperparameter grid")
    if warm is None:
        warm = train_clean(config, data, None, epochs=config.clean_epochs)
    table = []
    best = None
    for alpha, delta in grid:
        attack = dataclasses.replace(config.attack, delta=delta)
        try:
            s = continue_adversarial(warm, data, attack, alpha, config.adv_epochs)
        except TrainingError as exc:
            table.append({"alpha": alpha, "delta": delta, "val_risk": math.nan, "error": str(exc)})
            continue
        risk = _validation_loss(s, val)
        table.append({"alpha": alpha, "delta": delta, "val_risk": risk})
        key = (risk, delta, alpha)
        if math.isfinite(risk) and (best is None or key < best[0]):
            best = (key, s)
    if best is None:
        raise TrainingError("every grid point failed")
    (_, delta, alpha), strategy = best
    strategy.provenance.update(selected_alpha=alpha, selected_delta=delta, val_hash=batch_digest(val))
    return SearchResult(alpha, delta, strategy, table)


# ---------------------------------------------------------------------------
# persistence


def save_strategy(strategy: TrainedStrategy, path) -> Path:
    """Checkpoint plus a JSON sidecar holding the config, history and provenance."""
    manifest = {
        "config": strategy.config.to_dict(),
        "history": {k: [None if isinstance(x, float) and math.isnan(x) else x for x in v] for k, v in strategy.history.items()},
        "provenance": strategy.provenance,
        "epoch": strategy.optimizer.epoch if strategy.optimizer is not None else None,
    }
    return save_checkpoint(strategy.net, path, strategy.optimizer, manifest)


def load_strategy(path) -> TrainedStrategy:
    path = Path(path)
    net, opt = load_checkpoint(path)
    side = path.with_name(path.name + ".json")
    if not side.exists():
        raise FileNotFoundError(f"strategy sidecar {side} is missing")
    meta = json.loads(side.read_text())
    config = TrainConfig.from_dict(meta["config"])
    history = {k: [math.nan if x is None else x for x in v] for k, v in meta["history"].items()}
    return TrainedStrategy(net, config, history, meta["provenance"], opt)


# ---------------------------------------------------------------------------
# reference deltas


def bs_delta(s, strike: float, sigma: float, tau, rate: float = 0.0) -> np.ndarray:
    """Closed-form Black-Scholes call delta N(d1)."""
    s = np.asarray(s, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    d1 = (np.log(s / strike) + (rate + 0.5 * sigma**2) * tau) / (sigma * np.sqrt(tau))
    return ndtr(d1)


def delta_error(strategy: TrainedStrategy, batch: PathBatch, date: int, moneyness=(0.9, 1.1)) -> tuple[float, int]:
    """Mean |learned - Black-Scholes delta| at ``date`` over paths with S/K inside ``moneyness``."""
    spec = batch.model_spec
    if not isinstance(spec, BSSpec) or not isinstance(strategy.config.payoff, EuropeanCall):
        raise ValueError("delta oracle needs a BS batch and a European call")
    k = strategy.config.payoff.strike
    deltas = forward(strategy.net, batch, "eval")[:, 0, date]
    s = batch.track("S")[:, date]
    tau = (spec.n_steps - date) * spec.dt
    ref = bs_delta(s, k, spec.sigma, tau, spec.drift)
    mask = (s / k >= moneyness[0]) & (s / k <= moneyness[1])
    return float(np.mean(np.abs(deltas[mask] - ref[mask]))), int(mask.sum())

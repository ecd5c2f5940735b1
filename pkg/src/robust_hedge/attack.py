"""Distributional attacks on path batches over an empirical Wasserstein ball.

All attacks run in rescaled coordinates: a track with weight lam is attacked
as lam * X, so its gradient is g / lam and a displacement u in rescaled units
moves the raw track by u / lam.  The per-sample distance is

    d_n = ( sum_i (lam_i * max_t |X^i_n,t - Xhat^i_n,t|)^p )^(1/p)

and the batch distance is the p-mean of d_n over samples (max for p = inf).
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from robust_hedge.hedge_net import HedgeNetwork, hedge_loss, loss_and_grads
from robust_hedge.market_sim import HestonSpec, PathBatch, variance_swap_curve
from robust_hedge.objective import CostSpec, PayoffSpec, RiskMeasureSpec

METHODS = ("WPGD", "WBPGD", "PointwisePGD")
PROJECTIONS = ("shrink", "saturate")
POINTWISE_PROJECTIONS = ("radial", "clip")
S_ATTACK = ("S",)
SV_ATTACK = ("S", "v")

_METHOD_ALIASES = {"wpgd": "WPGD", "wbpgd": "WBPGD", "pgd": "PointwisePGD", "pointwisepgd": "PointwisePGD"}


class AttackWarning(RuntimeWarning):
    pass


def conjugate(p: float) -> float:
    if p == math.inf:
        return 1.0
    if not p > 1:
        raise ValueError("Wasserstein order p must lie in (1, inf]")
    return p / (p - 1.0)


@dataclass(frozen=True)
class AttackSpec:
    method: str = "WPGD"
    delta: float = 0.1
    p: float = 2.0
    iterations: int = 20
    beta: float | None = None  # None -> 4 * delta / 20
    weights: tuple[float, ...] | None = None  # one per attacked track, default 1
    tracks: tuple[str, ...] = S_ATTACK
    freeze_initial: bool = True
    projection: str = "shrink"
    pointwise_projection: str = "radial"

    def __post_init__(self):
        method = _METHOD_ALIASES.get(str(self.method).lower(), self.method)
        object.__setattr__(self, "method", method)
        object.__setattr__(self, "tracks", tuple(self.tracks))
        if method not in METHODS:
            raise ValueError(f"unknown attack method {self.method!r}")
        if not self.delta >= 0 or not math.isfinite(self.delta):
            raise ValueError("attack radius must be a finite non-negative number")
        conjugate(self.p)
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.beta is not None and self.delta > 0 and not self.beta > 0:
            raise ValueError("step size must be positive")
        if not self.tracks:
            raise ValueError("at least one track must be attacked")
        if self.weights is not None:
            w = tuple(float(x) for x in self.weights)
            object.__setattr__(self, "weights", w)
            if len(w) != len(self.tracks):
                raise ValueError("need one weight per attacked track")
            if not all(x > 0 for x in w):
                raise ValueError("track weights must be positive")
        if self.projection not in PROJECTIONS:
            raise ValueError(f"projection must be one of {PROJECTIONS}")
        if self.pointwise_projection not in POINTWISE_PROJECTIONS:
            raise ValueError(f"pointwise projection must be one of {POINTWISE_PROJECTIONS}")

    @property
    def q(self) -> float:
        return conjugate(self.p)

    @property
    def step(self) -> float:
        return 4.0 * self.delta / 20.0 if self.beta is None else float(self.beta)

    @property
    def lam(self) -> np.ndarray:
        if self.weights is None:
            return np.ones(len(self.tracks))
        return np.asarray(self.weights, dtype=np.float64)


@dataclass
class PerturbedBatch:
    batch: PathBatch
    original: PathBatch
    distance: float
    trace: list[tuple[int, float, float]] = field(default_factory=list)
    noop: bool = False

    @property
    def final_loss(self) -> float:
        return self.trace[-1][1] if self.trace else math.nan

    def displacement(self, tracks: Sequence[str]) -> np.ndarray:
        idx = [self.batch.index(t) for t in tracks]
        return self.batch.values[:, idx] - self.original.values[:, idx]


# ---------------------------------------------------------------------------
# norms and the closed-form step


def dual_l1_norm(g) -> float:
    return float(np.sum(np.abs(np.asarray(g, dtype=np.float64))))


def sign_map(g) -> np.ndarray:
    """Maximiser of <h, g> over the sup-norm unit ball; sign(0) = 0."""
    return np.sign(np.asarray(g, dtype=np.float64))


def _power_mean(x: np.ndarray, r: float) -> float:
    """((1/N) sum x^r)^(1/r) for x >= 0, scaled by the maximum to avoid overflow."""
    x = np.asarray(x, dtype=np.float64).ravel()
    m = float(x.max()) if x.size else 0.0
    if m == 0.0:
        return 0.0
    if r == math.inf:
        return m
    return m * float(np.mean((x / m) ** r)) ** (1.0 / r)


def _track_norms(g_scaled: np.ndarray) -> np.ndarray:
    """(N, k) dual norms of per-sample, per-track rescaled gradients."""
    return np.abs(g_scaled).sum(axis=2)


def _upsilon_from_norms(norms: np.ndarray, q: float) -> float:
    # mean over samples of sum over tracks, i.e. N in the denominator
    m = float(norms.max()) if norms.size else 0.0
    if m == 0.0:
        return 0.0
    if q == 1.0:
        return float(norms.sum(axis=1).mean())
    per_sample = ((norms / m) ** q).sum(axis=1)
    return m * float(np.mean(per_sample)) ** (1.0 / q)


def upsilon(gradients: np.ndarray, q: float, weights=None) -> float:
    """Power mean of the per-sample dual norms of the rescaled gradients.

    ``gradients`` has shape (N, k, T+1) or (N, T+1) for a single track.
    """
    g = _as_3d(gradients)
    lam = _weights(weights, g.shape[1])
    return _upsilon_from_norms(_track_norms(g / lam[None, :, None]), q)


def _as_3d(g) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.ndim == 2:
        g = g[:, None, :]
    if g.ndim != 3:
        raise ValueError("gradients must have shape (N, k, T+1)")
    if not np.all(np.isfinite(g)):
        raise ValueError("gradients must be finite")
    return g


def _weights(weights, k: int) -> np.ndarray:
    if weights is None:
        return np.ones(k)
    lam = np.asarray(weights, dtype=np.float64).ravel()
    if lam.shape != (k,) or not np.all(lam > 0):
        raise ValueError(f"need {k} positive track weights")
    return lam


def _closed_form_step(g_scaled: np.ndarray, radius: float, q: float, freeze: bool) -> np.ndarray | None:
    """Rescaled displacement radius * sign(g) * (|g|_1 / Upsilon)^(q-1), or None if Upsilon = 0."""
    if freeze:
        g_scaled = g_scaled.copy()
        g_scaled[:, :, 0] = 0.0
    norms = _track_norms(g_scaled)
    ups = _upsilon_from_norms(norms, q)
    if ups == 0.0:
        return None
    factor = (norms / ups) ** (q - 1.0)
    return radius * np.sign(g_scaled) * factor[:, :, None]


def _sample_distances(disp_scaled: np.ndarray, p: float) -> np.ndarray:
    per_track = np.abs(disp_scaled).max(axis=2)
    if per_track.shape[1] == 1:
        return per_track[:, 0]
    if p == math.inf:
        return per_track.max(axis=1)
    m = per_track.max(axis=1)
    safe = np.where(m > 0, m, 1.0)
    return m * ((per_track / safe[:, None]) ** p).sum(axis=1) ** (1.0 / p)


def _batch_distance(disp_scaled: np.ndarray, p: float) -> float:
    return _power_mean(_sample_distances(disp_scaled, p), p)


# ---------------------------------------------------------------------------
# batch-level helpers


def _distance_tracks(batch: PathBatch) -> tuple[str, ...]:
    # the swap price is derived from v, so it never counts on its own
    if "v" in batch.tracks:
        return tuple(t for t in batch.tracks if t != "Vswap")
    return batch.tracks


def _rebuild(original: PathBatch, tracks: tuple[str, ...], disp_raw: np.ndarray, **meta) -> PathBatch:
    values = original.values.copy()
    for i, name in enumerate(tracks):
        values[:, original.index(name)] += disp_raw[:, i]
    if "v" in tracks and "Vswap" in original.tracks:
        spec = original.model_spec
        if isinstance(spec, HestonSpec):
            values[:, original.index("Vswap")] = variance_swap_curve(values[:, original.index("v")], spec)
    return original.with_values(values, **meta)


def _check_congruent(a: PathBatch, b: PathBatch) -> None:
    if a.values.shape != b.values.shape or a.tracks != b.tracks:
        raise ValueError(f"batches are not shape-congruent: {a.values.shape} {a.tracks} vs {b.values.shape} {b.tracks}")


def empirical_distance(
    original: PathBatch,
    perturbed: PathBatch,
    p: float = 2.0,
    weights=None,
    tracks: Sequence[str] | None = None,
) -> float:
    _check_congruent(original, perturbed)
    tracks = _distance_tracks(original) if tracks is None else tuple(tracks)
    lam = _weights(weights, len(tracks))
    idx = [original.index(t) for t in tracks]
    disp = (perturbed.values[:, idx] - original.values[:, idx]) * lam[None, :, None]
    return _batch_distance(disp, p)


def theorem1_step(
    batch: PathBatch,
    gradients: np.ndarray,
    delta: float,
    q: float = 2.0,
    weights=None,
    tracks: Sequence[str] = S_ATTACK,
    freeze_initial: bool = True,
) -> PerturbedBatch:
    """One closed-form worst-case step of radius ``delta`` along the given gradients."""
    tracks = tuple(tracks)
    g = _as_3d(gradients)
    if g.shape[0] != batch.n_samples or g.shape[1] != len(tracks) or g.shape[2] != batch.horizon_steps + 1:
        raise ValueError(f"gradient shape {g.shape} does not match batch and tracks {tracks}")
    lam = _weights(weights, len(tracks))
    step = _closed_form_step(g / lam[None, :, None], float(delta), q, freeze_initial)
    if step is None or delta == 0:
        return PerturbedBatch(batch, batch, 0.0, noop=step is None)
    p = math.inf if q == 1.0 else q / (q - 1.0)
    out = _rebuild(batch, tracks, step / lam[None, :, None])
    return PerturbedBatch(out, batch, _batch_distance(step, p))


def _projection_factor(dist: float, delta: float, mode: str) -> float:
    if dist == 0.0:
        return 1.0
    ratio = delta / dist
    return min(1.0, ratio) if mode == "shrink" else max(1.0, ratio)


def project_ball(
    original: PathBatch,
    perturbed: PathBatch,
    delta: float,
    p: float = 2.0,
    weights=None,
    mode: str = "shrink",
    tracks: Sequence[str] | None = None,
) -> PerturbedBatch:
    """Scale every displacement by one common factor so the batch lands in (or on) the ball."""
    if mode not in PROJECTIONS:
        raise ValueError(f"projection must be one of {PROJECTIONS}")
    _check_congruent(original, perturbed)
    tracks = _distance_tracks(original) if tracks is None else tuple(tracks)
    lam = _weights(weights, len(tracks))
    idx = [original.index(t) for t in tracks]
    disp = (perturbed.values[:, idx] - original.values[:, idx]) * lam[None, :, None]
    dist = _batch_distance(disp, p)
    if dist == 0.0:
        return PerturbedBatch(original, original, 0.0, noop=delta > 0)
    factor = _projection_factor(dist, delta, mode)
    disp = disp * factor
    return PerturbedBatch(_rebuild(original, tracks, disp / lam[None, :, None]), original, _batch_distance(disp, p))


# ---------------------------------------------------------------------------
# iterative attacks


@dataclass
class _Problem:
    net: HedgeNetwork
    batch: PathBatch
    payoff: PayoffSpec
    cost: CostSpec
    measure: RiskMeasureSpec
    omega: float
    spec: AttackSpec

    def __post_init__(self):
        for name in self.spec.tracks:
            if name not in self.batch.tracks:
                raise KeyError(f"attacked track {name!r} not in batch (have {self.batch.tracks})")
        self.lam = self.spec.lam[None, :, None]

    def perturbed(self, disp_scaled: np.ndarray) -> PathBatch:
        return _rebuild(self.batch, self.spec.tracks, disp_scaled / self.lam)

    def grads(self, disp_scaled: np.ndarray | None):
        """(loss, rescaled input gradient) at the displaced batch."""
        batch = self.batch if disp_scaled is None else self.perturbed(disp_scaled)
        bundle = loss_and_grads(
            self.net,
            batch,
            self.payoff,
            self.cost,
            self.measure,
            mode="eval",
            attacked=self.spec.tracks,
            omega=self.omega,
            need_param_grads=False,
        )
        return bundle.loss, bundle.inputs / self.lam

    def loss(self, disp_scaled: np.ndarray) -> float:
        return hedge_loss(self.net, self.perturbed(disp_scaled), self.payoff, self.cost, self.measure, self.omega)

    def finish(self, disp_scaled: np.ndarray, trace, noop: bool = False) -> PerturbedBatch:
        dist = _batch_distance(disp_scaled, self.spec.p)
        out = self.perturbed(disp_scaled)
        return PerturbedBatch(out, self.batch, dist, trace, noop)


def _run(problem: _Problem, update) -> PerturbedBatch:
    """Shared loop: ``update(it, g, state) -> (disp, dist, state)`` or None to stop."""
    spec = problem.spec
    loss, g = problem.grads(None)
    trace = [(0, loss, 0.0)]
    disp = np.zeros_like(g)
    if spec.delta == 0:
        return problem.finish(disp, trace)
    state = None
    for it in range(1, spec.iterations + 1):
        res = update(it, g, disp, state)
        if res is None:
            warnings.warn(f"zero attack gradient at iteration {it}; stopping early", AttackWarning, stacklevel=3)
            return problem.finish(disp, trace, noop=it == 1)
        disp, dist, state = res
        if it < spec.iterations:
            loss, g = problem.grads(disp)
        else:
            loss = problem.loss(disp)
        trace.append((it, loss, dist))
    return problem.finish(disp, trace)


def _project_scaled(disp: np.ndarray, spec: AttackSpec) -> tuple[np.ndarray, float]:
    dist = _batch_distance(disp, spec.p)
    if dist == 0.0:
        return disp, 0.0
    factor = _projection_factor(dist, spec.delta, spec.projection)
    if factor != 1.0:
        disp = disp * factor
        dist = _batch_distance(disp, spec.p)
    return disp, dist


def wpgd(
    net: HedgeNetwork,
    batch: PathBatch,
    payoff_spec: PayoffSpec,
    cost: CostSpec,
    measure: RiskMeasureSpec,
    omega: float | None = None,
    spec: AttackSpec = AttackSpec(),
) -> PerturbedBatch:
    """Projected ascent with closed-form steps of size beta, projected onto the radius-delta ball."""
    omega = net.omega if omega is None else float(omega)
    problem = _Problem(net, batch, payoff_spec, cost, measure, omega, spec)

    def update(it, g, disp, state):
        step = _closed_form_step(g, spec.step, spec.q, spec.freeze_initial)
        if step is None:
            return None
        disp, dist = _project_scaled(disp + step, spec)
        return disp, dist, None

    return _run(problem, update)


def wbpgd(
    net: HedgeNetwork,
    batch: PathBatch,
    payoff_spec: PayoffSpec,
    cost: CostSpec,
    measure: RiskMeasureSpec,
    omega: float | None = None,
    spec: AttackSpec = AttackSpec(),
) -> PerturbedBatch:
    """Budget/direction ascent.

    Every (sample, track) pair carries a budget b >= 0 and a direction D with
    entries in [-1, 1]; the rescaled displacement is b * D.  Budgets start at 0
    and directions at the sign of the clean gradient.
    """
    omega = net.omega if omega is None else float(omega)
    problem = _Problem(net, batch, payoff_spec, cost, measure, omega, spec)
    beta, q = spec.step, spec.q

    def update(it, g, disp, state):
        if state is None:
            budget = np.zeros(g.shape[:2])
            direction = np.sign(g)
        else:
            budget, direction = state
        if spec.freeze_initial:
            direction[:, :, 0] = 0.0
        g_b = np.einsum("nkt,nkt->nk", g, direction)
        g_d = budget[:, :, None] * g
        ups = _upsilon_from_norms(np.abs(g_b), q)
        if ups == 0.0:
            return None
        budget = budget + beta * np.sign(g_b) * (np.abs(g_b) / ups) ** (q - 1.0)
        np.maximum(budget, 0.0, out=budget)
        direction = np.clip(direction + (beta / spec.delta) * np.sign(g_d), -1.0, 1.0)
        if spec.freeze_initial:
            direction[:, :, 0] = 0.0
        disp = budget[:, :, None] * direction
        dist = _batch_distance(disp, spec.p)
        if dist > 0.0:
            factor = _projection_factor(dist, spec.delta, spec.projection)
            if factor != 1.0:
                budget = budget * factor
                disp = budget[:, :, None] * direction
                dist = _batch_distance(disp, spec.p)
        return disp, dist, (budget, direction)

    return _run(problem, update)


def pointwise_pgd(
    net: HedgeNetwork,
    batch: PathBatch,
    payoff_spec: PayoffSpec,
    cost: CostSpec,
    measure: RiskMeasureSpec,
    omega: float | None = None,
    spec: AttackSpec = AttackSpec(method="PointwisePGD", p=math.inf),
) -> PerturbedBatch:
    """Independent sign-gradient ascent per sample inside a sup-norm ball of radius delta.

    ``radial`` projection rescales each sample's displacement onto its ball;
    ``clip`` clips coordinates.  Reported distance is the max over samples.
    """
    omega = net.omega if omega is None else float(omega)
    spec = replace(spec, p=math.inf) if spec.p != math.inf else spec
    problem = _Problem(net, batch, payoff_spec, cost, measure, omega, spec)

    def update(it, g, disp, state):
        direction = np.sign(g)
        if spec.freeze_initial:
            direction[:, :, 0] = 0.0
        if not direction.any():
            return None
        disp = disp + spec.step * direction
        if spec.pointwise_projection == "clip":
            disp = np.clip(disp, -spec.delta, spec.delta)
        else:
            d = _sample_distances(disp, math.inf)
            factor = np.ones_like(d)
            over = d > spec.delta
            factor[over] = spec.delta / d[over]
            if over.any():
                disp = disp * factor[:, None, None]
        return disp, _batch_distance(disp, math.inf), None

    return _run(problem, update)


def run_attack(
    net: HedgeNetwork,
    batch: PathBatch,
    payoff_spec: PayoffSpec,
    cost: CostSpec,
    measure: RiskMeasureSpec,
    spec: AttackSpec,
    omega: float | None = None,
) -> PerturbedBatch:
    fn = {"WPGD": wpgd, "WBPGD": wbpgd, "PointwisePGD": pointwise_pgd}[spec.method]
    return fn(net, batch, payoff_spec, cost, measure, omega, spec)


def write_trace(result: PerturbedBatch, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss", "achieved_distance"])
        for it, loss, dist in result.trace:
            w.writerow([it, repr(float(loss)), repr(float(dist))])
    return path

"""Seeded path simulation for Black-Scholes, Heston and general affine diffusion models.

Every simulator draws its randomness from Philox streams keyed by
``(seed, stream, block)`` where a block is a fixed run of ``BLOCK_SIZE``
consecutive samples.  Output therefore depends only on ``(spec, n, seed)``,
never on how the work is split across workers.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union

import numpy as np

BLOCK_SIZE = 4096
MAGIC = b"RHPB1"

_STREAM_BROWNIAN = 0
_STREAM_BROWNIAN_2 = 1
_STREAM_PARAMS = 2
_STREAM_OOD = 3


class SimulationError(ValueError):
    """Invalid simulator input."""


# ---------------------------------------------------------------------------
# model specifications


@dataclass(frozen=True)
class BSSpec:
    s0: float = 100.0
    drift: float = 0.0
    sigma: float = 0.2
    maturity: float = 30 / 365
    n_steps: int = 30

    kind = "bs"

    def __post_init__(self):
        if self.sigma < 0:
            raise SimulationError("BS sigma must be non-negative")
        _check_grid(self)

    @property
    def dt(self) -> float:
        return self.maturity / self.n_steps


@dataclass(frozen=True)
class HestonSpec:
    s0: float = 100.0
    v0: float = 0.04
    a: float = 1.0
    b: float = 0.04
    sigma: float = 2.0
    rho: float = -0.7
    drift: float = 0.0
    maturity: float = 30 / 365
    n_steps: int = 30

    kind = "heston"

    def __post_init__(self):
        if self.sigma < 0:
            raise SimulationError("Heston vol-of-vol must be non-negative")
        if self.v0 < 0:
            raise SimulationError("v0 must be non-negative")
        if self.a <= 0:
            raise SimulationError("mean reversion a must be positive")
        if self.b < 0:
            raise SimulationError("long-run variance b must be non-negative")
        if not -1.0 <= self.rho <= 1.0:
            raise SimulationError("correlation rho must lie in [-1, 1]")
        _check_grid(self)

    @property
    def dt(self) -> float:
        return self.maturity / self.n_steps


@dataclass(frozen=True)
class GADSpec:
    """dS = (b0 + b1 S) dt + (a0 + a1 S)^gamma dW with interval-valued coefficients."""

    s0: float = 10.0
    a0: tuple[float, float] = (0.0, 0.0)
    a1: tuple[float, float] = (0.2, 0.2)
    b0: tuple[float, float] = (0.0, 0.0)
    b1: tuple[float, float] = (0.0, 0.0)
    gamma: float = 1.0
    maturity: float = 30 / 365
    n_steps: int = 30

    kind = "gad"

    def __post_init__(self):
        for name in ("a0", "a1", "b0", "b1"):
            lo, hi = getattr(self, name)
            object.__setattr__(self, name, (float(lo), float(hi)))
            if lo > hi:
                raise SimulationError(f"interval {name} has lower bound above upper bound")
        if not 0.0 < self.gamma <= 1.0:
            raise SimulationError("gamma must lie in (0, 1]")
        _check_grid(self)

    @property
    def dt(self) -> float:
        return self.maturity / self.n_steps

    def midpoints(self) -> tuple[float, float, float, float]:
        return tuple(0.5 * (lo + hi) for lo, hi in (self.a0, self.a1, self.b0, self.b1))


MarketModelSpec = Union[BSSpec, HestonSpec, GADSpec]
_SPEC_TYPES = {"bs": BSSpec, "heston": HestonSpec, "gad": GADSpec}


def _check_grid(spec) -> None:
    if spec.n_steps < 1:
        raise SimulationError("n_steps must be >= 1")
    if not spec.maturity > 0:
        raise SimulationError("maturity must be positive")


def spec_to_dict(spec: MarketModelSpec) -> dict[str, Any]:
    out = {"model": spec.kind}
    for f in dataclasses.fields(spec):
        value = getattr(spec, f.name)
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


def spec_from_dict(data: dict[str, Any]) -> MarketModelSpec:
    data = dict(data)
    kind = data.pop("model")
    try:
        cls = _SPEC_TYPES[kind]
    except KeyError:
        raise SimulationError(f"unknown market model {kind!r}") from None
    for key in ("a0", "a1", "b0", "b1"):
        if key in data:
            data[key] = tuple(data[key])
    return cls(**data)


# ---------------------------------------------------------------------------
# path container


@dataclass(frozen=True, eq=False)
class PathBatch:
    """N samples of d named trajectories on a grid of T+1 dates."""

    values: np.ndarray
    tracks: tuple[str, ...]
    dt: float
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "tracks", tuple(self.tracks))
        if values.ndim != 3:
            raise SimulationError("values must have shape N x d x (T+1)")
        n, d, t1 = values.shape
        if n < 1 or t1 < 2:
            raise SimulationError("need N >= 1 and T >= 1")
        if d != len(self.tracks) or d < 1:
            raise SimulationError("track labels do not match the values array")
        if not np.all(np.isfinite(values)):
            raise SimulationError("path values must be finite")

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def horizon_steps(self) -> int:
        return self.values.shape[2] - 1

    def index(self, name: str) -> int:
        try:
            return self.tracks.index(name)
        except ValueError:
            raise KeyError(f"track {name!r} not in batch (have {self.tracks})") from None

    def track(self, name: str) -> np.ndarray:
        return self.values[:, self.index(name), :]

    def has_shared_initial(self) -> bool:
        return bool(np.all(self.values[:, :, 0] == self.values[:1, :, 0]))

    def with_values(self, values: np.ndarray, **meta) -> PathBatch:
        return PathBatch(values, self.tracks, self.dt, {**self.meta, **meta})

    def subset(self, idx) -> PathBatch:
        return PathBatch(self.values[idx], self.tracks, self.dt, dict(self.meta))

    @property
    def model_spec(self) -> MarketModelSpec | None:
        raw = self.meta.get("spec")
        return spec_from_dict(raw) if raw else None


def concat_batches(batches: list[PathBatch]) -> PathBatch:
    first = batches[0]
    for b in batches[1:]:
        if b.tracks != first.tracks or b.horizon_steps != first.horizon_steps:
            raise SimulationError("cannot concatenate batches with different layouts")
    meta = {k: v for k, v in first.meta.items() if k != "spec"}
    meta["parts"] = len(batches)
    return PathBatch(np.concatenate([b.values for b in batches]), first.tracks, first.dt, meta)


# ---------------------------------------------------------------------------
# random streams


def _block_rng(seed: int, stream: int, block: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, stream, block])
    return np.random.Generator(np.random.Philox(ss))


def standard_normals(seed: int, n: int, steps: int, stream: int = _STREAM_BROWNIAN) -> np.ndarray:
    """(n, steps) standard normals, reproducible per sample block."""
    out = np.empty((n, steps))
    for block, start in enumerate(range(0, n, BLOCK_SIZE)):
        stop = min(start + BLOCK_SIZE, n)
        out[start:stop] = _block_rng(seed, stream, block).standard_normal((stop - start, steps))
    return out


def uniforms(seed: int, n: int, shape: tuple[int, ...], stream: int = _STREAM_PARAMS) -> np.ndarray:
    out = np.empty((n, *shape))
    for block, start in enumerate(range(0, n, BLOCK_SIZE)):
        stop = min(start + BLOCK_SIZE, n)
        out[start:stop] = _block_rng(seed, stream, block).random((stop - start, *shape))
    return out


def _check_n(n: int) -> None:
    if n < 1:
        raise SimulationError("number of paths must be >= 1")


def _meta(spec, seed, **extra) -> dict[str, Any]:
    return {"spec": spec_to_dict(spec), "seed": int(seed), **extra}


# ---------------------------------------------------------------------------
# simulators


def simulate_bs(spec: BSSpec, n: int, seed: int) -> PathBatch:
    """Exact log-normal stepping; sigma = 0 gives s0 * exp(m t dt) exactly."""
    if not isinstance(spec, BSSpec):
        raise SimulationError("simulate_bs needs a BSSpec")
    _check_n(n)
    T, dt = spec.n_steps, spec.dt
    z = standard_normals(seed, n, T)
    t = np.arange(T + 1, dtype=np.float64)
    log_s = np.empty((n, T + 1))
    log_s[:, 0] = 0.0
    np.cumsum(z, axis=1, out=log_s[:, 1:])
    log_s *= spec.sigma * math.sqrt(dt)
    log_s += (spec.drift - 0.5 * spec.sigma**2) * dt * t
    paths = spec.s0 * np.exp(log_s)
    paths[:, 0] = spec.s0
    return PathBatch(paths[:, None, :], ("S",), dt, _meta(spec, seed))


def simulate_heston(spec: HestonSpec, n: int, seed: int) -> PathBatch:
    """Euler price, full-truncation Euler variance, plus the variance-swap track."""
    if not isinstance(spec, HestonSpec):
        raise SimulationError("simulate_heston needs a HestonSpec")
    _check_n(n)
    T, dt = spec.n_steps, spec.dt
    sqdt = math.sqrt(dt)
    z1 = standard_normals(seed, n, T, _STREAM_BROWNIAN)
    z2 = spec.rho * z1 + math.sqrt(1.0 - spec.rho**2) * standard_normals(seed, n, T, _STREAM_BROWNIAN_2)
    s = np.empty((n, T + 1))
    v = np.empty((n, T + 1))
    s[:, 0] = spec.s0
    v[:, 0] = spec.v0
    for t in range(T):
        vp = np.maximum(v[:, t], 0.0)
        root = np.sqrt(vp)
        s[:, t + 1] = s[:, t] + spec.drift * s[:, t] * dt + root * s[:, t] * sqdt * z1[:, t]
        v[:, t + 1] = v[:, t] + spec.a * (spec.b - vp) * dt + spec.sigma * root * sqdt * z2[:, t]
    swap = variance_swap_curve(v, spec)
    values = np.stack([s, v, swap], axis=1)
    return PathBatch(values, ("S", "v", "Vswap"), dt, _meta(spec, seed))


def variance_swap_curve(v_path: np.ndarray, spec: HestonSpec) -> np.ndarray:
    """Variance-swap value along the grid; works on any leading batch shape.

    The realised part is the cumulative trapezium integral of ``v_path``.
    """
    if spec.a <= 0:
        raise SimulationError("variance swap needs a > 0")
    v = np.asarray(v_path, dtype=np.float64)
    T = v.shape[-1] - 1
    if T != spec.n_steps:
        raise SimulationError("variance path length does not match n_steps + 1")
    dt = spec.dt
    realised = np.zeros_like(v)
    np.cumsum(0.5 * dt * (v[..., 1:] + v[..., :-1]), axis=-1, out=realised[..., 1:])
    tau = (T - np.arange(T + 1)) * dt
    return realised + (v - spec.b) / spec.a * (1.0 - np.exp(-spec.a * tau)) + spec.b * tau


def variance_swap_adjoint(grad_swap: np.ndarray, spec: HestonSpec) -> np.ndarray:
    """Transpose of the (affine) map v -> variance_swap_curve(v) applied to ``grad_swap``."""
    g = np.asarray(grad_swap, dtype=np.float64)
    T = g.shape[-1] - 1
    dt = spec.dt
    tau = (T - np.arange(T + 1)) * dt
    out = g * (1.0 - np.exp(-spec.a * tau)) / spec.a
    # tail[s] = sum_{t >= s} g[t]
    tail = np.flip(np.cumsum(np.flip(g, axis=-1), axis=-1), axis=-1)
    after = np.zeros_like(g)
    after[..., :-1] = tail[..., 1:]
    out[..., 0] += 0.5 * dt * after[..., 0]
    out[..., 1:] += dt * (0.5 * g[..., 1:] + after[..., 1:])
    return out


def simulate_gad(spec: GADSpec, n: int, seed: int, interval_mode: bool = False) -> PathBatch:
    """Euler-Maruyama GAD paths.

    With ``interval_mode`` the four coefficients are redrawn uniformly per path
    and per step from their intervals; otherwise the interval midpoints are used.
    A negative diffusion base is clamped at zero and counted in
    ``meta["degenerate_steps"]``.
    """
    if not isinstance(spec, GADSpec):
        raise SimulationError("simulate_gad needs a GADSpec")
    _check_n(n)
    T, dt = spec.n_steps, spec.dt
    dw = math.sqrt(dt) * standard_normals(seed, n, T)
    s = np.empty((n, T + 1))
    s[:, 0] = spec.s0
    if interval_mode:
        u = uniforms(seed, n, (T, 4))
        lo = np.array([spec.a0[0], spec.a1[0], spec.b0[0], spec.b1[0]])
        hi = np.array([spec.a0[1], spec.a1[1], spec.b0[1], spec.b1[1]])
        coef = lo + (hi - lo) * u
    else:
        coef = np.broadcast_to(np.array(spec.midpoints()), (n, T, 4))
    degenerate = 0
    for t in range(1, T + 1):
        a0, a1, b0, b1 = (coef[:, t - 1, k] for k in range(4))
        prev = s[:, t - 1]
        base = a0 + a1 * prev
        neg = base < 0
        degenerate += int(neg.sum())
        base = np.where(neg, 0.0, base)
        s[:, t] = prev + (b0 + b1 * prev) * dt + base**spec.gamma * dw[:, t - 1]
    return PathBatch(
        s[:, None, :],
        ("S",),
        dt,
        _meta(spec, seed, interval_mode=bool(interval_mode), degenerate_steps=degenerate),
    )


def simulate(spec: MarketModelSpec, n: int, seed: int, interval_mode: bool = False) -> PathBatch:
    if isinstance(spec, BSSpec):
        return simulate_bs(spec, n, seed)
    if isinstance(spec, HestonSpec):
        return simulate_heston(spec, n, seed)
    if isinstance(spec, GADSpec):
        return simulate_gad(spec, n, seed, interval_mode)
    raise SimulationError(f"unsupported spec {type(spec).__name__}")


# ---------------------------------------------------------------------------
# out-of-distribution parameter draws

_OOD_FIELDS = {
    "bs": ("drift", "sigma"),
    "heston": ("v0", "a", "b", "sigma", "rho", "drift"),
}


def perturb_params_ood(
    spec: MarketModelSpec, k: int, lo: float = 0.9, hi: float = 1.1, seed: int = 0
) -> list[MarketModelSpec]:
    """k copies of ``spec`` with every numeric parameter (except s0) scaled by its own U[lo, hi] factor."""
    if lo > hi:
        raise SimulationError("need lo <= hi")
    try:
        names = _OOD_FIELDS[spec.kind]
    except KeyError:
        raise SimulationError("OOD perturbation supports BS and Heston specs") from None
    factors = uniforms(seed, k, (len(names),), _STREAM_OOD) * (hi - lo) + lo
    out = []
    for row in factors:
        updates = {name: getattr(spec, name) * f for name, f in zip(names, row)}
        if "rho" in updates:
            updates["rho"] = min(1.0, max(-1.0, updates["rho"]))
        for name in ("sigma", "v0", "b"):
            if name in updates:
                updates[name] = max(0.0, updates[name])
        out.append(dataclasses.replace(spec, **updates))
    return out


# ---------------------------------------------------------------------------
# persistence


def save_batch(batch: PathBatch, path: str | Path) -> Path:
    """Binary RHPB1 container plus a JSON sidecar (``<path>.json``) holding the metadata."""
    path = Path(path)
    n, d, t1 = batch.values.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<QIId", n, d, t1, batch.dt))
        for label in batch.tracks:
            raw = label.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
        fh.write(batch.values.astype("<f8", copy=False).tobytes(order="C"))
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps(batch.meta, indent=2, sort_keys=True))
    return path


def load_batch(path: str | Path) -> PathBatch:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise SimulationError(f"{path} is not an RHPB1 path batch")
        n, d, t1, dt = struct.unpack("<QIId", fh.read(struct.calcsize("<QIId")))
        labels = []
        for _ in range(d):
            (size,) = struct.unpack("<H", fh.read(2))
            labels.append(fh.read(size).decode("utf-8"))
        payload = fh.read()
    values = np.frombuffer(payload, dtype="<f8").reshape(n, d, t1).astype(np.float64)
    sidecar = path.with_name(path.name + ".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return PathBatch(values, tuple(labels), dt, meta)

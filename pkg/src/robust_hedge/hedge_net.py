"""Per-timestep hedging networks with a hand-written reverse pass.

Each hedging date t has its own block

    in -> Linear(20) -> BatchNorm -> ReLU -> Linear(20) -> BatchNorm -> ReLU -> Linear(r)

NetSim blocks see the market features at date t; NetRec blocks additionally
see the previous holding.  Parameters carry a leading date axis.

The backward pass returns gradients for every parameter, for the OCE
threshold omega and for the input tracks of the path batch, so one call
serves both training and the data attacks.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from robust_hedge.market_sim import PathBatch
from robust_hedge.objective import (
    CostSpec,
    PayoffSpec,
    RiskMeasureSpec,
    hedge_tracks,
    instrument_prices,
    instrument_prices_backward,
    oce_pointwise_grad,
    oce_pointwise_loss,
    payoff_grad,
    payoff_values,
    pnl_backward,
    pnl_from_prices,
)

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
HIDDEN = 20
CKPT_MAGIC = b"RHNN1"
# small output layer so the first holdings are near zero; keeps early
# entropic losses from being dominated by a handful of paths
OUTPUT_INIT_SCALE = 0.1
CKPT_VERSION = 1

PARAM_NAMES = ("W1", "b1", "g1", "be1", "W2", "b2", "g2", "be2", "W3", "b3", "omega")
RUNNING_NAMES = ("rm1", "rv1", "rm2", "rv2")
ARCHS = ("NetSim", "NetRec")


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class HedgeNetwork:
    arch: str
    features: tuple[str, ...]
    n_outputs: int
    n_steps: int
    params: dict[str, np.ndarray]
    running: dict[str, np.ndarray]
    hidden: int = HIDDEN

    @property
    def input_width(self) -> int:
        return len(self.features) + (self.n_outputs if self.arch == "NetRec" else 0)

    @property
    def omega(self) -> float:
        return float(self.params["omega"])

    def copy(self) -> HedgeNetwork:
        return HedgeNetwork(
            self.arch,
            self.features,
            self.n_outputs,
            self.n_steps,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.running.items()},
            self.hidden,
        )

    def layout(self) -> dict[str, Any]:
        return {
            "arch": self.arch,
            "features": list(self.features),
            "n_outputs": self.n_outputs,
            "n_steps": self.n_steps,
            "hidden": self.hidden,
        }


@dataclass
class GradientBundle:
    loss: float
    params: dict[str, np.ndarray]
    inputs: np.ndarray  # (N, len(tracks), T+1)
    tracks: tuple[str, ...]
    sample_losses: np.ndarray
    pnl: np.ndarray


@dataclass
class OptimizerState:
    lr0: float = 0.005
    decay_factor: float = 0.5
    decay_every: int = 0  # epochs; 0 disables decay
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    epoch: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def lr(self) -> float:
        if self.decay_every <= 0:
            return self.lr0
        return self.lr0 * self.decay_factor ** (self.epoch // self.decay_every)


def default_layout(batch_or_tracks, arch: str = "NetSim") -> dict[str, Any]:
    """Network layout implied by a dataset: BS/GAD -> (S,), Heston -> (S, v)."""
    tracks = batch_or_tracks.tracks if isinstance(batch_or_tracks, PathBatch) else tuple(batch_or_tracks)
    features = ("S", "v") if "v" in tracks else ("S",)
    n_outputs = 2 if "Vswap" in tracks else 1
    return {"arch": arch, "features": features, "n_outputs": n_outputs}


def init_network(
    arch: str,
    features: tuple[str, ...],
    n_outputs: int,
    n_steps: int,
    seed: int,
    hidden: int = HIDDEN,
) -> HedgeNetwork:
    """He fan-in weights (output layer shrunk), zero biases, unit BN scale, zero shift, omega = 0."""
    if arch not in ARCHS:
        raise ValueError(f"arch must be one of {ARCHS}")
    if n_steps < 1:
        raise ValueError("need at least one hedging date")
    features = tuple(features)
    width = len(features) + (n_outputs if arch == "NetRec" else 0)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 7])))
    T, H = n_steps, hidden

    def he(fan_in, fan_out):
        return rng.standard_normal((T, fan_in, fan_out)) * math.sqrt(2.0 / fan_in)

    params = {
        "W1": he(width, H),
        "b1": np.zeros((T, H)),
        "g1": np.ones((T, H)),
        "be1": np.zeros((T, H)),
        "W2": he(H, H),
        "b2": np.zeros((T, H)),
        "g2": np.ones((T, H)),
        "be2": np.zeros((T, H)),
        "W3": OUTPUT_INIT_SCALE * he(H, n_outputs),
        "b3": np.zeros((T, n_outputs)),
        "omega": np.zeros(()),
    }
    running = {
        "rm1": np.zeros((T, H)),
        "rv1": np.ones((T, H)),
        "rm2": np.zeros((T, H)),
        "rv2": np.ones((T, H)),
    }
    return HedgeNetwork(arch, features, n_outputs, n_steps, params, running, hidden)


# ---------------------------------------------------------------------------
# forward / backward, one date at a time
#
# Activations are feature-major, (width, N) per date, so reductions run along
# contiguous rows.
# Eval mode folds batch norm into the affine maps.


def _at(net: HedgeNetwork, t: int) -> dict[str, np.ndarray]:
    p = {k: v[t] for k, v in net.params.items() if k != "omega"}
    p.update({k: v[t] for k, v in net.running.items()})
    return p


def _block_forward(p, x, train: bool):
    """x: (in, N) -> out (r, N) plus cache.  Feature-major so reductions run along contiguous rows."""
    if train:
        h1 = p["W1"].T @ x + p["b1"][:, None]
        mu1, var1 = _moments(h1)
        inv1 = 1.0 / np.sqrt(var1 + BN_EPS)
        xhat1 = (h1 - mu1[:, None]) * inv1[:, None]
        a1 = p["g1"][:, None] * xhat1
        a1 += p["be1"][:, None]
        np.maximum(a1, 0.0, out=a1)
        h2 = p["W2"].T @ a1 + p["b2"][:, None]
        mu2, var2 = _moments(h2)
        inv2 = 1.0 / np.sqrt(var2 + BN_EPS)
        xhat2 = (h2 - mu2[:, None]) * inv2[:, None]
        a2 = p["g2"][:, None] * xhat2
        a2 += p["be2"][:, None]
        stats = (mu1, var1, inv1, xhat1, mu2, var2, inv2, xhat2)
    else:
        inv1 = 1.0 / np.sqrt(p["rv1"] + BN_EPS)
        s1 = p["g1"] * inv1
        a1 = (p["W1"] * s1).T @ x
        a1 += ((p["b1"] - p["rm1"]) * s1 + p["be1"])[:, None]
        np.maximum(a1, 0.0, out=a1)
        inv2 = 1.0 / np.sqrt(p["rv2"] + BN_EPS)
        s2 = p["g2"] * inv2
        a2 = (p["W2"] * s2).T @ a1
        a2 += ((p["b2"] - p["rm2"]) * s2 + p["be2"])[:, None]
        stats = (inv1, inv2)
    np.maximum(a2, 0.0, out=a2)
    out = p["W3"].T @ a2 + p["b3"][:, None]
    # post-activation values double as ReLU masks in the backward pass
    return out, (x, a1, a2, stats)


def _moments(h):
    mu = h.mean(axis=1)
    c = h - mu[:, None]
    return mu, np.einsum("hn,hn->h", c, c) / h.shape[1]


def _bn_train_backward(dxhat, xhat, inv):
    n = dxhat.shape[1]
    s1 = dxhat.sum(axis=1)
    s2 = np.einsum("hn,hn->h", dxhat, xhat)
    return inv[:, None] * (dxhat - (s1 / n)[:, None] - xhat * (s2 / n)[:, None])


def _block_backward(p, cache, dout, train: bool, want_params: bool):
    x, a1, a2, stats = cache
    g = {}
    if want_params:
        g["W3"] = a2 @ dout.T
        g["b3"] = dout.sum(axis=1)
    dy2 = p["W3"] @ dout
    dy2 *= a2 > 0
    if train:
        _, _, inv1, xhat1, _, _, inv2, xhat2 = stats
        dh2 = _bn_train_backward(dy2 * p["g2"][:, None], xhat2, inv2)
    else:
        inv1, inv2 = stats
        dh2 = dy2 * (p["g2"] * inv2)[:, None]
    if want_params:
        if not train:
            xhat2 = (p["W2"].T @ a1 + (p["b2"] - p["rm2"])[:, None]) * inv2[:, None]
        g["g2"] = np.einsum("hn,hn->h", dy2, xhat2)
        g["be2"] = dy2.sum(axis=1)
        g["W2"] = a1 @ dh2.T
        g["b2"] = dh2.sum(axis=1)
    dy1 = p["W2"] @ dh2
    dy1 *= a1 > 0
    if train:
        dh1 = _bn_train_backward(dy1 * p["g1"][:, None], xhat1, inv1)
    else:
        dh1 = dy1 * (p["g1"] * inv1)[:, None]
    if want_params:
        if not train:
            xhat1 = (p["W1"].T @ x + (p["b1"] - p["rm1"])[:, None]) * inv1[:, None]
        g["g1"] = np.einsum("hn,hn->h", dy1, xhat1)
        g["be1"] = dy1.sum(axis=1)
        g["W1"] = x @ dh1.T
        g["b1"] = dh1.sum(axis=1)
    dx = p["W1"] @ dh1
    return dx, g


def _update_running(net: HedgeNetwork, t: int, cache) -> None:
    stats = cache[3]
    n = cache[0].shape[1]
    unbias = n / (n - 1)
    for idx, mu, var in (("1", stats[0], stats[1]), ("2", stats[4], stats[5])):
        rm, rv = net.running["rm" + idx], net.running["rv" + idx]
        rm[t] = BN_MOMENTUM * rm[t] + (1 - BN_MOMENTUM) * mu
        rv[t] = BN_MOMENTUM * rv[t] + (1 - BN_MOMENTUM) * var * unbias


def network_features(net: HedgeNetwork, batch: PathBatch) -> np.ndarray:
    """(T, n_features, N) inputs for dates 0..T-1."""
    if batch.horizon_steps != net.n_steps:
        raise ValueError(f"network has {net.n_steps} dates but batch has {batch.horizon_steps}")
    cols = [batch.index(name) for name in net.features]
    return np.ascontiguousarray(batch.values[:, cols, :-1].transpose(2, 1, 0))


def _forward(net: HedgeNetwork, feats: np.ndarray, mode: str, update_running: bool):
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    train = mode == "train"
    T, _, N = feats.shape
    if train and N < 2:
        raise ValueError("train mode needs at least two samples for batch statistics")
    recurrent = net.arch == "NetRec"
    deltas = np.empty((N, net.n_outputs, T))
    prev = np.zeros((net.n_outputs, N))
    caches = []
    for t in range(T):
        x = np.concatenate([feats[t], prev], axis=0) if recurrent else feats[t]
        out, cache = _block_forward(_at(net, t), x, train)
        if train and update_running:
            _update_running(net, t, cache)
        deltas[:, :, t] = out.T
        prev = out
        caches.append(cache)
    return deltas, caches


def _backward(net: HedgeNetwork, caches, d_deltas: np.ndarray, train: bool, want_params: bool):
    n_feat = len(net.features)
    T = net.n_steps
    grads = {k: np.zeros_like(v) for k, v in net.params.items() if k != "omega"} if want_params else {}
    d_feats = np.empty((T, n_feat, d_deltas.shape[0]))
    carry = 0.0
    for t in reversed(range(T)):
        dout = d_deltas[:, :, t].T + carry
        dx, g = _block_backward(_at(net, t), caches[t], dout, train, want_params)
        for k, v in g.items():
            grads[k][t] = v
        d_feats[t] = dx[:n_feat]
        if net.arch == "NetRec":
            carry = dx[n_feat:]
    return d_feats, grads


def forward(net: HedgeNetwork, batch: PathBatch, mode: str = "eval", update_running: bool = True) -> np.ndarray:
    """Holdings of shape (N, r, T).  Train mode refreshes running BN statistics."""
    deltas, caches = _forward(net, network_features(net, batch), mode, update_running)
    if not np.all(np.isfinite(deltas)):
        _raise_nonfinite(caches, net.arch)
    return deltas


def calibrate_running_stats(net: HedgeNetwork, batch: PathBatch) -> None:
    """Set the running statistics to the exact (population) batch statistics of ``batch``.

    Afterwards eval mode on ``batch`` reproduces train mode up to rounding.
    The momentum average alone lags badly when there are only a few updates
    per epoch, and at date 0 every path shares one input, so the batch
    variance there is zero and any lag in the running mean is blown up by
    1 / sqrt(eps).
    """
    feats = network_features(net, batch)
    prev = np.zeros((net.n_outputs, batch.n_samples))
    for t in range(net.n_steps):
        x = np.concatenate([feats[t], prev], axis=0) if net.arch == "NetRec" else feats[t]
        out, cache = _block_forward(_at(net, t), x, True)
        mu1, var1, _, _, mu2, var2, _, _ = cache[3]
        net.running["rm1"][t] = mu1
        net.running["rv1"][t] = var1
        net.running["rm2"][t] = mu2
        net.running["rv2"][t] = var2
        prev = out
    for name, arr in net.running.items():
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite running statistic {name}")


def _raise_nonfinite(caches, arch: str):
    labels = ("input", "act1", "act2")
    for t, cache in enumerate(caches):
        for label, arr in zip(labels, cache):
            if not np.all(np.isfinite(arr)):
                raise NonFiniteError(f"non-finite values in {label} at date {t}")
    raise NonFiniteError("non-finite network output")


def loss_and_grads(
    net: HedgeNetwork,
    batch: PathBatch,
    payoff_spec: PayoffSpec,
    cost: CostSpec,
    measure: RiskMeasureSpec,
    mode: str = "eval",
    attacked: tuple[str, ...] = ("S",),
    omega: float | None = None,
    update_running: bool = False,
    need_param_grads: bool = True,
) -> GradientBundle:
    """Mean deep-hedging loss with gradients for parameters, omega and the attacked tracks.

    Input gradients collect every pathway through which a track enters the
    loss: network inputs, traded price increments, the cost term, the payoff
    and (for Heston) the variance swap re-derived from ``v``.  Entries at
    date 0 are zeroed.
    """
    train = mode == "train"
    omega = net.omega if omega is None else float(omega)
    feats = network_features(net, batch)
    deltas, caches = _forward(net, feats, mode, update_running and train)
    if not np.all(np.isfinite(deltas)):
        _raise_nonfinite(caches, net.arch)
    prices = instrument_prices(batch)
    s = batch.track("S")
    claim = payoff_values(payoff_spec, s)
    values = pnl_from_prices(deltas, prices, claim, cost.rate)
    losses = oce_pointwise_loss(measure, values, omega)
    loss = float(np.mean(losses))
    if not math.isfinite(loss):
        bad = int(np.argmax(~np.isfinite(losses)))
        raise NonFiniteError(f"non-finite loss at sample {bad} (OCE layer)")
    n = values.shape[0]
    dl_dpnl, dl_domega = oce_pointwise_grad(measure, values, omega)
    g_pnl = dl_dpnl / n
    d_deltas, d_prices = pnl_backward(deltas, prices, g_pnl, cost.rate)
    d_feats, grads = _backward(net, caches, d_deltas, train, need_param_grads)
    if need_param_grads:
        grads["omega"] = np.asarray(np.mean(dl_domega))
    track_grads = instrument_prices_backward(batch, d_prices)
    track_grads["S"] = track_grads["S"] - g_pnl[:, None] * payoff_grad(payoff_spec, s)
    for j, name in enumerate(net.features):
        extra = np.zeros((n, batch.horizon_steps + 1))
        extra[:, :-1] = d_feats[:, j, :].T
        track_grads[name] = track_grads.get(name, 0.0) + extra
    attacked = tuple(attacked)
    inputs = np.zeros((n, len(attacked), batch.horizon_steps + 1))
    for i, name in enumerate(attacked):
        if name not in batch.tracks:
            raise KeyError(f"attacked track {name!r} not in batch")
        if name in track_grads:
            inputs[:, i] = track_grads[name]
    inputs[:, :, 0] = 0.0
    return GradientBundle(loss, grads if need_param_grads else {}, inputs, attacked, losses, values)


def hedge_loss(
    net: HedgeNetwork,
    batch: PathBatch,
    payoff_spec: PayoffSpec,
    cost: CostSpec,
    measure: RiskMeasureSpec,
    omega: float | None = None,
    mode: str = "eval",
) -> float:
    """Mean deep-hedging loss without gradients."""
    omega = net.omega if omega is None else omega
    deltas = forward(net, batch, mode, update_running=False)
    prices = instrument_prices(batch)
    claim = payoff_values(payoff_spec, batch.track("S"))
    values = pnl_from_prices(deltas, prices, claim, cost.rate)
    return float(np.mean(oce_pointwise_loss(measure, values, omega)))


def strategy_pnl(net: HedgeNetwork, batch: PathBatch, payoff_spec: PayoffSpec, cost: CostSpec) -> np.ndarray:
    deltas = forward(net, batch, "eval")
    return pnl_from_prices(deltas, instrument_prices(batch), payoff_values(payoff_spec, batch.track("S")), cost.rate)


# ---------------------------------------------------------------------------
# Adam


def apply_update(net: HedgeNetwork, grads: dict[str, np.ndarray], opt: OptimizerState):
    """One bias-corrected Adam step on every parameter, omega included."""
    if not opt.m:
        opt.m = {k: np.zeros_like(v) for k, v in net.params.items()}
        opt.v = {k: np.zeros_like(v) for k, v in net.params.items()}
    opt.step += 1
    lr = opt.lr
    c1 = 1.0 - opt.beta1**opt.step
    c2 = 1.0 - opt.beta2**opt.step
    for name, g in grads.items():
        if g.shape != net.params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {net.params[name].shape}")
        m = opt.m[name]
        v = opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        net.params[name] = net.params[name] - lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    return net, opt


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(
    net: HedgeNetwork,
    path: str | Path,
    opt: OptimizerState | None = None,
    manifest: dict[str, Any] | None = None,
) -> Path:
    """RHNN1 binary checkpoint plus ``<path>.json`` manifest."""
    path = Path(path)
    tensors: list[tuple[str, np.ndarray]] = [("param/" + k, net.params[k]) for k in PARAM_NAMES]
    tensors += [("running/" + k, net.running[k]) for k in RUNNING_NAMES]
    opt_meta = None
    if opt is not None:
        opt_meta = {
            k: getattr(opt, k)
            for k in ("lr0", "decay_factor", "decay_every", "beta1", "beta2", "eps", "step", "epoch")
        }
        for k in sorted(opt.m):
            tensors.append(("adam_m/" + k, opt.m[k]))
            tensors.append(("adam_v/" + k, opt.v[k]))
    header = {
        "version": CKPT_VERSION,
        "layout": net.layout(),
        "optimizer": opt_meta,
        "tensors": [[name, list(arr.shape)] for name, arr in tensors],
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    side = path.with_name(path.name + ".json")
    side.write_text(json.dumps(manifest or {}, indent=2, sort_keys=True))
    return path


def load_checkpoint(path: str | Path) -> tuple[HedgeNetwork, OptimizerState | None]:
    path = Path(path)
    data = path.read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise ValueError(f"{path} is not an RHNN1 checkpoint")
    pos = len(CKPT_MAGIC)
    (size,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    header = json.loads(data[pos : pos + size].decode("utf-8"))
    pos += size
    if header["version"] != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['version']}")
    arrays = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    lay = header["layout"]
    net = HedgeNetwork(
        lay["arch"],
        tuple(lay["features"]),
        lay["n_outputs"],
        lay["n_steps"],
        {k: arrays["param/" + k] for k in PARAM_NAMES},
        {k: arrays["running/" + k] for k in RUNNING_NAMES},
        lay["hidden"],
    )
    opt = None
    if header["optimizer"] is not None:
        opt = OptimizerState(**header["optimizer"])
        opt.m = {k[7:]: v for k, v in arrays.items() if k.startswith("adam_m/")}
        opt.v = {k[7:]: v for k, v in arrays.items() if k.startswith("adam_v/")}
    return net, opt


def check_hedge_tracks(net: HedgeNetwork, batch: PathBatch) -> None:
    if len(hedge_tracks(batch)) != net.n_outputs:
        raise ValueError("network output width does not match the tradable instruments of the batch")
    for name in net.features:
        batch.index(name)

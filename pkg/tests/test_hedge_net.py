import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import calibrated_net, rel_err
from robust_hedge.hedge_net import (
    HIDDEN,
    NonFiniteError,
    OptimizerState,
    apply_update,
    calibrate_running_stats,
    check_hedge_tracks,
    default_layout,
    forward,
    hedge_loss,
    init_network,
    load_checkpoint,
    loss_and_grads,
    save_checkpoint,
)
from robust_hedge.objective import AsianPut, CostSpec, Entropic, oce_pointwise_loss, pnl


def input_fd(net, batch, payoff, cost, measure, track, coords, h=1e-5):
    k = batch.index(track)
    out = []
    for i, t in coords:
        up, dn = batch.values.copy(), batch.values.copy()
        up[i, k, t] += h
        dn[i, k, t] -= h
        lu = hedge_loss(net, batch.with_values(up), payoff, cost, measure)
        ld = hedge_loss(net, batch.with_values(dn), payoff, cost, measure)
        out.append((lu - ld) / (2 * h))
    return np.array(out)


def random_coords(batch, count, seed):
    rng = np.random.default_rng(seed)
    return [(int(rng.integers(batch.n_samples)), int(rng.integers(1, batch.horizon_steps + 1))) for _ in range(count)]


class TestInit:
    def test_same_seed_same_params(self):
        a = init_network("NetSim", ("S",), 1, 30, 4)
        b = init_network("NetSim", ("S",), 1, 30, 4)
        for k in a.params:
            assert np.array_equal(a.params[k], b.params[k])

    def test_bs_layout_shapes(self):
        net = init_network("NetSim", ("S",), 1, 30, 0)
        assert net.params["W1"].shape == (30, 1, HIDDEN)
        assert net.params["W2"].shape == (30, HIDDEN, HIDDEN)
        assert net.params["W3"].shape == (30, HIDDEN, 1)
        assert net.params["g1"].shape == (30, HIDDEN)
        assert net.running["rv2"].shape == (30, HIDDEN)
        assert float(net.params["omega"]) == 0.0

    def test_netrec_heston_width(self):
        net = init_network("NetRec", ("S", "v"), 2, 30, 0)
        assert net.input_width == 2 + 2
        assert net.params["W1"].shape == (30, 4, HIDDEN)

    def test_default_layout(self, heston_batch, bs_batch):
        assert default_layout(heston_batch) == {"arch": "NetSim", "features": ("S", "v"), "n_outputs": 2}
        assert default_layout(bs_batch, "NetRec")["features"] == ("S",)

    def test_bad_arch(self):
        with pytest.raises(ValueError):
            init_network("LSTM", ("S",), 1, 3, 0)

    def test_track_check(self, heston_batch):
        net = init_network("NetSim", ("S",), 1, 30, 0)
        with pytest.raises(ValueError):
            check_hedge_tracks(net, heston_batch)


class TestForward:
    def test_eval_is_pure(self, heston_net, heston_batch):
        a = forward(heston_net, heston_batch)
        b = forward(heston_net, heston_batch)
        assert np.array_equal(a, b)
        assert a.shape == (64, 2, 30)

    def test_permutation_equivariant(self, heston_net, heston_batch):
        perm = np.random.default_rng(0).permutation(64)
        a = forward(heston_net, heston_batch)[perm]
        b = forward(heston_net, heston_batch.subset(perm))
        np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-15)

    def test_train_mode_updates_running_stats(self, bs_batch):
        net = init_network("NetSim", ("S",), 1, 30, 0)
        before = net.running["rm1"].copy()
        forward(net, bs_batch, "train", update_running=True)
        assert not np.array_equal(before, net.running["rm1"])
        snap = net.running["rm1"].copy()
        forward(net, bs_batch, "train", update_running=False)
        forward(net, bs_batch, "eval")
        assert np.array_equal(snap, net.running["rm1"])

    @pytest.mark.parametrize("arch", ["NetSim", "NetRec"])
    def test_calibrated_eval_matches_train(self, heston_batch, arch):
        net = init_network(arch, ("S", "v"), 2, 30, 6)
        net.params["W1"] *= 3.0
        calibrate_running_stats(net, heston_batch)
        a = forward(net, heston_batch, "eval")
        b = forward(net, heston_batch, "train", update_running=False)
        np.testing.assert_allclose(a, b, rtol=1e-8, atol=1e-8)
        # every path starts from the same state, so date 0 has no spread
        assert np.all(net.running["rv1"][0] < 1e-20)

    def test_netrec_zero_output_layer(self, bs_batch):
        net = calibrated_net(bs_batch, seed=3, arch="NetRec")
        net.params["W3"][:] = 0.0
        net.params["b3"][:] = np.linspace(-1, 1, 30)[:, None]
        d = forward(net, bs_batch)
        np.testing.assert_array_equal(d, np.broadcast_to(np.linspace(-1, 1, 30), d.shape))

    def test_netrec_depends_on_previous_output(self, bs_batch):
        net = calibrated_net(bs_batch, seed=3, arch="NetRec")
        d0 = forward(net, bs_batch)
        net.params["b3"][0] += 1.0  # shifts delta_0, which feeds date 1
        d1 = forward(net, bs_batch)
        assert not np.allclose(d0[:, :, 1], d1[:, :, 1])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_named(self, bs_batch):
        net = calibrated_net(bs_batch, seed=1)
        net.params["W2"][4, 0, 0] = np.inf
        with pytest.raises(NonFiniteError, match="date 4"):
            forward(net, bs_batch)


class TestGradients:
    @pytest.mark.parametrize("track", ["S", "v"])
    def test_heston_cvar_input_grads(self, heston_net, heston_batch, call, no_cost, cvar, track):
        batch = heston_batch.subset(slice(0, 10))
        b = loss_and_grads(heston_net, batch, call, no_cost, cvar, attacked=("S", "v"))
        coords = random_coords(batch, 10, 1)
        fd = input_fd(heston_net, batch, call, no_cost, cvar, track, coords)
        an = np.array([b.inputs[i, ("S", "v").index(track), t] for i, t in coords])
        assert rel_err(an, fd) < 1e-5

    @pytest.mark.parametrize("rate", [0.0, 0.005])
    def test_bs_entropic_input_grads(self, bs_net, bs_batch, call, entropic, rate):
        batch = bs_batch.subset(slice(0, 10))
        cost = CostSpec(rate)
        b = loss_and_grads(bs_net, batch, call, cost, entropic)
        coords = random_coords(batch, 10, 2)
        fd = input_fd(bs_net, batch, call, cost, entropic, "S", coords)
        an = np.array([b.inputs[i, 0, t] for i, t in coords])
        assert rel_err(an, fd) < 1e-5

    def test_netrec_asian_grads(self, bs_batch, entropic):
        batch = bs_batch.subset(slice(0, 10))
        net = calibrated_net(batch, seed=9, arch="NetRec")
        cost = CostSpec(0.002)
        b = loss_and_grads(net, batch, AsianPut(), cost, entropic)
        coords = random_coords(batch, 10, 3)
        fd = input_fd(net, batch, AsianPut(), cost, entropic, "S", coords)
        assert rel_err([b.inputs[i, 0, t] for i, t in coords], fd) < 1e-5

    def test_initial_date_gradient_zeroed(self, heston_net, heston_batch, call, no_cost, cvar):
        b = loss_and_grads(heston_net, heston_batch, call, no_cost, cvar, attacked=("S", "v"))
        assert np.all(b.inputs[:, :, 0] == 0.0)

    def test_zero_strategy_payoff_only(self, bs_batch, call, no_cost, entropic):
        net = init_network("NetSim", ("S",), 1, 30, 0)
        for k in net.params:
            net.params[k] = np.zeros_like(net.params[k])
        b = loss_and_grads(net, bs_batch, call, no_cost, entropic, omega=0.0)
        assert np.all(b.inputs[:, 0, :-1] == 0.0)
        s_T = bs_batch.track("S")[:, -1]
        z = -np.maximum(s_T - 100.0, 0.0)
        expected = np.exp(-z) * (s_T > 100.0) / bs_batch.n_samples
        np.testing.assert_allclose(b.inputs[:, 0, -1], expected, rtol=1e-13)

    def test_omega_grad(self, bs_net, bs_batch, call, no_cost):
        measure = Entropic(0.2)
        b = loss_and_grads(bs_net, bs_batch, call, no_cost, measure, omega=0.3)
        z = pnl(forward(bs_net, bs_batch), bs_batch, call, no_cost)
        h = 1e-5

        def mean_loss(w):
            return np.mean(oce_pointwise_loss(measure, z, w))

        fd = (mean_loss(0.3 + h) - mean_loss(0.3 - h)) / (2 * h)
        assert abs(float(b.params["omega"]) - fd) < 1e-10 * max(1.0, abs(fd))

    @pytest.mark.parametrize("mode", ["train", "eval"])
    def test_param_grads(self, heston_batch, call, entropic, mode):
        batch = heston_batch.subset(slice(0, 16))
        net = calibrated_net(batch, seed=4)
        cost = CostSpec(0.001)
        b = loss_and_grads(net, batch, call, cost, entropic, mode=mode)
        rng = np.random.default_rng(5)
        h = 1e-6
        an, fd = [], []
        for name in ("W1", "b1", "g1", "be1", "W2", "g2", "W3", "b3"):
            for _ in range(3):
                idx = tuple(int(rng.integers(s)) for s in net.params[name].shape)
                orig = net.params[name][idx]
                net.params[name][idx] = orig + h
                lu = hedge_loss(net, batch, call, cost, entropic, mode=mode)
                net.params[name][idx] = orig - h
                ld = hedge_loss(net, batch, call, cost, entropic, mode=mode)
                net.params[name][idx] = orig
                an.append(b.params[name][idx])
                fd.append((lu - ld) / (2 * h))
        assert rel_err(an, fd) < 1e-5

    def test_no_param_grads_requested(self, bs_net, bs_batch, call, no_cost, entropic):
        b = loss_and_grads(bs_net, bs_batch, call, no_cost, entropic, need_param_grads=False)
        full = loss_and_grads(bs_net, bs_batch, call, no_cost, entropic)
        assert b.params == {}
        np.testing.assert_array_equal(b.inputs, full.inputs)

    def test_unknown_attacked_track(self, bs_net, bs_batch, call, no_cost, entropic):
        with pytest.raises(KeyError):
            loss_and_grads(bs_net, bs_batch, call, no_cost, entropic, attacked=("v",))


class TestAdam:
    def _net(self):
        return init_network("NetSim", ("S",), 1, 3, 0)

    def test_zero_grads_keep_params(self):
        net = self._net()
        before = {k: v.copy() for k, v in net.params.items()}
        apply_update(net, {k: np.zeros_like(v) for k, v in net.params.items()}, OptimizerState(lr0=0.1))
        for k in before:
            assert np.array_equal(before[k], net.params[k])

    def test_identical_updates(self):
        a, b = self._net(), self._net()
        g = {k: np.full_like(v, 0.3) for k, v in a.params.items()}
        oa, ob = OptimizerState(), OptimizerState()
        for _ in range(3):
            apply_update(a, g, oa)
            apply_update(b, g, ob)
        for k in a.params:
            assert np.array_equal(a.params[k], b.params[k])

    @given(st.floats(1e-3, 1e3), st.sampled_from([-1.0, 1.0]))
    def test_constant_gradient_step_tends_to_lr(self, mag, sgn):
        net = self._net()
        opt = OptimizerState(lr0=0.01)
        g = {"omega": np.asarray(sgn * mag)}
        prev = float(net.params["omega"])
        for _ in range(200):
            apply_update(net, g, opt)
            cur = float(net.params["omega"])
            step = cur - prev
            prev = cur
        assert step == pytest.approx(-0.01 * sgn, rel=1e-5)

    def test_decay_schedule(self):
        opt = OptimizerState(lr0=0.05, decay_factor=0.5, decay_every=10)
        lrs = []
        for e in (0, 9, 10, 25, 40):
            opt.epoch = e
            lrs.append(opt.lr)
        assert lrs == [0.05, 0.05, 0.025, 0.0125, 0.05 / 16]

    def test_shape_mismatch(self):
        net = self._net()
        with pytest.raises(ValueError):
            apply_update(net, {"W1": np.zeros(3)}, OptimizerState())


class TestCheckpoint:
    def test_round_trip(self, tmp_path, heston_net, heston_batch, call, no_cost, cvar):
        net = heston_net.copy()
        opt = OptimizerState(lr0=0.05, decay_every=3)
        b = loss_and_grads(net, heston_batch, call, no_cost, cvar, mode="train")
        apply_update(net, b.params, opt)
        path = save_checkpoint(net, tmp_path / "m.rhnn", opt, {"note": "x"})
        assert path.read_bytes()[:5] == b"RHNN1"
        net2, opt2 = load_checkpoint(path)
        assert net2.layout() == net.layout()
        for k in net.params:
            assert np.array_equal(net.params[k], net2.params[k])
        for k in net.running:
            assert np.array_equal(net.running[k], net2.running[k])
        assert opt2.step == 1 and opt2.decay_every == 3
        for k in opt.m:
            assert np.array_equal(opt.m[k], opt2.m[k])
        assert np.array_equal(forward(net, heston_batch), forward(net2, heston_batch))

    def test_without_optimizer(self, tmp_path, bs_net):
        net2, opt2 = load_checkpoint(save_checkpoint(bs_net, tmp_path / "m.rhnn"))
        assert opt2 is None
        assert math.isclose(net2.omega, bs_net.omega)

    def test_foreign_file(self, tmp_path):
        p = tmp_path / "m.rhnn"
        p.write_bytes(b"RHPB1....")
        with pytest.raises(ValueError):
            load_checkpoint(p)

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from robust_hedge.market_sim import PathBatch
from robust_hedge.objective import (
    AsianPut,
    CostSpec,
    CVaR,
    Entropic,
    EuropeanCall,
    NumericOverflowError,
    dh_loss_batch,
    oce_pointwise_grad,
    oce_pointwise_loss,
    payoff,
    payoff_grad,
    payoff_values,
    pnl,
    pnl_backward,
    pnl_from_prices,
    risk_value,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def one_path(prices):
    return PathBatch(np.asarray(prices, dtype=float)[None, None, :], ("S",), 0.01)


class TestPayoff:
    def test_call_at_the_money(self):
        assert payoff(EuropeanCall(100), one_path([100, 90, 100]))[0] == 0.0

    def test_call_intrinsic(self):
        assert payoff(EuropeanCall(100), one_path([100, 101, 105]))[0] == 5.0

    def test_asian_put_flat_path(self):
        assert payoff(AsianPut(), one_path([10, 10, 10, 10]))[0] == 0.0

    def test_asian_put_value(self):
        # strike 10, average of dates 1..3 = 8
        assert payoff(AsianPut(), one_path([10, 9, 8, 7]))[0] == pytest.approx(2.0, abs=1e-15)

    def test_bad_strike(self):
        with pytest.raises(ValueError):
            EuropeanCall(0.0)

    @pytest.mark.parametrize("spec", [EuropeanCall(100.0), AsianPut()])
    def test_grad_matches_differences(self, spec):
        rng = np.random.default_rng(0)
        s = 100 + 5 * rng.standard_normal((6, 8))
        g = payoff_grad(spec, s)
        h = 1e-6
        for i in range(6):
            for j in range(8):
                up, dn = s.copy(), s.copy()
                up[i, j] += h
                dn[i, j] -= h
                fd = (payoff_values(spec, up)[i] - payoff_values(spec, dn)[i]) / (2 * h)
                assert abs(fd - g[i, j]) < 1e-6


class TestPnl:
    def test_unhedged(self):
        batch = one_path([100, 103, 110])
        out = pnl(np.zeros((1, 1, 2)), batch, EuropeanCall(100), CostSpec(0.0), p0=2.5)
        assert out[0] == 2.5 - 10.0

    def test_buy_and_hold_telescopes(self):
        batch = one_path([100, 97, 104, 99])
        out = pnl(np.ones((1, 1, 3)), batch, EuropeanCall(1000), CostSpec(0.0), p0=1.0)
        assert out[0] == pytest.approx(1.0 + 99 - 100, abs=1e-12)

    def test_cost_of_round_trip(self):
        # buy one unit at S0, sell it at S1: cost 0.005 * (S0 + S1)
        batch = one_path([100, 102, 101])
        d = np.array([[[1.0, 0.0]]])
        free = pnl(d, batch, EuropeanCall(1000), CostSpec(0.0))[0]
        taxed = pnl(d, batch, EuropeanCall(1000), CostSpec(0.005))[0]
        assert free - taxed == pytest.approx(0.005 * (100 + 102), abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            pnl(np.zeros((1, 1, 3)), one_path([1, 2, 3]), EuropeanCall(1.0))

    def test_negative_cost_rejected(self):
        with pytest.raises(ValueError):
            CostSpec(-0.1)

    @given(st.integers(0, 2**31), st.sampled_from([0.0, 0.003]))
    def test_backward_matches_differences(self, seed, rate):
        rng = np.random.default_rng(seed)
        n, r, T = 3, 2, 5
        prices = 10 + rng.standard_normal((n, r, T + 1))
        deltas = rng.standard_normal((n, r, T))
        claim = np.zeros(n)
        w = rng.standard_normal(n)
        d_deltas, d_prices = pnl_backward(deltas, prices, w, rate)

        def f(dd, pp):
            return float(w @ pnl_from_prices(dd, pp, claim, rate))

        h = 1e-6
        for arr, grad, first in ((deltas, d_deltas, True), (prices, d_prices, False)):
            for idx in np.ndindex(arr.shape):
                up, dn = arr.copy(), arr.copy()
                up[idx] += h
                dn[idx] -= h
                if first:
                    fd = (f(up, prices) - f(dn, prices)) / (2 * h)
                else:
                    fd = (f(deltas, up) - f(deltas, dn)) / (2 * h)
                assert abs(fd - grad[idx]) < 1e-5 * max(1.0, abs(fd))


class TestPointwiseLoss:
    def test_entropic_zero(self):
        assert oce_pointwise_loss(Entropic(1.0), 0.0, 0.0) == 0.0

    def test_cvar_substitution(self):
        assert oce_pointwise_loss(CVaR(0.5), -3.0, 1.0) == 5.0

    def test_cvar_inactive_hinge(self):
        assert oce_pointwise_loss(CVaR(0.9), 2.0, -1.5) == -1.5

    @pytest.mark.parametrize("measure", [Entropic(0.7), CVaR(0.3)])
    def test_grad(self, measure):
        z = np.linspace(-3, 3, 13) + 0.01
        w = 0.2
        gz, gw = oce_pointwise_grad(measure, z, w)
        h = 1e-7
        fd_z = (oce_pointwise_loss(measure, z + h, w) - oce_pointwise_loss(measure, z - h, w)) / (2 * h)
        fd_w = (oce_pointwise_loss(measure, z, w + h) - oce_pointwise_loss(measure, z, w - h)) / (2 * h)
        np.testing.assert_allclose(gz, fd_z, atol=1e-6)
        np.testing.assert_allclose(gw, fd_w, atol=1e-6)

    def test_bad_params(self):
        with pytest.raises(ValueError):
            Entropic(0.0)
        with pytest.raises(ValueError):
            CVaR(1.0)


class TestRiskValue:
    @given(st.floats(-300, 1e3), st.integers(1, 40), st.sampled_from([Entropic(1.0), Entropic(0.3), CVaR(0.5), CVaR(0.9)]))
    def test_constant_cash_invariance(self, c, n, measure):
        risk, _ = risk_value(measure, np.full(n, c))
        assert abs(risk + c) <= 1e-10 * max(1.0, abs(c))

    def test_cvar_worst_half(self):
        risk, _ = risk_value(CVaR(0.5), np.array([-1.0, -2.0, -3.0, -4.0]))
        assert risk == 3.5

    @given(st.integers(1, 25), st.integers(1, 25), st.integers(0, 2**31))
    def test_cvar_equals_tail_average(self, keep, extra, seed):
        # (1 - alpha) N integral: alpha = extra / (keep + extra)
        n = keep + extra
        alpha = extra / n
        z = np.random.default_rng(seed).standard_normal(n) * 3
        risk, _ = risk_value(CVaR(alpha), z)
        worst = np.sort(-z)[::-1][:keep]
        assert risk == pytest.approx(worst.mean(), rel=1e-12, abs=1e-12)

    @pytest.mark.parametrize("lam", [0.5, 1.0, 2.0])
    def test_entropic_omega_matches_grid_search(self, lam):
        z = np.random.default_rng(3).standard_normal(500)
        measure = Entropic(lam)
        risk, omega = risk_value(measure, z)

        def objective(w):
            return float(np.mean(oce_pointwise_loss(measure, z, w)))

        grid = np.linspace(omega - 2, omega + 2, 40001)
        best = grid[int(np.argmin([objective(w) for w in grid]))]
        # refine the grid minimum by golden-section search
        lo, hi = best - 1e-4, best + 1e-4
        phi = (math.sqrt(5) - 1) / 2
        for _ in range(80):
            a, b = hi - phi * (hi - lo), lo + phi * (hi - lo)
            if objective(a) < objective(b):
                hi = b
            else:
                lo = a
        assert abs(0.5 * (lo + hi) - omega) < 1e-6
        assert abs(objective(omega) - risk) < 1e-12

    @given(arrays(np.float64, st.integers(2, 30), elements=finite), st.floats(-20, 20), st.sampled_from([Entropic(1.0), CVaR(0.5)]))
    def test_cash_invariance_shift(self, z, c, measure):
        r0, _ = risk_value(measure, z)
        r1, _ = risk_value(measure, z + c)
        assert abs(r1 - (r0 - c)) <= 1e-10 * max(1.0, abs(r0), abs(c))

    @given(arrays(np.float64, st.integers(2, 30), elements=finite), st.sampled_from([Entropic(1.0), CVaR(0.5)]))
    def test_minimum_over_omega(self, z, measure):
        risk, omega = risk_value(measure, z)
        for w in (omega - 1, omega - 0.01, omega + 0.01, omega + 1):
            assert np.mean(oce_pointwise_loss(measure, z, w)) >= risk - 1e-9 * max(1.0, abs(risk))

    def test_overflow_reports_index(self):
        z = np.array([0.0, -1000.0, 1.0])
        with pytest.raises(NumericOverflowError) as info:
            risk_value(Entropic(1.0), z)
        assert info.value.index == 1

    def test_empty(self):
        with pytest.raises(ValueError):
            risk_value(CVaR(0.5), [])


class TestBatchLoss:
    def setup_method(self):
        rng = np.random.default_rng(11)
        self.values = 100 + rng.standard_normal((7, 1, 5)).cumsum(axis=2)
        self.values[:, :, 0] = 100
        self.batch = PathBatch(self.values, ("S",), 0.01)
        self.deltas = rng.standard_normal((7, 1, 4))

    def test_single_sample(self):
        b = self.batch.subset([2])
        z = pnl(self.deltas[[2]], b, EuropeanCall(100), CostSpec(0.0))
        loss = dh_loss_batch(self.deltas[[2]], b, EuropeanCall(100), CostSpec(0.0), CVaR(0.5), 0.3)
        assert loss == oce_pointwise_loss(CVaR(0.5), z[0], 0.3)

    def test_duplicated(self):
        doubled = PathBatch(np.concatenate([self.values, self.values]), ("S",), 0.01)
        dd = np.concatenate([self.deltas, self.deltas])
        a = dh_loss_batch(self.deltas, self.batch, EuropeanCall(100), CostSpec(0.01), Entropic(1.0), 0.1)
        b = dh_loss_batch(dd, doubled, EuropeanCall(100), CostSpec(0.01), Entropic(1.0), 0.1)
        assert a == pytest.approx(b, rel=1e-15)

    def test_loop_oracle(self):
        rate, omega, measure = 0.002, -0.4, Entropic(0.8)
        total = 0.0
        for i in range(7):
            s, d = self.values[i, 0], self.deltas[i, 0]
            gain, cost, prev = 0.0, 0.0, 0.0
            for t in range(4):
                gain += d[t] * (s[t + 1] - s[t])
                cost += rate * s[t] * abs(d[t] - prev)
                prev = d[t]
            z = gain - cost - max(s[-1] - 100, 0.0)
            total += omega - (1 + math.log(0.8)) / 0.8 + math.exp(-0.8 * (z + omega))
        loss = dh_loss_batch(self.deltas, self.batch, EuropeanCall(100), CostSpec(rate), measure, omega)
        assert loss == pytest.approx(total / 7, rel=1e-12)

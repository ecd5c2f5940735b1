import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from robust_hedge.attack import AttackSpec
from robust_hedge.evaluation import (
    EvalReport,
    acf_diff,
    attack_curve,
    covariance_frobenius,
    cumulative_acf,
    diagnostics_report,
    evaluate_strategy,
    ood_batch,
    ood_report,
    oos_report,
    summarise,
)
from robust_hedge.hedge_net import forward
from robust_hedge.market_sim import BSSpec, HestonSpec, PathBatch, perturb_params_ood, simulate
from robust_hedge.objective import Entropic
from robust_hedge.training import TrainConfig, train_clean


@pytest.fixture(scope="module")
def heston_data():
    return simulate(HestonSpec(), 200, 3)


@pytest.fixture(scope="module")
def heston_strategy(heston_data):
    cfg = TrainConfig(model=HestonSpec(), n_train=200, clean_epochs=4, adv_epochs=0, batch_size=100)
    return train_clean(cfg, heston_data)


class TestEvaluate:
    def test_not_above_trained_omega_objective(self, heston_strategy, heston_data):
        risk = evaluate_strategy(heston_strategy, heston_data)
        from robust_hedge.hedge_net import hedge_loss

        cfg = heston_strategy.config
        fixed = hedge_loss(heston_strategy.net, heston_data, cfg.payoff, cfg.cost, cfg.risk_measure)
        assert risk <= fixed + 1e-12

    def test_duplicated(self, heston_strategy, heston_data):
        doubled = heston_data.with_values(np.concatenate([heston_data.values, heston_data.values]))
        # CVaR at 0.5 on 2N samples keeps an integral tail, so the value is unchanged
        assert evaluate_strategy(heston_strategy, doubled) == pytest.approx(evaluate_strategy(heston_strategy, heston_data), rel=1e-14)

    def test_loop_oracle(self, heston_strategy, heston_data):
        net = heston_strategy.net
        d = forward(net, heston_data)
        s, swap = heston_data.track("S"), heston_data.track("Vswap")
        z = []
        for i in range(heston_data.n_samples):
            gain = 0.0
            for t in range(heston_data.horizon_steps):
                gain += d[i, 0, t] * (s[i, t + 1] - s[i, t]) + d[i, 1, t] * (swap[i, t + 1] - swap[i, t])
            z.append(gain - max(s[i, -1] - 100.0, 0.0))
        losses = sorted(-x for x in z)
        worst = losses[len(losses) // 2 :]
        assert evaluate_strategy(heston_strategy, heston_data) == pytest.approx(sum(worst) / len(worst), rel=1e-12)

    def test_other_measure(self, heston_strategy, heston_data):
        assert math.isfinite(evaluate_strategy(heston_strategy, heston_data, Entropic(0.1)))

    def test_layout_mismatch(self, heston_strategy):
        with pytest.raises(ValueError):
            evaluate_strategy(heston_strategy, simulate(BSSpec(), 10, 1))


class TestAttackCurve:
    def test_zero_column_is_clean_risk(self, heston_strategy, heston_data):
        rep, _ = attack_curve(heston_strategy, heston_data, [0.0, 0.05], methods=("WPGD",), base=AttackSpec(iterations=3))
        rows = rep.rows("attack_curve")
        assert rows[0]["risk"] == evaluate_strategy(heston_strategy, heston_data)
        assert rows[0]["distance"] == 0.0
        assert rows[1]["distance"] <= 0.05 * (1 + 1e-9)
        assert all(r["config_hash"] == heston_strategy.provenance["config_hash"] for r in rows)

    def test_keeps_batches(self, heston_strategy, heston_data):
        _, batches = attack_curve(
            heston_strategy,
            heston_data,
            [0.0, 0.1],
            methods=("WBPGD",),
            track_sets=(("S",), ("S", "v")),
            base=AttackSpec(iterations=2),
            keep_batches=True,
        )
        assert set(batches) == {("WBPGD", t, d) for t in (("S",), ("S", "v")) for d in (0.0, 0.1)}
        assert batches[("WBPGD", ("S",), 0.0)] is heston_data


class TestCovariance:
    def test_identical(self, heston_data):
        assert covariance_frobenius(heston_data, heston_data)[0] == 0.0

    def test_common_shift(self, heston_data):
        v = heston_data.values.copy()
        v[:, 0, :] += 3.0
        dist, base = covariance_frobenius(heston_data, heston_data.with_values(v))
        assert dist <= 1e-12 * base

    def test_noise_inflates_diagonal(self):
        rng = np.random.default_rng(0)
        n, T = 200_000, 9
        base = rng.standard_normal((n, 1, T + 1))
        s2 = 0.25
        noisy = base + math.sqrt(s2) * rng.standard_normal(base.shape)
        a = PathBatch(base, ("S",), 1.0)
        b = PathBatch(noisy, ("S",), 1.0)
        dist, _ = covariance_frobenius(a, b)
        # off-diagonal sampling noise is O(1/sqrt(n)) per entry
        assert dist == pytest.approx(s2 * math.sqrt(T + 1), rel=0.02)

    def test_single_sample_rejected(self, heston_data):
        one = heston_data.subset([0])
        with pytest.raises(ValueError):
            covariance_frobenius(one, one)


class TestACF:
    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=40).filter(lambda x: np.ptp(x) > 1e-6))
    def test_lag_zero_is_one(self, x):
        assert cumulative_acf(x, 0) == pytest.approx(1.0, rel=1e-12)

    def test_constant_rejected(self):
        with pytest.raises(ValueError):
            cumulative_acf([2.0, 2.0, 2.0], 1)

    def test_white_noise(self):
        rng = np.random.default_rng(1)
        vals = np.array([cumulative_acf(rng.standard_normal(200), 1) for _ in range(2000)])
        se = vals.std(ddof=1) / math.sqrt(vals.size)
        # lag-1 sample autocorrelation of white noise has mean about -1/n
        assert abs(vals.mean() - (1 - 1 / 200)) < 3 * se

    def test_matches_direct_sum(self):
        x = list(np.random.default_rng(2).standard_normal(50))
        n = len(x)
        mean = sum(x) / n
        var = sum((a - mean) ** 2 for a in x) / n
        ref = 0.0
        for k in range(4):
            ref += sum((x[t] - mean) * (x[t + k] - mean) for t in range(n - k)) / (n - k) / var
        assert cumulative_acf(x, 3) == pytest.approx(ref, rel=1e-13)

    def test_linear_trend_known_value(self):
        # x = 0..3: centred values -1.5, -0.5, 0.5, 1.5 and variance 1.25
        # lag 1 products average (0.75 - 0.25 + 0.75) / 3, so ACF(1) = 1 + (1.25 / 3) / 1.25
        assert cumulative_acf([0.0, 1.0, 2.0, 3.0], 1) == pytest.approx(1 + 1 / 3, rel=1e-14)

    def test_bad_lag(self):
        with pytest.raises(ValueError):
            cumulative_acf([1.0, 2.0], 2)

    def test_acf_diff_zero_for_identical(self, heston_data):
        assert np.all(acf_diff(heston_data, heston_data, max_lag=5) == 0.0)

    def test_diagnostics_tables(self, heston_data):
        v = heston_data.values.copy()
        v[:, 0, 1:] += np.random.default_rng(3).standard_normal(v[:, 0, 1:].shape) * 0.1
        rep = diagnostics_report(heston_data, {("S", 0.1): heston_data.with_values(v)}, max_lag=4)
        assert len(rep.rows("diag_covariance")) == 1
        assert [r["lag"] for r in rep.rows("diag_acf")] == list(range(5))
        rep.validate()


class TestReports:
    def test_single_partition_summary(self, heston_strategy, heston_data):
        rep = oos_report({("clean", 200): [heston_strategy]}, heston_data)
        (row,) = rep.rows("oos")
        assert row["mean"] == row["min"] == row["max"]
        assert math.isnan(row["variance"])
        rep.validate()

    def test_summary_stats(self, heston_data):
        strategies = []
        for seed in range(3):
            cfg = TrainConfig(model=HestonSpec(), clean_epochs=2, adv_epochs=0, batch_size=100, seed=seed)
            strategies.append(train_clean(cfg, heston_data))
        rep = oos_report({("clean", 200): strategies, ("robust", 200): strategies[:1]}, heston_data)
        risks = [evaluate_strategy(s, heston_data) for s in strategies]
        row = rep.rows("oos")[0]
        assert row["kind"] == "clean" and row["count"] == 3
        assert row["mean"] == pytest.approx(np.mean(risks), rel=1e-15)
        assert row["variance"] == pytest.approx(np.var(risks, ddof=1), rel=1e-12)
        assert row["min"] <= row["mean"] <= row["max"]

    def test_ood_identity_scaling_matches_oos(self, heston_strategy):
        spec = HestonSpec()
        specs = perturb_params_ood(spec, 3, 1.0, 1.0, 0)
        groups = {("clean", 200): [heston_strategy]}
        ood = ood_report(groups, specs, n_per_spec=50, seed=10)
        same = ood_batch([spec] * 3, 50, 10)
        oos = oos_report(groups, same)
        assert ood.rows("ood")[0]["mean"] == oos.rows("oos")[0]["mean"]
        assert len(ood.rows("ood")) == 1

    def test_validate_rejects_non_finite(self):
        rep = EvalReport(config_hash="x")
        rep.add("t", {"risk": math.nan})
        with pytest.raises(ValueError):
            rep.validate()

    def test_write(self, tmp_path):
        rep = EvalReport(config_hash="abc")
        rep.add("t", {"delta": 0.1, "risk": 1 / 3})
        rep.add("t", {"delta": 0.2, "risk": 2.0, "extra": "y"})
        paths = rep.write(tmp_path)
        assert [p.name for p in paths] == ["t.csv", "report.json"]
        lines = paths[0].read_text().splitlines()
        assert lines[0] == "config_hash,delta,risk,extra"
        assert float(lines[1].split(",")[2]) == 1 / 3
        data = json.loads(paths[1].read_text())
        assert data["config_hash"] == "abc" and len(data["tables"]["t"]) == 2

    def test_summarise(self):
        a, b = EvalReport(config_hash="h"), EvalReport(config_hash="h")
        a.add("x", {"v": 1.0})
        b.add("x", {"v": 2.0})
        b.add("y", {"v": 3.0})
        out = summarise([a, b])
        assert len(out.rows("x")) == 2 and len(out.rows("y")) == 1
        assert out.config_hash == "h"

"""Hazard head and survival losses: exact formulas, soft labels, warm-up schedule."""

import math

import numpy as np
import pytest

from survbind.numerics import ParamStore, Rng, Tensor, finite_diff_check
from survbind.survival import (
    HazardHead,
    SurvivalPrediction,
    WarmupSchedule,
    hazard_forward,
    init_hazard_head,
    nll_censored,
    nll_pseudo,
    nll_uncensored,
    pseudo_soft_label,
    risk_score,
    survival_curve,
    survival_from_hazards,
    survival_loss,
    warmup_weight,
)

H_HALF = np.array([0.5, 0.5, 0.5, 0.5])
S_HALF = np.array([0.5, 0.25, 0.125, 0.0625])


class TestSurvivalFromHazards:
    def test_near_zero_hazard(self):
        s = survival_from_hazards(np.full(4, 1e-12))
        np.testing.assert_allclose(s, np.ones(4), atol=1e-10)

    def test_half_hazards(self):
        np.testing.assert_allclose(survival_from_hazards(H_HALF), S_HALF, atol=1e-15)

    def test_matches_cumprod_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            h = rng.uniform(0.01, 0.99, size=rng.integers(1, 8))
            np.testing.assert_allclose(survival_from_hazards(h), np.cumprod(1 - h), atol=1e-15)

    def test_bounds_enforced(self):
        with pytest.raises(ValueError, match="strictly inside"):
            survival_from_hazards(np.array([0.5, 1.0]))
        with pytest.raises(ValueError, match="strictly inside"):
            survival_from_hazards(np.array([0.0, 0.5]))

    def test_tensor_path_matches_numpy(self):
        h = Tensor(H_HALF.reshape(1, 4), requires_grad=True)
        s = survival_from_hazards(h)
        np.testing.assert_allclose(s.value.reshape(-1), S_HALF, atol=1e-15)

    def test_nonincreasing_property(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            s = survival_from_hazards(rng.uniform(0.01, 0.99, size=6))
            assert np.all(np.diff(s) <= 0)


class TestNllUncensored:
    def test_certain_immediate_event(self):
        h = np.array([1 - 1e-9, 0.5, 0.5, 0.5])
        loss = nll_uncensored(h, survival_from_hazards(h), 0)
        assert loss.item() == pytest.approx(0.0, abs=1e-8)

    def test_half_hazards_interval_1(self):
        loss = nll_uncensored(H_HALF, S_HALF, 1)
        assert loss.item() == pytest.approx(1.386294, abs=1e-6)
        assert loss.item() == pytest.approx(-math.log(0.5) * 2, abs=1e-12)

    def test_interval_zero_no_survival_term(self):
        h = np.array([0.3, 0.5, 0.5, 0.5])
        loss = nll_uncensored(h, survival_from_hazards(h), 0)
        assert loss.item() == pytest.approx(-math.log(0.3), abs=1e-12)

    def test_invalid_interval(self):
        with pytest.raises(ValueError, match="invalid death interval"):
            nll_uncensored(H_HALF, S_HALF, 4)


class TestNllCensored:
    def test_near_zero_hazard(self):
        h = np.full(4, 1e-9)
        loss = nll_censored(h, survival_from_hazards(h), 2)
        assert loss.item() == pytest.approx(0.0, abs=1e-7)

    def test_half_hazards_interval_1(self):
        loss = nll_censored(H_HALF, S_HALF, 1)
        assert loss.item() == pytest.approx(1.386294, abs=1e-6)

    def test_saturated_hazard_clamped(self):
        h = np.full(4, 1 - 1e-15)
        loss = nll_censored(h, survival_from_hazards(h), 3)
        assert loss.item() == pytest.approx(-math.log(1e-12), abs=1e-6)  # clamp bound
        assert math.isfinite(loss.item())

    def test_invalid_interval(self):
        with pytest.raises(ValueError, match="invalid censor interval"):
            nll_censored(H_HALF, S_HALF, -1)


class TestPseudoSoftLabel:
    def test_one_hot_at_last(self):
        q = pseudo_soft_label(np.array([0.2, 0.3, 0.4, 0.1]), 2)
        np.testing.assert_allclose(q, [0, 0, 0, 1.0], atol=1e-15)

    def test_softmax_over_eligible(self):
        q = pseudo_soft_label(np.array([0.2, 0.3, 0.4, 0.1]), 1)
        np.testing.assert_allclose(q[:2], [0.0, 0.0])
        np.testing.assert_allclose(q[2:], [0.574443, 0.425557], atol=1e-6)

    def test_equal_hazards_uniform(self):
        q = pseudo_soft_label(np.array([0.9, 0.3, 0.3, 0.3]), 0)
        np.testing.assert_allclose(q, [0, 1 / 3, 1 / 3, 1 / 3], atol=1e-12)

    def test_last_interval_rejected(self):
        with pytest.raises(ValueError, match="no eligible interval"):
            pseudo_soft_label(H_HALF, 3)

    def test_detached_from_tensor(self):
        h = Tensor(np.array([[0.2, 0.3, 0.4, 0.1]]), requires_grad=True)
        q = pseudo_soft_label(h, 1)
        assert isinstance(q, np.ndarray)


class TestNllPseudo:
    def test_one_hot_equals_uncensored(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            h = rng.uniform(0.05, 0.95, size=4)
            s = survival_from_hazards(h)
            j = int(rng.integers(0, 4))
            q = np.zeros(4)
            q[j] = 1.0
            assert nll_pseudo(h, s, q).item() == pytest.approx(
                nll_uncensored(h, s, j).item(), abs=1e-12
            )

    def test_uniform_over_two_is_mean(self):
        q = np.array([0.0, 0.0, 0.5, 0.5])
        expected = 0.5 * (nll_uncensored(H_HALF, S_HALF, 2).item() + nll_uncensored(H_HALF, S_HALF, 3).item())
        assert nll_pseudo(H_HALF, S_HALF, q).item() == pytest.approx(expected, abs=1e-12)

    def test_composition_oracle_c1(self):
        q = pseudo_soft_label(np.array([0.2, 0.3, 0.4, 0.1]), 1)
        loss = nll_pseudo(H_HALF, S_HALF, q)
        expected = q[2] * nll_uncensored(H_HALF, S_HALF, 2).item() + q[3] * nll_uncensored(H_HALF, S_HALF, 3).item()
        assert loss.item() == pytest.approx(expected, abs=1e-12)

    def test_unnormalized_rejected(self):
        with pytest.raises(ValueError, match="q not normalized"):
            nll_pseudo(H_HALF, S_HALF, np.array([0.5, 0.5, 0.5, 0.0]))


class TestWarmup:
    def test_endpoint_full(self):
        assert warmup_weight(100, WarmupSchedule(100)) == pytest.approx(0.1, abs=1e-15)

    def test_endpoint_start(self):
        assert warmup_weight(0, WarmupSchedule(100)) == pytest.approx(0.1 * math.exp(-5), abs=1e-12)
        assert warmup_weight(0, WarmupSchedule(100)) == pytest.approx(6.73795e-4, abs=1e-8)

    def test_midpoint(self):
        assert warmup_weight(50, WarmupSchedule(100)) == pytest.approx(0.1 * math.exp(-1.25), abs=1e-12)
        assert warmup_weight(50, WarmupSchedule(100)) == pytest.approx(0.0286505, abs=1e-7)

    def test_clamped_beyond_total(self):
        assert warmup_weight(150, WarmupSchedule(100)) == pytest.approx(0.1)

    def test_monotone_and_bounded_on_grid(self):
        sched = WarmupSchedule(1000)
        vals = [warmup_weight(t, sched) for t in range(0, 1001, 5)]
        assert all(a <= b for a, b in zip(vals, vals[1:]))
        assert all(0.1 * math.exp(-5) - 1e-15 <= v <= 0.1 + 1e-15 for v in vals)

    def test_negative_iteration_rejected(self):
        with pytest.raises(ValueError):
            warmup_weight(-1, WarmupSchedule(10))


def _tensor_pair(h_vals):
    h = Tensor(np.asarray(h_vals, dtype=float).reshape(1, -1))
    return h, survival_curve(h)


class TestSurvivalLoss:
    def test_all_uncensored_equals_mean_uncen(self):
        h1, s1 = _tensor_pair([0.3, 0.4, 0.2, 0.6])
        h2, s2 = _tensor_pair([0.5, 0.5, 0.5, 0.5])
        total, parts = survival_loss(
            [(h1, s1, 1, True), (h2, s2, 2, True)], t=0, schedule=WarmupSchedule(10)
        )
        expected = 0.5 * (nll_uncensored(h1, s1, 1).item() + nll_uncensored(h2, s2, 2).item())
        assert total.item() == pytest.approx(expected, abs=1e-12)
        assert parts["L_cen"] == 0.0 and parts["L_cen_p"] == 0.0

    def test_all_censored_t0_pseudo_weight(self):
        h1, s1 = _tensor_pair([0.3, 0.4, 0.2, 0.6])
        total, parts = survival_loss([(h1, s1, 1, False)], t=0, schedule=WarmupSchedule(100))
        assert parts["lambda_pro"] == pytest.approx(6.73795e-4, abs=1e-8)
        q = pseudo_soft_label(h1, 1)
        expected = nll_censored(h1, s1, 1).item() + parts["lambda_pro"] * nll_pseudo(h1, s1, q).item()
        assert total.item() == pytest.approx(expected, abs=1e-12)

    def test_mixed_two_patient_composition(self):
        h1, s1 = _tensor_pair([0.3, 0.4, 0.2, 0.6])
        h2, s2 = _tensor_pair([0.2, 0.1, 0.5, 0.5])
        lam_cen = 0.8
        sched = WarmupSchedule(50)
        total, parts = survival_loss(
            [(h1, s1, 2, True), (h2, s2, 0, False)], t=25, schedule=sched, lambda_cen=lam_cen
        )
        lam_pro = warmup_weight(25, sched)
        expected = (
            nll_uncensored(h1, s1, 2).item()
            + lam_cen
            * (nll_censored(h2, s2, 0).item() + lam_pro * nll_pseudo(h2, s2, pseudo_soft_label(h2, 0)).item())
        )
        assert total.item() == pytest.approx(expected, abs=1e-12)

    def test_last_interval_censored_skips_pseudo(self):
        h1, s1 = _tensor_pair([0.3, 0.4, 0.2, 0.6])
        total, parts = survival_loss([(h1, s1, 3, False)], t=10, schedule=WarmupSchedule(10))
        assert parts["L_cen_p"] == 0.0
        assert total.item() == pytest.approx(nll_censored(h1, s1, 3).item(), abs=1e-12)

    def test_use_pseudo_false_disables_term(self):
        h1, s1 = _tensor_pair([0.3, 0.4, 0.2, 0.6])
        total, parts = survival_loss(
            [(h1, s1, 0, False)], t=10, schedule=WarmupSchedule(10), use_pseudo=False
        )
        assert parts["L_cen_p"] == 0.0
        assert total.item() == pytest.approx(nll_censored(h1, s1, 0).item(), abs=1e-12)

    def test_losses_nonnegative_and_finite(self):
        rng = np.random.default_rng(3)
        sched = WarmupSchedule(20)
        for _ in range(50):
            h, s = _tensor_pair(rng.uniform(1e-6, 1 - 1e-6, size=4))
            interval = int(rng.integers(0, 4))
            event = bool(rng.integers(0, 2))
            total, _ = survival_loss([(h, s, interval, event)], t=10, schedule=sched)
            assert math.isfinite(total.item()) and total.item() >= 0


class TestRiskScore:
    def test_minimum_risk(self):
        assert risk_score(np.ones(4)) == -4.0

    def test_maximum_risk(self):
        assert risk_score(np.zeros(4)) == 0.0

    def test_half_hazards(self):
        assert risk_score(S_HALF) == pytest.approx(-0.9375)

    def test_strictly_increasing_when_any_hazard_rises(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            h = rng.uniform(0.05, 0.9, size=4)
            j = int(rng.integers(0, 4))
            h2 = h.copy()
            h2[j] = h[j] + 0.05
            assert risk_score(survival_from_hazards(h2)) > risk_score(survival_from_hazards(h))


class TestHazardHead:
    def test_outputs_in_unit_interval(self):
        rng = Rng(5)
        head = init_hazard_head(ParamStore(), "h", 4, rng)
        for _ in range(20):
            h = hazard_forward(head, rng.standard_normal((1, 256)) * 5)
            assert np.all(h.value > 0) and np.all(h.value < 1)

    def test_gradients_pass(self):
        rng = Rng(6)
        sched = WarmupSchedule(10)
        for point in range(5):
            ps = ParamStore()
            ps.add("W1", rng.standard_normal((6, 5)) * 0.5)
            ps.add("b1", rng.standard_normal((1, 5)) * 0.1)
            ps.add("W2", rng.standard_normal((5, 4)) * 0.5)
            ps.add("b2", rng.standard_normal((1, 4)) * 0.1)
            x = rng.standard_normal((1, 6))
            # frozen pseudo label, as in training (q is detached there)
            with np.errstate(all="ignore"):
                head = HazardHead(W1=ps["W1"], b1=ps["b1"], W2=ps["W2"], b2=ps["b2"])
                h0 = hazard_forward(head, x)
                q0 = pseudo_soft_label(h0.value, 0)

            def objective(p):
                head = HazardHead(W1=p["W1"], b1=p["b1"], W2=p["W2"], b2=p["b2"])
                h = hazard_forward(head, x)
                s = survival_curve(h)
                total, _ = survival_loss(
                    [(h, s, 1, True), (h, s, 0, False)], t=5, schedule=sched, frozen_q={1: q0}
                )
                return total

            report = finite_diff_check(objective, ps, tol=1e-4, rng=Rng(70 + point))
            assert report.passed, report.summary()


class TestPrediction:
    def test_from_hazards(self):
        pred = SurvivalPrediction.from_hazards(H_HALF)
        np.testing.assert_allclose(pred.survival, S_HALF)
        assert pred.risk == pytest.approx(-0.9375)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmbd.detector import (
    DegenerateNullError,
    DetectionReport,
    MarginSearchConfig,
    UnsupportedDomainError,
    detect,
    fit_gamma_null,
    maximize_margin,
    mm_roc,
    mm_statistics,
    order_statistic_pvalue,
    roc_from_scores,
    verdict_from_stats,
)
from mmbd.engine import mlp

from oracles import gamma_pvalue_trials, ks_statistic_uniform, linear_box_max, linear_margin_box_max, linear_model

FAST = MarginSearchConfig(restarts=8, max_iter=500)


# ---------------------------------------------------------------- margin search


@pytest.mark.parametrize("seed", range(5))
def test_linear_two_class_box_maximum(seed):
    rng = np.random.default_rng(seed)
    W, b = rng.normal(size=(2, 8)), rng.normal(size=2)
    res = maximize_margin(linear_model(W, b), 0, MarginSearchConfig(restarts=5, seed=seed))
    ref = linear_box_max(W, b, 0, 1)
    assert abs(res.value - ref) <= 1e-6 * abs(ref)


def test_linear_box_maximum_on_shifted_box():
    rng = np.random.default_rng(9)
    W, b = rng.normal(size=(2, 4)), rng.normal(size=2)
    res = maximize_margin(linear_model(W, b), 1, MarginSearchConfig(restarts=3, lo=-2.0, hi=3.0))
    ref = linear_box_max(W, b, 1, 0, -2.0, 3.0)
    assert abs(res.value - ref) <= 1e-6 * abs(ref)


def test_linear_three_class_close_to_lp_optimum():
    rng = np.random.default_rng(2)
    W, b = rng.normal(size=(3, 4)), rng.normal(size=3)
    for c in range(3):
        res = maximize_margin(linear_model(W, b), c, MarginSearchConfig(restarts=10))
        ref = linear_margin_box_max(W, b, c)
        # fixed-length steps zig-zag along the ridge between two runner-ups
        assert res.value <= ref + 1e-9
        assert ref - res.value < 0.05 * max(abs(ref), 1.0)


def test_constant_logits_give_zero_margin():
    model = linear_model(np.zeros((3, 2)), np.full(3, 0.7))
    res = maximize_margin(model, 1, MarginSearchConfig(restarts=4))
    assert res.value == 0.0
    assert np.all(res.restart_values == 0.0)


def test_iterates_stay_in_box():
    model = mlp(2, [16, 16], 3).init(np.random.default_rng(0))
    maximize_margin(model, 0, MarginSearchConfig(restarts=4, max_iter=200, check_projection=True))


def test_iteration_cap_flags_unconverged():
    model = mlp(2, [16, 16], 3).init(np.random.default_rng(0))
    res = maximize_margin(model, 0, MarginSearchConfig(restarts=4, max_iter=1, tol=1e-300))
    assert not res.converged.all()
    assert np.isfinite(res.value)


def test_best_so_far_non_decreasing_in_restarts():
    model = mlp(2, [16, 16], 3).init(np.random.default_rng(1))
    vals = [maximize_margin(model, 2, MarginSearchConfig(restarts=r, max_iter=300, seed=4)).value
            for r in (1, 2, 4, 8, 16)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))


def test_statistics_deterministic_and_thread_independent():
    model = mlp(2, [16, 16], 3).init(np.random.default_rng(3))
    a = mm_statistics(model, FAST)
    b = mm_statistics(model.copy(), FAST)
    c = mm_statistics(model, FAST, jobs=3)
    assert np.array_equal(a, b) and np.array_equal(a, c)


def test_argmax_invariant_under_logit_rescaling():
    model = mlp(2, [16, 16], 3).init(np.random.default_rng(5))
    scaled = model.copy()
    scaled.layers[-1].W *= 3.7
    scaled.layers[-1].b *= 3.7
    a, b = mm_statistics(model, FAST), mm_statistics(scaled, FAST)
    assert np.argmax(a) == np.argmax(b)
    assert np.allclose(b, 3.7 * a, rtol=1e-9)


def test_search_config_validation():
    with pytest.raises(ValueError):
        MarginSearchConfig(restarts=0)
    with pytest.raises(ValueError):
        MarginSearchConfig(tol=0.0)
    with pytest.raises(ValueError):
        MarginSearchConfig(lo=1.0, hi=1.0)


# ---------------------------------------------------------------- null model


def test_gamma_recovery():
    x = np.random.default_rng(0).gamma(3.0, 2.0, size=10_000)
    k, s = fit_gamma_null(x)
    assert abs(k - 3) < 0.15 and abs(s - 2) < 0.1


def test_gamma_mle_stationarity():
    from scipy.special import digamma

    x = np.random.default_rng(1).gamma(1.7, 0.4, size=300)
    k, s = fit_gamma_null(x)
    assert abs(np.log(k) - digamma(k) - (np.log(x.mean()) - np.log(x).mean())) < 1e-10
    assert abs(k * s - x.mean()) < 1e-12


@settings(max_examples=100, deadline=None)
@given(c=st.floats(1e-3, 1e3), seed=st.integers(0, 1000))
def test_gamma_fit_scale_equivariant(c, seed):
    x = np.random.default_rng(seed).gamma(2.0, 1.0, size=5)
    k1, s1 = fit_gamma_null(x)
    k2, s2 = fit_gamma_null(c * x)
    assert abs(k2 - k1) <= 1e-6 * k1
    assert abs(s2 - c * s1) <= 1e-6 * c * s1


def test_degenerate_and_unsupported_nulls():
    with pytest.raises(DegenerateNullError):
        fit_gamma_null([2.0, 2.0])
    with pytest.raises(DegenerateNullError):
        fit_gamma_null([0.0, 1.0])
    with pytest.raises(UnsupportedDomainError):
        fit_gamma_null([1.0])
    with pytest.raises(UnsupportedDomainError):
        verdict_from_stats([1.0, 5.0])
    with pytest.raises(UnsupportedDomainError):
        detect(mlp(2, [4], 2), FAST)


def test_degenerate_null_is_inconclusive_not_clean():
    rep = verdict_from_stats([3.0, 3.0, 50.0])
    assert rep.verdict == "inconclusive" and rep.pvalue is None and rep.reason


def test_extreme_outlier_pvalue_is_zero():
    rep = verdict_from_stats([1.0, 1.2, 0.9, 1e6])
    assert rep.pvalue == 0.0 and rep.verdict == "attacked" and rep.inferred_target == 3


@settings(max_examples=200, deadline=None)
@given(k=st.floats(0.2, 50), s=st.floats(0.01, 100), K=st.integers(3, 20),
       r1=st.floats(0, 1e4), r2=st.floats(0, 1e4))
def test_pvalue_in_unit_interval_and_monotone(k, s, K, r1, r2):
    p1 = order_statistic_pvalue(r1, k, s, K)
    p2 = order_statistic_pvalue(r2, k, s, K)
    assert 0.0 <= p1 <= 1.0
    if r1 <= r2:
        assert p1 >= p2


def test_pvalue_matches_direct_formula():
    from scipy.stats import gamma

    for r in (0.5, 3.0, 9.0):
        direct = 1 - gamma.cdf(r, 2.5, scale=1.3) ** 4
        assert abs(order_statistic_pvalue(r, 2.5, 1.3, 5) - direct) < 1e-12


@pytest.mark.parametrize("K", [3, 10])
def test_pvalue_uniform_under_known_null(K):
    p = gamma_pvalue_trials(2.0, 1.5, K, 2000, np.random.default_rng(K))
    assert ks_statistic_uniform(p) < 1.358 / np.sqrt(2000)


def test_report_recomputes_pvalue_and_round_trips():
    rep = verdict_from_stats([4.0, 6.5, 5.0, 30.0], theta=0.05)
    assert rep.r_max == max(rep.stats)
    assert rep.recompute_pvalue() == rep.pvalue
    back = DetectionReport.from_dict(rep.to_dict())
    assert back == rep
    assert "inferred target class 3" in rep.table()


def test_tie_at_maximum_flagged_lowest_index():
    rep = verdict_from_stats([9.0, 1.0, 9.0, 2.0])
    assert rep.tie and rep.max_class == 0


def test_detect_report_fields():
    model = mlp(2, [8, 8], 3).init(np.random.default_rng(0))
    rep = detect(model, FAST)
    assert len(rep.traces) == 3 and len(rep.traces[0]["restart_values"]) == FAST.restarts
    assert rep.config["restarts"] == FAST.restarts


# ---------------------------------------------------------------- ROC


def test_roc_perfect_separation():
    assert roc_from_scores([5, 6, 7], [1, 2, 3]).pauc == 0.25


def test_roc_chance_level():
    rng = np.random.default_rng(0)
    scores = rng.normal(size=20_000)
    r = roc_from_scores(scores[:10_000], scores[10_000:])
    assert abs(r.pauc - 0.03125) < 0.004


def test_roc_is_monotone_and_bounded():
    rng = np.random.default_rng(1)
    r = roc_from_scores(rng.normal(1, 1, 50), rng.normal(0, 1, 80))
    assert r.fpr[0] == 0 and r.tpr[0] == 0 and r.fpr[-1] == 1 and r.tpr[-1] == 1
    assert np.all(np.diff(r.fpr) >= 0) and np.all(np.diff(r.tpr) >= 0)
    assert 0 <= r.pauc <= 0.25


def test_mm_roc_from_stats_and_empty():
    r = mm_roc([([1.0, 9.0, 2.0], [1]), ([1.5, 2.5, 0.5], [])])
    assert r.pauc == 0.25
    with pytest.raises(ValueError):
        mm_roc([])

import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mmbd.attacks import Dataset, GaussianMixtureDomain, PoisonConfig, poison, sample_toy, toy_trigger
from mmbd.engine import BoundSet, Classifier, Dense, InvalidInputError, ReLU, mlp
from mmbd.mitigator import (
    InfeasibleMitigationError,
    MitigationConfig,
    activation_profile,
    bounded_forward,
    mitigate,
    select_clean_set,
)
from mmbd.training import TrainConfig, train

logging.getLogger("mmbd").setLevel(logging.ERROR)


@pytest.fixture(scope="module")
def backdoored():
    ds = sample_toy(GaussianMixtureDomain(), 150, 0)
    pois, _ = poison(ds, PoisonConfig(2, (0, 1), 60, toy_trigger()), 1)
    model, _ = train(mlp(2, [32, 32], 3).init(np.random.default_rng(0)), pois, TrainConfig(epochs=60, lr=3e-3))
    return model, ds


def _hand_net():
    # x -> relu(A x + a) -> B h + b, one bounded hidden layer
    model = Classifier([Dense(2, 2), ReLU(), Dense(2, 2)], (2,))
    model.layers[0].W[...] = [[1.0, 2.0], [-1.0, 1.0]]
    model.layers[0].b[...] = [0.5, 0.0]
    model.layers[2].W[...] = [[1.0, -1.0], [2.0, 1.0]]
    model.layers[2].b[...] = [0.0, 0.25]
    return model


def test_hand_built_net_with_one_active_bound():
    model = _hand_net()
    # h = relu([1*1 + 2*1 + 0.5, -1 + 1]) = [3.5, 0]; bound 2 on neuron 0 -> [2, 0]
    out = bounded_forward(model, np.array([1.0, 1.0]), BoundSet({1: np.array([2.0, 10.0])}))
    assert np.array_equal(out, [2.0, 4.25])
    assert np.array_equal(bounded_forward(model, np.array([1.0, 1.0]), BoundSet()), [3.5, 7.25])


def test_initial_bounds_leave_logits_unchanged(backdoored):
    model, ds = backdoored
    z = BoundSet.constant(model, 100.0)
    assert np.array_equal(bounded_forward(model, ds.x, z), model.forward(ds.x, bounds=BoundSet()))
    z = BoundSet.constant(model, np.inf)
    assert np.array_equal(bounded_forward(model, ds.x, z), model.forward(ds.x, bounds=BoundSet()))


def test_misaligned_bounds_are_invalid(backdoored):
    model, ds = backdoored
    with pytest.raises(InvalidInputError):
        bounded_forward(model, ds.x, BoundSet({0: np.ones(5)}))


@settings(max_examples=100, deadline=None)
@given(x=arrays(np.float64, (4, 2), elements=st.floats(0, 1)),
       z=arrays(np.float64, (8,), elements=st.floats(0, 5)))
def test_clamp_is_monotone(x, z):
    model = mlp(2, [8, 8], 3).init(np.random.default_rng(0))
    idx = model.bounded_layer_indices()[0]
    bounded = activation_profile(model, x, BoundSet({idx: z}))
    assert np.all(bounded.bounded_maxima[idx] <= bounded.maxima[idx])
    assert np.all(bounded.bounded_maxima[idx] <= z)


def test_mitigation_keeps_parameters_and_returns_min_norm_feasible(backdoored):
    model, ds = backdoored
    before = [p.copy() for p in model.params]
    cfg = MitigationConfig(max_iter=150)
    res = mitigate(model, ds, cfg)
    assert all(np.array_equal(a, b) for a, b in zip(before, model.params))
    assert model.bounds is None
    # post-hoc feasibility on D
    x, y, _ = select_clean_set(model, ds, cfg.per_class, cfg.seed)
    assert np.mean(model.forward(x, bounds=res.bounds).argmax(axis=1) == y) >= cfg.accuracy
    feasible = [r["bound_norm"] for r in res.log if r["feasible"]]
    assert res.bounds.norm() == min(feasible)
    assert all(np.all(z >= 0) for z in res.bounds.bounds.values())
    assert {"iter", "lam", "feasible", "bound_norm"} <= set(res.log[0])


def test_lambda_schedule_follows_constraint(backdoored):
    model, ds = backdoored
    cfg = MitigationConfig(max_iter=60, alpha=2.0)
    res = mitigate(model, ds, cfg)
    lam = cfg.lam
    for r in res.log:
        lam = lam * cfg.alpha if r["feasible"] else lam / cfg.alpha
        assert r["lam"] == pytest.approx(lam, rel=1e-12)


def test_larger_alpha_reaches_the_constraint_sooner(backdoored):
    model, ds = backdoored
    iters = []
    for alpha in (1.1, 1.5, 3.0):
        res = mitigate(model, ds, MitigationConfig(alpha=alpha, max_iter=300))
        iters.append(next(r["iter"] for r in res.log if not r["feasible"]))
    assert iters[0] >= iters[1] >= iters[2]


def test_min_ratio_floor_limits_shrinkage(backdoored):
    model, ds = backdoored
    res = mitigate(model, ds, MitigationConfig(max_iter=3, min_ratio=0.5, init=1.0, step=50.0))
    # three steps can shrink a bound by at most 0.5 ** 3
    for z in res.bounds.bounds.values():
        assert np.all(z >= 0.125 - 1e-12)


def test_init_scale_starts_at_clean_peak(backdoored):
    model, ds = backdoored
    res = mitigate(model, ds, MitigationConfig(max_iter=1, init_scale=10.0, lam=0.0, step=0.0))
    x, _, _ = select_clean_set(model, ds, 20, 0)
    prof = activation_profile(model, x)
    for i, z in res.bounds.bounds.items():
        assert np.allclose(z, 10.0 * prof.maxima[i].max())


def test_clean_set_drops_misclassified(backdoored):
    model, ds = backdoored
    x, y, dropped = select_clean_set(model, ds, 20, 0)
    assert len(x) + dropped == 60
    assert np.all(model.forward(x).argmax(axis=1) == y)


def test_infeasible_error_carries_log(backdoored):
    model, ds = backdoored
    # bounds start at zero, so the constraint can never hold
    with pytest.raises(InfeasibleMitigationError) as info:
        mitigate(model, ds, MitigationConfig(init=0.0, max_iter=5, accuracy=1.0))
    assert len(info.value.log) == 5 and not any(r["feasible"] for r in info.value.log)


def test_config_validation():
    with pytest.raises(ValueError):
        MitigationConfig(alpha=1.0)
    with pytest.raises(ValueError):
        MitigationConfig(accuracy=0.0)
    with pytest.raises(ValueError):
        MitigationConfig(max_iter=0)
    with pytest.raises(ValueError):
        MitigationConfig(min_ratio=1.0)


def test_no_bounded_layers_is_error():
    model = mlp(2, [4], 3).init(np.random.default_rng(0))
    ds = Dataset(np.random.default_rng(0).uniform(size=(9, 2)), np.arange(9) % 3, 3)
    with pytest.raises(InvalidInputError):
        mitigate(model, ds, MitigationConfig())


def test_triggered_activations_exceed_clean_somewhere(backdoored):
    model, ds = backdoored
    trig = toy_trigger()
    src = ds.x[np.isin(ds.y, (0, 1))]
    clean = activation_profile(model, ds.x)
    hot = activation_profile(model, trig.apply(src))
    assert any(np.any(hot.maxima[i] > clean.maxima[i]) for i in clean.layers)

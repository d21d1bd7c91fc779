import numpy as np
import pytest

from mmbd.engine import (
    BoundSet,
    Classifier,
    Conv2d,
    Dense,
    Flatten,
    InvalidInputError,
    ModelFormatError,
    ReLU,
    cross_entropy,
    dumps_model,
    forward_logits,
    grad_wrt_input,
    grad_wrt_params,
    load_model,
    loads_model,
    margin_and_grad,
    mlp,
    save_model,
    softmax,
)

H = 1e-5


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


def fd_input(f, x):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += H
        xm[idx] -= H
        g[idx] = (f(xp) - f(xm)) / (2 * H)
    return g


def fd_params(model, loss_fn):
    out = []
    for p in model.params:
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + H
            lp = loss_fn()
            p[idx] = old - H
            lm = loss_fn()
            p[idx] = old
            g[idx] = (lp - lm) / (2 * H)
        out.append(g)
    return out


def small_conv(seed, stride=1):
    layers = [Conv2d(2, 3, 3, stride=stride), ReLU(), Flatten()]
    shape = (2, 7, 7)
    for l in layers:
        shape = l.out_shape(shape)
    model = Classifier(layers + [Dense(int(np.prod(shape)), 3)], (2, 7, 7))
    return model.init(np.random.default_rng(seed))


# ---------------------------------------------------------------- forward


def test_zero_network_gives_zero_logits():
    model = mlp(3, [4], 2)
    for p in model.params:
        p[...] = 0.0
    assert np.array_equal(forward_logits(model, np.array([0.3, -2.0, 5.0])), np.zeros(2))


def test_identity_dense_layer():
    model = Classifier([Dense(2, 2)], (2,))
    model.layers[0].W[...] = np.eye(2)
    model.layers[0].b[...] = 0.0
    assert np.array_equal(forward_logits(model, np.array([3.0, 5.0])), np.array([3.0, 5.0]))


@pytest.mark.parametrize("seed", range(5))
def test_forward_matches_straight_line_oracle(seed):
    rng = np.random.default_rng(seed)
    model = mlp(4, [6, 5], 3).init(rng)
    x = rng.normal(size=(10, 4))
    W1, b1, W2, b2, W3, b3 = [p for p in model.params]
    h = np.maximum(x @ W1.T + b1, 0)
    h = np.maximum(h @ W2.T + b2, 0)
    oracle = h @ W3.T + b3
    assert np.max(np.abs(forward_logits(model, x) - oracle)) < 1e-12


def test_conv_forward_matches_direct_loops():
    rng = np.random.default_rng(3)
    conv = Conv2d(2, 3, 3, stride=2)
    conv.init(rng)
    x = rng.normal(size=(2, 2, 7, 7))
    out, _ = conv.forward(x)
    ref = np.zeros((2, 3, 3, 3))
    for n in range(2):
        for o in range(3):
            for i in range(3):
                for j in range(3):
                    patch = x[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
                    ref[n, o, i, j] = np.sum(patch * conv.W[o]) + conv.b[o]
    assert np.max(np.abs(out - ref)) < 1e-12


def test_shape_mismatch_is_invalid_input():
    model = mlp(2, [4], 3)
    with pytest.raises(InvalidInputError):
        model.forward(np.zeros((5, 3)))


def test_final_layer_must_be_dense_with_two_outputs():
    with pytest.raises(InvalidInputError):
        Classifier([Dense(2, 1)], (2,))
    with pytest.raises(InvalidInputError):
        Classifier([Dense(2, 3), ReLU()], (2,))


def test_conv_size_limits():
    with pytest.raises(InvalidInputError):
        Conv2d(1, 17, 3)
    with pytest.raises(InvalidInputError):
        Classifier([Conv2d(1, 2, 3), Flatten(), Dense(2 * 31 * 31, 2)], (1, 33, 33))


def test_incompatible_extents_rejected():
    with pytest.raises(InvalidInputError):
        Classifier([Dense(3, 4), ReLU(), Dense(5, 2)], (3,))


def test_same_seed_same_parameters():
    a = mlp(2, [8, 8], 3).init(np.random.default_rng(11))
    b = mlp(2, [8, 8], 3).init(np.random.default_rng(11))
    assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))


# ---------------------------------------------------------------- input gradients


def test_linear_logit_gradient_is_weight_row():
    model = Classifier([Dense(3, 2)], (3,)).init(np.random.default_rng(0))
    g = grad_wrt_input(model, np.array([0.1, 0.2, 0.3]), 1, head="logit")
    assert np.array_equal(g, model.layers[0].W[1])


@pytest.mark.parametrize("seed", range(5))
def test_margin_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    model = mlp(4, [16, 16, 16], 3).init(rng)
    x = rng.uniform(size=4)

    def margin(z):
        lg = forward_logits(model, z)
        return lg[0] - max(lg[1], lg[2])

    assert rel_err(grad_wrt_input(model, x, 0), fd_input(margin, x)) < 1e-5


def test_margin_tie_uses_lowest_index_runner_up():
    model = Classifier([Dense(2, 3)], (2,))
    W = model.layers[0].W
    W[...] = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]
    model.layers[0].b[...] = 0.0
    x = np.array([[0.5, 0.5]])  # g_1 == g_2
    _, g = margin_and_grad(model, x, 0)
    assert np.array_equal(g[0], -W[1])


def test_unknown_head_rejected():
    model = mlp(2, [3], 3)
    with pytest.raises(InvalidInputError):
        margin_and_grad(model, np.zeros((1, 2)), 0, head="softmax")


# ---------------------------------------------------------------- parameter gradients


def test_zero_weight_cross_entropy_gradient_closed_form():
    model = Classifier([Dense(3, 4)], (3,))
    x = np.random.default_rng(0).normal(size=(8, 3))
    y = np.arange(8) % 4
    _, grads = grad_wrt_params(model, x, y)
    d = softmax(np.zeros((8, 4)))
    d[np.arange(8), y] -= 1.0
    d /= 8
    assert np.allclose(grads[0], d.T @ x, atol=1e-15)
    assert np.allclose(grads[1], d.sum(axis=0), atol=1e-15)


@pytest.mark.parametrize("seed", range(3))
def test_param_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    model = mlp(3, [6, 5], 3).init(rng)
    x = rng.normal(size=(8, 3))
    y = rng.integers(0, 3, 8)
    _, grads = grad_wrt_params(model, x, y)
    num = fd_params(model, lambda: grad_wrt_params(model, x, y)[0])
    for g, n in zip(grads, num):
        assert rel_err(g, n) < 1e-5


def test_duplicated_sample_doubles_contribution():
    rng = np.random.default_rng(4)
    model = mlp(2, [5], 3).init(rng)
    x = rng.normal(size=(1, 2))
    other = rng.normal(size=(1, 2))
    _, g1 = grad_wrt_params(model, np.vstack([x, other]), [1, 2])
    _, g2 = grad_wrt_params(model, np.vstack([x, x, other]), [1, 1, 2])
    _, gx = grad_wrt_params(model, x, [1])
    _, go = grad_wrt_params(model, other, [2])
    for a, b, cx, co in zip(g1, g2, gx, go):
        assert np.allclose(a * 2, cx + co)
        assert np.allclose(b * 3, 2 * cx + co)


def test_empty_batch_and_bad_labels_rejected():
    model = mlp(2, [3], 3)
    with pytest.raises(InvalidInputError):
        grad_wrt_params(model, np.zeros((0, 2)), np.zeros(0, dtype=int))
    with pytest.raises(InvalidInputError):
        grad_wrt_params(model, np.zeros((2, 2)), [0, 3])


def test_weighted_cross_entropy_scales_gradient():
    logits = np.random.default_rng(0).normal(size=(4, 3))
    y = np.array([0, 1, 2, 0])
    _, d1 = cross_entropy(logits, y)
    _, d2 = cross_entropy(logits, y, weights=np.full(4, 2.0))
    assert np.allclose(d2, 2 * d1)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_gradients_match_finite_differences(stride):
    rng = np.random.default_rng(stride)
    model = small_conv(stride, stride)
    x = rng.normal(size=(3, 2, 7, 7))
    y = np.array([0, 1, 2])
    _, grads = grad_wrt_params(model, x, y)
    num = fd_params(model, lambda: grad_wrt_params(model, x, y)[0])
    for g, n in zip(grads, num):
        assert rel_err(g, n) < 1e-4
    xs = x[0]
    gi = grad_wrt_input(model, xs, 1, head="logit")
    assert rel_err(gi, fd_input(lambda z: forward_logits(model, z)[1], xs)) < 1e-4


def test_bound_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    model = mlp(3, [6, 6], 3).init(rng)
    x = rng.normal(size=(5, 3))
    idx = model.bounded_layer_indices()[0]
    _, caches = model.forward(x, bounds=BoundSet(), keep_cache=True)
    acts = np.maximum(caches[idx][0], 0)
    z = np.quantile(acts, 0.6, axis=0) + 1e-3
    bounds = BoundSet({idx: z})

    def f(zz):
        return float(model.forward(x, bounds=BoundSet({idx: zz}))[:, 0].sum())

    logits, caches = model.forward(x, bounds=bounds, keep_cache=True)
    d = np.zeros_like(logits)
    d[:, 0] = 1.0
    _, _, bg = model.backward(caches, d, want_params=False, want_bounds=True)
    assert rel_err(bg[idx], fd_input(f, z)) < 1e-5


# ---------------------------------------------------------------- bounds


def test_infinite_bounds_are_exact_identity():
    model = mlp(2, [8, 8, 8], 3).init(np.random.default_rng(0))
    x = np.random.default_rng(1).uniform(size=(50, 2))
    inf = BoundSet.constant(model, np.inf)
    assert np.array_equal(model.forward(x, bounds=inf), model.forward(x))


def test_zero_bound_silences_layer():
    model = mlp(2, [4, 4], 3).init(np.random.default_rng(0))
    idx = model.bounded_layer_indices()[0]
    x = np.random.default_rng(1).uniform(size=(6, 2))
    # the bounded layer feeds the logit layer directly, so only its bias is left
    logits = model.forward(x, bounds=BoundSet({idx: np.zeros(4)}))
    assert np.array_equal(logits, np.broadcast_to(model.layers[-1].b, logits.shape))


def test_misaligned_bounds_rejected():
    model = mlp(2, [4, 4], 3)
    with pytest.raises(InvalidInputError):
        model.check_bounds(BoundSet({0: np.zeros(3)}))
    with pytest.raises(InvalidInputError):
        model.check_bounds(BoundSet({0: np.zeros(4), 2: np.zeros(4)}))


def test_conv_bounds_are_per_filter():
    model = small_conv(0)
    assert model.bounded_layer_indices() == [1]
    assert model.bound_width(1) == 3


# ---------------------------------------------------------------- persistence


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    model = mlp(2, [8, 8], 3).init(rng)
    path = tmp_path / "m.mmbd"
    save_model(model, path)
    back = load_model(path)
    assert all(np.array_equal(p, q) for p, q in zip(model.params, back.params))
    assert back.spec() == model.spec()
    x = rng.uniform(size=(100, 2))
    assert np.array_equal(forward_logits(model, x), forward_logits(back, x))


def test_round_trip_conv_with_bounds():
    model = small_conv(1)
    bounds = BoundSet({1: np.array([0.5, 1.5, np.inf])})
    back = loads_model(dumps_model(model.with_bounds(bounds)))
    assert back.bounds is not None
    assert np.array_equal(back.bounds.bounds[1], bounds.bounds[1])


@pytest.mark.parametrize("cut", [0, 5, 12, 40, -1])
def test_truncated_file_is_format_error(cut):
    blob = dumps_model(mlp(2, [4], 3))
    with pytest.raises(ModelFormatError):
        loads_model(blob[:cut])


def test_corrupt_headers_are_format_errors():
    blob = bytearray(dumps_model(mlp(2, [4], 3)))
    with pytest.raises(ModelFormatError):
        loads_model(b"XXXXXXXX" + bytes(blob[8:]))
    wrong = bytearray(blob)
    wrong[8] = 99
    with pytest.raises(ModelFormatError):
        loads_model(bytes(wrong))
    with pytest.raises(ModelFormatError):
        loads_model(bytes(blob) + b"\0")

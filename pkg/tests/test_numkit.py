import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from effserve import numkit as nk
from effserve.errors import InvalidInputError

finite = st.floats(-50, 50, allow_nan=False)


@given(arrays(np.float64, st.integers(1, 12), elements=finite))
@settings(max_examples=100, deadline=None)
def test_softmax_is_a_distribution(z):
    p = nk.softmax(z)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1) < 1e-12


@given(arrays(np.float64, st.integers(1, 8), elements=finite), finite)
@settings(max_examples=100, deadline=None)
def test_softmax_shift_invariant(z, c):
    assert np.allclose(nk.softmax(z), nk.softmax(z + c), atol=1e-12)


def test_softmax_large_logits_stay_finite():
    p = nk.softmax([1000.0, 1000.0, -1000.0])
    assert np.allclose(p, [0.5, 0.5, 0.0])


def test_softmax_rejects_empty_and_nan():
    with pytest.raises(InvalidInputError):
        nk.softmax([])
    with pytest.raises(InvalidInputError):
        nk.softmax([1.0, np.nan])


def test_softmax_rows():
    z = np.array([[0.0, 0.0], [math.log(3), 0.0]])
    assert np.allclose(nk.softmax(z), [[0.5, 0.5], [0.75, 0.25]])


def test_sigmoid_symmetry_and_extremes():
    z = np.linspace(-40, 40, 81)
    s = nk.sigmoid(z)
    assert np.allclose(s + nk.sigmoid(-z), 1.0)
    assert nk.sigmoid(np.array([0.0]))[0] == 0.5
    assert np.all(np.isfinite(nk.sigmoid(np.array([-1e4, 1e4]))))


def test_cross_entropy_values():
    assert nk.cross_entropy([0.25, 0.75], 1) == pytest.approx(-math.log(0.75))
    # zero probability is clamped, not infinite
    assert nk.cross_entropy([1.0, 0.0], 1) == pytest.approx(-math.log(1e-12))
    with pytest.raises(InvalidInputError):
        nk.cross_entropy([0.5, 0.5], 2)


def test_binary_cross_entropy_values():
    assert nk.binary_cross_entropy(0.8, 1) == pytest.approx(-math.log(0.8))
    assert nk.binary_cross_entropy(0.8, 0) == pytest.approx(-math.log(0.2))
    assert math.isfinite(nk.binary_cross_entropy(1.0, 0))


@given(st.integers(1, 10), st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_kl_matches_direct_sum(k, seed):
    r = np.random.default_rng(seed)
    p = r.dirichlet(np.ones(k))
    q = r.dirichlet(np.ones(k))
    direct = sum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)
    assert nk.kl_divergence(p, q) == pytest.approx(max(direct, 0.0), abs=1e-12)
    assert nk.kl_divergence(p, p) == pytest.approx(0.0, abs=1e-12)


def test_kl_zero_mass_and_errors():
    assert nk.kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2))
    with pytest.raises(InvalidInputError):
        nk.kl_divergence([0.5, 0.5], [1.0])
    with pytest.raises(InvalidInputError):
        nk.kl_divergence([0.5, 0.5], [1.0, 0.0])


def test_cosine_endpoints_and_midpoint():
    assert nk.cosine_lr(0, 100, 2e-3, 1e-5) == 2e-3
    assert nk.cosine_lr(100, 100, 2e-3, 1e-5) == pytest.approx(1e-5, abs=1e-15)
    assert nk.cosine_lr(50, 100, 2e-3, 1e-5) == pytest.approx((2e-3 + 1e-5) / 2, abs=1e-15)


@given(st.integers(1, 5000), st.floats(1e-6, 1.0), st.floats(0, 1))
@settings(max_examples=100, deadline=None)
def test_cosine_nonincreasing(T, base, frac):
    lo = base * frac
    vals = [nk.cosine_lr(t, T, base, lo) for t in range(0, T + 1, max(1, T // 200))]
    assert all(a >= b - 1e-18 for a, b in zip(vals, vals[1:]))


def test_cosine_rejects_bad_steps():
    with pytest.raises(InvalidInputError):
        nk.cosine_lr(11, 10, 1.0, 0.0)
    with pytest.raises(InvalidInputError):
        nk.cosine_lr(0, 0, 1.0, 0.0)


def test_train_config_validation():
    with pytest.raises(InvalidInputError):
        nk.TrainConfig(batch_size=0)
    with pytest.raises(InvalidInputError):
        nk.TrainConfig(base_lr=1e-3, min_lr=1e-2)


# gradients ----------------------------------------------------------------

def random_problem(seed, multitask):
    r = np.random.default_rng(seed)
    d, hidden, n = int(r.integers(2, 6)), int(r.integers(2, 7)), int(r.integers(1, 8))
    if multitask:
        heads = [nk.Head("sigmoid", 1, "a", ("A",)), nk.Head("sigmoid", 1, "b", ("B",)),
                 nk.Head("softmax", 3, "rest", ("C", "D", "E"))]
        targets = [r.integers(0, 2, n).astype(float), r.integers(0, 2, n).astype(float),
                   r.integers(-1, 3, n)]
    else:
        k = int(r.integers(2, 6))
        heads = [nk.Head("softmax", k, "u", tuple(f"L{i}" for i in range(k)))]
        targets = [r.integers(0, k, n)]
    model = nk.init_model(d, hidden, heads, "tanh", seed=seed)
    # nonzero biases so their gradients are exercised too
    model = nk.make_model(model.weights, [r.normal(0, 0.3, b.shape) for b in model.biases],
                          model.heads, model.activation)
    X = r.normal(0, 1, (n, d))
    return model, X, targets


def numeric_grads(model, X, targets, h=1e-5):
    def loss_with(params):
        k = len(model.weights)
        m = nk.make_model(params[:k], params[k:], model.heads, model.activation)
        return nk.loss_and_grads(m, X, targets)[0]

    params = [np.array(p) for p in model.params()]
    out = []
    for p in params:
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = loss_with(params)
            p[idx] = old - h
            down = loss_with(params)
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


def relative_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


@pytest.mark.parametrize("multitask", [False, True])
def test_gradients_match_finite_differences(multitask):
    for seed in range(10):
        model, X, targets = random_problem(seed, multitask)
        _, gw, gb = nk.loss_and_grads(model, X, targets)
        for a, n in zip(gw + gb, numeric_grads(model, X, targets)):
            assert relative_error(a, n) < 1e-4


def test_masked_targets_contribute_nothing():
    heads = [nk.Head("softmax", 3, "r", ("a", "b", "c"))]
    model = nk.init_model(3, 4, heads, seed=1)
    X = np.random.default_rng(0).normal(size=(4, 3))
    loss, gw, gb = nk.loss_and_grads(model, X, [np.array([-1, -1, -1, -1])])
    assert loss == 0
    assert all(not g.any() for g in gw + gb)


def test_head_losses_sum_to_batch_loss():
    model, X, targets = random_problem(3, True)
    logits = nk.forward(model, X)
    losses, _ = nk.head_losses(model, logits, targets)
    assert sum(losses) == pytest.approx(nk.loss_and_grads(model, X, targets)[0])


def test_head_loss_matches_scalar_definitions():
    heads = [nk.Head("sigmoid", 1, "a", ("A",)), nk.Head("softmax", 2, "r", ("x", "y"))]
    model = nk.init_model(2, 3, heads, seed=4)
    X = np.array([[0.5, -1.0], [1.0, 2.0]])
    t = [np.array([1.0, 0.0]), np.array([1, -1])]
    logits = nk.forward(model, X)
    losses, _ = nk.head_losses(model, logits, t)
    bce = np.mean([nk.binary_cross_entropy(nk.sigmoid(logits[i, :1])[0], t[0][i]) for i in range(2)])
    ce = nk.cross_entropy(nk.softmax(logits[0, 1:]), 1) / 2
    assert losses == pytest.approx([bce, ce])


def test_forward_dimension_mismatch():
    model = nk.init_model(3, 4, [nk.Head("softmax", 2)])
    with pytest.raises(InvalidInputError):
        nk.forward(model, np.zeros((1, 5)))


def test_train_step_is_pure_and_applies_decay():
    model = nk.init_model(2, 3, [nk.Head("softmax", 2)], seed=2)
    X = np.zeros((1, 2))
    before = [p.copy() for p in model.params()]
    cfg = nk.TrainConfig(weight_decay=0.5)
    new, _ = nk.train_step(model, X, [np.array([0])], cfg, 0.1)
    assert all(np.array_equal(a, b) for a, b in zip(before, model.params()))
    _, gw, _ = nk.loss_and_grads(model, X, [np.array([0])])
    expected = model.weights[0] - 0.1 * (gw[0] + 0.5 * model.weights[0])
    assert np.allclose(new.weights[0], expected)


def test_fit_lr_trace_and_loss_drop():
    r = np.random.default_rng(0)
    X = np.r_[r.normal(-2, 1, (40, 2)), r.normal(2, 1, (40, 2))]
    y = np.r_[np.zeros(40, int), np.ones(40, int)]
    model = nk.init_model(2, 8, [nk.Head("softmax", 2)], seed=0)
    cfg = nk.TrainConfig(batch_size=16, base_lr=0.1, min_lr=0.001, epochs=6)
    hist = nk.TrainHistory()
    fitted = nk.fit(model, X, [y], cfg, hist)
    assert len(hist.lr_trace) == 6 * 5
    assert hist.lr_trace[0] == 0.1
    assert hist.lr_trace[-1] == pytest.approx(0.001)
    assert hist.epoch_loss[-1] < hist.epoch_loss[0]
    acc = np.mean(np.argmax(nk.forward(fitted, X), 1) == y)
    assert acc > 0.9


def test_fit_is_deterministic():
    X = np.random.default_rng(3).normal(size=(30, 3))
    y = (X[:, 0] > 0).astype(int)
    cfg = nk.TrainConfig(epochs=3, seed=9)
    a = nk.fit(nk.init_model(3, 5, [nk.Head("softmax", 2)], seed=9), X, [y], cfg)
    b = nk.fit(nk.init_model(3, 5, [nk.Head("softmax", 2)], seed=9), X, [y], cfg)
    assert a.equals(b)


def test_zero_epochs_returns_model_unchanged():
    model = nk.init_model(2, 3, [nk.Head("softmax", 2)])
    assert nk.fit(model, np.zeros((0, 2)), [np.zeros(0)], nk.TrainConfig(epochs=0)) is model


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    model, _, _ = random_problem(5, True)
    model = nk.make_model(model.weights, model.biases, model.heads, model.activation, {"k": "v"})
    path = tmp_path / "m.ckpt"
    nk.save_checkpoint(model, path, ["seed=5"])
    back = nk.load_checkpoint(path)
    assert back.equals(model)
    assert back.meta == {"k": "v"}
    assert "# seed=5" in path.read_text()


def test_checkpoint_rejects_other_files(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_text("hello\n")
    with pytest.raises(InvalidInputError):
        nk.load_checkpoint(p)


def test_model_shape_validation():
    with pytest.raises(InvalidInputError):
        nk.make_model([np.zeros((2, 3))], [np.zeros(3)], [nk.Head("softmax", 2)])
    with pytest.raises(InvalidInputError):
        nk.Head("sigmoid", 2)

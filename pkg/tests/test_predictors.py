import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import linalg

from factorbench.factors import FactorSpace, get_preset
from factorbench.metrics import r_squared
from factorbench.predictors import (MLP, ShapeMismatchError, TrainConfig, TrainingDivergedError,
                                    fit_mean, fit_mlp, fit_ridge, flip_signs, load_predictor,
                                    oracle_readout, predict_batch, ridge_system, save_predictor)
from factorbench.splits import default_split_spec, make_split


def numeric_grads(net, X, Y, h=1e-5):
    flat = net.get_flat()
    out = np.empty_like(flat)
    for k in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[k] += h
        minus[k] -= h
        net.set_flat(plus)
        lp = net.loss_and_grads(X, Y)[0]
        net.set_flat(minus)
        lm = net.loss_and_grads(X, Y)[0]
        out[k] = (lp - lm) / (2 * h)
    net.set_flat(flat)
    return out


def max_rel_error(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-8)))


def test_mlp_gradient_2_2_1():
    rng = np.random.default_rng(3)
    net = MLP((2, 2, 1), rng)
    X = rng.normal(size=(5, 2))
    Y = rng.normal(size=(5, 1))
    _, grads = net.loss_and_grads(X, Y)
    analytic = np.concatenate([g.ravel() for g in grads])
    assert max_rel_error(analytic, numeric_grads(net, X, Y)) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.lists(st.integers(1, 5), min_size=0, max_size=3),
       st.integers(1, 4), st.integers(1, 4), st.integers(1, 6))
def test_mlp_gradient_random_nets(seed, hidden, d_in, d_out, batch):
    rng = np.random.default_rng(seed)
    net = MLP((d_in, *hidden, d_out), rng)
    X = rng.normal(size=(batch, d_in))
    Y = rng.normal(size=(batch, d_out))
    # keep pre-activations away from the ReLU kink where differences are undefined
    _, acts = net.forward(X, keep=True)
    if any(np.min(np.abs(a)[a != 0], initial=1.0) < 1e-3 for a in acts[1:-1]):
        return
    _, grads = net.loss_and_grads(X, Y)
    analytic = np.concatenate([g.ravel() for g in grads])
    assert max_rel_error(analytic, numeric_grads(net, X, Y)) < 1e-4


def test_mlp_loss_is_summed_over_factors_and_averaged_over_batch():
    net = MLP((1, 2), np.random.default_rng(0))
    X = np.zeros((4, 1))
    Y = np.ones((4, 2))
    pred = net.forward(X)
    expected = np.sum((pred - Y) ** 2) / 4
    assert net.loss_and_grads(X, Y)[0] == pytest.approx(expected, rel=1e-14)


def test_fit_mean():
    p = fit_mean(np.array([[0.0], [1.0]]))
    assert p.predict(np.zeros((3, 0))).tolist() == [[0.5]] * 3
    with pytest.raises(ValueError):
        fit_mean(np.zeros((0, 2)))
    space = FactorSpace.from_cardinalities([3, 5])
    y = space.normalized_factors()
    m = fit_mean(y, input_dim=2)
    rep = r_squared(m.predict(np.zeros((space.total, 2))), y, space.variance_per_factor())
    assert np.allclose(rep.r2, 0.0, atol=1e-12)


def test_ridge_zero_targets():
    X = np.random.default_rng(0).normal(size=(20, 5))
    p = fit_ridge(X, np.zeros((20, 2)), 1.0)
    assert np.all(p.weights == 0)
    assert np.all(p.predict(X) == 0)


def test_ridge_one_pixel_exact():
    x = np.linspace(0, 1, 11)[:, None]
    p = fit_ridge(x, x.copy(), 1e-12)
    assert p.weights[0, 0] == pytest.approx(1.0, abs=1e-9)
    assert p.weights[1, 0] == pytest.approx(0.0, abs=1e-9)
    rep = r_squared(p.predict(x), x, [x.var()])
    assert rep.r2[0] > 1 - 1e-12


def ridge_objective(W, X, Y, lam):
    pred = X @ W[:-1] + W[-1]
    return np.sum((pred - Y) ** 2) + lam * np.sum(W[:-1] ** 2)


@pytest.mark.parametrize("lam", [0.0, 0.1, 10.0])
def test_ridge_optimality(lam):
    rng = np.random.default_rng(1)
    X = rng.uniform(size=(40, 6))
    Y = X @ rng.normal(size=(6, 3)) + 0.1 * rng.normal(size=(40, 3)) + 0.5
    p = fit_ridge(X, Y, lam)
    A, B = ridge_system(X, Y, lam)
    assert np.max(np.abs(A @ p.weights - B)) < 1e-8
    h = 1e-5
    for k in np.ndindex(p.weights.shape):
        Wp, Wm = p.weights.copy(), p.weights.copy()
        Wp[k] += h
        Wm[k] -= h
        g = (ridge_objective(Wp, X, Y, lam) - ridge_objective(Wm, X, Y, lam)) / (2 * h)
        assert abs(g) < 1e-6
    # the bias is not shrunk: a large lambda drives predictions to the target mean
    big = fit_ridge(X, Y, 1e12)
    assert np.allclose(big.predict(X), Y.mean(axis=0), atol=1e-6)


def test_ridge_singular_advises_lambda():
    X = np.ones((5, 3))
    with pytest.raises(linalg.LinAlgError, match="lambda > 0"):
        fit_ridge(X, np.ones((5, 1)), 0.0)
    with pytest.raises(ValueError):
        fit_ridge(X, np.ones((5, 1)), -1.0)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(iterations=-1)
    with pytest.raises(ValueError):
        TrainConfig(ridge_lambda=-0.5)


def test_zero_iterations_is_the_untrained_network():
    X = np.random.default_rng(0).normal(size=(7, 3))
    cfg = TrainConfig(iterations=0, seed=11, hidden=(4,))
    p = fit_mlp(X, np.zeros((7, 2)), cfg)
    fresh = MLP((3, 4, 2), np.random.Generator(np.random.PCG64(11)))
    assert np.array_equal(p.predict(X), fresh.forward(X))
    assert p.meta["iterations_run"] == 0


def test_seed_determinism():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(50, 4))
    Y = X[:, :2] ** 2
    cfg = TrainConfig(iterations=200, hidden=(8, 8), seed=5)
    a, b = fit_mlp(X, Y, cfg), fit_mlp(X, Y, cfg)
    assert np.array_equal(a.net.get_flat(), b.net.get_flat())
    c = fit_mlp(X, Y, TrainConfig(iterations=200, hidden=(8, 8), seed=6))
    assert not np.array_equal(a.net.get_flat(), c.net.get_flat())


def test_divergence_guard():
    X = np.full((8, 2), 1e200)
    with pytest.raises(TrainingDivergedError):
        fit_mlp(X, np.ones((8, 1)), TrainConfig(iterations=5, hidden=(3,)))


def test_early_stop_on_plateau():
    X = np.zeros((16, 1))
    Y = np.zeros((16, 1))
    p = fit_mlp(X, Y, TrainConfig(iterations=100000, hidden=(2,), learning_rate=1e-2, window=50))
    assert p.meta["iterations_run"] < 100000
    assert len(p.loss_trace) == p.meta["iterations_run"] // 50


def test_linear_identity_readout_is_exact():
    space = FactorSpace.from_cardinalities([4, 5, 6])
    y = space.normalized_factors()
    cfg = TrainConfig(iterations=6000, hidden=(), learning_rate=1e-2, early_stop=False, batch_size=120)
    p = fit_mlp(y, y, cfg)
    rep = r_squared(p.predict(y), y, space.variance_per_factor())
    assert min(rep.r2) > 1 - 1e-9


def test_predict_batch_edges():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(6, 2, 2))
    p = fit_ridge(X.reshape(6, -1), rng.normal(size=(6, 3)), 0.5)
    assert predict_batch(p, np.zeros((0, 4))).shape == (0, 3)
    full = predict_batch(p, X)
    assert np.allclose(predict_batch(p, X[2:3]), full[2:3], rtol=0, atol=1e-12)
    with pytest.raises(ShapeMismatchError):
        predict_batch(p, np.zeros((2, 5)))
    m = fit_mean(rng.normal(size=(4, 3)), input_dim=4)
    rows = m.predict(rng.normal(size=(5, 4)))
    assert np.all(rows == rows[0])


def test_blob_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    X = rng.normal(size=(30, 3))
    Y = rng.normal(size=(30, 2))
    for p in (fit_mean(Y, 3), fit_ridge(X, Y, 1.0),
              fit_mlp(X, Y, TrainConfig(iterations=20, hidden=(5,), window=10))):
        p.meta["note"] = "x"
        blob = save_predictor(p, tmp_path / "p.fbp")
        assert (tmp_path / "p.fbp").read_bytes() == blob
        q = load_predictor(tmp_path / "p.fbp")
        assert q.kind == p.kind and q.meta == p.meta
        assert np.array_equal(q.predict(X), p.predict(X))
        assert save_predictor(q) == blob
    with pytest.raises(ValueError):
        load_predictor(b"JUNK" + blob[4:])


def test_flip_signs():
    assert flip_signs(3, TrainConfig()) is None
    assert flip_signs(3, TrainConfig(sign_flip=True)).tolist() == [-1.0, -1.0, -1.0]
    r = flip_signs(50, TrainConfig(random_flips=True))
    assert set(r.tolist()) == {-1.0, 1.0}


@pytest.mark.parametrize("flip", [False, True])
def test_oracle_readout_on_small_space(flip):
    space = get_preset("dsprites-tiny")
    a = make_split(space, default_split_spec(space, "extrapolation"))
    pred, rep = oracle_readout(space, a, sign_flip=flip, config=TrainConfig(hidden=(40, 40, 40), seed=1))
    assert pred.kind == "oracle-readout"
    assert rep.n_samples == a.counts[1]
    assert min(rep.r2) >= 0.99
    assert ("sign-flip" in rep.predictor) == flip

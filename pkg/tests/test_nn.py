import numpy as np
import pytest
from hypothesis import given, strategies as st

from _oracles import fd_gradient_errors
from clrlab.nn import (
    BcConfig, MlpSpec, ParamError, PolicyParams, bc_fit, critic_grad, flatten, forward, gaussian_logp, init_params,
    load_params, save_params, transfer_actor, value,
)


@pytest.mark.parametrize("layers", [1, 2, 3])
@pytest.mark.parametrize("width", [4, 16, 64])
def test_gradient_check(layers, width):
    spec = MlpSpec(7, 5, (width,) * layers, final_scale=1.0)
    p = init_params(spec, seed=layers * 100 + width)
    rng = np.random.default_rng(width)
    x = rng.normal(size=(6, 7))
    errs = fd_gradient_errors(p, x, rng.normal(size=(6, 5)))
    assert max(errs.values()) < 1e-4, errs


def test_critic_gradient():
    spec = MlpSpec(5, 2, (8,), "gaussian", (16, 16))
    p = init_params(spec, 3)
    rng = np.random.default_rng(1)
    x, g = rng.normal(size=(4, 5)), rng.normal(size=4)
    _, grad = critic_grad(p, x, g)
    sl = p.block("critic/")
    h = 1e-5
    for j in range(sl.start, sl.stop, 7):
        q = p.copy()
        q.flat[j] += h
        up = (g * value(q, x)).sum()
        q.flat[j] -= 2 * h
        dn = (g * value(q, x)).sum()
        assert grad[j] == pytest.approx((up - dn) / (2 * h), rel=1e-4, abs=1e-8)
    assert (grad[p.actor_slice] == 0).all()


def test_gaussian_logp_closed_form():
    mean, log_std, a = np.array([[0.5, -1.0]]), np.array([-1.0, 0.3]), np.array([[0.2, 0.0]])
    s = np.exp(log_std)
    ref = sum(-0.5 * ((a[0, i] - mean[0, i]) / s[i]) ** 2 - np.log(s[i] * np.sqrt(2 * np.pi)) for i in range(2))
    assert gaussian_logp(mean, log_std, a)[0] == pytest.approx(ref)


def test_zero_weights():
    spec = MlpSpec(6, 3, (8, 8))
    p = PolicyParams(spec, np.zeros(init_params(spec).size))
    np.testing.assert_array_equal(forward(p, np.ones((2, 6))), 0.0)


def test_identity_layer():
    spec = MlpSpec(4, 2, ())
    W = np.zeros((4, 2))
    W[0, 0] = W[1, 1] = 1.0
    p = PolicyParams(spec, flatten(spec, {"actor/W0": W, "actor/b0": np.zeros(2)}))
    x = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(forward(p, x), x[:, :2])


def test_shape_and_nan_errors():
    spec = MlpSpec(4, 2, (3,))
    p = init_params(spec)
    with pytest.raises(ParamError):
        forward(p, np.zeros((1, 5)))
    bad = p.copy()
    bad.flat[0] = np.nan
    with pytest.raises(ParamError):
        forward(bad, np.zeros((1, 4)))
    with pytest.raises(ParamError):
        PolicyParams(spec, np.zeros(3))
    with pytest.raises(ParamError):
        value(p, np.zeros((1, 4)))


@given(st.integers(1, 6), st.integers(1, 4), st.lists(st.integers(1, 9), max_size=3), st.booleans())
def test_flatten_round_trip(n_in, n_out, hidden, critic):
    spec = MlpSpec(n_in, n_out, tuple(hidden), "gaussian" if critic else "deterministic", (5,) if critic else None)
    p = init_params(spec, 0)
    p.flat[:] = np.random.default_rng(n_in).normal(size=p.size)
    np.testing.assert_array_equal(flatten(spec, p.unflatten()), p.flat)


def test_bc_linear_teacher():
    rng = np.random.default_rng(0)
    X = rng.uniform(-1, 1, (2048, 8))
    M = rng.normal(size=(8, 3)) / 8
    Y = X @ M
    spec = MlpSpec(8, 3, (32, 32))
    p, losses = bc_fit(X, Y, spec, BcConfig(epochs=150, batch=128, lr=2e-3))
    assert losses[-1] < 1e-4
    assert losses[-1] < losses[0]


def test_bc_memorizes_single_sample():
    x = np.random.default_rng(1).normal(size=(1, 6))
    X = np.repeat(x, 16, axis=0)
    Y = np.repeat([[0.3, -0.2]], 16, axis=0)
    p, losses = bc_fit(X, Y, MlpSpec(6, 2, (16,)), BcConfig(epochs=800, batch=16, lr=3e-3))
    assert np.abs(forward(p, x) - Y[:1]).max() < 1e-6


def test_bc_errors():
    spec = MlpSpec(3, 1, (4,))
    with pytest.raises(ValueError):
        bc_fit(np.zeros((0, 3)), np.zeros((0, 1)), spec)
    with pytest.raises(ParamError):
        bc_fit(np.zeros((5, 3)), np.zeros((5, 2)), spec)


def test_transfer_keeps_actor():
    src = init_params(MlpSpec(10, 4, (16, 16), final_scale=1.0), 0)
    dst_spec = MlpSpec(10, 4, (16, 16)).with_critic((32, 32))
    dst = transfer_actor(src, dst_spec, seed=5)
    x = np.random.default_rng(2).normal(size=(7, 10))
    np.testing.assert_array_equal(forward(dst, x), forward(src, x))
    fresh = init_params(dst_spec, 5)
    np.testing.assert_array_equal(dst.view("log_std"), fresh.view("log_std"))
    np.testing.assert_array_equal(value(dst, x), value(fresh, x))
    with pytest.raises(ParamError):
        transfer_actor(src, MlpSpec(10, 4, (8,)).with_critic())


def test_save_load(tmp_path):
    p = init_params(MlpSpec(3, 2, (4,), "gaussian", (5,)), 9)
    save_params(p, tmp_path / "p.npz", {"note": 1})
    q, extra = load_params(tmp_path / "p.npz")
    np.testing.assert_array_equal(q.flat, p.flat)
    assert q.spec == p.spec and q.seed == 9 and extra == {"note": 1}

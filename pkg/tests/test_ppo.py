import numpy as np
import pytest
from hypothesis import given, strategies as st

from clrlab.nn import DivergenceError, MlpSpec, forward, init_params
from clrlab.ppo import PgConfig, discounted_returns, gae, load_state, save_state, train_pg

TARGET = np.array([0.5, -0.3])


class _Res:
    def __init__(self, reward, obs, done):
        self.reward, self.obs, self.done = reward, obs, done


class Bandit:
    """One-step episodes; reward is minus the squared distance to a fixed action."""

    horizon = 1
    scenarios = range(4)

    def reset(self, ids, seeds):
        self.B = len(ids)
        return np.ones((self.B, 3))

    def step_raw(self, a):
        return _Res(-((a - TARGET) ** 2).sum(1), np.ones((self.B, 3)), True)


def spec():
    return MlpSpec(3, 2, (8,), "gaussian", (8,), init_log_std=-1.0)


def test_gae_hand_values():
    r = np.array([[1.0], [2.0], [3.0]])
    v = np.array([[0.5], [1.0], [1.5]])
    adv, ret = gae(r, v, 0.9, 0.8)
    d = r[:, 0] + 0.9 * np.array([1.0, 1.5, 0.0]) - v[:, 0]
    a2 = d[2]
    a1 = d[1] + 0.72 * a2
    a0 = d[0] + 0.72 * a1
    np.testing.assert_allclose(adv[:, 0], [a0, a1, a2])
    np.testing.assert_allclose(ret, adv + v)


@given(st.integers(1, 20), st.floats(0.5, 1.0), st.integers(0, 1000))
def test_gae_limits(T, gamma, seed):
    rng = np.random.default_rng(seed)
    r, v = rng.normal(size=(T, 3)), rng.normal(size=(T, 3))
    adv, ret = gae(r, v, gamma, 1.0)
    np.testing.assert_allclose(ret, discounted_returns(r, gamma), atol=1e-9)
    adv0, _ = gae(r, v, gamma, 0.0)
    nxt = np.vstack([v[1:], np.zeros((1, 3))])
    np.testing.assert_allclose(adv0, r + gamma * nxt - v, atol=1e-12)


def test_discounted_returns_limits():
    r = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(discounted_returns(r, 0.0), r)
    np.testing.assert_allclose(discounted_returns(r, 1.0)[0], r.sum(0))


def test_bandit_converges():
    cfg = PgConfig(steps_per_batch=256, minibatch=64, lr=3e-3, iterations=150, target_kl=None, max_kl=10.0)
    st_ = train_pg(Bandit(), init_params(spec(), 0), cfg)
    mean = forward(st_.params, np.ones((1, 3)))[0]
    assert np.abs(mean - TARGET).max() < 0.05
    assert st_.curve[-1] > st_.curve[0]
    assert st_.steps == 150 * 256


def test_zero_clip_freezes_actor():
    init = init_params(spec(), 1)
    cfg = PgConfig(steps_per_batch=64, minibatch=16, clip=0.0, iterations=3, target_kl=None)
    st_ = train_pg(Bandit(), init, cfg)
    sl = init.actor_slice
    np.testing.assert_array_equal(st_.params.flat[sl], init.flat[sl])
    np.testing.assert_array_equal(st_.params.view("log_std"), init.view("log_std"))
    assert not np.array_equal(st_.params.flat, init.flat)  # critic still learns


def test_divergence_halts_with_last_good():
    init = init_params(spec(), 2)
    cfg = PgConfig(steps_per_batch=64, minibatch=16, lr=0.5, iterations=5, target_kl=None, max_kl=1e-9)
    with pytest.raises(DivergenceError) as err:
        train_pg(Bandit(), init, cfg)
    np.testing.assert_array_equal(err.value.params.flat, init.flat)
    assert err.value.diagnostics["iteration"] == 0


def test_requires_critic():
    with pytest.raises(ValueError):
        train_pg(Bandit(), init_params(MlpSpec(3, 2, (4,)), 0), PgConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        PgConfig(clip=1.0)
    with pytest.raises(ValueError):
        PgConfig(gamma=0.0)


def test_resume_is_bit_identical(tmp_path):
    init = init_params(spec(), 3)
    cfg = PgConfig(steps_per_batch=64, minibatch=16, iterations=12)
    full = train_pg(Bandit(), init, cfg)
    half = train_pg(Bandit(), init, cfg, stop_after=6)
    save_state(half, tmp_path / "s.npz", cfg)
    state, cfg2 = load_state(tmp_path / "s.npz")
    assert cfg2 == cfg and state.iteration == 6
    done = train_pg(Bandit(), init, cfg2, state=state)
    np.testing.assert_array_equal(done.params.flat, full.params.flat)
    assert done.curve == full.curve

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from clrlab.forecast import (
    ForecastConfig, HistoricalProfileStore, ScenarioSet, build_dataset, forecast_matrix, lookahead_window,
    sample_drift, step_error_sigma, synth_initial_forecast, update_forecast,
)


def test_sigma_closed_form():
    assert step_error_sigma(ForecastConfig(epsilon_T=0.1, T=72)) == pytest.approx(0.0147707, abs=5e-7)
    assert step_error_sigma(ForecastConfig(epsilon_T=0.0)) == 0.0
    assert step_error_sigma(ForecastConfig(epsilon_T=0.1, T=1)) == pytest.approx(0.125331, abs=5e-7)
    with pytest.raises(ValueError):
        step_error_sigma(ForecastConfig(T=0))


def test_zero_drift_is_perfect(rng):
    act = rng.uniform(0, 300, 72)
    out = synth_initial_forecast(act, np.full(72, 300.0), 300.0, ForecastConfig(), rng, drift=np.zeros(72))
    np.testing.assert_array_equal(out, act)


def test_ceiling_clamp(rng):
    act = np.full(4, 250.0)
    drift = np.array([0.0, 0.0, 1.0 / 3.0, -2.0])  # 250 + 100 = 350, 250 - 600 < 0
    out = synth_initial_forecast(act, np.full(4, 300.0), 300.0, ForecastConfig(), rng, drift=drift)
    assert out[2] == 300.0
    assert out[3] == 0.0
    assert out[0] == 250.0


def test_calibration_small_sample():
    # same half-normal check as the acceptance gate, on a smaller sample with 3-SE bands
    cfg = ForecastConfig(epsilon_T=0.1)
    rng = np.random.default_rng(7)
    err = np.abs(sample_drift(rng, step_error_sigma(cfg), cfg.T, size=20_000)[:, -1])
    se = err.std() / math.sqrt(err.size)
    assert abs(err.mean() - 0.1) < 3 * se
    target_std = 0.1 * math.sqrt(math.pi / 2 - 1)
    assert abs(err.std() - target_std) < 3 * target_std / math.sqrt(2 * err.size) + 1e-3


def test_update_beta_exponent():
    prev = np.array([90.0, 100.0, 120.0, 130.0])
    new = update_forecast(prev, 110.0, 0.9)
    assert new[0] == 110.0
    assert new[1] == pytest.approx(120.0 + 9.0)
    assert new[2] == pytest.approx(130.0 + 0.81 * 10.0)


def test_update_zero_innovation_and_beta_zero():
    prev = np.array([5.0, 100.0, 120.0, 130.0])
    np.testing.assert_array_equal(update_forecast(prev, 100.0, 0.9), prev[1:])
    out = update_forecast(prev, 140.0, 0.0)
    np.testing.assert_array_equal(out, [140.0, 120.0, 130.0])
    with pytest.raises(ValueError):
        update_forecast(np.array([1.0]), 1.0, 0.9)


def test_lookahead_padding():
    fc = np.arange(72, dtype=float)
    np.testing.assert_array_equal(lookahead_window(fc, 12), fc[:12])
    last = lookahead_window(fc[71:], 12)
    assert last[0] == 71.0 and (last[1:] == 1.0).all()
    w = lookahead_window(fc[66:], 12, pad_value=2.5)  # t = T-5 leaves 6 entries
    np.testing.assert_array_equal(w[:6], fc[66:])
    assert (w[6:] == 2.5).all() and w.size == 12


@given(st.integers(1, 40), st.floats(0.0, 1.0), st.integers(0, 10_000))
def test_forecast_matrix_consistency(T, beta, seed):
    rng = np.random.default_rng(seed)
    ceil = rng.uniform(50, 300, T)
    act = rng.uniform(0, 1, T) * ceil
    cfg = ForecastConfig(epsilon_T=0.25, beta=beta, T=T)
    mat = forecast_matrix(act, ceil, 300.0, cfg, rng)
    np.testing.assert_array_equal(np.diag(mat), act)
    for t in range(T):
        assert (mat[t, t:] >= 0).all() and (mat[t, t:] <= ceil[t:] + 1e-12).all()


def test_test_split_has_504(net13, store13):
    ds = build_dataset(store13, net13, ForecastConfig(epsilon_T=0.1), 504, "test")
    assert len(ds) == 504
    lo, hi = store13.split_range("test")
    assert (ds.start_index + lo >= store13.n_train).all()


def test_train_windows_stay_in_train(train13, store13):
    assert (train13.start_index + train13.T <= store13.n_train).all()


def test_eps_zero_identity(test13_eps0):
    ds = test13_eps0
    for t in range(ds.T):
        np.testing.assert_array_equal(ds.forecasts[:, :, t, t:], ds.actual[:, :, t:])


def test_synchronous_windows(net13, store13, test13_eps0):
    # every DER profile comes from the same start index
    lo, _ = store13.split_range("test")
    for s in range(len(test13_eps0)):
        i = lo + test13_eps0.start_index[s]
        raw = store13.data[:, i:i + test13_eps0.T]
        np.testing.assert_array_equal(test13_eps0.actual[s], np.minimum(np.maximum(raw, 0), test13_eps0.ceiling[s]))


def test_error_levels_share_draws(net13, store13):
    a = build_dataset(store13, net13, ForecastConfig(epsilon_T=0.05), 4, "train")
    b = build_dataset(store13, net13, ForecastConfig(epsilon_T=0.25), 4, "train")
    np.testing.assert_array_equal(a.actual, b.actual)
    assert not np.array_equal(a.forecasts, b.forecasts)


def test_determinism(net13, store13, tmp_path):
    cfg = ForecastConfig(epsilon_T=0.15, seed=3)
    a = build_dataset(store13, net13, cfg, 6, "train")
    b = build_dataset(store13, net13, cfg, 6, "train")
    a.save(tmp_path / "a.npz")
    b.save(tmp_path / "b.npz")
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    c = ScenarioSet.load(tmp_path / "a.npz")
    np.testing.assert_array_equal(c.forecasts, a.forecasts)
    assert c.config == cfg


def test_insufficient_history(net13, store13):
    short = HistoricalProfileStore(store13.names, store13.data[:, :100], store13.tau, store13.start, 50)
    with pytest.raises(ValueError, match="insufficient"):
        build_dataset(short, net13, ForecastConfig(), 3, "test")


def test_csv_round_trip(store13, tmp_path):
    small = HistoricalProfileStore(store13.names, store13.data[:, :300], store13.tau, store13.start, 200)
    small.to_csv(tmp_path)
    back = HistoricalProfileStore.from_csv(tmp_path, small.names)
    np.testing.assert_array_equal(back.data, small.data)
    assert back.n_train == 200 and back.tau == pytest.approx(small.tau)
    (tmp_path / f"{small.names[0]}.csv").write_text("time,kw\n")
    with pytest.raises(ValueError, match="header"):
        HistoricalProfileStore.from_csv(tmp_path, small.names)

"""Synthetic renewable forecasts with a controlled T-step error level.

Per-step normalized errors are i.i.d. Gaussian with std
``eps_T * sqrt(pi / (2 T))``; accumulated over the horizon their absolute sum
is half-normal with mean ``eps_T``. Forecasts are then refreshed every step as
new realizations arrive, with the innovation decaying geometrically (``beta``)
over the remaining horizon.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .archive import read_archive, write_archive
from .network import NetworkModel

SPLITS = {"train": 0, "test": 1}
ERROR_LEVELS = (0.0, 0.05, 0.10, 0.15, 0.20, 0.25)


@dataclass(frozen=True)
class ForecastConfig:
    epsilon_T: float = 0.1
    beta: float = 0.9
    k: float = 1.0  # lookahead hours
    T: int = 72
    tau: float = 1.0 / 12.0
    seed: int = 0
    pad_value: float = 1.0  # in units of DER capacity

    def __post_init__(self):
        if not 0.0 <= self.epsilon_T <= 0.5:
            raise ValueError("epsilon_T must lie in [0, 0.5]")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        ratio = self.k / self.tau
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError("k / tau must be a positive integer")

    @property
    def lookahead_steps(self) -> int:
        return int(round(self.k / self.tau))


def step_error_sigma(cfg: ForecastConfig) -> float:
    if cfg.T < 1:
        raise ValueError("T must be >= 1")
    return cfg.epsilon_T * math.sqrt(math.pi / (2.0 * cfg.T))


def sample_drift(rng: np.random.Generator, sigma: float, T: int, size=None) -> np.ndarray:
    """Accumulated normalized error: entry j is the sum of j+1 step errors."""
    shape = (T,) if size is None else (*np.atleast_1d(size), T)
    return np.cumsum(rng.normal(0.0, sigma, size=shape), axis=-1)


def synth_initial_forecast(actual, ceiling, p_max: float, cfg: ForecastConfig, rng, clip: bool = True, drift=None) -> np.ndarray:
    """First forecast vector over the horizon; entry 0 is the realization itself."""
    actual = np.asarray(actual, dtype=float)
    if drift is None:
        drift = sample_drift(rng, step_error_sigma(cfg), actual.shape[-1], actual.shape[:-1] or None)
    out = actual + np.asarray(drift) * p_max
    if clip:
        out = np.clip(out, 0.0, ceiling)
    out[..., 0] = actual[..., 0]
    return out


def update_forecast(prev, realization: float, beta: float, ceiling=None) -> np.ndarray:
    """Refresh ``prev = [p_t, p_hat_{t+1|t}, ...]`` with the realization of step t+1."""
    prev = np.asarray(prev, dtype=float)
    if prev.shape[-1] < 2:
        raise ValueError("no future step left to update")
    tail = prev[1:]
    innovation = realization - tail[0]
    new = tail + beta ** np.arange(tail.shape[-1]) * innovation
    if ceiling is not None:
        new = np.clip(new, 0.0, ceiling)
    new[0] = realization
    return new


def lookahead_window(forecast, k_steps: int, pad_value: float = 1.0) -> np.ndarray:
    """First ``k_steps`` entries of a forecast vector, right-padded to fixed length."""
    forecast = np.asarray(forecast, dtype=float)
    n = min(k_steps, forecast.shape[-1])
    out = np.full(k_steps, float(pad_value))
    out[:n] = forecast[:n]
    return out


def forecast_matrix(actual, ceiling, p_max: float, cfg: ForecastConfig, rng, drift=None) -> np.ndarray:
    """All forecast vectors of one DER over an episode.

    Row t holds ``p_hat_{j|t}`` in columns j >= t (zeros below the diagonal);
    the diagonal equals the realization.
    """
    actual = np.asarray(actual, dtype=float)
    ceiling = np.asarray(ceiling, dtype=float)
    T = actual.shape[0]
    mat = np.zeros((T, T))
    mat[0] = synth_initial_forecast(actual, ceiling, p_max, cfg, rng, drift=drift)
    for t in range(1, T):
        mat[t, t:] = update_forecast(mat[t - 1, t - 1:], actual[t], cfg.beta, ceiling[t:])
    return mat


# -- historical profiles ------------------------------------------------------

@dataclass
class HistoricalProfileStore:
    names: tuple[str, ...]
    data: np.ndarray  # (n_ders, n_steps) kW
    tau: float
    start: datetime
    n_train: int  # first n_train steps are the training range

    def split_range(self, split: str) -> tuple[int, int]:
        if split == "train":
            return 0, self.n_train
        if split == "test":
            return self.n_train, self.data.shape[1]
        raise ValueError(f"unknown split {split!r}")

    def hour_of_day(self, index) -> np.ndarray:
        base = self.start.hour + self.start.minute / 60.0 + self.start.second / 3600.0
        return np.mod(base + np.asarray(index, dtype=float) * self.tau, 24.0)

    def timestamp(self, index: int) -> datetime:
        return self.start + timedelta(hours=index * self.tau)

    def to_csv(self, directory) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for name, row in zip(self.names, self.data):
            path = directory / f"{name}.csv"
            with path.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["timestamp", "power_kw"])
                for i, val in enumerate(row):
                    w.writerow([self.timestamp(i).isoformat(), repr(float(val))])
            paths.append(path)
        (directory / "split.txt").write_text(f"train_steps={self.n_train}\n")
        return paths

    @classmethod
    def from_csv(cls, directory, names, n_train: int | None = None) -> "HistoricalProfileStore":
        directory = Path(directory)
        rows, stamps = [], None
        for name in names:
            with (directory / f"{name}.csv").open(newline="") as fh:
                reader = csv.reader(fh)
                header = next(reader)
                if [h.strip() for h in header] != ["timestamp", "power_kw"]:
                    raise ValueError(f"{name}.csv: header must be 'timestamp,power_kw'")
                recs = [(datetime.fromisoformat(ts), float(val)) for ts, val in reader]
            ts = [r[0] for r in recs]
            if stamps is None:
                stamps = ts
            elif ts != stamps:
                raise ValueError("profiles must share identical timestamps")
            rows.append([r[1] for r in recs])
        if stamps is None or len(stamps) < 2:
            raise ValueError("need at least two samples per profile")
        tau = (stamps[1] - stamps[0]).total_seconds() / 3600.0
        if n_train is None:
            split_file = directory / "split.txt"
            if not split_file.exists():
                raise ValueError("train/test split not given and split.txt missing")
            n_train = int(split_file.read_text().strip().split("=")[1])
        return cls(tuple(names), np.array(rows, dtype=float), tau, stamps[0], n_train)


def synthetic_history(net: NetworkModel, train_days: int = 30, test_days: int = 7, seed: int = 0,
                      start: datetime = datetime(2012, 7, 1)) -> HistoricalProfileStore:
    """Generate a PV/wind history for the network's renewables.

    PV is the clear-sky bell times an AR(1) cloud factor; wind runs an AR(1)
    wind speed through a cubic power curve. The test range gets a horizon-long
    tail so every start in the last test day has a full window.
    """
    tau = net.system.tau
    per_day = int(round(24 / tau))
    n = (train_days + test_days) * per_day + net.system.T
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7919]))
    hours = np.arange(n) * tau + start.hour
    data = []
    for r in net.renewables:
        if r.kind == "pv":
            ceil = r.ceiling(hours)
            cloud = np.empty(n)
            c = 0.8
            day_level = rng.uniform(0.35, 1.0, size=n // per_day + 2)
            for i in range(n):
                target = day_level[i // per_day]
                c = c + 0.05 * (target - c) + 0.04 * rng.normal()
                c = min(max(c, 0.05), 1.0)
                cloud[i] = c
            data.append(ceil * cloud)
        else:
            speed = np.empty(n)
            s = 8.0
            for i in range(n):
                s = s + 0.01 * (8.0 - s) + 0.25 * rng.normal()
                s = min(max(s, 0.0), 30.0)
                speed[i] = s
            cut_in, rated, cut_out = 3.0, 12.0, 25.0
            frac = np.clip((speed - cut_in) / (rated - cut_in), 0.0, 1.0) ** 3
            frac[speed >= cut_out] = 0.0
            data.append(r.p_max * frac)
    names = tuple(r.name for r in net.renewables)
    return HistoricalProfileStore(names, np.array(data), tau, start, train_days * per_day)


# -- scenario sets ------------------------------------------------------------

@dataclass
class ScenarioSet:
    """A collection of synchronized renewable scenarios at one error level."""

    actual: np.ndarray  # (S, R, T) kW
    forecasts: np.ndarray  # (S, R, T, T) kW, row t = forecast made at step t
    ceiling: np.ndarray  # (S, R, T) kW
    start_index: np.ndarray  # (S,) window start within the split
    start_hour: np.ndarray  # (S,) hour of day at step 1
    p_max: np.ndarray  # (R,)
    config: ForecastConfig
    split: str
    names: tuple[str, ...]

    def __len__(self) -> int:
        return self.actual.shape[0]

    @property
    def T(self) -> int:
        return self.actual.shape[-1]

    @property
    def epsilon_T(self) -> float:
        return self.config.epsilon_T

    def subset(self, idx) -> "ScenarioSet":
        idx = np.asarray(idx)
        return ScenarioSet(
            self.actual[idx], self.forecasts[idx], self.ceiling[idx], self.start_index[idx],
            self.start_hour[idx], self.p_max, self.config, self.split, self.names,
        )

    @classmethod
    def from_actual(cls, actual, p_max, cfg: ForecastConfig | None = None, ceiling=None, forecasts=None,
                    start_hour=0.0, split: str = "test", names=None) -> "ScenarioSet":
        """Wrap given profiles (S, R, T); forecasts default to the actuals (perfect)."""
        actual = np.asarray(actual, dtype=float)
        S, R, T = actual.shape
        cfg = cfg or ForecastConfig(epsilon_T=0.0, T=T)
        if forecasts is None:
            forecasts = np.zeros((S, R, T, T))
            for t in range(T):
                forecasts[:, :, t, t:] = actual[:, :, t:]
        p_max = np.asarray(p_max, dtype=float).reshape(R)
        ceiling = np.broadcast_to(p_max[None, :, None], actual.shape).copy() if ceiling is None else np.asarray(ceiling, dtype=float)
        return cls(actual, np.asarray(forecasts, dtype=float), ceiling, np.zeros(S, dtype=int),
                   np.broadcast_to(np.asarray(start_hour, dtype=float), (S,)).copy(), p_max, cfg, split,
                   tuple(names) if names else tuple(f"r{i}" for i in range(R)))

    def forecast_at(self, s: int, t: int) -> np.ndarray:
        """Forecast vectors (R, T - t) made at 0-based step t of scenario s."""
        return self.forecasts[s, :, t, t:]

    def save(self, path) -> None:
        meta = {
            "kind": "ScenarioSet",
            "version": 1,
            "config": asdict(self.config),
            "split": self.split,
            "names": list(self.names),
        }
        write_archive(path, {
            "actual": self.actual, "forecasts": self.forecasts, "ceiling": self.ceiling,
            "start_index": self.start_index, "start_hour": self.start_hour, "p_max": self.p_max,
        }, meta)

    @classmethod
    def load(cls, path) -> "ScenarioSet":
        arrays, meta = read_archive(path)
        if meta.get("kind") != "ScenarioSet":
            raise ValueError(f"{path} is not a scenario archive")
        return cls(
            arrays["actual"], arrays["forecasts"], arrays["ceiling"], arrays["start_index"],
            arrays["start_hour"], arrays["p_max"], ForecastConfig(**meta["config"]),
            meta["split"], tuple(meta["names"]),
        )


def scenario_rng(seed: int, split: str, index: int, stream: int) -> np.random.Generator:
    """Independent stream per (seed, split, scenario, purpose); worker-count invariant."""
    return np.random.default_rng(np.random.SeedSequence([seed, SPLITS[split], index, stream]))


def window_starts(store: HistoricalProfileStore, T: int, count: int, split: str, seed: int) -> np.ndarray:
    lo, hi = store.split_range(split)
    positions = hi - lo - T + 1
    if positions < 1:
        raise ValueError(f"insufficient history: {split} range has {hi - lo} steps, need {T}")
    if split == "test":
        stride = max(1, positions // count)
        return (np.arange(count) * stride) % positions
    return np.array([scenario_rng(seed, split, i, 0).integers(positions) for i in range(count)])


def build_dataset(store: HistoricalProfileStore, net: NetworkModel, cfg: ForecastConfig, count: int,
                  split: str = "train") -> ScenarioSet:
    """Sample ``count`` synchronized windows and synthesize their forecasts.

    Test windows are evenly spaced over the test range; train windows are
    drawn uniformly from the train range. Noise for scenario i only depends on
    (seed, split, i), so error levels share the same underlying draws.
    """
    T = cfg.T
    if abs(store.tau - cfg.tau) > 1e-12:
        raise ValueError("profile resolution does not match the forecast config")
    starts = window_starts(store, T, count, split, cfg.seed)
    lo, _ = store.split_range(split)
    sigma = step_error_sigma(cfg)
    R = len(net.renewables)
    actual = np.zeros((count, R, T))
    ceiling = np.zeros((count, R, T))
    mats = np.zeros((count, R, T, T))
    hours0 = store.hour_of_day(lo + starts)
    for s in range(count):
        hours = hours0[s] + np.arange(T) * cfg.tau
        rng = scenario_rng(cfg.seed, split, s, 1)
        unit = rng.normal(0.0, 1.0, size=(R, T))
        for r, spec in enumerate(net.renewables):
            ceil = spec.ceiling(hours)
            act = np.clip(store.data[r, lo + starts[s]: lo + starts[s] + T], 0.0, ceil)
            actual[s, r] = act
            ceiling[s, r] = ceil
            mats[s, r] = forecast_matrix(act, ceil, spec.p_max, cfg, None, drift=np.cumsum(sigma * unit[r]))
    return ScenarioSet(
        actual=actual, forecasts=mats, ceiling=ceiling, start_index=starts, start_hour=hours0,
        p_max=np.array([r.p_max for r in net.renewables]), config=cfg, split=split,
        names=tuple(r.name for r in net.renewables),
    )

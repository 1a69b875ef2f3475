"""Head-to-head evaluation of learned and optimization-based controllers."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy import stats

from .env import ClrEnv, STAGE2, EpisodeMetrics, Trajectory, episode_metrics, metrics_from_arrays, rollout
from .mpc import MpcPolicy, nr_config, rc_config
from .network import NetworkModel
from .nn import PolicyParams, forward, value
from .ppo import discounted_returns

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalRecord:
    controller: str
    eps: float
    scenario: int
    restoration_reward: float  # sum of r^CLR over the episode (kW-weighted, unscaled)
    tau_vio: float  # bus-hours outside the voltage band
    v_tilde_vio: float  # mean violating voltage magnitude, nan when none
    shed_events: int
    shed_kw: float
    total_reward: float
    runtime: float


def rl_controller(params: PolicyParams):
    return lambda obs, env: forward(params, obs)


def run_controller(net: NetworkModel, scenarios, name: str, policy, ids=None, k: float = 1.0, seed: int = 0,
                   batch: int | None = None, eps: float | None = None) -> tuple[list[EvalRecord], list[Trajectory]]:
    """Roll ``policy`` over scenario ``ids``; returns one record per scenario plus the trajectories."""
    ids = np.arange(len(scenarios)) if ids is None else np.asarray(ids)
    eps = scenarios.config.epsilon_T if eps is None else eps
    env = ClrEnv(net, scenarios, k=k, variant=STAGE2)
    batch = ids.size if batch is None else batch
    records, trajs = [], []
    for lo in range(0, ids.size, batch):
        chunk = ids[lo:lo + batch]
        t0 = time.perf_counter()
        tr = rollout(env, policy, chunk, seed)
        dt = (time.perf_counter() - t0) / chunk.size
        trajs.append(tr)
        for b, s in enumerate(chunk):
            m = episode_metrics(tr, b)
            records.append(EvalRecord(name, float(eps), int(s), m.restoration_reward, m.tau_vio,
                                      float("nan") if m.v_tilde_vio is None else m.v_tilde_vio,
                                      m.shed_events, m.shed_kw, m.total_reward, dt))
    return records, trajs


def mpc_controller(net: NetworkModel, kind: str, eps: float, **kw) -> tuple[str, MpcPolicy]:
    if kind == "NR-MPC":
        return kind, MpcPolicy(net, nr_config(**kw))
    if kind == "RC-MPC":
        return kind, MpcPolicy(net, rc_config(epsilon_T=eps, **kw))
    raise ValueError(f"unknown controller {kind!r}")


# -- aggregation ---------------------------------------------------------------------

@dataclass(frozen=True)
class Summary:
    controller: str
    eps: float
    n: int
    mean_reward: float
    ci_low: float
    ci_high: float
    mean_tau_vio: float  # over violating episodes only
    mean_v_tilde_vio: float
    n_violating: int
    mean_shed_kw: float


def mean_ci(x, level: float = 0.95) -> tuple[float, float, float]:
    x = np.asarray(x, dtype=float)
    m = float(x.mean())
    if x.size < 2:
        return m, m, m
    half = float(stats.t.ppf(0.5 + level / 2, x.size - 1) * x.std(ddof=1) / np.sqrt(x.size))
    return m, m - half, m + half


def summarize(records: list[EvalRecord]) -> list[Summary]:
    out = []
    keys = sorted({(r.controller, r.eps) for r in records})
    for c, e in keys:
        rs = [r for r in records if r.controller == c and r.eps == e]
        m, lo, hi = mean_ci([r.restoration_reward for r in rs])
        vio = [r for r in rs if r.tau_vio > 0]
        out.append(Summary(
            c, e, len(rs), m, lo, hi,
            float(np.mean([r.tau_vio for r in vio])) if vio else 0.0,
            float(np.mean([r.v_tilde_vio for r in vio])) if vio else float("nan"),
            len(vio), float(np.mean([r.shed_kw for r in rs])),
        ))
    return out


def write_records(path, records: list[EvalRecord], timings: bool = False) -> None:
    """Write records as CSV. Wall-clock runtimes go to a sibling ``*_timings.csv`` so the
    record table itself is reproducible byte for byte."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = [f.name for f in fields(EvalRecord) if timings or f.name != "runtime"]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for r in records:
            d = asdict(r)
            w.writerow([repr(d[k]) if isinstance(d[k], float) else d[k] for k in names])
    if not timings:
        with path.with_name(path.stem + "_timings.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["controller", "eps", "scenario", "runtime"])
            w.writerows([r.controller, repr(r.eps), r.scenario, repr(r.runtime)] for r in records)


def read_records(path) -> list[EvalRecord]:
    conv = {f.name: f.type for f in fields(EvalRecord)}
    cast = {"str": str, "float": float, "int": int}
    with Path(path).open() as fh:
        return [EvalRecord(**{"runtime": float("nan"), **{k: cast[conv[k]](v) for k, v in row.items()}})
                for row in csv.DictReader(fh)]


def write_trajectories(folder, records: list[EvalRecord], trajs: list[Trajectory]) -> list[Path]:
    """One per-step CSV per record, named ``{controller}_eps{eps}_s{scenario}.csv``."""
    folder = Path(folder)
    paths = []
    it = iter(records)
    for tr in trajs:
        for b in range(tr.reward.shape[1]):
            r = next(it)
            path = folder / f"{r.controller}_eps{r.eps:.2f}_s{r.scenario}.csv"
            tr.write_csv(path, b)
            paths.append(path)
    return paths


def metrics_from_log(path, tau: float, v_min: float, v_max: float) -> EpisodeMetrics:
    """Recompute episode metrics from a trajectory CSV alone."""
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh))
    vcols = sorted((c for c in rows[0] if c[0] == "v" and c[1:].isdigit()), key=lambda c: int(c[1:]))
    col = lambda name: np.array([float(r[name]) for r in rows])  # noqa: E731
    v = np.array([[float(r[c]) for c in vcols] for r in rows])
    return metrics_from_arrays(col("r_clr"), v, tau, v_min, v_max, col("shed_kw"), col("reward"))


def write_summary(path, summary: list[Summary]) -> str:
    path = Path(path)
    names = [f.name for f in fields(Summary)]
    with path.with_suffix(".csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for s in summary:
            w.writerow([repr(v) if isinstance(v, float) else v for v in asdict(s).values()])
    lines = [f"{'controller':<12} {'eps':>5} {'n':>4} {'mean reward':>12} {'95% CI':>23} {'tau_vio':>8} {'V_vio':>7}"]
    for s in summary:
        lines.append(f"{s.controller:<12} {s.eps:5.2f} {s.n:4d} {s.mean_reward:12.1f} "
                     f"[{s.ci_low:10.1f}, {s.ci_high:10.1f}] {s.mean_tau_vio:8.3f} {s.mean_v_tilde_vio:7.4f}")
    text = "\n".join(lines) + "\n"
    path.with_suffix(".txt").write_text(text)
    return text


# -- scenario classification -------------------------------------------------------------

def over_forecast(scenarios, ids=None) -> np.ndarray:
    """True where the first-issued forecast overstates total renewable energy over the horizon."""
    ids = np.arange(len(scenarios)) if ids is None else np.asarray(ids)
    first = scenarios.forecasts[ids, :, 0, :].sum(axis=(1, 2))
    actual = scenarios.actual[ids].sum(axis=(1, 2))
    return first > actual


# -- reward-to-go -------------------------------------------------------------------------

def explain(env: ClrEnv, params: PolicyParams, ids, gamma: float = 0.99, seed: int = 0) -> np.ndarray:
    """Critic estimate vs realized discounted return; rows (episode, t, v(s_t), G_t)."""
    if params.spec.critic_hidden is None:
        raise ValueError("checkpoint has no critic")
    env.record = False
    obs = env.reset(ids, seed)
    V, R = [], []
    while True:
        V.append(value(params, obs))
        res = env.step_raw(forward(params, obs))
        R.append(res.reward)
        obs = res.obs
        if res.done:
            break
    V, R = np.stack(V), np.stack(R)
    G = discounted_returns(R, gamma)
    T, B = R.shape
    ep = np.broadcast_to(np.asarray(ids)[None, :], (T, B))
    tt = np.broadcast_to(np.arange(1, T + 1)[:, None], (T, B))
    return np.stack([ep, tt, V, G], axis=-1).transpose(1, 0, 2).reshape(-1, 4)

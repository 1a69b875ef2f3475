"""Clipped-surrogate policy gradient with GAE, for batched lockstep environments.

The environment contract is small: ``reset(ids, seeds) -> obs``,
``step_raw(actions) -> result`` with ``reward``, ``obs`` and ``done``, and a
``horizon`` attribute. All episodes in a batch share the horizon.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .nn import Adam, DivergenceError, PolicyParams, _backprop, _mlp, gaussian_logp

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PgConfig:
    steps_per_batch: int = 2304
    clip: float = 0.2
    gae_lambda: float = 0.95
    gamma: float = 0.99
    epochs: int = 10
    minibatch: int = 576
    lr: float = 3e-4
    ent_coef: float = 0.0
    vf_coef: float = 0.5
    max_grad_norm: float = 0.5
    target_kl: float | None = 0.2  # stop updating on a batch once exceeded
    max_kl: float = 2.0  # halt threshold, well above target_kl
    min_log_std: float = -4.0  # exploration floor; keeps the ratio well conditioned
    iterations: int = 150
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.clip < 1.0:
            raise ValueError("clip ratio must lie in [0, 1)")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")


@dataclass
class PgState:
    params: PolicyParams
    opt: Adam
    iteration: int = 0
    curve: list[float] = field(default_factory=list)
    kl: list[float] = field(default_factory=list)
    steps: int = 0


def gae(rewards, values, gamma: float, lam: float, last_value=None):
    """Advantages and returns for (T, B) arrays of a finished horizon."""
    T = rewards.shape[0]
    nxt = np.zeros_like(values[0]) if last_value is None else last_value
    adv = np.zeros_like(rewards)
    run = np.zeros_like(rewards[0])
    for t in reversed(range(T)):
        delta = rewards[t] + gamma * nxt - values[t]
        run = delta + gamma * lam * run
        adv[t] = run
        nxt = values[t]
    return adv, adv + values


def discounted_returns(rewards, gamma: float):
    out = np.zeros_like(rewards, dtype=float)
    run = np.zeros_like(rewards[0], dtype=float)
    for t in reversed(range(rewards.shape[0])):
        run = rewards[t] + gamma * run
        out[t] = run
    return out


def _iter_rng(cfg: PgConfig, k: int, stream: int):
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, 67, k, stream]))


def collect(env, params: PolicyParams, ids, seeds, rng):
    spec = params.spec
    n_a = len(spec.actor_sizes()) - 1
    n_c = len(spec.critic_sizes()) - 1
    log_std = params.view("log_std")
    obs = env.reset(ids, seeds)
    O, A, LP, R, V = [], [], [], [], []
    while True:
        mean = _mlp(params, "actor", n_a, obs)
        v = _mlp(params, "critic", n_c, obs)[:, 0]
        a = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
        res = env.step_raw(a)
        O.append(obs)
        A.append(a)
        LP.append(gaussian_logp(mean, log_std, a))
        V.append(v)
        R.append(res.reward)
        obs = res.obs
        if res.done:
            break
    return np.stack(O), np.stack(A), np.stack(LP), np.stack(R), np.stack(V)


def ppo_update(params: PolicyParams, opt: Adam, batch: dict, cfg: PgConfig, rng) -> dict:
    """Run the epochs of clipped-surrogate updates in place; returns diagnostics."""
    spec = params.spec
    n_a = len(spec.actor_sizes()) - 1
    n_c = len(spec.critic_sizes()) - 1
    X, Aa, old_lp, adv, ret = batch["obs"], batch["act"], batch["logp"], batch["adv"], batch["ret"]
    n = X.shape[0]
    ls = params.block("log_std")
    stop = False
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for i in range(0, n, cfg.minibatch):
            idx = perm[i:i + cfg.minibatch]
            x, a, olp, A, G = X[idx], Aa[idx], old_lp[idx], adv[idx], ret[idx]
            m = idx.size
            mean, acts_a = _mlp(params, "actor", n_a, x, keep=True)
            v, acts_c = _mlp(params, "critic", n_c, x, keep=True)
            log_std = params.view("log_std")
            std = np.exp(log_std)
            lp = gaussian_logp(mean, log_std, a)
            log_ratio = lp - olp
            with np.errstate(over="ignore", invalid="ignore"):
                kl_mb = float(np.mean(np.expm1(log_ratio) - log_ratio))
            if cfg.target_kl is not None and kl_mb > cfg.target_kl:
                stop = True  # trust region used up on this batch
                break
            ratio = np.exp(log_ratio)
            clipped = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)
            # gradient flows only where the unclipped term is the active minimum
            active = (ratio * A < clipped * A) | ((ratio > 1.0 - cfg.clip) & (ratio < 1.0 + cfg.clip))
            dL_dlp = np.where(active, ratio * A, 0.0) / m  # d(surrogate)/d(logp), to maximize
            z = (a - mean) / std
            g_mean = dL_dlp[:, None] * z / std
            g_logstd = (dL_dlp[:, None] * (z ** 2 - 1.0)).sum(0) + cfg.ent_coef
            grad = np.zeros_like(params.flat)
            # descent direction = minus the ascent gradient
            _backprop(params, "actor", acts_a, -g_mean, grad)
            grad[ls] -= g_logstd
            _backprop(params, "critic", acts_c, cfg.vf_coef * 2.0 * (v - G[:, None]) / m, grad)
            norm = np.linalg.norm(grad)
            if cfg.max_grad_norm and norm > cfg.max_grad_norm:
                grad *= cfg.max_grad_norm / norm
            params.flat += opt.step(grad)
            np.maximum(params.flat[ls], cfg.min_log_std, out=params.flat[ls])
        if stop:
            break
    mean = _mlp(params, "actor", n_a, X)
    lr_ = gaussian_logp(mean, params.view("log_std"), Aa) - old_lp
    with np.errstate(over="ignore", invalid="ignore"):
        kl = float(np.mean(np.expm1(lr_) - lr_))  # nonnegative estimator of KL(old || new)
    return {"kl": kl, "early_stop": stop}


def train_pg(env, init: PolicyParams, cfg: PgConfig, scenario_pool=None, state: PgState | None = None,
             callback=None, stop_after: int | None = None) -> PgState:
    """Iterate collect/update from ``init`` (or resume from ``state``)."""
    if init.spec.critic_hidden is None or init.spec.head != "gaussian":
        raise ValueError("policy-gradient training needs a gaussian head and a critic")
    if state is None:
        state = PgState(init.copy(), Adam(init.size, cfg.lr))
    pool = np.arange(len(env.scenarios)) if scenario_pool is None else np.asarray(scenario_pool)
    B = max(1, cfg.steps_per_batch // env.horizon)
    end = cfg.iterations if stop_after is None else min(cfg.iterations, state.iteration + stop_after)
    while state.iteration < end:
        k = state.iteration
        rng = _iter_rng(cfg, k, 0)
        ids = rng.choice(pool, size=B, replace=pool.size < B)
        seeds = rng.integers(0, 2**31 - 1, size=B)
        last_good = state.params.copy()
        O, A, LP, R, V = collect(env, state.params, ids, seeds, _iter_rng(cfg, k, 1))
        adv, ret = gae(R, V, cfg.gamma, cfg.gae_lambda)
        flat = lambda a: a.reshape(-1, *a.shape[2:])  # noqa: E731
        adv_f = flat(adv)
        adv_f = (adv_f - adv_f.mean()) / (adv_f.std() + 1e-8)
        batch = {"obs": flat(O), "act": flat(A), "logp": flat(LP), "adv": adv_f, "ret": flat(ret)}
        diag = ppo_update(state.params, state.opt, batch, cfg, _iter_rng(cfg, k, 2))
        ep_ret = float(R.sum(0).mean())
        if not np.isfinite(state.params.flat).all() or not np.isfinite(diag["kl"]) or diag["kl"] > cfg.max_kl:
            raise DivergenceError(
                f"policy update diverged at iteration {k} (kl={diag['kl']:.3g})",
                params=last_good, diagnostics={"iteration": k, "kl": diag["kl"], "curve": list(state.curve)},
            )
        state.curve.append(ep_ret)
        state.kl.append(diag["kl"])
        state.steps += R.size
        state.iteration += 1
        if callback is not None:
            callback(k, state, diag)
    return state


def save_state(state: PgState, path, cfg: PgConfig) -> None:
    from dataclasses import asdict

    from .archive import write_archive
    from .nn import FORMAT_VERSION

    meta = {"kind": "PgState", "version": FORMAT_VERSION, "iteration": state.iteration, "steps": state.steps,
            "adam_t": state.opt.t, "curve": state.curve, "kl": state.kl, "config": asdict(cfg),
            "spec": asdict(state.params.spec), "seed": state.params.seed}
    write_archive(path, {"flat": state.params.flat, "m": state.opt.m, "v": state.opt.v}, meta)


def load_state(path) -> tuple[PgState, PgConfig]:
    from .archive import read_archive
    from .nn import MlpSpec

    arrays, meta = read_archive(path)
    if meta.get("kind") != "PgState":
        raise ValueError(f"{path} is not a policy-gradient checkpoint")
    sd = meta["spec"]
    spec = MlpSpec(sd["n_in"], sd["n_out"], tuple(sd["hidden"]), sd["head"],
                   None if sd["critic_hidden"] is None else tuple(sd["critic_hidden"]), sd["init_log_std"], sd["final_scale"])
    cfg = PgConfig(**meta["config"])
    opt = Adam(arrays["flat"].size, cfg.lr)
    opt.load({"m": arrays["m"], "v": arrays["v"], "t": meta["adam_t"]})
    st = PgState(PolicyParams(spec, arrays["flat"], meta["seed"]), opt, meta["iteration"], list(meta["curve"]),
                 list(meta["kl"]), meta["steps"])
    return st, cfg

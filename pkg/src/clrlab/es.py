"""Evolution strategies with antithetic sampling and centered-rank shaping."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .nn import Adam, PolicyParams, forward_population

log = logging.getLogger(__name__)

SIGMA_GRID = (0.01, 0.02, 0.03, 0.04)


@dataclass(frozen=True)
class EsConfig:
    population: int = 64  # members per generation, antithetic pairs -> must be even
    sigma: float = 0.02
    lr: float = 0.001
    generations: int = 250
    rank: bool = True
    seed: int = 0
    episodes_per_member: int = 1
    weight_decay: float = 0.0
    optimizer: str = "sgd"  # "sgd" applies the plain search-gradient step, "adam" rescales it

    def __post_init__(self):
        if self.population < 2 or self.population % 2:
            raise ValueError("population must be a positive even number")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")


@dataclass
class EsResult:
    theta: np.ndarray
    curve: list[float] = field(default_factory=list)  # mean population return per generation
    best_theta: np.ndarray | None = None
    best_return: float = -np.inf
    steps: int = 0
    opt: Adam | None = None


def centered_ranks(x) -> np.ndarray:
    """Map returns to ranks scaled into [-0.5, 0.5]; ties share their mean rank."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n == 1:
        return np.zeros(1)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(n)
    ranks[order] = np.arange(n, dtype=float)
    # average ranks over ties so equal returns get equal weight
    uniq, inv = np.unique(x, return_inverse=True)
    if uniq.size < n:
        sums = np.bincount(inv, weights=ranks)
        counts = np.bincount(inv)
        ranks = (sums / counts)[inv]
    return ranks / (n - 1) - 0.5


def generation_noise(cfg: EsConfig, gen: int, dim: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 53, gen]))
    half = rng.standard_normal((cfg.population // 2, dim))
    return np.concatenate([half, -half])


def es_gradient(returns, noise, sigma: float, rank: bool = True) -> np.ndarray:
    """Search-gradient estimate (1 / (n sigma)) sum_k F_k eps_k."""
    returns = np.asarray(returns, dtype=float)
    if np.ptp(returns) == 0.0:
        warnings.warn("all population returns are equal; skipping update", RuntimeWarning, stacklevel=2)
        return np.zeros(noise.shape[1])
    w = centered_ranks(returns) if rank else returns
    return w @ noise / (noise.shape[0] * sigma)


def es_step(theta, evaluate, cfg: EsConfig, gen: int, opt: Adam | None = None):
    """One generation: perturb, evaluate, update. ``evaluate(thetas (P, D), gen) -> returns (P,)``."""
    eps = generation_noise(cfg, gen, theta.size)
    returns = np.asarray(evaluate(theta[None, :] + cfg.sigma * eps, gen), dtype=float)
    g = es_gradient(returns, eps, cfg.sigma, cfg.rank) - cfg.weight_decay * theta
    if opt is not None:
        return theta + opt.step(-g), returns
    return theta + cfg.lr * g, returns


def train_es_generic(theta0, evaluate, cfg: EsConfig, start_gen: int = 0, callback=None, opt_state=None) -> EsResult:
    theta = np.asarray(theta0, dtype=float).copy()
    res = EsResult(theta)
    opt = None
    if cfg.optimizer == "adam":
        opt = Adam(theta.size, cfg.lr)
        if opt_state is not None:
            opt.load(opt_state)
    res.opt = opt
    for gen in range(start_gen, cfg.generations):
        theta, returns = es_step(theta, evaluate, cfg, gen, opt)
        mean = float(returns.mean())
        res.curve.append(mean)
        if mean > res.best_return:
            res.best_return = mean
            res.best_theta = theta.copy()
        if callback is not None:
            callback(gen, theta, returns)
    res.theta = theta
    return res


# -- policy search on the restoration environment --------------------------------

class PopulationEvaluator:
    """Roll out a population of deterministic policies in one batched environment.

    Every member sees the same ``episodes_per_member`` scenarios in a given
    generation (common random numbers), drawn from a per-generation stream.
    """

    def __init__(self, env, template: PolicyParams, cfg: EsConfig, scenario_pool=None):
        self.env = env
        self.template = template
        self.cfg = cfg
        self.pool = np.arange(len(env.scenarios)) if scenario_pool is None else np.asarray(scenario_pool)
        self.steps = 0

    def scenarios_for(self, gen: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, 59, gen]))
        return rng.choice(self.pool, size=self.cfg.episodes_per_member, replace=self.pool.size < self.cfg.episodes_per_member)

    def run(self, flats, ids, seeds) -> np.ndarray:
        """Returns (P, m) episode returns for parameter rows ``flats`` on scenarios ``ids``."""
        flats = np.atleast_2d(flats)
        P, m = flats.shape[0], len(ids)
        env = self.env
        env.record = False
        obs = env.reset(np.tile(ids, P), np.tile(seeds, P))
        total = np.zeros(P * m)
        while True:
            act = forward_population(self.template, flats, obs.reshape(P, m, -1)).reshape(P * m, -1)
            res = env.step_raw(act)
            total += res.reward
            self.steps += P * m
            obs = res.obs
            if res.done:
                break
        return total.reshape(P, m)

    def __call__(self, flats, gen: int) -> np.ndarray:
        ids = self.scenarios_for(gen)
        seeds = np.full(ids.size, 1000 + gen)
        return self.run(flats, ids, seeds).mean(axis=1)


def train_es(env, init: PolicyParams, cfg: EsConfig, scenario_pool=None, callback=None, start_gen: int = 0,
             theta=None, opt_state=None) -> tuple[PolicyParams, EsResult]:
    """Policy search on ``env``; returns (final params, result). Resumable via ``start_gen``/``theta``."""
    ev = PopulationEvaluator(env, init, cfg, scenario_pool)
    theta0 = init.flat if theta is None else theta
    res = train_es_generic(theta0, ev, cfg, start_gen=start_gen, callback=callback, opt_state=opt_state)
    res.steps = ev.steps
    return init.copy(res.theta), res

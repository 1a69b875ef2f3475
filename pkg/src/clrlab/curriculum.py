"""Two-stage curriculum: simplified-task search, cloning transfer, forecast-aware fine-tuning.

Also hosts the direct-learning baselines used for the comparison runs.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .env import STAGE1, STAGE2, ClrEnv, convert_stage_one_action
from .es import EsConfig, train_es
from .forecast import ForecastConfig, HistoricalProfileStore, build_dataset
from .network import NetworkModel
from .nn import (BcConfig, MlpSpec, PolicyParams, bc_fit, forward, init_params, load_params,
                 save_params, transfer_actor)
from .ppo import PgConfig, PgState, load_state, save_state, train_pg

log = logging.getLogger(__name__)

EPS_GRID = (0.0, 0.05, 0.10, 0.15, 0.20, 0.25)
K_GRID = (1, 2, 4, 6)


@dataclass(frozen=True)
class CurriculumConfig:
    eps_grid: tuple[float, ...] = EPS_GRID
    k: float = 1.0
    hidden: tuple[int, ...] = (64, 64)
    stage1: EsConfig = field(default_factory=EsConfig)
    stage1_seeds: tuple[int, ...] = (0,)
    teacher_episodes: int = 256
    bc: BcConfig = field(default_factory=lambda: BcConfig(epochs=100, batch=256, lr=1e-3))
    stage2: PgConfig = field(default_factory=PgConfig)
    stage2_log_std: float = -3.0
    n_train: int = 256
    n_eval: int = 64  # test scenarios for the final per-level evaluation
    data_seed: int = 0
    seed: int = 0  # agent seed: inits, ES noise, PPO sampling
    checkpoint_every: int = 25  # ES generations between checkpoints

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


@dataclass
class CurriculumReport:
    stage1_curves: dict[int, list[float]] = field(default_factory=dict)
    stage1_scores: dict[int, float] = field(default_factory=dict)
    stage1_seed: int | None = None
    teacher_reward: float = float("nan")
    bc_losses: list[float] = field(default_factory=list)
    clone_reward: float = float("nan")
    stage2_curves: dict[float, list[float]] = field(default_factory=dict)
    stage2_start: dict[float, float] = field(default_factory=dict)
    final_eval: dict[float, float] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)
    seeds: dict[str, int] = field(default_factory=dict)
    wall_time: float = 0.0

    def budget(self, eps: float | None = None) -> int:
        """Env steps spent on the shared stages plus (optionally) one Stage-II level."""
        n = self.steps.get("stage1", 0) + self.steps.get("teacher", 0)
        if eps is not None:
            n += self.steps.get(f"stage2_{eps:.2f}", 0)
        return n

    def to_json(self) -> dict:
        d = asdict(self)
        for key in ("stage1_curves", "stage1_scores", "stage2_curves", "stage2_start", "final_eval"):
            d[key] = {str(k): v for k, v in d[key].items()}
        return d


# -- helpers ------------------------------------------------------------------------

def make_env(net: NetworkModel, scenarios, stage: str, k: float = 1.0) -> ClrEnv:
    """Stage-I env: perfect forecasts, DER-only action. Stage-II env: forecasts, full action."""
    if stage == "stage1":
        return ClrEnv(net, scenarios, k=k, variant=STAGE1, action_mode="stage1")
    if stage == "stage2":
        return ClrEnv(net, scenarios, k=k, variant=STAGE2, action_mode="full")
    raise ValueError(f"unknown stage {stage!r}")


def scenarios_for(net, store, eps: float, k: float, count: int, split: str, data_seed: int = 0):
    return build_dataset(store, net, ForecastConfig(epsilon_T=eps, k=k, seed=data_seed), count, split)


def policy_returns(env: ClrEnv, params: PolicyParams, ids, seeds=0) -> np.ndarray:
    """Deterministic (mean-action) episode returns, one per scenario id."""
    env.record = False
    obs = env.reset(ids, seeds)
    total = np.zeros(len(ids))
    while True:
        res = env.step_raw(forward(params, obs))
        total += res.reward
        obs = res.obs
        if res.done:
            return total


@dataclass
class TeacherData:
    states: np.ndarray  # (episodes * T, obs_dim) stage-one observations
    targets: np.ndarray  # (episodes * T, full act_dim) raw full-layout actions
    returns: np.ndarray  # (episodes,)


def collect_teacher_rollouts(params: PolicyParams, env1: ClrEnv, env2: ClrEnv, ids, seeds=0) -> TeacherData:
    """Roll out the stage-one policy and convert every applied action to the full layout.

    ``env2`` is only used for its (static) raw-action box, so any scenario set works.
    """
    env1.record = False
    obs = env1.reset(ids, seeds)
    X, Y = [], []
    total = np.zeros(len(ids))
    while True:
        res = env1.step_raw(forward(params, obs))
        req = convert_stage_one_action(env1.net, res.action.der_p, res.action.der_alpha)
        X.append(obs)
        Y.append(env2.request_to_raw(req))
        total += res.reward
        obs = res.obs
        if res.done:
            break
    # time-major stacking -> episode-major rows
    X = np.stack(X, axis=1).reshape(-1, obs.shape[1])
    Y = np.stack(Y, axis=1).reshape(-1, Y[0].shape[1])
    return TeacherData(X, Y, total)


def _write_curve(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def run_es_checkpointed(env, init: PolicyParams, cfg: EsConfig, ckpt: Path | None, every: int = 25):
    """ES with periodic checkpoints; a rerun resumes from the last one and continues identically."""
    theta, curve, gen, steps, opt_state = init.flat.copy(), [], 0, 0, None
    if ckpt is not None and ckpt.exists():
        p, extra = load_params(ckpt)
        theta, curve, gen, steps = p.flat, list(extra["curve"]), int(extra["gen"]), int(extra["steps"])
        if extra.get("opt"):
            o = extra["opt"]
            opt_state = {"m": np.array(o["m"]), "v": np.array(o["v"]), "t": o["t"]}
        log.info("resuming ES from generation %d", gen)
    while gen < cfg.generations:
        end = min(cfg.generations, gen + every) if ckpt is not None else cfg.generations
        p, res = train_es(env, init, replace(cfg, generations=end), start_gen=gen, theta=theta, opt_state=opt_state)
        theta, gen = p.flat, end
        curve += res.curve
        steps += res.steps
        opt_state = res.opt.state() if res.opt is not None else None
        if ckpt is not None:
            extra = {"curve": curve, "gen": gen, "steps": steps}
            if opt_state is not None:
                extra["opt"] = {"m": opt_state["m"].tolist(), "v": opt_state["v"].tolist(), "t": opt_state["t"]}
            save_params(init.copy(theta), ckpt, extra)
    return init.copy(theta), curve, steps


def run_pg_checkpointed(env, init: PolicyParams, cfg: PgConfig, ckpt: Path | None, every: int = 10) -> PgState:
    state = None
    if ckpt is not None and ckpt.exists():
        state, _ = load_state(ckpt)
        log.info("resuming policy gradient from iteration %d", state.iteration)
    while state is None or state.iteration < cfg.iterations:
        state = train_pg(env, init, cfg, state=state, stop_after=every if ckpt is not None else None)
        if ckpt is not None:
            save_state(state, ckpt, cfg)
    return state


# -- curriculum -----------------------------------------------------------------------

def stage_two_spec(n_in: int, n_out: int, cfg: CurriculumConfig) -> MlpSpec:
    return MlpSpec(n_in, n_out, cfg.hidden, "gaussian", cfg.hidden, init_log_std=cfg.stage2_log_std)


def run_curriculum(net: NetworkModel, store: HistoricalProfileStore, cfg: CurriculumConfig = CurriculumConfig(),
                   out: str | Path | None = None) -> tuple[CurriculumReport, dict[float, PolicyParams]]:
    """Stage I once, cloning once, Stage II per error level. Returns (report, final params per level)."""
    t0 = time.time()
    out = Path(out) if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rep = CurriculumReport(seeds={"agent": cfg.seed, "data": cfg.data_seed})
    train0 = scenarios_for(net, store, 0.0, cfg.k, cfg.n_train, "train", cfg.data_seed)
    env1 = make_env(net, train0, "stage1", cfg.k)
    env2_box = make_env(net, train0, "stage2", cfg.k)
    spec1 = MlpSpec(env1.obs_dim, env1.act_dim, cfg.hidden)

    # Stage I: one run per seed, keep the best by deterministic training reward
    cands = {}
    rep.steps["stage1"] = 0
    eval_ids = np.arange(min(cfg.n_train, 64))
    for s in cfg.stage1_seeds:
        es_cfg = replace(cfg.stage1, seed=s)
        ck = out / f"stage1_seed{s}.npz" if out is not None else None
        p, curve, steps = run_es_checkpointed(env1, init_params(spec1, s), es_cfg, ck, cfg.checkpoint_every)
        rep.stage1_curves[s] = curve
        rep.steps["stage1"] += steps
        rep.stage1_scores[s] = float(policy_returns(env1, p, eval_ids).mean())
        cands[s] = p
    best = max(cands, key=lambda s: rep.stage1_scores[s])
    rep.stage1_seed = best
    teacher = cands[best]

    # knowledge transfer
    ids = np.arange(cfg.teacher_episodes) % cfg.n_train
    data = collect_teacher_rollouts(teacher, env1, env2_box, ids)
    rep.steps["teacher"] = data.states.shape[0]
    rep.teacher_reward = float(data.returns.mean())
    clone_spec = MlpSpec(env1.obs_dim, env2_box.act_dim, cfg.hidden)
    bc_path = out / "bc.npz" if out is not None else None
    if bc_path is not None and bc_path.exists():
        clone, extra = load_params(bc_path)
        rep.bc_losses = list(extra["losses"])
    else:
        clone, losses = bc_fit(data.states, data.targets, clone_spec, replace(cfg.bc, seed=cfg.seed))
        rep.bc_losses = [float(x) for x in losses]
        if bc_path is not None:
            save_params(clone, bc_path, {"losses": rep.bc_losses})
    clone_env = ClrEnv(net, train0, k=cfg.k, variant=STAGE1, action_mode="full")
    rep.clone_reward = float(policy_returns(clone_env, clone, ids).mean())

    # Stage II per error level
    finals = {}
    for eps in cfg.eps_grid:
        tr = scenarios_for(net, store, eps, cfg.k, cfg.n_train, "train", cfg.data_seed)
        env2 = make_env(net, tr, "stage2", cfg.k)
        init = transfer_actor(clone, stage_two_spec(env2.obs_dim, env2.act_dim, cfg), seed=cfg.seed)
        rep.stage2_start[eps] = float(policy_returns(env2, init, eval_ids).mean())
        ck = out / f"stage2_eps{eps:.2f}.npz" if out is not None else None
        st = run_pg_checkpointed(env2, init, replace(cfg.stage2, seed=cfg.seed), ck)
        rep.stage2_curves[eps] = list(st.curve)
        rep.steps[f"stage2_{eps:.2f}"] = st.steps
        finals[eps] = st.params
        te = scenarios_for(net, store, eps, cfg.k, cfg.n_eval, "test", cfg.data_seed)
        rep.final_eval[eps] = float(policy_returns(make_env(net, te, "stage2", cfg.k), st.params,
                                                   np.arange(cfg.n_eval)).mean())
        if out is not None:
            save_params(st.params, out / f"policy_eps{eps:.2f}.npz", {"eps": eps, "k": cfg.k, "seed": cfg.seed})
        log.info("eps %.2f: start %.3f final %.3f", eps, rep.stage2_start[eps], rep.final_eval[eps])
    rep.wall_time = time.time() - t0
    if out is not None:
        write_report(rep, out)
    return rep, finals


def write_report(rep: CurriculumReport, out: Path) -> None:
    rows = [(s, g, r) for s, c in rep.stage1_curves.items() for g, r in enumerate(c)]
    _write_curve(out / "stage1_curve.csv", ["seed", "generation", "mean_return"], rows)
    _write_curve(out / "bc_loss.csv", ["epoch", "mse"], list(enumerate(rep.bc_losses)))
    rows = [(f"{e:.2f}", i, r) for e, c in rep.stage2_curves.items() for i, r in enumerate(c)]
    _write_curve(out / "stage2_curve.csv", ["epsilon_T", "iteration", "mean_return"], rows)
    (out / "report.json").write_text(json.dumps(rep.to_json(), indent=2, sort_keys=True))


# -- direct learning baselines ----------------------------------------------------------

@dataclass
class DirectReport:
    mode: str
    eps: float
    seed: int
    curve: list[float]
    steps: int
    final_eval: float
    params: PolicyParams | None = None


def run_direct(net: NetworkModel, store: HistoricalProfileStore, mode: str, eps: float, budget: int,
               cfg: CurriculumConfig = CurriculumConfig(), out: str | Path | None = None) -> DirectReport:
    """Learn the full task from scratch with ES or PPO under an env-step budget."""
    out = Path(out) if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    tr = scenarios_for(net, store, eps, cfg.k, cfg.n_train, "train", cfg.data_seed)
    env = make_env(net, tr, "stage2", cfg.k)
    tag = f"{mode}_eps{eps:.2f}"
    if mode == "direct-es":
        es = cfg.stage1
        init = init_params(MlpSpec(env.obs_dim, env.act_dim, cfg.hidden), cfg.seed)
        gens = max(1, budget // (es.population * es.episodes_per_member * env.horizon))
        ck = out / f"{tag}.ckpt.npz" if out is not None else None
        params, curve, steps = run_es_checkpointed(env, init, replace(es, seed=cfg.seed, generations=gens), ck,
                                                   cfg.checkpoint_every)
    elif mode == "direct-ppo":
        pg = cfg.stage2
        init = init_params(stage_two_spec(env.obs_dim, env.act_dim, cfg), cfg.seed)
        iters = max(1, budget // (max(1, pg.steps_per_batch // env.horizon) * env.horizon))
        ck = out / f"{tag}.ckpt.npz" if out is not None else None
        st = run_pg_checkpointed(env, init, replace(pg, seed=cfg.seed, iterations=iters), ck)
        params, curve, steps = st.params, list(st.curve), st.steps
    else:
        raise ValueError(f"unknown direct mode {mode!r}")
    te = scenarios_for(net, store, eps, cfg.k, cfg.n_eval, "test", cfg.data_seed)
    final = float(policy_returns(make_env(net, te, "stage2", cfg.k), params, np.arange(cfg.n_eval)).mean())
    rep = DirectReport(mode, eps, cfg.seed, curve, steps, final, params)
    if out is not None:
        save_params(params, out / f"policy_{tag}.npz", {"eps": eps, "k": cfg.k, "seed": cfg.seed, "mode": mode})
        _write_curve(out / f"{tag}_curve.csv", ["iteration", "mean_return"], list(enumerate(curve)))
    return rep

"""Receding-horizon restoration controllers (with and without generation reserve).

Each call builds the optimal control problem over the remaining horizon from
the current snapshot and forecasts, solves it, and returns the first step as a
request in the environment's action layout. Voltages enter through LinDistFlow
sensitivities with hard bounds, so the problem stays linear; reactive power is
a per-unit envelope ``p tan(alpha_min) <= q <= p tan(alpha_max)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .env import Request
from .lp import LpProblem, LpSolution, solve_lp, solve_milp, write_lp
from .network import NetworkModel

log = logging.getLogger(__name__)

# error level -> reserve coefficient c
RESERVE_SCHEDULE = {0.0: 0.10, 0.05: 0.20, 0.10: 0.40, 0.15: 0.60, 0.20: 0.75, 0.25: 0.75}
COMPLEMENTARITY_TOL = 1e-6


def reserve_coefficient(epsilon_T: float) -> float:
    for key, c in RESERVE_SCHEDULE.items():
        if abs(key - epsilon_T) < 1e-9:
            return c
    raise KeyError(f"no reserve coefficient for error level {epsilon_T}")


@dataclass(frozen=True)
class MpcConfig:
    reserve: bool = False  # RC formulation when True
    reserve_c: float = 0.0
    phi: float = 1.0
    backend: str = "highs"
    time_pref: float = 1e-6  # tiny discount that breaks ties toward earlier restoration
    curtailable: bool = False  # renewables fixed to forecasts unless set
    curtail_bonus: float = 1e-4  # per kW of used renewable when curtailable
    force_reserve_block: bool = False  # build reserve rows even when c == 0
    dump_dir: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.reserve_c <= 1.0:
            raise ValueError("reserve coefficient must lie in [0, 1]")
        if not self.phi > 0:
            raise ValueError("reserve unit cost must be positive")


def nr_config(**kw) -> MpcConfig:
    return MpcConfig(reserve=False, **kw)


def rc_config(epsilon_T: float | None = None, c: float | None = None, **kw) -> MpcConfig:
    if c is None:
        c = reserve_coefficient(epsilon_T)
    return MpcConfig(reserve=True, reserve_c=c, **kw)


@dataclass
class Snapshot:
    t: int  # 1-based step about to be taken
    soc: np.ndarray
    fuel: np.ndarray
    prev_loads: np.ndarray


@dataclass
class OcpLayout:
    H: int
    nv: int
    slots: dict  # name -> (offset, width) inside a step block
    n_binary: int = 0

    def idx(self, name: str) -> np.ndarray:
        """(H, width) variable indices of a slot."""
        off, w = self.slots[name]
        return np.arange(self.H)[:, None] * self.nv + off + np.arange(w)[None, :]

    @property
    def n_cont(self) -> int:
        return self.H * self.nv


@dataclass
class OcpResult:
    status: str
    objective: float  # restoration objective sum z.p - z.eps.u (no tie-break, no reserve penalty)
    plan: dict = field(default_factory=dict)  # name -> (H, width)
    solution: LpSolution | None = None
    used_binaries: bool = False


def _slots(net: NetworkModel, reserve: bool) -> dict:
    N, F, S, R = net.n_loads, net.n_fuel, net.n_storage, net.n_renewables
    names = [("load", N), ("u", N), ("pf", F), ("qf", F), ("ch", S), ("dis", S), ("soc", S), ("qs", S), ("pr", R), ("qr", R)]
    if reserve:
        names += [("resf", F), ("ress", S), ("sig", 1)]
    out, off = {}, 0
    for nm, w in names:
        out[nm] = (off, w)
        off += w
    return out


def _sensitivities(net: NetworkModel):
    """d(1 - w)/2 per kW/kvar of each device, rows = non-reference buses."""
    topo = net.topology
    keep = np.array([j for j in range(net.n_buses) if j != net.ref_bus])
    Rp = topo.path_r[keep] / net.base_kva
    Xp = topo.path_x[keep] / net.base_kva
    return keep, Rp, Xp


def build_ocp(net: NetworkModel, snap: Snapshot, forecasts, cfg: MpcConfig, binaries: bool = False):
    """Assemble the horizon problem. ``forecasts`` is (R, H) kW, H = T - t + 1."""
    forecasts = np.asarray(forecasts, dtype=float)
    if forecasts.ndim != 2 or forecasts.shape[0] != net.n_renewables:
        raise ValueError(f"forecasts must be shaped (n_renewables, H), got {forecasts.shape}")
    H = forecasts.shape[1]
    sysc = net.system
    if H != sysc.T - snap.t + 1:
        raise ValueError(f"forecast length {H} does not match remaining horizon {sysc.T - snap.t + 1}")
    N, F, S, R = net.n_loads, net.n_fuel, net.n_storage, net.n_renewables
    reserve = cfg.reserve and (cfg.reserve_c > 0 or cfg.force_reserve_block)
    slots = _slots(net, reserve)
    nv = sum(w for _, w in slots.values())
    lay = OcpLayout(H, nv, slots)
    tau = sysc.tau
    a_lo, a_hi = net.alpha_bounds
    t_lo, t_hi = np.tan(a_lo), np.tan(a_hi)
    tf_lo, tf_hi = t_lo[:F], t_hi[:F]
    ts_lo, ts_hi = t_lo[F:F + S], t_hi[F:F + S]
    tr_lo, tr_hi = t_lo[F + S:], t_hi[F + S:]
    fuel = net.fuel
    st = net.storage
    pmin = np.array([g.p_min for g in fuel])
    pmax = np.array([g.p_max for g in fuel])
    ch_max = np.array([s.p_ch_max for s in st])
    dis_max = np.array([s.p_dis_max for s in st])
    d = net.demand
    z = net.priority

    def col(name):
        off, w = slots[name]
        return off + np.arange(w)

    # -- one step block ------------------------------------------------------
    blk_eq, blk_ub = [], []

    def row(coefs):
        r = np.zeros(nv)
        for name, val in coefs:
            r[col(name)] += val
        return r

    blk_eq.append(row([("pf", 1.0), ("dis", 1.0), ("ch", -1.0), ("pr", 1.0), ("load", -1.0)]))
    blk_eq.append(row([("qf", 1.0), ("qs", 1.0), ("qr", 1.0), ("load", -net.q_ratio)]))
    for f in range(F):
        for sgn, tt in ((1.0, tf_hi[f]), (-1.0, tf_lo[f])):
            r = np.zeros(nv)
            r[col("qf")[f]] = sgn
            r[col("pf")[f]] = -sgn * tt
            blk_ub.append(r)
    for s in range(S):
        r = np.zeros(nv)
        r[col("qs")[s]] = 1.0
        r[col("dis")[s]] = -ts_hi[s]
        r[col("ch")[s]] = ts_lo[s]
        blk_ub.append(r)
        r = np.zeros(nv)
        r[col("qs")[s]] = -1.0
        r[col("dis")[s]] = ts_lo[s]
        r[col("ch")[s]] = -ts_hi[s]
        blk_ub.append(r)
    for k in range(R):
        for sgn, tt in ((1.0, tr_hi[k]), (-1.0, tr_lo[k])):
            r = np.zeros(nv)
            r[col("qr")[k]] = sgn
            r[col("pr")[k]] = -sgn * tt
            blk_ub.append(r)
    n_local_ub = len(blk_ub)
    rhs_ub_local = [0.0] * n_local_ub
    # LinDistFlow: w = 1 - 2 * sens, sens = Rp @ P_cons + Xp @ Q_cons
    keep, Rp, Xp = _sensitivities(net)
    sens = np.zeros((keep.size, nv))
    sens[:, col("load")] = Rp[:, net.load_bus] + Xp[:, net.load_bus] * net.q_ratio
    der_bus = net.der_bus
    sens[:, col("pf")] = -Rp[:, der_bus[:F]]
    sens[:, col("qf")] = -Xp[:, der_bus[:F]]
    sens[:, col("dis")] = -Rp[:, der_bus[F:F + S]]
    sens[:, col("ch")] = Rp[:, der_bus[F:F + S]]
    sens[:, col("qs")] = -Xp[:, der_bus[F:F + S]]
    sens[:, col("pr")] = -Rp[:, der_bus[F + S:]]
    sens[:, col("qr")] = -Xp[:, der_bus[F + S:]]
    vmax2, vmin2 = sysc.v_max ** 2, sysc.v_min ** 2
    for j in range(keep.size):
        blk_ub.append(-2.0 * sens[j])
        rhs_ub_local.append(vmax2 - 1.0)
        blk_ub.append(2.0 * sens[j])
        rhs_ub_local.append(1.0 - vmin2)
    if reserve:
        for f in range(F):
            r = np.zeros(nv)
            r[col("pf")[f]] = 1.0
            r[col("resf")[f]] = 1.0
            blk_ub.append(r)
            rhs_ub_local.append(pmax[f])
        for s in range(S):
            r = np.zeros(nv)
            r[col("dis")[s]] = 1.0
            r[col("ress")[s]] = 1.0
            blk_ub.append(r)
            rhs_ub_local.append(dis_max[s])
        blk_ub.append(row([("resf", -1.0), ("ress", -1.0), ("sig", -1.0)]))
        rhs_ub_local.append(0.0)  # replaced per step below
    E = sp.csr_matrix(np.array(blk_eq))
    U = sp.csr_matrix(np.array(blk_ub))
    I_H = sp.identity(H, format="csr")
    A_eq_blocks = [sp.kron(I_H, E)]
    b_eq_parts = [np.zeros(H * E.shape[0])]
    A_ub_blocks = [sp.kron(I_H, U)]
    b_ub_local = np.tile(np.array(rhs_ub_local), H)
    if reserve:
        need = cfg.reserve_c * forecasts.sum(axis=0)
        b_ub_local[np.arange(H) * U.shape[0] + U.shape[0] - 1] = -need
    b_ub_parts = [b_ub_local]

    n = H * nv
    # -- coupling rows -----------------------------------------------------------
    rows, cols, vals, rhs = [], [], [], []
    r0 = 0
    L = lay.idx("load")
    Uv = lay.idx("u")
    for h in range(H):
        for i in range(N):
            rows += [r0, r0]
            cols += [L[h, i], Uv[h, i]]
            vals += [-1.0, -1.0]
            if h > 0:
                rows.append(r0)
                cols.append(L[h - 1, i])
                vals.append(1.0)
                rhs.append(0.0)
            else:
                rhs.append(-float(snap.prev_loads[i]))
            r0 += 1
    pf_idx = lay.idx("pf")
    resf_idx = lay.idx("resf") if reserve else None
    for f in range(F):
        for h in range(H):
            rows.append(r0)
            cols.append(pf_idx[h, f])
            vals.append(tau)
            if reserve:
                rows.append(r0)
                cols.append(resf_idx[h, f])
                vals.append(tau)
        rhs.append(max(float(snap.fuel[f]), 0.0))
        r0 += 1
    A_ub_blocks.append(sp.csr_matrix((vals, (rows, cols)), shape=(r0, n)))
    b_ub_parts.append(np.array(rhs))
    rows, cols, vals, rhs = [], [], [], []
    soc_i, ch_i, dis_i = lay.idx("soc"), lay.idx("ch"), lay.idx("dis")
    r0 = 0
    for s in range(S):
        for h in range(H):
            rows += [r0, r0, r0]
            cols += [soc_i[h, s], ch_i[h, s], dis_i[h, s]]
            vals += [1.0, -st[s].eta_ch * tau, tau / st[s].eta_dis]
            if h > 0:
                rows.append(r0)
                cols.append(soc_i[h - 1, s])
                vals.append(-1.0)
                rhs.append(0.0)
            else:
                rhs.append(float(snap.soc[s]))
            r0 += 1
    A_eq_blocks.append(sp.csr_matrix((vals, (rows, cols)), shape=(r0, n)))
    b_eq_parts.append(np.array(rhs))

    # -- bounds and objective ------------------------------------------------------
    lb = np.zeros((H, nv))
    ub = np.zeros((H, nv))
    ub[:, col("load")] = d
    ub[:, col("u")] = d
    lb[:, col("pf")] = pmin
    ub[:, col("pf")] = pmax
    lb[:, col("qf")] = np.minimum(pmin * tf_lo, 0.0)
    ub[:, col("qf")] = pmax * tf_hi
    ub[:, col("ch")] = ch_max
    ub[:, col("dis")] = dis_max
    lb[:, col("soc")] = [s.soc_min for s in st]
    ub[:, col("soc")] = [s.soc_max for s in st]
    lb[:, col("qs")] = -ch_max * ts_hi
    ub[:, col("qs")] = dis_max * ts_hi
    fc = np.maximum(forecasts.T, 0.0)  # (H, R)
    lb[:, col("pr")] = 0.0 if cfg.curtailable else fc
    ub[:, col("pr")] = fc
    lb[:, col("qr")] = np.minimum(fc * tr_lo, 0.0)
    ub[:, col("qr")] = fc * tr_hi
    c = np.zeros((H, nv))
    w = (1.0 - cfg.time_pref) ** np.arange(H)
    c[:, col("load")] = w[:, None] * z
    c[:, col("u")] = -w[:, None] * z * net.shed_penalty
    if cfg.curtailable:
        c[:, col("pr")] = cfg.curtail_bonus * w[:, None]
    if reserve:
        ub[:, col("resf")] = pmax
        ub[:, col("ress")] = dis_max
        ub[:, col("sig")] = np.maximum(cfg.reserve_c * forecasts.sum(axis=0), 0.0)[:, None]
        c[:, col("sig")] = -cfg.phi * w[:, None]
    lb, ub, c = lb.ravel(), ub.ravel(), c.ravel()
    A_ub = sp.vstack(A_ub_blocks, format="csr")
    A_eq = sp.vstack(A_eq_blocks, format="csr")
    b_ub = np.concatenate(b_ub_parts)
    b_eq = np.concatenate(b_eq_parts)
    bins = np.zeros(0, dtype=int)
    if binaries and S:
        nb = H * S
        lay.n_binary = nb
        y = n + np.arange(nb).reshape(H, S)
        rows, cols, vals, rhs = [], [], [], []
        r0 = 0
        for h in range(H):
            for s in range(S):
                rows += [r0, r0]
                cols += [dis_i[h, s], y[h, s]]
                vals += [1.0, -dis_max[s]]
                rhs.append(0.0)
                r0 += 1
                rows += [r0, r0]
                cols += [ch_i[h, s], y[h, s]]
                vals += [1.0, ch_max[s]]
                rhs.append(ch_max[s])
                r0 += 1
        A_ub = sp.vstack([sp.hstack([A_ub, sp.csr_matrix((A_ub.shape[0], nb))]),
                          sp.csr_matrix((vals, (rows, cols)), shape=(r0, n + nb))], format="csr")
        A_eq = sp.hstack([A_eq, sp.csr_matrix((A_eq.shape[0], nb))], format="csr")
        b_ub = np.concatenate([b_ub, rhs])
        lb = np.concatenate([lb, np.zeros(nb)])
        ub = np.concatenate([ub, np.ones(nb)])
        c = np.concatenate([c, np.zeros(nb)])
        bins = y.ravel()
    prob = LpProblem(c=c, lb=lb, ub=ub, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, binaries=bins,
                     names=_names(lay))
    return prob, lay


def _names(lay: OcpLayout) -> list[str]:
    out = [""] * (lay.n_cont + lay.n_binary)
    for name, (off, w) in lay.slots.items():
        for h in range(lay.H):
            for k in range(w):
                out[h * lay.nv + off + k] = f"{name}_{h}_{k}"
    for b in range(lay.n_binary):
        out[lay.n_cont + b] = f"y_{b}"
    return out


def _plan(lay: OcpLayout, x) -> dict:
    return {name: x[lay.idx(name)] for name in lay.slots}


def restoration_objective(net: NetworkModel, plan: dict) -> float:
    return float((plan["load"] @ net.priority).sum() - (plan["u"] @ (net.priority * net.shed_penalty)).sum())


def solve_ocp(net: NetworkModel, snap: Snapshot, forecasts, cfg: MpcConfig, tag: str = "") -> OcpResult:
    prob, lay = build_ocp(net, snap, forecasts, cfg)
    if cfg.dump_dir:
        write_lp(prob, Path(cfg.dump_dir) / f"ocp{tag}_t{snap.t:03d}.lp")
    sol = solve_lp(prob, backend=cfg.backend)
    used_bins = False
    if sol.ok and net.n_storage:
        plan = _plan(lay, sol.x)
        if np.any(plan["ch"] * plan["dis"] > COMPLEMENTARITY_TOL):
            prob, lay = build_ocp(net, snap, forecasts, cfg, binaries=True)
            sol = solve_milp(prob, backend=cfg.backend)
            used_bins = True
    if not sol.ok:
        return OcpResult(sol.status, float("nan"), solution=sol, used_binaries=used_bins)
    plan = _plan(lay, sol.x[:lay.n_cont])
    return OcpResult(sol.status, restoration_objective(net, plan), plan, sol, used_bins)


def _angle(q, p, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.arctan(q / p)
    return np.where(np.abs(p) > 1e-9, np.clip(a, lo, hi), lo)


def plan_to_request(net: NetworkModel, plan: dict, h: int = 0, curtailable: bool = False) -> Request:
    F = net.n_fuel
    a_lo, a_hi = net.alpha_bounds
    pf, qf = plan["pf"][h], plan["qf"][h]
    p_st = plan["dis"][h] - plan["ch"][h]
    pr, qr = plan["pr"][h], plan["qr"][h]
    alpha = np.concatenate([
        _angle(qf[1:], pf[1:], a_lo[1:F], a_hi[1:F]),
        _angle(plan["qs"][h], p_st, a_lo[F:F + net.n_storage], a_hi[F:F + net.n_storage]),
        _angle(qr, pr, a_lo[F + net.n_storage:], a_hi[F + net.n_storage:]),
    ])
    return Request(
        loads=np.clip(plan["load"][h], 0.0, net.demand)[None, :],
        dispatch=np.concatenate([pf[1:], p_st])[None, :],
        alpha=alpha[None, :],
        ren_cap=pr[None, :] if curtailable else None,
        slack_alpha=_angle(qf[:1], pf[:1], a_lo[:1], a_hi[:1]),
    )


def safe_request(net: NetworkModel) -> Request:
    a_lo, _ = net.alpha_bounds
    return Request(np.zeros((1, net.n_loads)), np.zeros((1, net.n_fuel - 1 + net.n_storage)), a_lo[None, 1:].copy())


def mpc_step(net: NetworkModel, snap: Snapshot, forecasts, cfg: MpcConfig, tag: str = ""):
    """Solve over the remaining horizon and return (first-step request, OcpResult)."""
    res = solve_ocp(net, snap, forecasts, cfg, tag)
    if not res.plan:
        log.warning("MPC problem at step %d is %s; applying zero-restoration action", snap.t, res.status)
        return safe_request(net), res
    return plan_to_request(net, res.plan, 0, cfg.curtailable), res


def nr_mpc_step(net, snap, forecasts, cfg: MpcConfig | None = None):
    cfg = cfg or nr_config()
    return mpc_step(net, snap, forecasts, MpcConfig(**{**cfg.__dict__, "reserve": False}))


def rc_mpc_step(net, snap, forecasts, cfg: MpcConfig):
    return mpc_step(net, snap, forecasts, MpcConfig(**{**cfg.__dict__, "reserve": True}))


def _stack(reqs: list[Request]) -> Request:
    cap = None
    if all(r.ren_cap is not None for r in reqs):
        cap = np.concatenate([r.ren_cap for r in reqs])
    return Request(
        loads=np.concatenate([r.loads for r in reqs]),
        dispatch=np.concatenate([r.dispatch for r in reqs]),
        alpha=np.concatenate([r.alpha for r in reqs]),
        ren_cap=cap,
        slack_alpha=np.concatenate([np.atleast_1d(r.slack_alpha) if r.slack_alpha is not None else np.zeros(1) for r in reqs]),
    )


class MpcPolicy:
    """Batched controller adaptor: ``policy(obs, env) -> Request``."""

    def __init__(self, net: NetworkModel, cfg: MpcConfig):
        self.net = net
        self.cfg = cfg
        self.fallbacks = 0
        self.planned: list[list[float]] = []  # per row, objective of the first solve

    def __call__(self, obs, env) -> Request:
        reqs = []
        for b in range(env.B):
            snap_d = env.snapshot(b)
            snap = Snapshot(t=snap_d["t"], soc=snap_d["soc"], fuel=snap_d["fuel"], prev_loads=snap_d["prev_loads"])
            req, res = mpc_step(self.net, snap, snap_d["forecast"], self.cfg, tag=f"_b{b}")
            if not res.plan:
                self.fallbacks += 1
            if snap.t == 1:
                if b == 0:
                    self.planned = []
                self.planned.append(res.objective)
            reqs.append(req)
        return _stack(reqs)

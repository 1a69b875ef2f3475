"""Episodic restoration environment with a feasibility-enforcing preprocessor.

The environment is batched: ``B`` episodes advance in lockstep (all episodes
share the horizon ``T``), which keeps rollouts fast in pure numpy. A single
episode is just ``B == 1``.

Raw policy outputs are clipped to [-1, 1] and mapped to physical set points,
then projected onto the feasible set:

1. box bounds per entry, then remaining-resource limits (fuel left, SOC window);
2. the slack unit (first fuel DER) takes whatever balances active power;
3. a deficit beyond the slack's limit sheds load in increasing priority order
   (then undoes storage charging); a surplus below its lower limit charges
   storage, then curtails renewables, then backs off the other fuel units;
4. the slack angle closes the reactive balance; leftover reactive imbalance
   moves the other units inside their angle envelopes and, as a last resort,
   scales all loads down proportionally;
5. anything still infeasible falls back to the all-zero action.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import truncnorm

from .forecast import ScenarioSet
from .network import NetworkModel
from .powerflow import bus_injections, sweep

STAGE1 = "stage1_perfect"
STAGE2 = "stage2_forecast"
BAL_TOL = 1e-9


class InfeasibleActionError(ValueError):
    pass


@dataclass
class Action:
    """Physical action for a batch: loads and every DER's set point and angle."""

    loads: np.ndarray  # (B, N) kW
    der_p: np.ndarray  # (B, G) kW, storage positive = discharge
    der_alpha: np.ndarray  # (B, G) rad

    @property
    def der_q(self) -> np.ndarray:
        return self.der_p * np.tan(self.der_alpha)

    def load_q(self, net: NetworkModel) -> np.ndarray:
        return self.loads * net.q_ratio

    def row(self, b: int) -> "Action":
        return Action(self.loads[b:b + 1], self.der_p[b:b + 1], self.der_alpha[b:b + 1])


@dataclass
class Request:
    """Physical request in the policy's layout, prior to projection."""

    loads: np.ndarray  # (B, N)
    dispatch: np.ndarray  # (B, F - 1 + S) non-slack dispatchable set points
    alpha: np.ndarray  # (B, G - 1) angles of every DER except the slack
    ren_cap: np.ndarray | None = None  # (B, R) optional voluntary curtailment cap
    slack_alpha: np.ndarray | None = None  # (B,) only used as a tie-breaker when slack p == 0


@dataclass
class ProjectionInfo:
    shed_kw: np.ndarray  # load reduced versus the request
    charge_diverted_kw: np.ndarray
    curtailed_kw: np.ndarray  # renewable availability not used
    reactive_load_scale: np.ndarray  # 1.0 unless loads were scaled for reactive balance
    fallback: np.ndarray  # bool, zero action used


@dataclass
class StepResult:
    reward: np.ndarray
    obs: np.ndarray
    done: bool
    action: Action
    v: np.ndarray
    converged: np.ndarray
    r_clr: np.ndarray
    theta: np.ndarray
    shed_kw: np.ndarray  # sum_i [p_{t-1} - p_t]^+
    curtailed_kw: np.ndarray
    soc: np.ndarray
    fuel: np.ndarray
    t: int  # 1-based step this result belongs to
    info: ProjectionInfo | None = None


def greedy_load_dispatch(total_gen, demand, priority) -> np.ndarray:
    """Fill loads in decreasing priority (ties by index) up to the budget."""
    total_gen = np.asarray(total_gen, dtype=float)
    demand = np.asarray(demand, dtype=float)
    order = np.argsort(-np.asarray(priority, dtype=float), kind="stable")
    d = demand[order]
    before = np.cumsum(d) - d
    fill = np.clip(total_gen[..., None] - before, 0.0, d)
    out = np.empty(fill.shape)
    out[..., order] = fill
    return out


def voltage_penalty(v, v_min: float, v_max: float, lam: float) -> np.ndarray:
    """Squared band excursion per episode row, times ``-lam``."""
    over = np.maximum(v - v_max, 0.0) + np.maximum(v_min - v, 0.0)
    return -lam * (over ** 2).sum(-1)


def _take_in_order(amount, room):
    """Split ``amount`` (B,) across columns of ``room`` (B, K) sequentially."""
    room = np.maximum(room, 0.0)
    before = np.cumsum(room, axis=1) - room
    return np.clip(amount[:, None] - before, 0.0, room)


def _box(raw, lo, hi):
    return lo + (np.clip(raw, -1.0, 1.0) + 1.0) * 0.5 * (hi - lo)


def _unbox(x, lo, hi):
    span = np.where(hi > lo, hi - lo, 1.0)
    return np.where(hi > lo, 2.0 * (x - lo) / span - 1.0, 0.0)


class ClrEnv:
    """Batched critical-load-restoration MDP over a scenario set."""

    def __init__(self, net: NetworkModel, scenarios: ScenarioSet, k: float = 1.0, variant: str = STAGE2,
                 action_mode: str = "full", fail_penalty: float = -10.0, record: bool = False):
        if variant not in (STAGE1, STAGE2):
            raise ValueError(f"unknown state variant {variant!r}")
        if action_mode not in ("full", "stage1"):
            raise ValueError(f"unknown action mode {action_mode!r}")
        self.net = net
        self.scenarios = scenarios
        self.sys = net.system
        if scenarios.T != self.sys.T:
            raise ValueError(f"scenario horizon {scenarios.T} != system horizon {self.sys.T}")
        self.variant = variant
        self.action_mode = action_mode
        self.fail_penalty = fail_penalty
        self.record = record
        ratio = k / self.sys.tau
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("k / tau must be an integer")
        self.k = k
        self.K = int(round(ratio))
        self._windows = self._build_windows()
        self._static()
        self.history: list[StepResult] = []
        self.t = 0

    # -- static device arrays ---------------------------------------------
    def _static(self):
        net = self.net
        F, S, R = net.n_fuel, net.n_storage, net.n_renewables
        self.F, self.S, self.R, self.G, self.N = F, S, R, net.n_ders, net.n_loads
        self.f_pmin = np.array([g.p_min for g in net.fuel])
        self.f_pmax = np.array([g.p_max for g in net.fuel])
        self.f_energy = np.array([g.energy for g in net.fuel])
        st = net.storage
        self.s_ch = np.array([s.p_ch_max for s in st])
        self.s_dis = np.array([s.p_dis_max for s in st])
        self.s_min = np.array([s.soc_min for s in st])
        self.s_max = np.array([s.soc_max for s in st])
        self.eta_ch = np.array([s.eta_ch for s in st])
        self.eta_dis = np.array([s.eta_dis for s in st])
        self.a_lo, self.a_hi = net.alpha_bounds
        self.shed_order = np.lexsort((-np.arange(self.N), net.priority))  # ascending priority, ties high index first
        self.fill_order = np.argsort(-net.priority, kind="stable")

    @property
    def act_dim(self) -> int:
        if self.action_mode == "stage1":
            return 2 * self.G
        return self.N + self.F - 1 + self.S + self.G - 1

    @property
    def obs_dim(self) -> int:
        return self.R * self.K + self.N + self.S + self.F + 1 + 2

    @property
    def horizon(self) -> int:
        return self.sys.T

    def _build_windows(self) -> np.ndarray:
        """Normalized lookahead windows (S, T + 1, R, K); row T is pure padding."""
        sc = self.scenarios
        Sn, R, T = sc.actual.shape
        pad = sc.config.pad_value
        win = np.full((Sn, T + 1, R, self.K), pad, dtype=float)
        pmax = sc.p_max[None, :, None]
        for t in range(T):
            n = min(self.K, T - t)
            if self.variant == STAGE1:
                src = sc.actual[:, :, t:t + n]
            else:
                src = sc.forecasts[:, :, t, t:t + n]
            win[:, t, :, :n] = src / pmax
        return win

    # -- episode state ------------------------------------------------------
    def reset(self, scenario_ids, seeds=0) -> np.ndarray:
        ids = np.atleast_1d(np.asarray(scenario_ids, dtype=int))
        B = ids.shape[0]
        seeds = np.broadcast_to(np.asarray(seeds, dtype=np.int64), (B,))
        self.ids = ids
        self.B = B
        u = np.array([np.random.default_rng(np.random.SeedSequence([int(s), int(i), 11])).random(self.S)
                      for s, i in zip(seeds, ids)]).reshape(B, self.S)
        soc = np.empty((B, self.S))
        for j, st in enumerate(self.net.storage):
            if st.s0_std > 0:
                a, b = (st.s0_low - st.s0_mean) / st.s0_std, (st.s0_high - st.s0_mean) / st.s0_std
                soc[:, j] = truncnorm.ppf(u[:, j], a, b, loc=st.s0_mean, scale=st.s0_std)
            else:
                soc[:, j] = st.s0_mean
        self.soc = np.clip(soc, [s.s0_low for s in self.net.storage], [s.s0_high for s in self.net.storage])
        self.soc0 = self.soc.copy()
        self.fuel = np.broadcast_to(self.f_energy, (B, self.F)).copy()
        self.prev_loads = np.zeros((B, self.N))
        self.t = 1
        self.history = []
        return self.observe()

    def observe(self) -> np.ndarray:
        sc = self.scenarios
        T = self.sys.T
        t0 = min(self.t - 1, T)
        fc = self._windows[self.ids, t0].reshape(self.B, -1)
        hour = sc.start_hour[self.ids] + (self.t - 1) * self.sys.tau
        ang = 2.0 * np.pi * hour / 24.0
        return np.concatenate([
            fc,
            self.prev_loads / self.net.demand,
            self.soc / self.s_max,
            self.fuel / self.f_energy,
            np.full((self.B, 1), self.t / T),
            np.sin(ang)[:, None],
            np.cos(ang)[:, None],
        ], axis=1)

    def renewable_available(self) -> np.ndarray:
        return self.scenarios.actual[self.ids, :, self.t - 1]

    # -- limits -------------------------------------------------------------
    def _fuel_limits(self):
        hi = np.minimum(self.f_pmax, np.maximum(self.fuel, 0.0) / self.sys.tau)
        lo = np.minimum(self.f_pmin, hi)
        return lo, hi

    def _storage_limits(self):
        tau = self.sys.tau
        dis = np.clip((self.soc - self.s_min) * self.eta_dis / tau, 0.0, self.s_dis)
        ch = np.clip((self.s_max - self.soc) / (self.eta_ch * tau), 0.0, self.s_ch)
        return ch, dis

    # -- raw <-> physical mapping --------------------------------------------
    def raw_to_request(self, raw) -> Request:
        raw = np.clip(np.asarray(raw, dtype=float).reshape(-1, self.act_dim), -1.0, 1.0)
        F, S, G, N = self.F, self.S, self.G, self.N
        if self.action_mode == "stage1":
            return self._stage1_request(raw)
        loads = _box(raw[:, :N], 0.0, self.net.demand)
        d_lo = np.concatenate([self.f_pmin[1:], -self.s_ch])
        d_hi = np.concatenate([self.f_pmax[1:], self.s_dis])
        dispatch = _box(raw[:, N:N + F - 1 + S], d_lo, d_hi)
        alpha = _box(raw[:, N + F - 1 + S:], self.a_lo[1:], self.a_hi[1:])
        return Request(loads, dispatch, alpha)

    def request_to_raw(self, req: Request) -> np.ndarray:
        """Inverse box map of a full-layout request (used for behavior cloning targets)."""
        F, S = self.F, self.S
        d_lo = np.concatenate([self.f_pmin[1:], -self.s_ch])
        d_hi = np.concatenate([self.f_pmax[1:], self.s_dis])
        return np.concatenate([
            _unbox(req.loads, 0.0, self.net.demand),
            _unbox(req.dispatch, d_lo, d_hi),
            _unbox(req.alpha, self.a_lo[1:], self.a_hi[1:]),
        ], axis=1)

    def _stage1_request(self, raw) -> Request:
        F, S, R, G = self.F, self.S, self.R, self.G
        p_lo = np.concatenate([self.f_pmin, -self.s_ch, np.zeros(R)])
        p_hi = np.concatenate([self.f_pmax, self.s_dis, self.net.renewable_pmax])
        p = _box(raw[:, :G], p_lo, p_hi)
        alpha = _box(raw[:, G:], self.a_lo, self.a_hi)
        f_lo, f_hi = self._fuel_limits()
        ch, dis = self._storage_limits()
        fuel_p = np.clip(p[:, :F], f_lo, f_hi)
        st_p = np.clip(p[:, F:F + S], -ch, dis)
        ren = np.minimum(p[:, F + S:], self.renewable_available())
        total = fuel_p.sum(1) + st_p.sum(1) + ren.sum(1)
        loads = greedy_load_dispatch(np.maximum(total, 0.0), self.net.demand, self.net.priority)
        return Request(loads, np.concatenate([fuel_p[:, 1:], st_p], axis=1), alpha[:, 1:], ren_cap=ren,
                       slack_alpha=alpha[:, 0])

    # -- projection ---------------------------------------------------------
    def preprocess(self, raw):
        return self.project(self.raw_to_request(raw))

    def project(self, req: Request):
        net = self.net
        F, S, R, G, N = self.F, self.S, self.R, self.G, self.N
        B = self.B
        tau = self.sys.tau
        loads = np.clip(np.asarray(req.loads, dtype=float).reshape(B, N), 0.0, net.demand)
        requested = loads.sum(1)
        disp = np.asarray(req.dispatch, dtype=float).reshape(B, F - 1 + S)
        f_lo, f_hi = self._fuel_limits()
        ch, dis = self._storage_limits()
        fuel_ns = np.clip(disp[:, :F - 1], f_lo[:, 1:], f_hi[:, 1:])
        st = np.clip(disp[:, F - 1:], -ch, dis)
        avail = self.renewable_available()
        ren = avail.copy()
        if req.ren_cap is not None:
            ren = np.clip(np.asarray(req.ren_cap, dtype=float).reshape(B, R), 0.0, avail)
        s_lo, s_hi = f_lo[:, 0], f_hi[:, 0]

        def slack_of():
            return loads.sum(1) - fuel_ns.sum(1) - st.sum(1) - ren.sum(1)

        # deficit: shed load by ascending priority, then undo storage charging
        excess = np.maximum(slack_of() - s_hi, 0.0)
        if np.any(excess > 0):
            cut = _take_in_order(excess, loads[:, self.shed_order])
            loads[:, self.shed_order] -= cut
            excess = excess - cut.sum(1)
            if np.any(excess > 1e-12):
                undo = _take_in_order(np.maximum(excess, 0.0), -np.minimum(st, 0.0))
                st = st + undo
        # surplus: charge storage, curtail renewables, back off other fuel units, raise loads
        surplus = np.maximum(s_lo - slack_of(), 0.0)
        diverted = np.zeros(B)
        if np.any(surplus > 0):
            take = _take_in_order(surplus, st + ch)
            st = st - take
            diverted = take.sum(1)
            surplus = surplus - diverted
            take = _take_in_order(np.maximum(surplus, 0.0), ren)
            ren = ren - take
            surplus = surplus - take.sum(1)
            take = _take_in_order(np.maximum(surplus, 0.0), fuel_ns - f_lo[:, 1:])
            fuel_ns = fuel_ns - take
            surplus = surplus - take.sum(1)
            add = _take_in_order(np.maximum(surplus, 0.0), (net.demand - loads)[:, self.fill_order])
            loads[:, self.fill_order] += add
        slack = slack_of()
        der_p = np.concatenate([slack[:, None], fuel_ns, st, ren], axis=1)

        # reactive balance
        alpha = np.empty((B, G))
        alpha[:, 1:] = np.clip(np.asarray(req.alpha, dtype=float).reshape(B, G - 1), self.a_lo[1:], self.a_hi[1:])
        alpha[:, 0] = self.a_lo[0] if req.slack_alpha is None else np.clip(req.slack_alpha, self.a_lo[0], self.a_hi[0])
        q = der_p * np.tan(alpha)
        q_lo = np.minimum(der_p * np.tan(self.a_lo), der_p * np.tan(self.a_hi))
        q_hi = np.maximum(der_p * np.tan(self.a_lo), der_p * np.tan(self.a_hi))
        q_load = loads @ net.q_ratio
        need = q_load - q[:, 1:].sum(1)
        gap_up = need - q_hi[:, 0]
        gap_dn = q_lo[:, 0] - need
        if np.any(gap_up > 0):
            up = np.maximum(gap_up, 0.0)
            room = q_hi[:, 1:] - q[:, 1:]
            q[:, 1:] += _take_in_order(up, room)
        if np.any(gap_dn > 0):
            dn = np.maximum(gap_dn, 0.0)
            room = q[:, 1:] - q_lo[:, 1:]
            q[:, 1:] -= _take_in_order(dn, room)
        need = q_load - q[:, 1:].sum(1)
        scale = np.ones(B)
        short = need > q_hi[:, 0] + BAL_TOL
        if np.any(short):
            # scale loads by s with the slack pinned at its max angle:
            # s*QL = Qo + (p_s - (1 - s) PL) * t_s
            t_s = np.tan(self.a_hi[0])
            PL, QL = loads.sum(1), q_load
            Qo = q[:, 1:].sum(1)
            denom = QL - PL * t_s
            with np.errstate(divide="ignore", invalid="ignore"):
                s = (Qo + (slack - PL) * t_s) / denom
            ok = short & (denom > 0) & (s >= 0) & (s <= 1)
            s = np.where(ok, s, 1.0)
            new_slack = slack - (1.0 - s) * PL
            ok &= new_slack >= s_lo - BAL_TOL
            s = np.where(ok, s, 1.0)
            scale = s
            loads = loads * s[:, None]
            slack = np.where(ok, new_slack, slack)
            der_p[:, 0] = slack
            q_load = loads @ net.q_ratio
            need = q_load - q[:, 1:].sum(1)
            q_hi[:, 0] = slack * t_s
            q_lo[:, 0] = slack * np.tan(self.a_lo[0])
        need = np.clip(need, q_lo[:, 0], np.maximum(q_lo[:, 0], q_hi[:, 0]))
        q[:, 0] = need
        with np.errstate(divide="ignore", invalid="ignore"):
            alpha_from_q = np.arctan(q / der_p)
        alpha = np.where(np.abs(der_p) > 1e-12, np.clip(alpha_from_q, self.a_lo, self.a_hi), alpha)
        alpha = np.where(np.isfinite(alpha), alpha, self.a_lo)

        action = Action(loads, der_p, alpha)
        bad = self.violations(action, tol=1e-7).any(axis=1)
        if np.any(bad):
            zero = self.zero_action()
            action.loads[bad] = zero.loads[bad]
            action.der_p[bad] = zero.der_p[bad]
            action.der_alpha[bad] = zero.der_alpha[bad]
        info = ProjectionInfo(
            shed_kw=np.maximum(requested - action.loads.sum(1), 0.0),
            charge_diverted_kw=np.where(bad, 0.0, diverted),
            curtailed_kw=(avail - action.der_p[:, F + S:]).sum(1),
            reactive_load_scale=np.where(bad, 1.0, scale),
            fallback=bad,
        )
        return action, info

    def zero_action(self) -> Action:
        return Action(np.zeros((self.B, self.N)), np.zeros((self.B, self.G)), np.broadcast_to(self.a_lo, (self.B, self.G)).copy())

    def violations(self, action: Action, tol: float = BAL_TOL) -> np.ndarray:
        """Boolean matrix (B, 8) of violated constraint families."""
        net = self.net
        F, S = self.F, self.S
        p = action.der_p
        f_lo, f_hi = self._fuel_limits()
        ch, dis = self._storage_limits()
        avail = self.renewable_available()
        loads = action.loads
        eps = 1e-9
        out = np.zeros((self.B, 8), dtype=bool)
        out[:, 0] = ((loads < -eps) | (loads > net.demand + eps)).any(1)
        out[:, 1] = ((p[:, :F] < f_lo - eps) | (p[:, :F] > f_hi + eps)).any(1)
        out[:, 2] = ((p[:, F:F + S] < -ch - eps) | (p[:, F:F + S] > dis + eps)).any(1)
        out[:, 3] = ((p[:, F + S:] < -eps) | (p[:, F + S:] > avail + eps)).any(1)
        out[:, 4] = ((action.der_alpha < self.a_lo - eps) | (action.der_alpha > self.a_hi + eps)).any(1)
        out[:, 5] = np.abs(loads.sum(1) - p.sum(1)) > tol
        out[:, 6] = np.abs(action.load_q(net).sum(1) - action.der_q.sum(1)) > tol
        out[:, 7] = ~np.isfinite(p).all(1) | ~np.isfinite(loads).all(1) | ~np.isfinite(action.der_alpha).all(1)
        return out

    VIOLATION_NAMES = ("load box", "fuel limits", "storage limits", "renewable availability",
                       "angle bounds", "active balance", "reactive balance", "non-finite")

    # -- dynamics -------------------------------------------------------------
    def step(self, action: Action, validate: bool = True, info: ProjectionInfo | None = None) -> StepResult:
        self._check_open()
        net, sysc = self.net, self.sys
        F, S = self.F, self.S
        if validate:
            bad = self.violations(action)
            if bad.any():
                names = [self.VIOLATION_NAMES[j] for j in np.flatnonzero(bad.any(0))]
                raise InfeasibleActionError(f"step {self.t}: infeasible action ({', '.join(names)})")
        loads = action.loads
        p_inj, q_inj = bus_injections(net, action.der_p, action.der_q, loads, action.load_q(net))
        v_c, conv, _, _ = sweep(net, p_inj, q_inj)
        v = np.abs(v_c)
        z, eps = net.priority, net.shed_penalty
        drop = np.maximum(self.prev_loads - loads, 0.0)
        r_clr = loads @ z - drop @ (z * eps)
        theta = voltage_penalty(v, sysc.v_min, sysc.v_max, sysc.lam)
        theta = np.where(conv, theta, self.fail_penalty / sysc.reward_scale)
        reward = sysc.reward_scale * (r_clr + theta)

        # storage and fuel dynamics
        tau = sysc.tau
        p_st = action.der_p[:, F:F + S]
        eta = np.where(p_st > 0, 1.0 / self.eta_dis, self.eta_ch)
        self.soc = np.clip(self.soc - eta * p_st * tau, self.s_min, self.s_max)
        self.fuel = np.maximum(self.fuel - action.der_p[:, :F] * tau, 0.0)
        self.prev_loads = loads.copy()
        t_now = self.t
        self.t += 1
        done = self.t > sysc.T
        avail_used = action.der_p[:, F + S:]
        curtailed = (self.scenarios.actual[self.ids, :, t_now - 1] - avail_used).sum(1)
        res = StepResult(
            reward=reward, obs=self.observe(), done=done, action=action, v=v, converged=conv,
            r_clr=r_clr, theta=theta, shed_kw=drop.sum(1), curtailed_kw=curtailed,
            soc=self.soc.copy(), fuel=self.fuel.copy(), t=t_now, info=info,
        )
        if self.record:
            self.history.append(res)
        return res

    def _check_open(self):
        if self.t > self.sys.T:
            raise RuntimeError("episode already finished; call reset()")

    def step_raw(self, raw) -> StepResult:
        self._check_open()
        action, info = self.preprocess(raw)
        return self.step(action, validate=False, info=info)

    def step_request(self, req: Request) -> StepResult:
        self._check_open()
        action, info = self.project(req)
        return self.step(action, validate=False, info=info)

    def snapshot(self, b: int = 0) -> dict:
        """Controller-facing view of episode row ``b`` (used by the MPC baselines)."""
        return {
            "t": self.t,
            "soc": self.soc[b].copy(),
            "fuel": self.fuel[b].copy(),
            "prev_loads": self.prev_loads[b].copy(),
            "forecast": self.scenarios.forecast_at(int(self.ids[b]), self.t - 1).copy(),
        }


# -- stage conversion ---------------------------------------------------------

def convert_stage_one_action(net: NetworkModel, der_p, der_alpha) -> Request:
    """Map DER-only (stage one) set points onto the full action layout.

    Loads come from the greedy priority fill of the total generation; the
    slack unit's set point and angle are dropped, as are renewable entries.
    """
    der_p = np.atleast_2d(np.asarray(der_p, dtype=float))
    der_alpha = np.atleast_2d(np.asarray(der_alpha, dtype=float))
    F, S = net.n_fuel, net.n_storage
    loads = greedy_load_dispatch(np.maximum(der_p.sum(1), 0.0), net.demand, net.priority)
    return Request(loads=loads, dispatch=der_p[:, 1:F + S].copy(), alpha=der_alpha[:, 1:].copy())


# -- trajectories and metrics --------------------------------------------------

@dataclass
class Trajectory:
    """Stacked per-step arrays of a batch of finished episodes (time first)."""

    loads: np.ndarray  # (T, B, N)
    der_p: np.ndarray  # (T, B, G)
    der_alpha: np.ndarray
    v: np.ndarray  # (T, B, nb)
    reward: np.ndarray  # (T, B)
    r_clr: np.ndarray
    theta: np.ndarray
    shed_kw: np.ndarray
    curtailed_kw: np.ndarray
    soc: np.ndarray  # (T, B, S) after step
    fuel: np.ndarray  # (T, B, F) after step
    tau: float
    v_min: float
    v_max: float
    reward_scale: float
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_steps(cls, steps: list[StepResult], net: NetworkModel) -> "Trajectory":
        st = lambda name: np.stack([getattr(s, name) for s in steps])  # noqa: E731
        return cls(
            loads=np.stack([s.action.loads for s in steps]),
            der_p=np.stack([s.action.der_p for s in steps]),
            der_alpha=np.stack([s.action.der_alpha for s in steps]),
            v=st("v"), reward=st("reward"), r_clr=st("r_clr"), theta=st("theta"),
            shed_kw=st("shed_kw"), curtailed_kw=st("curtailed_kw"), soc=st("soc"), fuel=st("fuel"),
            tau=net.system.tau, v_min=net.system.v_min, v_max=net.system.v_max,
            reward_scale=net.system.reward_scale,
        )

    @property
    def batch(self) -> int:
        return self.reward.shape[1]

    def write_csv(self, path, b: int = 0) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        T, _, N = self.loads.shape
        G = self.der_p.shape[2]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", *[f"load{i}" for i in range(N)], *[f"der_p{g}" for g in range(G)],
                        *[f"der_alpha{g}" for g in range(G)], "reward", "r_clr", "theta", "shed_kw",
                        *[f"v{j}" for j in range(self.v.shape[2])], *[f"soc{j}" for j in range(self.soc.shape[2])],
                        *[f"fuel{j}" for j in range(self.fuel.shape[2])]])
            for t in range(T):
                w.writerow([t + 1, *map(repr, self.loads[t, b].tolist()), *map(repr, self.der_p[t, b].tolist()),
                            *map(repr, self.der_alpha[t, b].tolist()), repr(float(self.reward[t, b])),
                            repr(float(self.r_clr[t, b])), repr(float(self.theta[t, b])),
                            repr(float(self.shed_kw[t, b])), *map(repr, self.v[t, b].tolist()),
                            *map(repr, self.soc[t, b].tolist()),
                            *map(repr, self.fuel[t, b].tolist())])


@dataclass(frozen=True)
class EpisodeMetrics:
    restoration_reward: float
    tau_vio: float
    v_tilde_vio: float | None  # None when no sample violated
    shed_kw: float
    shed_events: int
    total_reward: float


def metrics_from_arrays(r_clr, v, tau, v_min, v_max, shed_kw=None, reward=None) -> EpisodeMetrics:
    r_clr = np.asarray(r_clr, dtype=float)
    v = np.asarray(v, dtype=float)
    vio = (v < v_min) | (v > v_max)
    n = int(vio.sum())
    shed = np.zeros_like(r_clr) if shed_kw is None else np.asarray(shed_kw, dtype=float)
    return EpisodeMetrics(
        restoration_reward=float(r_clr.sum()),
        tau_vio=n * tau,
        v_tilde_vio=float(v[vio].mean()) if n else None,
        shed_kw=float(shed.sum()),
        shed_events=int((shed > 1e-6).sum()),
        total_reward=float(np.sum(reward)) if reward is not None else float("nan"),
    )


def episode_metrics(traj: Trajectory, b: int = 0) -> EpisodeMetrics:
    return metrics_from_arrays(traj.r_clr[:, b], traj.v[:, b], traj.tau, traj.v_min, traj.v_max,
                               traj.shed_kw[:, b], traj.reward[:, b])


def rollout(env: ClrEnv, policy, scenario_ids, seeds=0) -> Trajectory:
    """Run full episodes; ``policy(obs, env) -> raw`` or a ``Request``."""
    env.record = True
    obs = env.reset(scenario_ids, seeds)
    while True:
        act = policy(obs, env)
        res = env.step_request(act) if isinstance(act, Request) else env.step_raw(act)
        obs = res.obs
        if res.done:
            break
    return Trajectory.from_steps(env.history, env.net)

"""Bounded-variable linear programming and a small branch-and-bound layer.

Problems are stated as maximization::

    max c.x  s.t.  A_ub x <= b_ub,  A_eq x = b_eq,  lb <= x <= ub

with finite bounds on every structural variable. ``solve_lp`` defaults to the
in-house revised simplex; ``backend="highs"`` hands the same problem to the
HiGHS solver shipped with scipy, which the MPC uses for speed on full-horizon
problems. Both paths return the same ``LpSolution`` and pass through the same
residual audit.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
ITERATION_LIMIT = "iteration_limit"
NODE_LIMIT = "node_limit"

FEAS_TOL = 1e-9
OPT_TOL = 1e-9
AUDIT_TOL = 1e-7
REFACTOR_EVERY = 50
DEGENERATE_STREAK = 30


class LpError(ValueError):
    pass


@dataclass
class LpProblem:
    c: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    A_ub: sp.csr_matrix | None = None
    b_ub: np.ndarray | None = None
    A_eq: sp.csr_matrix | None = None
    b_eq: np.ndarray | None = None
    binaries: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    names: list[str] | None = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        n = self.c.shape[0]
        self.lb = np.broadcast_to(np.asarray(self.lb, dtype=float), (n,)).copy()
        self.ub = np.broadcast_to(np.asarray(self.ub, dtype=float), (n,)).copy()
        self.A_ub = sp.csr_matrix((0, n)) if self.A_ub is None else sp.csr_matrix(self.A_ub, dtype=float)
        self.A_eq = sp.csr_matrix((0, n)) if self.A_eq is None else sp.csr_matrix(self.A_eq, dtype=float)
        self.b_ub = np.zeros(0) if self.b_ub is None else np.asarray(self.b_ub, dtype=float).reshape(-1)
        self.b_eq = np.zeros(0) if self.b_eq is None else np.asarray(self.b_eq, dtype=float).reshape(-1)
        self.binaries = np.asarray(self.binaries, dtype=int).reshape(-1)
        if self.A_ub.shape != (self.b_ub.shape[0], n) or self.A_eq.shape != (self.b_eq.shape[0], n):
            raise LpError("constraint matrix dimensions do not match")
        if not (np.isfinite(self.lb).all() and np.isfinite(self.ub).all()):
            raise LpError("every variable needs finite bounds")
        if np.any(self.lb > self.ub):
            raise LpError("lower bound above upper bound")
        if self.binaries.size and (self.binaries.min() < 0 or self.binaries.max() >= n):
            raise LpError("binary index out of range")

    @property
    def n(self) -> int:
        return self.c.shape[0]

    def relaxed(self, lb=None, ub=None) -> "LpProblem":
        return LpProblem(self.c, self.lb if lb is None else lb, self.ub if ub is None else ub,
                         self.A_ub, self.b_ub, self.A_eq, self.b_eq, np.zeros(0, dtype=int), self.names)


@dataclass
class LpSolution:
    status: str
    x: np.ndarray | None
    objective: float
    iterations: int = 0
    duals_ub: np.ndarray | None = None  # >= 0 multipliers of A_ub rows (maximization)
    duals_eq: np.ndarray | None = None
    nodes: int = 0
    gap: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def audit(p: LpProblem, x: np.ndarray, tol: float = AUDIT_TOL) -> float:
    """Largest constraint or bound violation of ``x``."""
    worst = max(float(np.max(p.lb - x, initial=0.0)), float(np.max(x - p.ub, initial=0.0)))
    if p.A_ub.shape[0]:
        worst = max(worst, float(np.max(p.A_ub @ x - p.b_ub, initial=0.0)))
    if p.A_eq.shape[0]:
        worst = max(worst, float(np.max(np.abs(p.A_eq @ x - p.b_eq), initial=0.0)))
    return worst


def dual_bound(p: LpProblem, y_ub, y_eq=None) -> float:
    """Weak-duality upper bound for any y_ub >= 0 (and free y_eq)."""
    y_ub = np.asarray(y_ub, dtype=float)
    y_eq = np.zeros(p.A_eq.shape[0]) if y_eq is None else np.asarray(y_eq, dtype=float)
    red = p.c - p.A_ub.T @ y_ub - p.A_eq.T @ y_eq
    return float(p.b_ub @ y_ub + p.b_eq @ y_eq + np.sum(np.maximum(red * p.lb, red * p.ub)))


# -- revised simplex ----------------------------------------------------------

class _Simplex:
    """Bounded revised simplex on  min c.x, A x = b, l <= x <= u."""

    def __init__(self, A, b, l, u, max_iter):
        self.A = A
        self.b = b
        self.l = l
        self.u = u
        self.m, self.n = A.shape
        self.max_iter = max_iter
        self.iters = 0

    def refactor(self):
        B = self.A[:, self.basis]
        self.Binv = np.linalg.inv(B)
        nb = np.ones(self.n, dtype=bool)
        nb[self.basis] = False
        rhs = self.b - self.A[:, nb] @ self.x[nb]
        self.x[self.basis] = self.Binv @ rhs
        self.since_refactor = 0

    def run(self, cost):
        bland = False
        streak = 0
        in_basis = np.zeros(self.n, dtype=bool)
        in_basis[self.basis] = True
        while True:
            if self.iters >= self.max_iter:
                return ITERATION_LIMIT
            y = cost[self.basis] @ self.Binv
            d = cost - y @ self.A
            free = ~in_basis & (self.u > self.l)
            can_up = free & (d < -OPT_TOL) & (self.x < self.u - FEAS_TOL)
            can_dn = free & (d > OPT_TOL) & (self.x > self.l + FEAS_TOL)
            elig = can_up | can_dn
            if not elig.any():
                self.y = y
                return OPTIMAL
            if bland:
                j = int(np.flatnonzero(elig)[0])
            else:
                j = int(np.argmax(np.where(elig, np.abs(d), -1.0)))
            sgn = 1.0 if can_up[j] else -1.0
            w = self.Binv @ self.A[:, j]
            xb = self.x[self.basis]
            lb, ub = self.l[self.basis], self.u[self.basis]
            step = sgn * w  # x_B moves by -theta * step
            ratios = np.full(self.m, np.inf)
            dec = step > 1e-11
            inc = step < -1e-11
            ratios[dec] = (xb[dec] - lb[dec]) / step[dec]
            ratios[inc] = (ub[inc] - xb[inc]) / (-step[inc])
            ratios = np.maximum(ratios, 0.0)
            flip = self.u[j] - self.l[j]
            r = int(np.argmin(ratios)) if self.m else -1
            theta_b = ratios[r] if self.m else np.inf
            if bland and self.m and np.isfinite(theta_b):
                ties = np.flatnonzero(ratios <= theta_b + 1e-12)
                r = int(ties[np.argmin(np.asarray(self.basis)[ties])])
            theta = min(theta_b, flip)
            if not np.isfinite(theta):
                return UNBOUNDED
            self.iters += 1
            streak = streak + 1 if theta < 1e-12 else 0
            bland = streak >= DEGENERATE_STREAK
            self.x[self.basis] = xb - theta * step
            self.x[j] += sgn * theta
            if flip <= theta_b:
                self.x[j] = self.u[j] if sgn > 0 else self.l[j]
                continue
            leave = self.basis[r]
            self.x[leave] = lb[r] if step[r] > 0 else ub[r]
            self.basis[r] = j
            in_basis[leave] = False
            in_basis[j] = True
            piv = w[r]
            row = self.Binv[r] / piv
            self.Binv -= np.outer(w, row)
            self.Binv[r] = row
            self.since_refactor += 1
            if self.since_refactor >= REFACTOR_EVERY:
                self.refactor()


def _simplex(p: LpProblem, max_iter: int | None) -> LpSolution:
    n = p.n
    A_ub = p.A_ub.toarray()
    A_eq = p.A_eq.toarray()
    m_ub, m_eq = A_ub.shape[0], A_eq.shape[0]
    m = m_ub + m_eq
    # structural | slacks | artificials
    big = 1e30
    A = np.zeros((m, n + m_ub + m))
    A[:m_ub, :n] = A_ub
    A[m_ub:, :n] = A_eq
    A[:m_ub, n:n + m_ub] = np.eye(m_ub)
    b = np.concatenate([p.b_ub, p.b_eq])
    slack_hi = np.full(m_ub, big)
    l = np.concatenate([p.lb, np.zeros(m_ub), np.zeros(m)])
    u = np.concatenate([p.ub, slack_hi, np.full(m, big)])
    x = np.concatenate([p.lb.copy(), np.zeros(m_ub), np.zeros(m)])
    # start from x at lower bounds; slacks take what they can, artificials the rest
    resid = b - A[:, :n] @ x[:n]
    slack_ok = np.zeros(m, dtype=bool)
    slack_ok[:m_ub] = resid[:m_ub] >= 0
    basis = []
    sign = np.where(resid >= 0, 1.0, -1.0)
    for i in range(m):
        if slack_ok[i]:
            basis.append(n + i)
            x[n + i] = resid[i]
        else:
            A[i, n + m_ub + i] = sign[i]
            basis.append(n + m_ub + i)
            x[n + m_ub + i] = abs(resid[i])
    art = np.arange(n + m_ub, n + m_ub + m)
    # artificials not in use are pinned to zero
    used = ~slack_ok
    u[art[~used]] = 0.0
    limit = max_iter or 50 * (m + n) + 1000
    s = _Simplex(A, b, l, u, limit)
    s.x = x
    s.basis = basis
    s.refactor()
    if used.any():
        cost1 = np.zeros(A.shape[1])
        cost1[art[used]] = 1.0
        st = s.run(cost1)
        if st == ITERATION_LIMIT:
            return LpSolution(ITERATION_LIMIT, None, float("nan"), s.iters)
        s.refactor()
        if s.x[art].sum() > 1e-7 * max(1.0, np.abs(b).max(initial=0.0)):
            return LpSolution(INFEASIBLE, None, float("nan"), s.iters)
    s.u[art] = 0.0
    s.x[art] = np.clip(s.x[art], 0.0, 0.0)
    s.refactor()
    cost2 = np.zeros(A.shape[1])
    cost2[:n] = -p.c
    st = s.run(cost2)
    if st != OPTIMAL:
        return LpSolution(st, None, float("nan"), s.iters)
    s.refactor()
    xs = np.clip(s.x[:n], p.lb, p.ub)
    y = -(cost2[s.basis] @ s.Binv)
    return LpSolution(OPTIMAL, xs, float(p.c @ xs), s.iters, duals_ub=np.maximum(y[:m_ub], 0.0), duals_eq=y[m_ub:])


def _highs(p: LpProblem, integrality=None, time_limit=None) -> LpSolution:
    from scipy.optimize import Bounds, LinearConstraint, milp

    cons = []
    if p.A_ub.shape[0]:
        cons.append(LinearConstraint(p.A_ub, -np.inf, p.b_ub))
    if p.A_eq.shape[0]:
        cons.append(LinearConstraint(p.A_eq, p.b_eq, p.b_eq))
    opts = {"presolve": True}
    if time_limit:
        opts["time_limit"] = time_limit
    res = milp(-p.c, constraints=cons, bounds=Bounds(p.lb, p.ub), integrality=integrality, options=opts)
    if res.status == 0 and res.x is not None:
        x = np.clip(res.x, p.lb, p.ub)
        return LpSolution(OPTIMAL, x, float(p.c @ x), nodes=int(getattr(res, "mip_node_count", 0) or 0))
    status = {2: INFEASIBLE, 3: UNBOUNDED, 1: ITERATION_LIMIT}.get(res.status, INFEASIBLE)
    return LpSolution(status, None, float("nan"))


def solve_lp(p: LpProblem, backend: str = "simplex", max_iter: int | None = None) -> LpSolution:
    """Solve the continuous relaxation (binary markers are ignored)."""
    if backend == "simplex":
        sol = _simplex(p, max_iter)
    elif backend == "highs":
        sol = _highs(p)
    else:
        raise ValueError(f"unknown LP backend {backend!r}")
    if sol.ok:
        viol = audit(p, sol.x)
        scale = max(1.0, float(np.abs(p.b_ub).max(initial=0.0)), float(np.abs(p.b_eq).max(initial=0.0)))
        if viol > AUDIT_TOL * scale:
            return LpSolution(ITERATION_LIMIT, None, float("nan"), sol.iterations)
    return sol


def solve_milp(p: LpProblem, backend: str = "simplex", node_limit: int = 10_000, int_tol: float = 1e-6) -> LpSolution:
    """Best-first branch and bound over ``p.binaries`` (values in {0, 1})."""
    bins = p.binaries
    lb0 = p.lb.copy()
    ub0 = p.ub.copy()
    lb0[bins] = np.maximum(lb0[bins], 0.0)
    ub0[bins] = np.minimum(ub0[bins], 1.0)
    root = solve_lp(p.relaxed(lb0, ub0), backend=backend)
    if not root.ok:
        return root
    best: LpSolution | None = None
    heap = [(-root.objective, 0, lb0, ub0, root)]
    counter = 1
    nodes = 0
    while heap:
        neg_bound, _, lo, hi, sol = heapq.heappop(heap)
        if best is not None and -neg_bound <= best.objective + 1e-9:
            break
        nodes += 1
        if nodes > node_limit:
            heapq.heappush(heap, (neg_bound, -1, lo, hi, sol))
            break
        frac = np.abs(sol.x[bins] - np.round(sol.x[bins]))
        if not bins.size or frac.max() <= int_tol:
            x = sol.x.copy()
            x[bins] = np.round(x[bins])
            best = LpSolution(OPTIMAL, x, float(p.c @ x), sol.iterations)
            continue
        k = int(bins[np.argmax(frac)])
        for val in (1.0, 0.0):
            lo2, hi2 = lo.copy(), hi.copy()
            lo2[k] = hi2[k] = val
            child = solve_lp(p.relaxed(lo2, hi2), backend=backend)
            if child.ok and (best is None or child.objective > best.objective + 1e-9):
                heapq.heappush(heap, (-child.objective, counter, lo2, hi2, child))
                counter += 1
    if best is None:
        status = NODE_LIMIT if heap else INFEASIBLE
        return LpSolution(status, None, float("nan"), nodes=nodes)
    open_bound = max((-h[0] for h in heap), default=best.objective)
    gap = max(0.0, open_bound - best.objective)
    status = NODE_LIMIT if nodes > node_limit and gap > 1e-9 else OPTIMAL
    return LpSolution(status, best.x, best.objective, nodes=nodes, gap=gap)


# -- LP text format --------------------------------------------------------------

def _fmt_row(coefs, idx, names) -> str:
    parts = []
    for a, j in zip(coefs, idx):
        sign = "-" if a < 0 else "+"
        parts.append(f"{sign} {abs(a):.17g} {names[j]}")
    return " ".join(parts) if parts else "0 x0"


def write_lp(p: LpProblem, path) -> None:
    """Dump in CPLEX LP format (readable by HiGHS, GLPK, CBC)."""
    names = p.names or [f"x{j}" for j in range(p.n)]
    lines = ["\\ generated by clrlab", "Maximize", " obj: " + _fmt_row(p.c[p.c != 0], np.flatnonzero(p.c), names), "Subject To"]
    for kind, A, b, op in (("u", p.A_ub, p.b_ub, "<="), ("e", p.A_eq, p.b_eq, "=")):
        A = sp.csr_matrix(A)
        for i in range(A.shape[0]):
            row = A.getrow(i)
            lines.append(f" {kind}{i}: {_fmt_row(row.data, row.indices, names)} {op} {b[i]:.17g}")
    lines.append("Bounds")
    for j in range(p.n):
        lines.append(f" {p.lb[j]:.17g} <= {names[j]} <= {p.ub[j]:.17g}")
    if p.binaries.size:
        lines.append("Binary")
        lines.extend(f" {names[j]}" for j in p.binaries)
    lines.append("End")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")

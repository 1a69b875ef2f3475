"""Radial power flow: nonlinear backward/forward sweep and LinDistFlow.

Injections are given per bus in kW/kvar (generation positive, load negative)
and converted to per-unit on ``net.base_kva``. The reference bus is held at
1.0 p.u. and its injection entry is ignored.

Both solvers accept a leading batch dimension: ``p`` and ``q`` may be shaped
``(n_buses,)`` or ``(batch, n_buses)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import NetworkModel

TOL = 1e-8
MAX_ITER = 100


class PowerflowError(RuntimeError):
    """Raised when LinDistFlow leaves its validity range (w <= 0)."""


@dataclass(frozen=True)
class InjectionVector:
    p_kw: np.ndarray
    q_kvar: np.ndarray

    @classmethod
    def zeros(cls, net: NetworkModel) -> "InjectionVector":
        return cls(np.zeros(net.n_buses), np.zeros(net.n_buses))


@dataclass(frozen=True)
class PowerflowResult:
    v: np.ndarray
    converged: np.ndarray | bool
    iterations: int
    max_mismatch: np.ndarray | float


def _consumption_pu(net: NetworkModel, p, q) -> np.ndarray:
    s = -(np.asarray(p, dtype=float) + 1j * np.asarray(q, dtype=float)) / net.base_kva
    s = np.array(s, dtype=complex, copy=True)
    s[..., net.ref_bus] = 0.0
    return s


def sweep(net: NetworkModel, p, q, tol: float = TOL, max_iter: int = MAX_ITER):
    """Constant-power backward/forward sweep.

    Returns complex voltages, per-row convergence flags, the iteration count
    and per-row max power mismatch (p.u.). Rows that fail to converge keep
    their lowest-mismatch iterate.
    """
    topo = net.topology
    s_cons = _consumption_pu(net, p, q)
    batch_shape = s_cons.shape[:-1]
    s2 = s_cons.reshape(-1, net.n_buses)
    z = topo.r + 1j * topo.x
    desc = topo.desc
    v = np.ones_like(s2)
    best_v = v.copy()
    best_mis = np.full(s2.shape[0], np.inf)
    it = 0
    for it in range(1, max_iter + 1):
        i_load = np.conj(s2 / v)
        i_branch = i_load @ desc.T
        v_new = 1.0 - (z * i_branch) @ desc
        # residual power at v_new given the currents that produced it
        mis = np.abs(v_new * np.conj(i_load) - s2).max(axis=1)
        mis = np.where(np.isfinite(mis), mis, np.inf)
        # rows freeze at their first converged iterate, so results do not depend on batch mates
        better = (mis < best_mis) & (best_mis >= tol)
        best_mis = np.where(better, mis, best_mis)
        best_v[better] = v_new[better]
        v = v_new
        if np.all(best_mis < tol):
            break
        bad = ~np.isfinite(v).all(axis=1) | (np.abs(v) < 1e-6).any(axis=1)
        if bad.any():
            v[bad] = best_v[bad] if np.isfinite(best_v[bad]).all() else 1.0
    converged = best_mis < tol
    return (
        best_v.reshape(*batch_shape, net.n_buses),
        converged.reshape(batch_shape),
        it,
        best_mis.reshape(batch_shape),
    )


def solve_nonlinear(net: NetworkModel, inj: InjectionVector, tol: float = TOL, max_iter: int = MAX_ITER) -> PowerflowResult:
    v, conv, it, mis = sweep(net, inj.p_kw, inj.q_kvar, tol=tol, max_iter=max_iter)
    if np.ndim(conv) == 0:
        conv, mis = bool(conv), float(mis)
    return PowerflowResult(v=np.abs(v), converged=conv, iterations=it, max_mismatch=mis)


def lindistflow_w(net: NetworkModel, p, q) -> np.ndarray:
    """Squared voltage magnitudes from the LinDistFlow recursion (single pass)."""
    topo = net.topology
    s_cons = _consumption_pu(net, p, q)
    p_flow = s_cons.real @ topo.desc.T
    q_flow = s_cons.imag @ topo.desc.T
    return 1.0 - 2.0 * ((topo.r * p_flow + topo.x * q_flow) @ topo.desc)


def solve_lindistflow(net: NetworkModel, inj: InjectionVector) -> PowerflowResult:
    w = lindistflow_w(net, inj.p_kw, inj.q_kvar)
    if np.any(w <= 0.0):
        raise PowerflowError("LinDistFlow squared voltage is non-positive; loading outside model range")
    conv = True if w.ndim == 1 else np.ones(w.shape[0], dtype=bool)
    mis = 0.0 if w.ndim == 1 else np.zeros(w.shape[0])
    return PowerflowResult(v=np.sqrt(w), converged=conv, iterations=1, max_mismatch=mis)


def bus_injections(net: NetworkModel, der_p, der_q, load_p, load_q):
    """Aggregate device powers (kW/kvar, batch-leading) into per-bus injections."""
    der_p = np.asarray(der_p, dtype=float)
    lead = der_p.shape[:-1]
    p = np.zeros((*lead, net.n_buses))
    q = np.zeros((*lead, net.n_buses))
    gen = np.zeros((net.n_ders, net.n_buses))
    gen[np.arange(net.n_ders), net.der_bus] = 1.0
    ld = np.zeros((net.n_loads, net.n_buses))
    ld[np.arange(net.n_loads), net.load_bus] = 1.0
    p += der_p @ gen - np.asarray(load_p) @ ld
    q += np.asarray(der_q) @ gen - np.asarray(load_q) @ ld
    return p, q

"""Independent reference implementations used only by the tests."""
import numpy as np


def _pivot(T, r, c):
    T[r] /= T[r, c]
    for i in range(T.shape[0]):
        if i != r and T[i, c] != 0.0:
            T[i] -= T[i, c] * T[r]


def _run(T, basis, allowed, tol=1e-10):
    """Bland's-rule tableau iterations; last row holds reduced costs (max form)."""
    m = T.shape[0] - 1
    for _ in range(50_000):
        cols = [j for j in allowed if T[-1, j] < -tol]
        if not cols:
            return "optimal"
        c = cols[0]
        best, r = None, None
        for i in range(m):
            if T[i, c] > tol:
                ratio = T[i, -1] / T[i, c]
                if best is None or ratio < best - 1e-12 or (abs(ratio - best) <= 1e-12 and basis[i] < basis[r]):
                    best, r = ratio, i
        if r is None:
            return "unbounded"
        _pivot(T, r, c)
        basis[r] = c
    return "iteration_limit"


def tableau_max(c, A_ub, b_ub, lb, ub, A_eq=None, b_eq=None):
    """Two-phase dense tableau simplex for max c.x, A_ub x <= b_ub, A_eq x = b_eq, lb <= x <= ub.

    Returns (status, objective).
    """
    c = np.asarray(c, float)
    n = c.size
    lb, ub = np.asarray(lb, float), np.asarray(ub, float)
    A_eq = np.zeros((0, n)) if A_eq is None else np.asarray(A_eq, float)
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, float)
    # shift to y = x - lb >= 0 and turn upper bounds into rows
    A1 = np.vstack([np.asarray(A_ub, float), np.eye(n)])
    b1 = np.concatenate([np.asarray(b_ub, float) - np.asarray(A_ub, float) @ lb, ub - lb])
    b2 = b_eq - A_eq @ lb
    m1, m2 = A1.shape[0], A_eq.shape[0]
    m = m1 + m2
    n_art = int((b1 < 0).sum()) + m2
    width = n + m1 + n_art + 1
    T = np.zeros((m + 1, width))
    basis = []
    art_cols = []
    k = n + m1
    for i in range(m1):
        sgn = 1.0 if b1[i] >= 0 else -1.0
        T[i, :n] = sgn * A1[i]
        T[i, n + i] = sgn
        T[i, -1] = sgn * b1[i]
        if sgn > 0:
            basis.append(n + i)
        else:
            T[i, k] = 1.0
            basis.append(k)
            art_cols.append(k)
            k += 1
    for i in range(m2):
        sgn = 1.0 if b2[i] >= 0 else -1.0
        T[m1 + i, :n] = sgn * A_eq[i]
        T[m1 + i, -1] = sgn * b2[i]
        T[m1 + i, k] = 1.0
        basis.append(k)
        art_cols.append(k)
        k += 1
    everything = list(range(width - 1))
    if art_cols:
        T[-1, art_cols] = 1.0
        for i, bcol in enumerate(basis):
            if bcol in art_cols:
                T[-1] -= T[i]
        _run(T, basis, everything)
        if T[-1, -1] < -1e-7 * max(1.0, np.abs(T[:-1, -1]).max()):
            return "infeasible", float("nan")
        # drive zero-level artificials out of the basis
        for i, bcol in enumerate(basis):
            if bcol in art_cols:
                nz = [j for j in range(n + m1) if abs(T[i, j]) > 1e-9]
                if nz:
                    _pivot(T, i, nz[0])
                    basis[i] = nz[0]
    keep = list(range(n + m1))
    T[-1] = 0.0
    T[-1, :n] = -c
    for i, bcol in enumerate(basis):
        if T[-1, bcol] != 0.0:
            T[-1] -= T[-1, bcol] * T[i]
    status = _run(T, basis, keep)
    if status != "optimal":
        return status, float("nan")
    return "optimal", float(T[-1, -1] + c @ lb)


def fd_gradient_errors(params, x, g_out, h=1e-5):
    """Per-tensor relative error of the analytic actor gradient of sum(g_out * f(x))
    against central finite differences."""
    from clrlab.nn import actor_grad, forward

    _, grad = actor_grad(params, x, g_out)
    p = params.copy()
    num = np.zeros_like(grad)
    sl = params.actor_slice
    for j in range(sl.start, sl.stop):
        old = p.flat[j]
        p.flat[j] = old + h
        up = float((g_out * forward(p, x)).sum())
        p.flat[j] = old - h
        dn = float((g_out * forward(p, x)).sum())
        p.flat[j] = old
        num[j] = (up - dn) / (2 * h)
    errs = {}
    for name, shape, off in params.layout:
        if not name.startswith("actor/"):
            continue
        k = slice(off, off + int(np.prod(shape)))
        a, b = grad[k], num[k]
        errs[name] = float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))
    return errs


def ybus(net):
    """Bus admittance matrix of a network (p.u.), built line by line."""
    n = net.n_buses
    Y = np.zeros((n, n), dtype=complex)
    for ln in net.lines:
        y = 1.0 / complex(ln.r, ln.x)
        i, j = ln.from_bus, ln.to_bus
        Y[i, i] += y
        Y[j, j] += y
        Y[i, j] -= y
        Y[j, i] -= y
    return Y

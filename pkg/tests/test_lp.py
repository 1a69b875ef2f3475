import itertools

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st
from scipy.optimize import linprog

from _oracles import tableau_max
from clrlab.lp import (
    INFEASIBLE, ITERATION_LIMIT, OPTIMAL, LpError, LpProblem, audit, dual_bound, solve_lp, solve_milp, write_lp,
)


def random_lp(rng, m=20, n=40, n_eq=0):
    A = rng.normal(size=(m, n))
    lb = rng.uniform(-2, 0, n)
    ub = lb + rng.uniform(0.5, 3, n)
    x0 = rng.uniform(lb, ub)
    b = A @ x0 + rng.uniform(0, 1, m)
    E = rng.normal(size=(n_eq, n))
    return LpProblem(rng.normal(size=n), lb, ub, A, b, E if n_eq else None, E @ x0 if n_eq else None)


def test_two_var_box():
    p = LpProblem([1.0, 1.0], [0, 0], [10, 10], [[1, 0], [0, 1]], [1, 2])
    sol = solve_lp(p)
    assert sol.status == OPTIMAL
    assert sol.objective == pytest.approx(3.0)
    np.testing.assert_allclose(sol.x, [1, 2])


def test_infeasible():
    p = LpProblem([1.0], [-10], [10], [[1.0], [-1.0]], [1.0, -2.0])
    assert solve_lp(p).status == INFEASIBLE
    assert tableau_max(p.c, p.A_ub.toarray(), p.b_ub, p.lb, p.ub)[0] == "infeasible"


def test_problem_validation():
    with pytest.raises(LpError):
        LpProblem([1.0], [0], [np.inf])
    with pytest.raises(LpError):
        LpProblem([1.0], [1], [0])
    with pytest.raises(LpError):
        LpProblem([1.0, 1.0], [0, 0], [1, 1], [[1.0]], [1.0])


def test_iteration_limit():
    p = random_lp(np.random.default_rng(0))
    assert solve_lp(p, max_iter=1).status == ITERATION_LIMIT


@pytest.mark.parametrize("seed", range(25))
def test_matches_tableau_oracle(seed):
    rng = np.random.default_rng(seed)
    p = random_lp(rng, n_eq=seed % 3)
    sol = solve_lp(p)
    status, ref = tableau_max(p.c, p.A_ub.toarray(), p.b_ub, p.lb, p.ub, p.A_eq.toarray(), p.b_eq)
    assert sol.status == status == OPTIMAL
    assert sol.objective == pytest.approx(ref, abs=1e-6)
    assert audit(p, sol.x) < 1e-7


def test_oracle_agrees_with_highs():
    # the oracle itself is sanity-checked against an external solver
    rng = np.random.default_rng(99)
    for _ in range(5):
        p = random_lp(rng, 8, 12, 2)
        ref = linprog(-p.c, p.A_ub.toarray(), p.b_ub, p.A_eq.toarray(), p.b_eq, list(zip(p.lb, p.ub)))
        assert tableau_max(p.c, p.A_ub.toarray(), p.b_ub, p.lb, p.ub, p.A_eq.toarray(), p.b_eq)[1] == pytest.approx(-ref.fun, abs=1e-7)


@given(st.integers(0, 10_000))
def test_weak_duality(seed):
    rng = np.random.default_rng(seed)
    p = random_lp(rng, 6, 10, 1)
    sol = solve_lp(p)
    assert sol.ok
    assert audit(p, sol.x) < 1e-7
    # any nonnegative multipliers give an upper bound, the returned ones a tight one
    assert dual_bound(p, rng.uniform(0, 2, 6), rng.normal(size=1)) >= sol.objective - 1e-7
    assert dual_bound(p, sol.duals_ub, sol.duals_eq) == pytest.approx(sol.objective, abs=1e-6)


def test_deterministic():
    p = random_lp(np.random.default_rng(5), n_eq=2)
    a, b = solve_lp(p), solve_lp(p)
    np.testing.assert_array_equal(a.x, b.x)
    assert a.iterations == b.iterations


def test_knapsack():
    p = LpProblem([3.0, 2.0], [0, 0], [1, 1], [[1, 1]], [1.0], binaries=[0, 1])
    sol = solve_milp(p)
    assert sol.status == OPTIMAL and sol.objective == pytest.approx(3.0)
    np.testing.assert_allclose(sol.x, [1, 0])


def test_integral_relaxation_single_node():
    p = LpProblem([1.0, 1.0], [0, 0], [1, 1], [[1, 0]], [1.0], binaries=[0])
    sol = solve_milp(p)
    assert sol.nodes == 1
    assert sol.objective == pytest.approx(solve_lp(p).objective)


def complementarity_toy():
    # vars: served L, charge, discharge, curtail, indicator y; surplus must go somewhere,
    # and the relaxation burns it through round-trip losses instead of curtailing
    c = [1.0, 0.0, 0.0, -0.1, 0.0]
    lb, ub = [0, 0, 0, 0, 0], [5, 10, 10, 15, 1]
    A_ub = [[0, 0.9, -1 / 0.9, 0, 0],  # SOC headroom
            [0, -0.9, 1 / 0.9, 0, 0],  # SOC available
            [0, 0, 1, 0, -10],  # dis <= 10 y
            [0, 1, 0, 0, 10]]  # ch <= 10 (1 - y)
    b_ub = [2.0, 1.0, 0.0, 10.0]
    A_eq = [[1, 1, -1, 1, 0]]
    return LpProblem(c, lb, ub, A_ub, b_ub, A_eq, [15.0], binaries=[4])


def test_complementarity_by_enumeration():
    p = complementarity_toy()
    relax = solve_lp(p)
    assert relax.x[1] * relax.x[2] > 1e-3  # simultaneous charge and discharge
    sol = solve_milp(p)
    assert sol.status == OPTIMAL
    assert sol.x[1] * sol.x[2] <= 1e-9
    best = -np.inf
    for y in (0.0, 1.0):
        bounds = list(zip(p.lb, p.ub))
        bounds[4] = (y, y)
        r = linprog(-p.c, p.A_ub.toarray(), p.b_ub, p.A_eq.toarray(), p.b_eq, bounds)
        if r.status == 0:
            best = max(best, -r.fun)
    assert sol.objective == pytest.approx(best, abs=1e-9)


def test_milp_brute_force_small():
    rng = np.random.default_rng(3)
    for _ in range(5):
        n = 6
        A = rng.uniform(0, 1, (3, n))
        p = LpProblem(rng.uniform(-1, 2, n), np.zeros(n), np.ones(n), A, A.sum(1) * 0.5, binaries=np.arange(4))
        sol = solve_milp(p)
        best = -np.inf
        for bits in itertools.product((0.0, 1.0), repeat=4):
            lb, ub = p.lb.copy(), p.ub.copy()
            lb[:4] = ub[:4] = bits
            r = linprog(-p.c, A, p.b_ub, bounds=list(zip(lb, ub)))
            if r.status == 0:
                best = max(best, -r.fun)
        assert sol.objective == pytest.approx(best, abs=1e-7)


def test_highs_backend_agrees():
    p = random_lp(np.random.default_rng(8), n_eq=1)
    assert solve_lp(p, "highs").objective == pytest.approx(solve_lp(p).objective, abs=1e-7)


def test_lp_dump(tmp_path):
    p = complementarity_toy()
    write_lp(p, tmp_path / "toy.lp")
    text = (tmp_path / "toy.lp").read_text()
    assert text.splitlines()[1] == "Maximize"
    assert "Binary" in text and text.rstrip().endswith("End")
    assert sp.issparse(p.A_ub)

"""Independent reference computations used as test oracles.

These deliberately avoid the code paths they certify: cone projections
go through cvxpy, transportation optima through the HiGHS LP solver.
"""

import numpy as np
import cvxpy as cp
from scipy.optimize import linprog


def qp_cone_projection(generators, x, hdiag):
    """min ||x - G^T c||_H over c >= 0, solved by an interior-point QP."""
    g = np.asarray(generators, dtype=float)
    if g.shape[0] == 0:
        return np.zeros_like(x)
    c = cp.Variable(g.shape[0], nonneg=True)
    obj = cp.Minimize(cp.sum(cp.multiply(hdiag, cp.square(x - g.T @ c))))
    cp.Problem(obj).solve(solver=cp.CLARABEL)
    return g.T @ c.value


def transportation_lp(supply, demand, cost):
    """Exact transportation optimum between equal-mass vectors."""
    supply = np.asarray(supply, dtype=float)
    demand = np.asarray(demand, dtype=float)
    ns, nd = supply.size, demand.size
    a_eq = []
    b_eq = []
    for i in range(ns):
        row = np.zeros(ns * nd)
        row[i * nd:(i + 1) * nd] = 1.0
        a_eq.append(row)
        b_eq.append(supply[i])
    for j in range(nd):
        row = np.zeros(ns * nd)
        row[j::nd] = 1.0
        a_eq.append(row)
        b_eq.append(demand[j])
    res = linprog(np.asarray(cost, dtype=float).ravel(), A_eq=np.array(a_eq),
                  b_eq=np.array(b_eq), bounds=(0, None), method="highs")
    assert res.success
    return res.fun


def random_generated_cone(rng, n_max=8):
    n = int(rng.integers(2, n_max + 1))
    g = int(rng.integers(1, 2 * n + 1))
    gens = rng.normal(size=(g, n))
    gens = gens[np.linalg.norm(gens, axis=1) > 1e-9]
    if gens.shape[0] == 0:
        gens = np.eye(n)[:1]
    return gens


def random_metric_diag(rng, n):
    return np.exp(rng.uniform(-2.0, 2.0, size=n))

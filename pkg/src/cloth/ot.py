"""Discrete optimal transport: costs, plans, log-domain Sinkhorn and exact oracles."""
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DimensionError, DomainError, NumericError, ParameterError
from .numerics import clamped_log


def as_matrix(a, name="matrix"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-d, got shape {a.shape}")
    return a


def discriminator_cost(d_probs, num_classes, floor=1e-12):
    """Cost of sending row i to class m: -log D_m, clamped so it stays finite.

    ``d_probs`` has M+1 columns; the last (target) column is ignored.
    """
    d_probs = as_matrix(d_probs, "discriminator output")
    return -clamped_log(d_probs[:, :num_classes], floor)


@dataclass(frozen=True)
class Marginals:
    row: np.ndarray
    col: np.ndarray

    def __post_init__(self):
        row = np.asarray(self.row, dtype=np.float64)
        col = np.asarray(self.col, dtype=np.float64)
        if np.any(row < 0) or np.any(col < 0):
            raise DomainError("marginal masses must be nonnegative")
        if abs(row.sum() - 1.0) > 1e-9 or abs(col.sum() - 1.0) > 1e-9:
            raise DomainError(f"marginals must each sum to 1 (got {row.sum()!r}, {col.sum()!r})")
        object.__setattr__(self, "row", row)
        object.__setattr__(self, "col", col)

    @classmethod
    def uniform_rows(cls, n, col):
        return cls(np.full(n, 1.0 / n), col)


def transport_cost(plan, cost):
    plan, cost = as_matrix(plan, "plan"), as_matrix(cost, "cost")
    if plan.shape != cost.shape:
        raise DimensionError(f"plan {plan.shape} and cost {cost.shape} differ in shape")
    return float(np.sum(plan * cost))


def plan_entropy(plan):
    p = plan[plan > 0]
    return float(-np.sum(p * np.log(p)))


def entropic_objective(plan, cost, epsilon):
    """<A, C> - eps * H(A), the quantity Sinkhorn minimises."""
    return transport_cost(plan, cost) - epsilon * plan_entropy(plan)


def sinkhorn_dual(f, g, cost, marg, epsilon):
    """Dual value <f,a> + <g,b> - eps*sum(exp((f+g-C)/eps)) + eps; non-decreasing along Sinkhorn."""
    mass = np.sum(np.exp((f[:, None] + g[None, :] - cost) / epsilon))
    return float(f @ marg.row + g @ marg.col - epsilon * mass + epsilon)


def marginal_violation(plan, marg):
    return float(max(np.max(np.abs(plan.sum(axis=1) - marg.row)),
                     np.max(np.abs(plan.sum(axis=0) - marg.col))))


class SinkhornResult(NamedTuple):
    plan: np.ndarray
    iterations: int
    violation: float


def _lse_rows(a):
    # finite costs and marginals summing to 1 keep every row maximum finite
    mx = a.max(axis=1)
    return np.log(np.exp(a - mx[:, None]).sum(axis=1)) + mx


def sinkhorn(cost, marg, epsilon=0.1, max_iter=2000, tol=1e-6, callback=None, check_every=10):
    """Entropic OT by alternating dual updates in the log domain.

    The plan is ``exp((f_i + g_j - C_ij) / eps)``. Each iteration updates f
    (rows exact) then g (columns exact); the loop stops once the marginal
    violation drops below ``tol``, tested every ``check_every`` iterations
    (every iteration when a callback is given). ``callback(it, plan, f, g)``
    sees every iterate together with its dual potentials.
    """
    cost = as_matrix(cost, "cost")
    if not epsilon > 0:
        raise ParameterError(f"epsilon must be positive, got {epsilon}")
    n, m = cost.shape
    if marg.row.shape != (n,) or marg.col.shape != (m,):
        raise DimensionError(f"marginals {marg.row.shape}/{marg.col.shape} do not fit cost {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise DomainError("sinkhorn cost must be finite")
    with np.errstate(divide="ignore"):
        log_a = np.log(marg.row)
        log_b = np.log(marg.col)
    # potentials in units of epsilon
    neg = -cost / epsilon
    fs = np.zeros(n)
    gs = np.zeros(m)
    plan = None
    violation = np.inf
    step = 1 if callback is not None else max(1, int(check_every))
    it = 0
    for it in range(1, max_iter + 1):
        fs = log_a - _lse_rows(neg + gs[None, :])
        gs = log_b - _lse_rows(neg.T + fs[None, :])
        if it % step and it != max_iter:
            continue
        plan = np.exp(neg + fs[:, None] + gs[None, :])
        if not np.all(np.isfinite(plan)):
            raise NumericError(f"non-finite transport plan at Sinkhorn iteration {it}")
        violation = marginal_violation(plan, marg)
        if callback is not None:
            callback(it, plan, epsilon * fs, epsilon * gs)
        if violation < tol:
            break
    if plan is None:
        plan = np.exp(neg)
        violation = marginal_violation(plan, marg)
    return SinkhornResult(plan, it, violation)


def round_to_marginals(plan, marg):
    """Nearby plan with exactly the requested marginals.

    Scale rows down to their targets, then columns, then add the rank-one
    correction ``err_r err_c^T / |err_c|_1``. The result stays nonnegative
    and differs from ``plan`` by at most twice its marginal violation in l1.
    """
    plan = as_matrix(plan, "plan")
    rows = plan.sum(axis=1)
    x = np.minimum(1.0, np.divide(marg.row, rows, out=np.ones_like(rows), where=rows > 0))
    p = plan * x[:, None]
    cols = p.sum(axis=0)
    y = np.minimum(1.0, np.divide(marg.col, cols, out=np.ones_like(cols), where=cols > 0))
    p = p * y[None, :]
    err_r = marg.row - p.sum(axis=1)
    err_c = marg.col - p.sum(axis=0)
    total = err_c.sum()
    if total > 0:
        p = p + np.outer(err_r, err_c) / total
    return p


def row_argmin_plan(cost, row_mass):
    """Exact optimum when column masses are free: each row goes to its cheapest column.

    Ties resolve to the lowest column index (``np.argmin`` semantics).
    Returns the plan and the induced column masses.
    """
    cost = as_matrix(cost, "cost")
    n, m = cost.shape
    cols = np.argmin(cost, axis=1)
    plan = np.zeros((n, m))
    plan[np.arange(n), cols] = row_mass
    return plan, plan.sum(axis=0)


def free_marginal_optimum(cost, row_mass):
    cost = as_matrix(cost, "cost")
    return float(row_mass * np.sum(np.min(cost, axis=1)))


def hungarian(cost):
    """Minimum-cost perfect assignment on a square matrix (shortest augmenting paths with potentials).

    Returns ``(perm, total)`` with ``perm[i]`` the column assigned to row i.
    """
    cost = as_matrix(cost, "cost")
    n, m = cost.shape
    if n != m:
        raise DimensionError(f"hungarian needs a square matrix, got {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise DomainError("hungarian cost must be finite")
    if n == 0:
        return np.zeros(0, dtype=np.int64), 0.0
    inf = math.inf
    # 1-based arrays; column 0 is a virtual start
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    match = [0] * (n + 1)  # match[j] = row assigned to column j
    way = [0] * (n + 1)
    c = cost.tolist()
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = inf
            j1 = 0
            row = c[i0 - 1]
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    perm = np.zeros(n, dtype=np.int64)
    for j in range(1, n + 1):
        perm[match[j] - 1] = j - 1
    total = math.fsum(c[i][perm[i]] for i in range(n))
    return perm, total

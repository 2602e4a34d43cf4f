"""Dense two-phase primal simplex with variable bounds.

Reference LP engine: slow but dependency-free and easy to audit.  Used
for small problems and as a cross-check of the default HiGHS engine;
the branch-and-bound search can run entirely on it.

Anti-cycling: Dantzig pricing switches to Bland's rule after 1000
degenerate pivots; ratio-test ties always resolve to the smallest
basis variable id.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_FEAS_TOL = 1e-8
_OPT_TOL = 1e-9
_PIVOT_TOL = 1e-10
_DEGENERATE_LIMIT = 1000


@dataclass
class DenseResult:
    status: str  # optimal | infeasible | unbounded
    x: np.ndarray | None
    objective: float | None
    iterations: int


class _Tableau:
    def __init__(self, A: np.ndarray, b: np.ndarray, u: np.ndarray, n_real: int, max_iter: int):
        m = A.shape[0]
        art0 = A.shape[1]
        self.m = m
        self.n_cols = art0 + m
        self.T = np.hstack([A, np.eye(m), b[:, None]])
        self.u = np.concatenate([u, np.full(m, math.inf)])
        self.basis = list(range(art0, art0 + m))
        self.at_upper = np.zeros(self.n_cols, dtype=bool)
        self.art_mask = np.zeros(self.n_cols, dtype=bool)
        self.art_mask[art0:] = True
        self.n_real = n_real
        self.iters = 0
        self.degenerate = 0
        self.max_iter = max_iter

    def basic_values(self) -> np.ndarray:
        b_col = self.T[:, -1].copy()
        upper = np.where(self.at_upper & np.isfinite(self.u))[0]
        if upper.size:
            b_col -= self.T[:, upper] @ self.u[upper]
        return b_col

    def solution(self) -> np.ndarray:
        values = np.where(self.at_upper & np.isfinite(self.u), self.u, 0.0)
        values[self.basis] = self.basic_values()
        return values

    def pivot(self, row: int, col: int, leave_to_upper: bool) -> None:
        T = self.T
        T[row] /= T[row, col]
        colvals = T[:, col].copy()
        colvals[row] = 0.0
        self.T -= np.outer(colvals, T[row])
        leaving = self.basis[row]
        self.at_upper[leaving] = leave_to_upper
        self.at_upper[col] = False
        self.basis[row] = col

    def run_phase(self, cost: np.ndarray, allow: np.ndarray) -> str:
        m = self.m
        while True:
            if self.iters > self.max_iter:
                raise RuntimeError("simplex iteration limit exceeded")
            b_col = self.basic_values()
            reduced = cost - cost[self.basis] @ self.T[:, :-1]
            in_basis = np.zeros(self.n_cols, dtype=bool)
            in_basis[self.basis] = True
            elig_lo = ~in_basis & allow & ~self.at_upper & (reduced < -_OPT_TOL)
            elig_up = ~in_basis & allow & self.at_upper & (reduced > _OPT_TOL)
            candidates = np.where(elig_lo | elig_up)[0]
            if candidates.size == 0:
                return "optimal"
            if self.degenerate >= _DEGENERATE_LIMIT:
                j = int(candidates[0])  # Bland's rule
            else:
                j = int(candidates[np.argmax(np.abs(reduced[candidates]))])
            increasing = not self.at_upper[j]
            col = self.T[:, j] if increasing else -self.T[:, j]
            t_limit = self.u[j]
            leave_row, leave_to_upper = -1, False
            for i in range(m):
                if col[i] > _PIVOT_TOL:
                    ratio = max(b_col[i], 0.0) / col[i]
                elif col[i] < -_PIVOT_TOL and math.isfinite(self.u[self.basis[i]]):
                    ratio = (self.u[self.basis[i]] - b_col[i]) / -col[i]
                else:
                    continue
                hits_upper = col[i] < 0
                better = ratio < t_limit - 1e-12
                tie = abs(ratio - t_limit) <= 1e-12 and leave_row >= 0 and \
                    self.basis[i] < self.basis[leave_row]
                if better or tie:
                    t_limit, leave_row, leave_to_upper = ratio, i, hits_upper
            if not math.isfinite(t_limit):
                return "unbounded"
            self.iters += 1
            if t_limit <= 1e-11:
                self.degenerate += 1
            if leave_row < 0:
                self.at_upper[j] = not self.at_upper[j]  # bound flip at u_j
                continue
            self.pivot(leave_row, j, leave_to_upper)


def solve_dense(
    c,
    A_ub,
    b_ub,
    A_eq,
    b_eq,
    lb,
    ub,
    max_iter: int | None = None,
) -> DenseResult:
    """Minimize c'x subject to A_ub x <= b_ub, A_eq x = b_eq, lb <= x <= ub."""
    c = np.asarray(c, dtype=float)
    n_orig = c.size
    A_ub = np.asarray(A_ub, dtype=float).reshape(-1, n_orig) if np.size(A_ub) else np.zeros((0, n_orig))
    A_eq = np.asarray(A_eq, dtype=float).reshape(-1, n_orig) if np.size(A_eq) else np.zeros((0, n_orig))
    b_ub = np.asarray(b_ub, dtype=float).ravel()
    b_eq = np.asarray(b_eq, dtype=float).ravel()
    lb = np.asarray(lb, dtype=float).copy()
    ub = np.asarray(ub, dtype=float).copy()
    if (lb > ub).any():
        return DenseResult("infeasible", None, None, 0)

    # Split free variables (lb = -inf) into x = x+ - x-.
    free = ~np.isfinite(lb)
    owners = np.where(free)[0]
    n_free = owners.size
    if n_free:
        c = np.concatenate([c, -c[owners]])
        A_ub = np.hstack([A_ub, -A_ub[:, owners]])
        A_eq = np.hstack([A_eq, -A_eq[:, owners]])
        lb = np.concatenate([np.where(free, 0.0, lb), np.zeros(n_free)])
        ub = np.concatenate([ub, np.full(n_free, math.inf)])
    n = c.size

    # Shift to zero lower bounds: y = x - lb.
    b_ub2 = b_ub - A_ub @ lb
    b_eq2 = b_eq - A_eq @ lb
    u = ub - lb

    m_ub, m_eq = A_ub.shape[0], A_eq.shape[0]
    m = m_ub + m_eq
    A = np.zeros((m, n + m_ub))
    A[:m_ub, :n] = A_ub
    A[m_ub:, :n] = A_eq
    A[:m_ub, n:] = np.eye(m_ub)
    b = np.concatenate([b_ub2, b_eq2])
    u_cols = np.concatenate([u, np.full(m_ub, math.inf)])
    neg = b < 0
    A[neg] *= -1.0
    b = np.abs(b)

    if max_iter is None:
        max_iter = 2000 + 200 * (m + n)
    tab = _Tableau(A, b, u_cols, n_real=n, max_iter=max_iter)

    cost1 = np.zeros(tab.n_cols)
    cost1[tab.art_mask] = 1.0
    tab.run_phase(cost1, allow=np.ones(tab.n_cols, dtype=bool))
    b_col = tab.basic_values()
    art_value = sum(b_col[i] for i in range(m) if tab.art_mask[tab.basis[i]])
    if art_value > _FEAS_TOL:
        return DenseResult("infeasible", None, None, tab.iters)

    # Pivot zero-valued artificials out of the basis where possible; rows
    # where that fails are redundant and their artificial stays frozen at 0.
    for i in range(m):
        if tab.art_mask[tab.basis[i]]:
            row = tab.T[i, :-1]
            cands = np.where((np.abs(row) > 1e-7) & ~tab.art_mask)[0]
            if cands.size:
                tab.pivot(i, int(cands[0]), leave_to_upper=False)

    cost2 = np.zeros(tab.n_cols)
    cost2[:n] = c
    status = tab.run_phase(cost2, allow=~tab.art_mask)
    if status == "unbounded":
        return DenseResult("unbounded", None, None, tab.iters)

    values = tab.solution()
    y = values[:n]
    x = y[:n_orig] + lb[:n_orig]
    for k, j in enumerate(owners):
        x[j] -= y[n_orig + k]
    obj = float(c[:n_orig] @ x)
    return DenseResult("optimal", x, obj, tab.iters)

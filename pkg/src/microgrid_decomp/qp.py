"""Small convex QP/LP models on top of HiGHS.

The objective is ``c.x + 0.5 * sum(H_jj x_j^2)`` (diagonal Hessian only),
rows are ``lo <= a.x <= hi``. Duals follow the HiGHS convention
``c + H x - A^T y = z``, so ``y = d objective / d row bound`` for active
rows.

HiGHS' QP solver stops at a primal accuracy around 1e-7. For problems with
a Hessian the solution is therefore polished: the active set it reports is
frozen, the resulting equality-constrained KKT system is solved and the
solver's multipliers get the smallest correction that makes stationarity
exact. The polished point replaces the solver's only if it is a KKT point:
primal feasible, stationary, and with multipliers of the right signs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import highspy
import numpy as np

INF = highspy.kHighsInf
ACTIVE_TOL = 1e-6
FEAS_TOL = 1e-9
SIGN_TOL = 1e-7


class QPError(RuntimeError):
    pass


@dataclass
class QPSolution:
    status: str
    objective: float
    x: np.ndarray
    row_dual: np.ndarray
    col_dual: np.ndarray
    polished: bool = False

    @property
    def optimal(self) -> bool:
        return self.status == "Optimal"


def _bound(v):
    v = np.asarray(v, dtype=float)
    return np.where(np.isposinf(v), INF, np.where(np.isneginf(v), -INF, v))


class QPModel:
    def __init__(self, tolerance: float = 1e-9):
        self.h = highspy.Highs()
        self.h.setOptionValue("output_flag", False)
        self.tolerance = tolerance
        self._set_tolerance(tolerance)
        self.num_cols = 0
        self.num_rows = 0
        self._hessian = np.zeros(0)
        self._cost = np.zeros(0)
        self._col_lo = np.zeros(0)
        self._col_hi = np.zeros(0)
        self._rows: list[tuple[np.ndarray, np.ndarray]] = []
        self._row_lo = np.zeros(0)
        self._row_hi = np.zeros(0)

    def _set_tolerance(self, tol: float) -> None:
        self.h.setOptionValue("primal_feasibility_tolerance", tol)
        self.h.setOptionValue("dual_feasibility_tolerance", tol)

    def add_vars(self, lo, hi, cost) -> np.ndarray:
        lo, hi = np.atleast_1d(_bound(lo)), np.atleast_1d(_bound(hi))
        cost = np.atleast_1d(np.asarray(cost, float))
        n = len(lo)
        start = self.num_cols
        self.h.addVars(n, lo, hi)
        idx = np.arange(start, start + n, dtype=np.int32)
        self.h.changeColsCost(n, idx, cost)
        self.num_cols += n
        self._hessian = np.concatenate([self._hessian, np.zeros(n)])
        self._cost = np.concatenate([self._cost, cost])
        self._col_lo = np.concatenate([self._col_lo, lo])
        self._col_hi = np.concatenate([self._col_hi, hi])
        return idx

    def set_hessian_diag(self, diag) -> None:
        diag = np.asarray(diag, dtype=float)
        if diag.shape != (self.num_cols,):
            raise ValueError("Hessian diagonal must cover every column")
        if np.any(diag < 0):
            raise ValueError("Hessian diagonal must be nonnegative")
        self._hessian = diag.copy()
        if not np.any(diag):
            return
        hs = highspy.HighsHessian()
        hs.dim_ = self.num_cols
        hs.format_ = highspy.HessianFormat.kTriangular
        # one entry per column keeps the start array simple
        hs.start_ = np.arange(self.num_cols + 1, dtype=np.int32)
        hs.index_ = np.arange(self.num_cols, dtype=np.int32)
        hs.value_ = diag
        self.h.passHessian(hs)

    def add_rows(self, lo, hi, rows: Sequence[tuple[Sequence[int], Sequence[float]]]) -> np.ndarray:
        lo, hi = np.atleast_1d(_bound(lo)), np.atleast_1d(_bound(hi))
        starts, index, value = [], [], []
        for cols, vals in rows:
            starts.append(len(index))
            index.extend(int(c) for c in cols)
            value.extend(float(v) for v in vals)
            self._rows.append((np.asarray(cols, dtype=np.int64), np.asarray(vals, dtype=float)))
        n = len(rows)
        self.h.addRows(
            n,
            lo,
            hi,
            len(index),
            np.asarray(starts, dtype=np.int32),
            np.asarray(index, dtype=np.int32),
            np.asarray(value, dtype=float),
        )
        self._row_lo = np.concatenate([self._row_lo, lo])
        self._row_hi = np.concatenate([self._row_hi, hi])
        idx = np.arange(self.num_rows, self.num_rows + n, dtype=np.int32)
        self.num_rows += n
        return idx

    def set_row_bounds(self, rows, lo, hi) -> None:
        rows = np.asarray(rows, dtype=np.int32)
        lo = _bound(lo) * np.ones(len(rows))
        hi = _bound(hi) * np.ones(len(rows))
        self.h.changeRowsBounds(len(rows), rows, lo, hi)
        self._row_lo[rows] = lo
        self._row_hi[rows] = hi

    def set_col_bounds(self, cols, lo, hi) -> None:
        cols = np.asarray(cols, dtype=np.int32)
        lo = _bound(lo) * np.ones(len(cols))
        hi = _bound(hi) * np.ones(len(cols))
        self.h.changeColsBounds(len(cols), cols, lo, hi)
        self._col_lo[cols] = lo
        self._col_hi[cols] = hi

    def delete_rows(self, rows) -> None:
        rows = np.asarray(rows, dtype=np.int32)
        if not len(rows):
            return
        self.h.deleteRows(len(rows), rows)
        keep = np.ones(self.num_rows, dtype=bool)
        keep[rows] = False
        self._rows = [r for r, k in zip(self._rows, keep) if k]
        self._row_lo, self._row_hi = self._row_lo[keep], self._row_hi[keep]
        self.num_rows -= len(rows)

    def _dense_rows(self) -> np.ndarray:
        A = np.zeros((self.num_rows, self.num_cols))
        for i, (cols, vals) in enumerate(self._rows):
            np.add.at(A[i], cols, vals)
        return A

    def _raw_solve(self) -> QPSolution:
        self.h.run()
        status = self.h.modelStatusToString(self.h.getModelStatus())
        sol = self.h.getSolution()
        obj = self.h.getInfo().objective_function_value if status == "Optimal" else np.nan
        return QPSolution(
            status,
            float(obj),
            np.array(sol.col_value, dtype=float),
            np.array(sol.row_dual, dtype=float),
            np.array(sol.col_dual, dtype=float),
        )

    def objective(self, x) -> float:
        return float(self._cost @ x + 0.5 * np.sum(self._hessian * x * x))

    def _polish(self, sol: QPSolution, active_tol: float = ACTIVE_TOL) -> QPSolution | None:
        # strongly active constraints first; near-parallel weakly active cuts
        # would otherwise over-determine the frozen system
        A = self._dense_rows()
        for strong in (True, False):
            out = self._polish_active(sol, A, strong, active_tol)
            if out is not None:
                return out
        return None

    def _polish_active(self, sol: QPSolution, A: np.ndarray, strong: bool, active_tol: float) -> QPSolution | None:
        x0 = sol.x
        lo_c, hi_c = self._col_lo, self._col_hi
        lo_r, hi_r = self._row_lo, self._row_hi
        scale_c = np.maximum(1.0, np.abs(x0))
        at_lo = np.abs(x0 - lo_c) <= active_tol * scale_c
        at_hi = ~at_lo & (np.abs(x0 - hi_c) <= active_tol * scale_c)
        boxed = lo_c == hi_c
        if strong:
            keep = boxed | (np.abs(sol.col_dual) > SIGN_TOL)
            at_lo &= keep
            at_hi &= keep
        fixed = at_lo | at_hi
        x_fix = np.where(at_lo, lo_c, hi_c)
        act = A @ x0
        scale_r = np.maximum(1.0, np.abs(act))
        eq = lo_r == hi_r
        r_lo = eq | (np.abs(act - lo_r) <= active_tol * scale_r)
        r_hi = ~r_lo & (np.abs(act - hi_r) <= active_tol * scale_r)
        if strong:
            keep = eq | (np.abs(sol.row_dual) > SIGN_TOL)
            r_lo &= keep
            r_hi &= keep
        active = r_lo | r_hi
        rhs = np.where(r_lo, lo_r, hi_r)[active]
        free = ~fixed
        Aa = A[active]
        AF = Aa[:, free]
        nF, nR = int(free.sum()), int(active.sum())
        K = np.zeros((nF + nR, nF + nR))
        K[:nF, :nF] = np.diag(self._hessian[free])
        K[:nF, nF:] = -AF.T
        K[nF:, :nF] = AF
        xf = np.where(fixed, x_fix, 0.0)
        b = np.concatenate([-self._cost[free], rhs - Aa[:, fixed] @ x_fix[fixed]])
        solz, *_ = np.linalg.lstsq(K, b, rcond=None)
        xF = solz[:nF]
        # an over-determined active set leaves a residual; restore the active rows exactly
        target = b[nF:]
        if nR:
            dx, *_ = np.linalg.lstsq(AF, target - AF @ xF, rcond=None)
            xF = xF + dx
            if np.abs(AF @ xF - target).max() > FEAS_TOL * max(1.0, np.abs(target).max()):
                return None
        x = xf.copy()
        x[free] = xF
        # primal feasibility
        if np.any(x < lo_c - FEAS_TOL * scale_c) or np.any(x > hi_c + FEAS_TOL * scale_c):
            return None
        act = A @ x
        if np.any(act < lo_r - FEAS_TOL * scale_r) or np.any(act > hi_r + FEAS_TOL * scale_r):
            return None
        # duals: smallest correction of the solver's multipliers restoring stationarity
        M = np.hstack([Aa.T, np.eye(self.num_cols)[:, fixed]])
        v0 = np.concatenate([sol.row_dual[active], sol.col_dual[fixed]])
        grad = self._cost + self._hessian * x
        dv, *_ = np.linalg.lstsq(M, grad - M @ v0, rcond=None)
        v = v0 + dv
        y = np.zeros(self.num_rows)
        y[active] = v[:nR]
        z = np.zeros(self.num_cols)
        z[fixed] = v[nR:]
        one_sided = active & ~eq
        lower_y, upper_y = one_sided & r_lo, one_sided & r_hi
        lower_z, upper_z = at_lo & ~boxed, at_hi & ~boxed
        if (
            np.any(y[lower_y] < -SIGN_TOL)
            or np.any(y[upper_y] > SIGN_TOL)
            or np.any(z[lower_z] < -SIGN_TOL)
            or np.any(z[upper_z] > SIGN_TOL)
        ):
            return None
        y[lower_y] = np.maximum(y[lower_y], 0.0)
        y[upper_y] = np.minimum(y[upper_y], 0.0)
        z[lower_z] = np.maximum(z[lower_z], 0.0)
        z[upper_z] = np.minimum(z[upper_z], 0.0)
        if np.abs(grad - A.T @ y - z).max(initial=0.0) > FEAS_TOL * max(1.0, np.abs(grad).max(initial=0.0)):
            return None
        return QPSolution("Optimal", self.objective(x), np.clip(x, lo_c, hi_c), y, z, polished=True)

    def solve(self) -> QPSolution:
        sol = self._raw_solve()
        quadratic = bool(np.any(self._hessian))
        if not sol.optimal and quadratic and sol.status not in ("Infeasible", "Unbounded"):
            # the QP solver sometimes misses a tight tolerance; retry looser and polish
            self._set_tolerance(1e-7)
            try:
                sol = self._raw_solve()
            finally:
                self._set_tolerance(self.tolerance)
        if sol.optimal and quadratic:
            polished = self._polish(sol)
            if polished is not None:
                return polished
        elif quadratic and sol.status == "Solve error" and np.all(np.isfinite(sol.x)):
            # the solver rejected its own point on a feasibility check; it is
            # usually one active-set step from a KKT point, which polish verifies
            for tol in (ACTIVE_TOL, 1e-4, 1e-3):
                polished = self._polish(sol, tol)
                if polished is not None:
                    return polished
        return sol


def solve_qp(cost, hess_diag, rows, row_lo, row_hi, col_lo, col_hi) -> QPSolution:
    """One-shot solve; ``rows`` is a dense matrix (m, n)."""
    model = QPModel()
    model.add_vars(col_lo, col_hi, cost)
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if rows.size:
        model.add_rows(row_lo, row_hi, [(np.flatnonzero(r), r[np.flatnonzero(r)]) for r in rows])
    if np.any(np.asarray(hess_diag) != 0):
        model.set_hessian_diag(hess_diag)
    return model.solve()

"""Edge transport subproblems under a price or a resource coordination.

Edge costs are bounded quadratics ``a q^2 + b q`` on ``[q_min, q_max]``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .network import GraphTopology, build_incidence, project_onto_image
from .qp import solve_qp

log = logging.getLogger(__name__)

IMAGE_TOL = 1e-9


class EdgeUnbounded(ValueError):
    def __init__(self, edge: int, stage: int):
        super().__init__(f"edge {edge} at stage {stage}: linear cost with an open bound is unbounded below")
        self.edge, self.stage = edge, stage


@dataclass(frozen=True, eq=False)
class EdgeCosts:
    quad: np.ndarray  # (T, N_E), >= 0
    lin: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray

    def __post_init__(self):
        arrs = [np.atleast_2d(np.asarray(a, dtype=float)) for a in (self.quad, self.lin, self.q_min, self.q_max)]
        if len({a.shape for a in arrs}) != 1:
            raise ValueError("edge cost arrays must share the (T, N_E) shape")
        for name, a in zip(("quad", "lin", "q_min", "q_max"), arrs):
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if np.any(self.quad < 0):
            raise ValueError("quadratic edge coefficients must be nonnegative")
        if np.any(self.q_min > self.q_max):
            raise ValueError("edge flow bounds must satisfy q_min <= q_max")

    @classmethod
    def constant(cls, T: int, quad, lin, q_min, q_max) -> "EdgeCosts":
        rows = [np.tile(np.asarray(v, dtype=float).reshape(1, -1), (T, 1)) for v in (quad, lin, q_min, q_max)]
        return cls(*rows)

    @property
    def horizon(self) -> int:
        return self.quad.shape[0]

    @property
    def num_edges(self) -> int:
        return self.quad.shape[1]

    def stage_cost(self, t: int, q) -> float:
        q = np.asarray(q, dtype=float)
        return float(np.sum(self.quad[t] * q * q + self.lin[t] * q))

    def total_cost(self, Q) -> float:
        Q = np.asarray(Q, dtype=float)
        return float(np.sum(self.quad * Q * Q + self.lin * Q))

    def stage_lower_bound(self, t: int) -> float:
        """Sum over edges of the minimum of each edge cost on its box."""
        q = _box_minimizer(self.quad[t], self.lin[t], self.q_min[t], self.q_max[t], t)
        return float(np.sum(self.quad[t] * q * q + self.lin[t] * q))


def _box_minimizer(a, c, lo, hi, t):
    """Minimizer of a q^2 + c q over [lo, hi], edge-wise."""
    q = np.empty_like(c)
    pos = a > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        q[pos] = np.clip(-c[pos] / (2 * a[pos]), lo[pos], hi[pos])
    lin = ~pos
    q[lin] = np.where(c[lin] > 0, lo[lin], np.where(c[lin] < 0, hi[lin], np.clip(0.0, lo[lin], hi[lin])))
    bad = np.flatnonzero(lin & ~np.isfinite(q))
    if len(bad):
        raise EdgeUnbounded(int(bad[0]), t)
    return q


@dataclass
class EdgePriceSolution:
    flows: np.ndarray  # (T, N_E)
    stage_values: np.ndarray  # (T,)

    @property
    def value(self) -> float:
        return float(self.stage_values.sum())


def solve_edge_price(costs: EdgeCosts, A: np.ndarray, price) -> EdgePriceSolution:
    """Minimize ``l_t^e(q) + (A^T p_t)_e q`` independently per edge and stage."""
    price = np.asarray(price, dtype=float).reshape(costs.horizon, A.shape[0])
    coupling = price @ A  # (T, N_E)
    flows = np.empty_like(coupling)
    for t in range(costs.horizon):
        flows[t] = _box_minimizer(costs.quad[t], costs.lin[t] + coupling[t], costs.q_min[t], costs.q_max[t], t)
    vals = np.sum(costs.quad * flows**2 + (costs.lin + coupling) * flows, axis=1)
    return EdgePriceSolution(flows, vals)


@dataclass
class EdgeResourceSolution:
    flows: np.ndarray  # (T, N_E), NaN at infeasible stages
    stage_values: np.ndarray  # (T,), +inf at infeasible stages
    xi: np.ndarray  # (T, N_V)
    diagnostics: dict = field(default_factory=dict)

    @property
    def value(self) -> float:
        return float(self.stage_values.sum())

    @property
    def feasible(self) -> bool:
        return bool(np.all(np.isfinite(self.stage_values)))


def _reference_rows(topology: GraphTopology) -> np.ndarray:
    """Drop the first node of every component: the remaining rows are independent."""
    dropped = {int(c[0]) for c in topology.components()}
    return np.array([i for i in range(topology.num_nodes) if i not in dropped], dtype=np.int64)


def _active_set(a, b, lo, hi, Ar, rhs, max_iter: int = 100):
    """Primal-dual active-set iteration on the KKT system (all ``a > 0``).

    Each pass fixes the guessed active bounds, solves the reduced KKT
    system for the multipliers ``lam`` and re-guesses the active set from
    the unconstrained per-edge minimizers. Returns ``(q, lam)`` on
    convergence, ``None`` if the iteration stalls or cannot meet the
    equality rows.
    """
    D_all = 1.0 / (2.0 * a)
    unc = -b * D_all
    state = np.where(unc < lo, -1, np.where(unc > hi, 1, 0))
    seen = set()
    for _ in range(max_iter):
        key = state.tobytes()
        if key in seen:
            return None
        seen.add(key)
        free = state == 0
        q = np.where(state < 0, lo, np.where(state > 0, hi, 0.0))
        AF = Ar[:, free]
        D = D_all[free]
        target = rhs - Ar[:, ~free] @ q[~free]
        if AF.shape[1]:
            M = (AF * D) @ AF.T
            lam, *_ = np.linalg.lstsq(M, -(AF * D) @ b[free] - target, rcond=None)
        else:
            lam = np.zeros(Ar.shape[0])
        unc = -(b + Ar.T @ lam) * D_all
        q[free] = unc[free]
        new_state = np.where(unc < lo, -1, np.where(unc > hi, 1, 0))
        if np.array_equal(new_state, state):
            scale = max(1.0, float(np.abs(rhs).max(initial=0.0)))
            if np.abs(Ar @ q - rhs).max(initial=0.0) > 1e-9 * scale:
                return None
            return q, lam
        state = new_state
    return None


def _stage_resource(a, b, lo, hi, Ar, rhs):
    """Solve one stage; returns ``(q, lam, method)`` or ``None`` if infeasible."""
    if np.all(a > 0) and Ar.shape[0]:
        got = _active_set(a, b, lo, hi, Ar, rhs)
        if got is not None:
            return got[0], got[1], "active-set"
    # linear edges or a stalled active set: hand the stage to HiGHS
    sol = solve_qp(b, 2 * a, Ar, rhs, rhs, lo, hi)
    if not sol.optimal:
        return None
    return sol.x, -sol.row_dual, "highs"


def solve_edge_resource(costs: EdgeCosts, topology: GraphTopology, resource) -> EdgeResourceSolution:
    """Minimize the edge cost subject to ``A q_t = -r_t`` at every stage.

    ``xi[t]`` is the gradient of the stage value with respect to ``r_t``,
    normalized to zero sum on every connected component.
    """
    A = build_incidence(topology)
    T, N = costs.horizon, topology.num_nodes
    r = np.asarray(resource, dtype=float).reshape(T, N)
    E = topology.num_edges
    keep = _reference_rows(topology)
    Ar = A[keep]
    flows = np.full((T, E), np.nan)
    values = np.full(T, np.inf)
    xi = np.zeros((T, N))
    diag: dict = {"not_in_image": [], "infeasible": []}
    for t in range(T):
        scale = max(1.0, float(np.abs(r[t]).max(initial=0.0)))
        if np.abs(project_onto_image(r[t][None, :], topology) - r[t]).max(initial=0.0) > IMAGE_TOL * scale:
            diag["not_in_image"].append(t)
            continue
        if E == 0:
            flows[t], values[t] = np.zeros(0), 0.0
            continue
        a, b = costs.quad[t], costs.lin[t]
        lo, hi = costs.q_min[t], costs.q_max[t]
        rhs = -r[t][keep]
        got = _stage_resource(a, b, lo, hi, Ar, rhs)
        if got is None:
            diag["infeasible"].append(t)
            continue
        q, lam, method = got
        diag.setdefault("methods", []).append(method)
        full = np.zeros(N)
        full[keep] = lam
        xi[t] = project_onto_image(full[None, :], topology)[0]
        flows[t] = q
        values[t] = float(np.sum(a * q * q + b * q))
    if diag["not_in_image"]:
        log.debug("resource not in im(A) at stages %s", diag["not_in_image"])
    return EdgeResourceSolution(flows, values, xi, diag)

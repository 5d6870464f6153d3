"""Brute-force hazard-decision optimum over the full scenario tree.

States are propagated exactly (no grid), controls range over the supplied
grids and the network flows are optimized in closed form for at most one
edge, or enumerated on a flow grid otherwise. Only meant for tiny instances.
"""

from __future__ import annotations

import itertools
from functools import lru_cache

import numpy as np

from .instance import Instance, NodeGrids
from .nodal_dp import ControlGrid
from .prosumer import terminal_cost

MAX_EVALUATIONS = 10**7
BOUND_TOL = 1e-9


class OracleTooLarge(RuntimeError):
    def __init__(self, count: int, limit: int = MAX_EVALUATIONS):
        super().__init__(f"exhaustive enumeration needs {count} evaluations (limit {limit})")
        self.count, self.limit = count, limit


def _controls(grids) -> list[ControlGrid]:
    return [g.controls if isinstance(g, NodeGrids) else g for g in grids]


def _node_pairs(cg: ControlGrid) -> np.ndarray:
    ub, ut = np.meshgrid(cg.battery_values(), cg.heating, indexing="ij")
    return np.column_stack([ub.ravel(), ut.ravel()])


def evaluation_count(instance: Instance, grids, flow_grid=None) -> int:
    T = instance.horizon
    support = [instance.noise.support_size(t) for t in range(T)]
    combos = int(np.prod([len(_node_pairs(c)) for c in _controls(grids)], dtype=object))
    if instance.num_edges > 1:
        combos *= len(flow_grid) ** instance.num_edges
    tree, width = 0, 1
    for t in range(T):
        width *= support[t]
        tree += width
    return int(tree * combos)


def _flow_cost_single(instance, t, c, dt, prices, umax):
    """Min over the single edge flow for every control combination.

    ``c[k, i] = d_el/dt + u_b + u_t`` so that ``u_ne_i = c_i - (A q)_i``.
    """
    ec = instance.edge_costs
    (tail, head), = instance.topology.edges
    a, b = ec.quad[t, 0], ec.lin[t, 0]
    lo = np.maximum.reduce([np.full(len(c), ec.q_min[t, 0]), c[:, tail] - umax[tail], -c[:, head]])
    hi = np.minimum.reduce([np.full(len(c), ec.q_max[t, 0]), c[:, tail], umax[head] - c[:, head]])
    slope = b + dt * (prices[head] - prices[tail])
    if a > 0:
        q = np.clip(-slope / (2 * a), lo, hi)
    else:
        q = np.where(slope > 0, lo, hi)
    feasible = lo <= hi + BOUND_TOL
    q = np.where(feasible, q, 0.0)
    u_ne = c.copy()
    u_ne[:, tail] -= q
    u_ne[:, head] += q
    others = np.ones(c.shape[1], dtype=bool)
    others[[tail, head]] = False
    feasible &= np.all((u_ne[:, others] >= -BOUND_TOL) & (u_ne[:, others] <= umax[others] + BOUND_TOL), axis=1)
    cost = dt * u_ne @ prices + a * q * q + b * q
    return np.where(feasible, cost, np.inf)


def _flow_cost_grid(instance, t, c, dt, prices, umax, flow_grid):
    ec = instance.edge_costs
    A = instance.incidence()
    E = instance.num_edges
    qs = np.array(list(itertools.product(flow_grid, repeat=E)))
    ok_q = np.all((qs >= ec.q_min[t] - BOUND_TOL) & (qs <= ec.q_max[t] + BOUND_TOL), axis=1)
    qs = qs[ok_q]
    edge_cost = (qs * qs) @ ec.quad[t] + qs @ ec.lin[t]
    u_ne = c[:, None, :] - (qs @ A.T)[None, :, :]
    feasible = np.all((u_ne >= -BOUND_TOL) & (u_ne <= umax + BOUND_TOL), axis=2)
    cost = dt * u_ne @ prices + edge_cost[None, :]
    return np.where(feasible, cost, np.inf).min(axis=1)


def _flow_cost_none(c, dt, prices, umax):
    feasible = np.all((c >= -BOUND_TOL) & (c <= umax + BOUND_TOL), axis=1)
    return np.where(feasible, dt * c @ prices, np.inf)


def exhaustive_solve(
    instance: Instance,
    grids,
    x0=None,
    flow_grid=None,
    max_evaluations: int = MAX_EVALUATIONS,
) -> float:
    """Exact optimal expected cost of the control-grid restricted problem.

    ``grids`` holds one :class:`ControlGrid` (or :class:`NodeGrids`) per
    node. With more than one edge the flows range over ``flow_grid`` on every
    edge.
    """
    if instance.num_edges > 1 and flow_grid is None:
        raise ValueError("a flow grid is required with more than one edge")
    count = evaluation_count(instance, grids, flow_grid)
    if count > max_evaluations:
        raise OracleTooLarge(count, max_evaluations)
    controls = _controls(grids)
    nodes = instance.nodes
    N, T, dt = instance.num_nodes, instance.horizon, instance.dt
    x_init = tuple(np.asarray(x, dtype=float) for x in (x0 if x0 is not None else instance.x0))
    pairs = [_node_pairs(c) for c in controls]
    combo_idx = np.array(list(itertools.product(*(range(len(p)) for p in pairs))))
    ub = np.column_stack([pairs[i][combo_idx[:, i], 0] for i in range(N)])
    ut = np.column_stack([pairs[i][combo_idx[:, i], 1] for i in range(N)])
    umax = np.array([n.import_max for n in nodes])
    stage_atoms = []
    for t in range(T):
        laws = [instance.noise.law(t, i) for i in range(N)]
        joint = []
        for combo in itertools.product(*(range(l.size) for l in laws)):
            prob = float(np.prod([laws[i].probabilities[a] for i, a in enumerate(combo)]))
            if prob > 0:
                joint.append((prob, np.array([laws[i].atoms[a] for i, a in enumerate(combo)])))
        stage_atoms.append(joint)

    def key(states):
        return tuple(tuple(np.round(s, 12)) for s in states)

    @lru_cache(maxsize=None)
    def value(t, state_key):
        states = [np.array(s) for s in state_key]
        if t == T:
            return float(sum(terminal_cost(n.tank, s) for n, s in zip(nodes, states)))
        total = 0.0
        prices = np.array([n.import_price[t] for n in nodes])
        for prob, w in stage_atoms[t]:
            d_hw, d_el = w[:, 0], w[:, 1]
            nxt, ok = [], np.ones(len(combo_idx), dtype=bool)
            for i, n in enumerate(nodes):
                h = n.tank.conduction_loss * states[i][-1] + dt * n.tank.conversion * ut[:, i] - d_hw[i]
                ok &= (h >= n.tank.h_min - BOUND_TOL) & (h <= n.tank.h_max + BOUND_TOL)
                if n.battery is not None:
                    bat = n.battery
                    u = ub[:, i]
                    b = bat.auto_discharge * states[i][0] + dt * (
                        bat.charge_yield * np.maximum(u, 0) - np.maximum(-u, 0) / bat.discharge_yield
                    )
                    ok &= (b >= bat.b_min - BOUND_TOL) & (b <= bat.b_max + BOUND_TOL)
                    nxt.append(np.column_stack([b, h]))
                else:
                    nxt.append(h[:, None])
            c = d_el[None, :] / dt + ub + ut
            if instance.num_edges == 0:
                cost = _flow_cost_none(c, dt, prices, umax)
            elif instance.num_edges == 1:
                cost = _flow_cost_single(instance, t, c, dt, prices, umax)
            else:
                cost = _flow_cost_grid(instance, t, c, dt, prices, umax, np.asarray(flow_grid, dtype=float))
            cost = np.where(ok, cost, np.inf)
            best = np.inf
            for k in np.flatnonzero(np.isfinite(cost)):
                cont = value(t + 1, key([nxt[i][k] for i in range(N)]))
                best = min(best, cost[k] + cont)
            if not np.isfinite(best):
                return np.inf
            total += prob * best
        return total

    return value(0, key(x_init))

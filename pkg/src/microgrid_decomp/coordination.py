"""Outer coordination loops: price ascent (lower bound) and resource descent (upper bound).

Both loops minimize a deterministic function of the coordination vector:
``-LB(p)`` for prices and ``UB(r)`` for resources. Values are exact DP
values; gradients are Monte Carlo (prices, common random numbers) or finite
differences (resources). A step is accepted only if it passes an Armijo test
on the exact values, so accepted bounds are monotone.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .edges import solve_edge_price, solve_edge_resource
from .instance import Instance, NodeGrids, make_grids
from .nodal_dp import (
    NodalInfeasibility,
    TabularValueFunction,
    evaluate,
    resource_gradient,
    simulate_nodal,
    solve_price_dp,
    solve_resource_dp,
)
from .network import project_onto_image
from .uncertainty import sample_scenarios

log = logging.getLogger(__name__)

ARMIJO = 1e-4
WOLFE = 0.9
SANDWICH_TOL = 1e-6


@dataclass(frozen=True)
class CoordinationOptions:
    mode: str = "quasi-newton"  # or "gradient"
    initial_step: float = 1.0
    grad_tol: float = 1e-3
    value_tol: float = 1e-5
    stall_window: int = 5
    max_iters: int = 100
    mc_samples: int = 1000
    seed: int = 0
    max_halvings: int = 20
    memory: int = 10
    nodal_gradient: str = "finite-difference"  # or "envelope"
    fd_step: float = 1e-2

    def __post_init__(self):
        if self.mode not in ("quasi-newton", "gradient"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.nodal_gradient not in ("finite-difference", "envelope"):
            raise ValueError(f"unknown nodal gradient {self.nodal_gradient!r}")
        for name in ("initial_step", "grad_tol", "value_tol", "fd_step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_iters < 1 or self.stall_window < 1 or self.mc_samples < 1 or self.memory < 1:
            raise ValueError("iteration cap, stall window, sample count and memory must be >= 1")


@dataclass
class TraceRow:
    iteration: int
    bound: float
    grad_norm: float
    step: float
    wall_time: float


@dataclass
class DescentResult:
    x: np.ndarray
    value: float
    grad: Optional[np.ndarray]
    trace: list[TraceRow]
    iterations: int
    stop_reason: str
    best_x: np.ndarray
    best_value: float
    best_context: object = None


class _Lbfgs:
    def __init__(self, memory: int):
        self.pairs: deque = deque(maxlen=memory)

    def direction(self, g: np.ndarray) -> np.ndarray:
        q = g.copy()
        alphas = []
        for s, y, rho in reversed(self.pairs):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if self.pairs:
            s, y, _ = self.pairs[-1]
            q *= (s @ y) / (y @ y)
        for (s, y, rho), a in zip(self.pairs, reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        return -q

    def update(self, s, y) -> None:
        sy = s @ y
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            self.pairs.append((s, y, 1.0 / sy))

    def reset(self) -> None:
        self.pairs.clear()


def descent_loop(
    fun: Callable[[np.ndarray], tuple[float, object]],
    grad: Callable[[np.ndarray, object], np.ndarray],
    x0,
    opts: CoordinationOptions,
    project: Callable[[np.ndarray], np.ndarray] | None = None,
    sign: float = 1.0,
) -> DescentResult:
    """Minimize ``fun`` from ``x0``; ``project`` keeps iterates in a subspace.

    ``fun`` returns ``(value, context)`` and ``grad(x, context)`` the
    gradient, computed only at points that pass the sufficient-decrease
    test. ``sign`` only affects how bounds are written to the trace.
    """
    project = project or (lambda v: v)
    start = time.perf_counter()
    x = project(np.asarray(x0, dtype=float).ravel())
    f, ctx = fun(x)
    best = (x, f, ctx)

    def consider(xv, fv, cv):
        nonlocal best
        if fv < best[1]:
            best = (xv, fv, cv)

    trace: list[TraceRow] = []
    if not math.isfinite(f):
        trace.append(TraceRow(0, sign * f, math.nan, 0.0, time.perf_counter() - start))
        return DescentResult(x, f, None, trace, 0, "infeasible start", x, f, ctx)
    g = project(grad(x, ctx))
    trace.append(TraceRow(0, sign * f, float(np.abs(g).max(initial=0.0)), 0.0, time.perf_counter() - start))
    history = [f]
    qn = _Lbfgs(opts.memory)
    last_step = None
    reason = "iteration cap"
    k = 0
    for k in range(1, opts.max_iters + 1):
        if np.abs(g).max(initial=0.0) <= opts.grad_tol:
            reason, k = "gradient tolerance", k - 1
            break
        if opts.mode == "quasi-newton" and qn.pairs:
            d = project(qn.direction(g))
            if g @ d >= 0:
                qn.reset()
                d = -g
            alpha = 1.0
        else:
            d = -g
            alpha = opts.initial_step if last_step is None else 2.0 * last_step
            if opts.mode == "quasi-newton" and last_step is not None:
                alpha = last_step
        slope = float(g @ d)
        lo, hi = 0.0, math.inf
        accepted = None
        for _ in range(opts.max_halvings + 1):
            x_try = project(x + alpha * d)
            f_try, c_try = fun(x_try)
            consider(x_try, f_try, c_try)
            if not (f_try <= f + ARMIJO * alpha * slope) or not math.isfinite(f_try):
                hi = alpha
                alpha = 0.5 * (lo + hi)
                continue
            if opts.mode == "gradient":
                accepted = (alpha, x_try, f_try, c_try, None)
                break
            g_try = project(grad(x_try, c_try))
            accepted = (alpha, x_try, f_try, c_try, g_try)
            if g_try @ d >= WOLFE * slope:
                break
            # Armijo holds but the curvature test fails: look further out
            lo = alpha
            alpha = 2.0 * alpha if math.isinf(hi) else 0.5 * (lo + hi)
        if accepted is None:
            reason, k = "no descent step found", k - 1
            break
        alpha, x_new, f_new, ctx, g_new = accepted
        if g_new is None:
            g_new = project(grad(x_new, ctx))
        qn.update(x_new - x, g_new - g)
        x, f, g, last_step = x_new, f_new, g_new, alpha
        history.append(f)
        trace.append(TraceRow(k, sign * f, float(np.abs(g).max(initial=0.0)), alpha, time.perf_counter() - start))
        w = opts.stall_window
        if len(history) > w and abs(history[-1] - history[-1 - w]) <= opts.value_tol * max(1.0, abs(f)):
            reason = "stalled"
            break
    return DescentResult(x, f, g, trace, k, reason, best[0], best[1], best[2])


@dataclass
class CoordinationResult:
    kind: str  # "dadp" or "padp"
    coordination: np.ndarray  # (T, N_V) best evaluated price or resource
    bound: float
    node_values: np.ndarray  # per-node value at x0
    edge_value: float
    value_functions: list[list[TabularValueFunction]]
    trace: list[TraceRow]
    iterations: int
    stop_reason: str
    edge_flows: Optional[np.ndarray] = None
    xi: Optional[np.ndarray] = None
    mu: Optional[np.ndarray] = None
    edge_stage_values: Optional[np.ndarray] = None  # (T,) edge term per stage
    extra: dict = field(default_factory=dict)

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "bound", "grad_norm", "step", "wall_time"])
            for row in self.trace:
                w.writerow([row.iteration, repr(row.bound), repr(row.grad_norm), repr(row.step), f"{row.wall_time:.3f}"])


def _laws(instance: Instance, i: int):
    return instance.noise.node_laws(i)


def dadp_run(
    instance: Instance,
    opts: CoordinationOptions = CoordinationOptions(),
    grids: list[NodeGrids] | None = None,
    x0=None,
    p0=None,
) -> CoordinationResult:
    """Maximize the price lower bound ``sum_i V_i[p](x0_i) + V_edges[p]``."""
    grids = grids or make_grids(instance)
    x0 = instance.x0 if x0 is None else x0
    T, N = instance.horizon, instance.num_nodes
    A = instance.incidence()
    _, noise_vals = sample_scenarios(instance.noise, opts.mc_samples, opts.seed)

    def fun(pv):
        p = pv.reshape(T, N)
        vfs, vals = [], np.empty(N)
        for i, node in enumerate(instance.nodes):
            v = solve_price_dp(node, _laws(instance, i), p[:, i], grids[i].state, grids[i].controls)
            vals[i] = evaluate(v[0], x0[i])
            if not math.isfinite(vals[i]):
                raise NodalInfeasibility(f"price subproblem of node {i + 1} is infeasible at x0")
            vfs.append(v)
        edge = solve_edge_price(instance.edge_costs, A, p)
        lb = float(vals.sum() + edge.value)
        return -lb, (vfs, vals, edge)

    def grad(pv, ctx):
        p = pv.reshape(T, N)
        vfs, _, edge = ctx
        mean_flow = np.empty((T, N))
        for i, node in enumerate(instance.nodes):
            sim = simulate_nodal(node, vfs[i], p[:, i], noise_vals[:, :, i, :], x0[i], grids[i].controls)
            if sim.flagged_count == opts.mc_samples:
                raise NodalInfeasibility(f"every rollout of node {i + 1} hit an infeasible state")
            mean_flow[:, i] = sim.mean_flow
        # ascent direction of the bound, negated for the minimizer
        return -(mean_flow + edge.flows @ A.T).ravel()

    start = np.zeros(T * N) if p0 is None else np.asarray(p0, dtype=float).ravel()
    res = descent_loop(fun, grad, start, opts, sign=-1.0)
    vfs, vals, edge = res.best_context
    return CoordinationResult(
        "dadp",
        res.best_x.reshape(T, N),
        -res.best_value,
        vals,
        edge.value,
        vfs,
        res.trace,
        res.iterations,
        res.stop_reason,
        edge_flows=edge.flows,
        edge_stage_values=edge.stage_values,
    )


def envelope_resource_gradient(node, resource) -> np.ndarray:
    """Derivative of the nodal resource value where it is differentiable.

    The import is ``r_t`` plus terms independent of ``r``, so away from
    feasibility switches the value moves by ``price_t * dt`` per unit.
    """
    return np.asarray(node.import_price, dtype=float) * node.dt * np.ones_like(np.asarray(resource, dtype=float))


def padp_run(
    instance: Instance,
    opts: CoordinationOptions = CoordinationOptions(),
    grids: list[NodeGrids] | None = None,
    x0=None,
    r0=None,
) -> CoordinationResult:
    """Minimize the resource upper bound over ``r`` in im(A), starting from ``r = 0``."""
    grids = grids or make_grids(instance)
    x0 = instance.x0 if x0 is None else x0
    T, N = instance.horizon, instance.num_nodes
    topo = instance.topology

    def project(v):
        return project_onto_image(v.reshape(T, N), topo).ravel()

    def fun(rv):
        r = rv.reshape(T, N)
        vfs, vals = [], np.empty(N)
        for i, node in enumerate(instance.nodes):
            v = solve_resource_dp(node, _laws(instance, i), r[:, i], grids[i].state, grids[i].controls)
            vals[i] = evaluate(v[0], x0[i])
            vfs.append(v)
        if not np.all(np.isfinite(vals)):
            return math.inf, (vfs, vals, None)
        edge = solve_edge_resource(instance.edge_costs, topo, r)
        return float(vals.sum() + edge.value), (vfs, vals, edge)

    def node_gradient(rv, ctx):
        r = rv.reshape(T, N)
        vfs = ctx[0]
        mu = np.empty((T, N))
        for i, node in enumerate(instance.nodes):
            env = envelope_resource_gradient(node, r[:, i])
            if opts.nodal_gradient == "envelope":
                mu[:, i] = env
                continue
            fd = resource_gradient(
                node,
                _laws(instance, i),
                r[:, i],
                grids[i].state,
                x0[i],
                h=opts.fd_step,
                controls=grids[i].controls,
                base_tables=[v.values for v in vfs[i]],
                on_boundary="nan",
            )
            mu[:, i] = np.where(np.isnan(fd), env, fd)
        return mu

    def grad(rv, ctx):
        return (node_gradient(rv, ctx) + ctx[2].xi).ravel()

    start = np.zeros(T * N) if r0 is None else np.asarray(r0, dtype=float).ravel()
    res = descent_loop(fun, grad, start, opts, project=project)
    vfs, vals, edge = res.best_context
    mu = node_gradient(res.best_x, res.best_context) if math.isfinite(res.best_value) else None
    return CoordinationResult(
        "padp",
        res.best_x.reshape(T, N),
        res.best_value,
        vals,
        edge.value if edge is not None else math.inf,
        vfs,
        res.trace,
        res.iterations,
        res.stop_reason,
        edge_flows=None if edge is None else edge.flows,
        xi=None if edge is None else edge.xi,
        mu=mu,
        edge_stage_values=None if edge is None else edge.stage_values,
    )


def bounds_report(dadp: CoordinationResult, padp: CoordinationResult, tol: float = SANDWICH_TOL) -> dict:
    """Lower bound, upper bound and relative gap; flags a violated sandwich."""
    lower, upper = dadp.bound, padp.bound
    gap = (upper - lower) / max(1.0, abs(lower)) if math.isfinite(upper) else math.inf
    ok = lower <= upper + tol * max(1.0, abs(lower))
    if not ok:
        log.error("lower bound %.9g exceeds upper bound %.9g: solver bug", lower, upper)
    return {"lower": lower, "upper": upper, "gap": gap, "sandwich_ok": bool(ok)}

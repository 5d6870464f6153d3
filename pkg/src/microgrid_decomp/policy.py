"""Online policies induced by value-function stacks, and their Monte Carlo evaluation.

At time ``t`` the policy minimizes stage cost plus the stack's value of the
next global state, subject to the dynamics, nodal balance and Kirchhoff's
law. For cut stacks this is the SDDP stage problem. For sums of nodal
tables each node's one-step cost is tabulated as a function of its
injection, convexified, and coupled through a small flow problem over the
edge flows. The node controls are then re-selected exactly at the
injections implied by the optimal flows, so every step is admissible.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .coordination import CoordinationResult
from .instance import Instance, NodeGrids, make_grids
from .nodal_dp import TabularValueFunction, continuation_values, evaluate
from .prosumer import next_state, terminal_cost
from .qp import QPModel
from .sddp import SddpError, SddpPolicy, SddpResult
from .uncertainty import sample_scenarios

INJECTION_POINTS = 41
ADMISSIBLE_TOL = 1e-9
SELECT_TOL = 1e-9
MAX_REFINE_ROUNDS = 20
KINDS = ("sddp", "dadp", "padp")


class PolicyInfeasible(RuntimeError):
    pass


@dataclass
class GlobalValueStack:
    """Approximate global value functions ``V_t``, t = 0..T.

    ``sddp``: ``pools[t]`` are cut pools (the last stage is exact).
    ``dadp`` / ``padp``: ``tables[i][t]`` are nodal tables, and
    ``edge_stage_values[t]`` is the edge term paid at stage ``t``.
    """

    kind: str
    pools: list | None = None
    tables: list[list[TabularValueFunction]] | None = None
    edge_stage_values: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown stack kind {self.kind!r}")
        if self.kind == "sddp" and self.pools is None:
            raise ValueError("a cut stack needs its pools")
        if self.kind != "sddp" and self.tables is None:
            raise ValueError("a nodal stack needs its tables")

    @classmethod
    def from_sddp(cls, result: SddpResult) -> "GlobalValueStack":
        return cls("sddp", pools=result.pools)

    @classmethod
    def from_coordination(cls, result: CoordinationResult) -> "GlobalValueStack":
        return cls(result.kind, tables=result.value_functions, edge_stage_values=result.edge_stage_values)

    def value(self, instance: Instance, t: int, x) -> float:
        """``V_t(x)`` for ``1 <= t <= T`` (cut stacks) or ``0 <= t <= T`` (nodal stacks)."""
        x = np.asarray(x, dtype=float)
        parts = [x[s] for s in instance.state_slices()]
        if self.kind == "sddp":
            if t == instance.horizon:
                return float(sum(terminal_cost(n.tank, p) for n, p in zip(instance.nodes, parts)))
            pool = self.pools[t]
            if pool is None:
                raise ValueError(f"no cut pool at stage {t}")
            return pool.evaluate(x)
        total = sum(evaluate(vfs[t], p) for vfs, p in zip(self.tables, parts))
        if self.edge_stage_values is not None:
            total += float(np.sum(self.edge_stage_values[t:]))
        return float(total)


@dataclass
class PolicyStep:
    import_power: np.ndarray
    battery: np.ndarray
    heating: np.ndarray
    flows: np.ndarray  # edge flows q
    injections: np.ndarray  # node flows f = -A q
    cost: float  # stage cost (imports and edges)
    x_next: np.ndarray


def _lower_hull(xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vertices of the lower convex hull of points sorted by ``xs``."""
    hx: list[float] = []
    hy: list[float] = []
    for x, y in zip(xs, ys):
        while len(hx) >= 2 and (hy[-1] - hy[-2]) * (x - hx[-2]) >= (y - hy[-2]) * (hx[-1] - hx[-2]):
            hx.pop()
            hy.pop()
        hx.append(float(x))
        hy.append(float(y))
    return np.array(hx), np.array(hy)


@dataclass
class _NodeCandidates:
    """One-step data of a node for every grid control pair."""

    u_b: np.ndarray  # (K,)
    u_t: np.ndarray
    offset: np.ndarray  # u_ne = f + offset
    future: np.ndarray  # continuation value, +inf if infeasible
    price: float  # import price * dt
    import_max: float
    myopic: bool  # continuation ignored (all infinite)

    def interval(self):
        return -self.offset, self.import_max - self.offset

    def cost_at(self, f) -> np.ndarray:
        """Best cost at each injection in ``f`` and the index of the control achieving it."""
        f = np.atleast_1d(np.asarray(f, dtype=float))
        lo, hi = self.interval()
        ok = (f[:, None] >= lo[None, :] - SELECT_TOL) & (f[:, None] <= hi[None, :] + SELECT_TOL)
        ok &= np.isfinite(self.future)[None, :]
        c = self.price * (f[:, None] + self.offset[None, :]) + self.future[None, :]
        c = np.where(ok, c, np.inf)
        k = c.argmin(axis=1)
        return c[np.arange(len(f)), k], k


def _node_candidates(instance, i, t, x_i, w_i, vf_next, controls) -> _NodeCandidates:
    node = instance.nodes[i]
    dt = node.dt
    ub_axis = controls.battery_values()
    ub, ut = np.meshgrid(ub_axis, controls.heating, indexing="ij")
    ub, ut = ub.ravel(), ut.ravel()
    nxt = next_state(node, np.broadcast_to(x_i, (len(ub), len(x_i))), ub, ut, w_i[0])
    lo, hi = node.state_bounds()
    physical = np.all((nxt >= lo - ADMISSIBLE_TOL) & (nxt <= hi + ADMISSIBLE_TOL), axis=1)
    future = continuation_values(node, vf_next, x_i, w_i[0], controls).reshape(-1)
    myopic = False
    if physical.any() and not np.isfinite(future[physical]).any():
        # the table gives no guidance from here; rank controls by stage cost alone
        future = np.zeros_like(future)
        myopic = True
    future = np.where(physical, future, np.inf)
    offset = w_i[1] / dt + ub + ut
    return _NodeCandidates(ub, ut, offset, future, node.import_price[t] * dt, node.import_max, myopic)


@dataclass
class _InjectionModel:
    """Lower convex envelope of a node's one-step cost as a function of its injection."""

    fx: np.ndarray  # hull vertices
    fy: np.ndarray

    @property
    def domain(self) -> tuple[float, float]:
        return float(self.fx[0]), float(self.fx[-1])

    def pieces(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self.fx) == 1:
            return np.zeros(1), self.fy.copy()
        slopes = np.diff(self.fy) / np.diff(self.fx)
        return slopes, self.fy[:-1] - slopes * self.fx[:-1]

    def __call__(self, f: float) -> float:
        return float(np.interp(f, self.fx, self.fy))


def _injection_model(cand: _NodeCandidates, points: int) -> _InjectionModel | None:
    lo, hi = cand.interval()
    finite = np.isfinite(cand.future)
    if not finite.any():
        return None
    f_lo, f_hi = float(lo[finite].min()), float(hi[finite].max())
    grid = np.linspace(f_lo, f_hi, points) if f_hi > f_lo else np.array([f_lo])
    # the cost is affine with a common slope between interval ends, so adding
    # the ends makes the hull the exact convex envelope
    ends = np.concatenate([lo[finite], hi[finite]])
    grid = np.unique(np.concatenate([grid, ends[(ends >= f_lo) & (ends <= f_hi)]]))
    vals, _ = cand.cost_at(grid)
    keep = np.isfinite(vals)
    return _InjectionModel(*_lower_hull(grid[keep], vals[keep]))


def _solve_flows(instance: Instance, t: int, models: list[_InjectionModel]) -> np.ndarray:
    """Edge flows minimizing edge costs plus the convexified nodal costs of ``f = -A q``."""
    A = instance.incidence()
    ec = instance.edge_costs
    N = instance.num_nodes
    m = QPModel()
    q = m.add_vars(ec.q_min[t], ec.q_max[t], ec.lin[t])
    z = m.add_vars(np.full(N, -np.inf), np.full(N, np.inf), np.ones(N))
    rows, lo, hi = [], [], []
    for i, model in enumerate(models):
        es = np.flatnonzero(A[i])
        f_lo, f_hi = model.domain
        # domain: f_lo <= -(A q)_i <= f_hi
        rows.append(([int(q[e]) for e in es], [A[i, e] for e in es]))
        lo.append(-f_hi)
        hi.append(-f_lo)
        # epigraph: z_i >= s f_i + c  with  f_i = -(A q)_i
        for s_, c in zip(*model.pieces()):
            rows.append(([int(z[i])] + [int(q[e]) for e in es], [1.0] + [s_ * A[i, e] for e in es]))
            lo.append(c)
            hi.append(np.inf)
    m.add_rows(lo, hi, rows)
    hess = np.zeros(m.num_cols)
    hess[q] = 2.0 * ec.quad[t]
    if np.any(hess):
        m.set_hessian_diag(hess)
    sol = m.solve()
    if not sol.optimal:
        raise PolicyInfeasible(f"stage {t}: flow problem is {sol.status}")
    return sol.x[q]


def _exact_objective(instance: Instance, t: int, cands, q) -> tuple[float, list[int]]:
    ec = instance.edge_costs
    f = -(instance.incidence() @ q)
    total = float(np.sum(ec.quad[t] * q * q + ec.lin[t] * q))
    picks = []
    for c, fi in zip(cands, f):
        val, k = c.cost_at(fi)
        total += float(val[0])
        picks.append(int(k[0]))
    return total, picks


def _fixed_control_flows(instance: Instance, t: int, cands, picks) -> np.ndarray | None:
    """Optimal flows once every node's control is fixed.

    The import, hence the node cost, is then affine in the injection on the
    control's feasible interval, so the problem is convex.
    """
    A = instance.incidence()
    ec = instance.edge_costs
    m = QPModel()
    qv = m.add_vars(ec.q_min[t], ec.q_max[t], ec.lin[t] - A.T @ np.array([c.price for c in cands]))
    rows, lo, hi = [], [], []
    for i, (c, k) in enumerate(zip(cands, picks)):
        es = np.flatnonzero(A[i])
        rows.append(([int(qv[e]) for e in es], [A[i, e] for e in es]))
        lo.append(c.offset[k] - c.import_max)
        hi.append(c.offset[k])
    m.add_rows(lo, hi, rows)
    if np.any(ec.quad[t]):
        m.set_hessian_diag(2.0 * ec.quad[t])
    sol = m.solve()
    return sol.x if sol.optimal else None


def _refine_flows(instance: Instance, t: int, cands, models, q, max_rounds: int = MAX_REFINE_ROUNDS) -> np.ndarray:
    """Local improvement of the flows on the exact (nonconvex) one-step cost.

    Alternates between picking each node's best control at its current
    injection and re-optimizing the flows with those controls fixed. When
    that stalls, a node whose exact cost lies above its envelope may switch
    to the control realizing a neighbouring envelope vertex.
    """
    A = instance.incidence()
    best, picks = _exact_objective(instance, t, cands, q)
    if not math.isfinite(best):
        return q

    def improves(value):
        return value < best - 1e-12 * max(1.0, abs(best))

    for _ in range(max_rounds):
        q_new = _fixed_control_flows(instance, t, cands, picks)
        if q_new is not None:
            value, new_picks = _exact_objective(instance, t, cands, q_new)
            if improves(value):
                q, best, picks = q_new, value, new_picks
                continue
        moved = False
        f = -(A @ q)
        for i, (c, model) in enumerate(zip(cands, models)):
            if c.cost_at(f[i])[0][0] <= model(f[i]) + 1e-12:
                continue
            j = int(np.searchsorted(model.fx, f[i]))
            for v in {max(j - 1, 0), min(j, len(model.fx) - 1)}:
                alt = list(picks)
                alt[i] = int(c.cost_at(model.fx[v])[1][0])
                q_alt = _fixed_control_flows(instance, t, cands, alt)
                if q_alt is None:
                    continue
                value, alt_picks = _exact_objective(instance, t, cands, q_alt)
                if improves(value):
                    q, best, picks, moved = q_alt, value, alt_picks, True
        if not moved:
            break
    return q


def one_step_policy(
    instance: Instance,
    stack: GlobalValueStack,
    t: int,
    x,
    w,
    grids: list[NodeGrids] | None = None,
    sddp_policy: SddpPolicy | None = None,
    injection_points: int = INJECTION_POINTS,
) -> PolicyStep:
    """Admissible controls at stage ``t`` for global state ``x`` and noise ``w`` (N_V, 2)."""
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float).reshape(instance.num_nodes, 2)
    A = instance.incidence()
    slices = instance.state_slices()
    if stack.kind == "sddp":
        policy = sddp_policy or SddpPolicy(instance, stack.pools)
        try:
            sol = policy.solve(t, x, w)
        except SddpError as exc:
            raise PolicyInfeasible(str(exc)) from exc
        q = sol.flows
        f = -(A @ q) if instance.num_edges else np.zeros(instance.num_nodes)
        u_b, u_t = sol.battery.copy(), sol.heating.copy()
        u_ne = f + w[:, 1] / instance.dt + u_b + u_t
    else:
        grids = grids or make_grids(instance)
        cands = []
        for i in range(instance.num_nodes):
            vf_next = stack.tables[i][t + 1]
            cands.append(_node_candidates(instance, i, t, x[slices[i]], w[i], vf_next, grids[i].controls))
        if instance.num_edges:
            models = [_injection_model(c, injection_points) for c in cands]
            for i, mdl in enumerate(models):
                if mdl is None:
                    raise PolicyInfeasible(f"stage {t}: node {i + 1} has no feasible control at state {x[slices[i]]}")
            q = _refine_flows(instance, t, cands, models, _solve_flows(instance, t, models))
            f = -(A @ q)
        else:
            q = np.zeros(0)
            f = np.zeros(instance.num_nodes)
        u_ne, u_b, u_t = (np.empty(instance.num_nodes) for _ in range(3))
        for i, c in enumerate(cands):
            val, k = c.cost_at(f[i])
            if not np.isfinite(val[0]):
                raise PolicyInfeasible(f"stage {t}: no control of node {i + 1} realizes injection {f[i]:.6g}")
            k = int(k[0])
            u_b[i], u_t[i] = c.u_b[k], c.u_t[k]
            u_ne[i] = f[i] + c.offset[k]
    x_next = np.concatenate(
        [next_state(n, x[s], u_b[i], u_t[i], w[i, 0]).ravel() for i, (n, s) in enumerate(zip(instance.nodes, slices))]
    )
    ec = instance.edge_costs
    cost = float(
        sum(n.import_price[t] * n.dt * u for n, u in zip(instance.nodes, u_ne))
        + (np.sum(ec.quad[t] * q * q + ec.lin[t] * q) if len(q) else 0.0)
    )
    return PolicyStep(u_ne, u_b, u_t, q, f, cost, x_next)


def admissibility_violation(instance: Instance, t: int, x, w, step: PolicyStep) -> float:
    """Largest violation of balance, Kirchhoff or a bound by one policy step."""
    w = np.asarray(w, dtype=float).reshape(instance.num_nodes, 2)
    A = instance.incidence()
    ec = instance.edge_costs
    viol = [0.0]
    kirchhoff = A @ step.flows + step.injections if instance.num_edges else step.injections
    viol.append(float(np.abs(kirchhoff).max()))
    balance = step.import_power - w[:, 1] / instance.dt - step.battery - step.heating - step.injections
    viol.append(float(np.abs(balance).max()))
    for i, node in enumerate(instance.nodes):
        viol += [-step.import_power[i], step.import_power[i] - node.import_max]
        viol += [-step.heating[i], step.heating[i] - node.tank.u_max]
        if node.battery is not None:
            viol += [node.battery.u_min - step.battery[i], step.battery[i] - node.battery.u_max]
        elif step.battery[i] != 0:
            viol.append(abs(step.battery[i]))
        lo, hi = node.state_bounds()
        xn = step.x_next[instance.state_slices()[i]]
        viol += list(lo - xn) + list(xn - hi)
    if instance.num_edges:
        viol += list(ec.q_min[t] - step.flows) + list(step.flows - ec.q_max[t])
    return float(max(viol))


@dataclass
class SimulationReport:
    mean: float
    half_width: float
    costs: np.ndarray  # NaN for flagged scenarios
    flagged: int
    max_violation: float
    kind: str = ""

    @property
    def n(self) -> int:
        return len(self.costs)

    def summary(self) -> str:
        return f"{self.kind} policy: {self.mean:.6f} +- {self.half_width:.6f} ({self.n - self.flagged} scenarios, {self.flagged} flagged)"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scenario", "cost"])
            for s, c in enumerate(self.costs):
                w.writerow([s, "" if np.isnan(c) else repr(float(c))])


def rollout(instance: Instance, stack: GlobalValueStack, scenario, grids=None, sddp_policy=None):
    """Total cost of one scenario (T, N_V, 2) and the largest admissibility violation."""
    x = instance.global_x0()
    total, worst = 0.0, 0.0
    for t in range(instance.horizon):
        step = one_step_policy(instance, stack, t, x, scenario[t], grids, sddp_policy)
        worst = max(worst, admissibility_violation(instance, t, x, scenario[t], step))
        total += step.cost
        x = step.x_next
    parts = [x[s] for s in instance.state_slices()]
    total += float(sum(terminal_cost(n.tank, p) for n, p in zip(instance.nodes, parts)))
    return total, worst


def simulate_policy(
    instance: Instance,
    stack: GlobalValueStack,
    n: int,
    seed: int,
    grids: list[NodeGrids] | None = None,
    noise_values=None,
) -> SimulationReport:
    """Mean policy cost on ``n`` scenarios of the original noise with its 95% half width.

    Scenarios where the policy finds no admissible control, or violates a
    constraint by more than the tolerance, are flagged and excluded.
    """
    if n < 1:
        raise ValueError("need at least one scenario")
    if noise_values is None:
        _, noise_values = sample_scenarios(instance.noise, n, seed)
    sddp_policy = SddpPolicy(instance, stack.pools) if stack.kind == "sddp" else None
    if stack.kind != "sddp":
        grids = grids or make_grids(instance)
    costs = np.full(len(noise_values), np.nan)
    worst = 0.0
    for s, scen in enumerate(noise_values):
        try:
            cost, viol = rollout(instance, stack, scen, grids, sddp_policy)
        except PolicyInfeasible:
            continue
        worst = max(worst, viol)
        if viol <= ADMISSIBLE_TOL:
            costs[s] = cost
    good = costs[~np.isnan(costs)]
    flagged = len(costs) - len(good)
    if not len(good):
        return SimulationReport(math.nan, math.nan, costs, flagged, worst, stack.kind)
    half = 1.96 * good.std(ddof=1) / math.sqrt(len(good)) if len(good) > 1 else 0.0
    return SimulationReport(float(good.mean()), float(half), costs, flagged, worst, stack.kind)

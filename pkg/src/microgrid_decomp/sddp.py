"""SDDP baseline on the global problem with resampled stage noise.

``pools[t]`` (``1 <= t <= T-1``) holds cuts ``V_t(x) >= c + g.x`` on the
global state at time ``t``. The terminal hinge is modelled exactly inside
the last stage problem with one epigraph variable per node.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .instance import Instance
from .qp import QPModel
from .uncertainty import FiniteDistribution, resample_product, sample_scenarios

log = logging.getLogger(__name__)

CUT_TIE_TOL = 1e-9


class SddpError(RuntimeError):
    pass


@dataclass
class Cut:
    intercept: float
    slope: np.ndarray
    stage: int
    generation: int

    def __post_init__(self):
        self.slope = np.asarray(self.slope, dtype=float)
        if not (math.isfinite(self.intercept) and np.all(np.isfinite(self.slope))):
            raise ValueError("cut entries must be finite")

    def value(self, x) -> float:
        return float(self.intercept + self.slope @ np.asarray(x, dtype=float))


@dataclass
class CutPool:
    stage: int
    cap: int = 100
    cuts: list[Cut] = field(default_factory=list)
    visited: list[np.ndarray] = field(default_factory=list)
    generation: int = 0

    def add(self, intercept: float, slope) -> Cut:
        cut = Cut(float(intercept), np.array(slope, dtype=float), self.stage, self.generation)
        self.generation += 1
        self.cuts.append(cut)
        return cut

    def values(self, X) -> np.ndarray:
        """Cut values at states ``X`` (m, n): array (m, num_cuts)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if not self.cuts:
            return np.full((len(X), 0), -np.inf)
        C = np.array([c.intercept for c in self.cuts])
        G = np.stack([c.slope for c in self.cuts])
        return X @ G.T + C

    def evaluate(self, x) -> float:
        v = self.values(x)
        return float(v.max()) if v.size else -math.inf

    def __len__(self) -> int:
        return len(self.cuts)


def cut_select_level1(pool: CutPool) -> CutPool:
    """Keep the cuts that are highest at some visited state (at most ``cap``).

    At each visited state the credited cut is the most recent one within a
    tiny tolerance of the maximum. Cuts credited nowhere are dropped; if more
    than ``cap`` remain, those credited at the most states win, ties going
    to the most recent.
    """
    if not pool.visited:
        raise ValueError("level-one selection needs at least one visited state")
    V = pool.values(np.stack(pool.visited))
    gens = np.array([c.generation for c in pool.cuts])
    top = V.max(axis=1, keepdims=True)
    tol = CUT_TIE_TOL * np.maximum(1.0, np.abs(top))
    near = V >= top - tol
    # most recent among the near-maximal cuts at each state
    masked = np.where(near, gens[None, :], -1)
    winner = masked.argmax(axis=1)
    counts = np.bincount(winner, minlength=len(pool.cuts))
    keep = np.flatnonzero(counts > 0)
    if len(keep) > pool.cap:
        order = sorted(keep, key=lambda j: (-counts[j], -gens[j]))
        keep = np.array(sorted(order[: pool.cap]))
    return CutPool(pool.stage, pool.cap, [pool.cuts[j] for j in keep], list(pool.visited), pool.generation)


@dataclass
class StageSolution:
    value: float  # immediate + future (cuts or terminal)
    immediate: float
    x_out: np.ndarray
    subgradient: np.ndarray
    import_power: np.ndarray
    battery: np.ndarray
    heating: np.ndarray
    flows: np.ndarray
    node_flows: np.ndarray


class StageModel:
    """One-stage global QP kept alive across solves; only right-hand sides change."""

    def __init__(self, instance: Instance, t: int, lower_bound: float | None = None):
        self.instance, self.t = instance, t
        T, dt = instance.horizon, instance.dt
        self.last = t == T - 1
        ec = instance.edge_costs
        m = QPModel()
        self.m = m
        A = instance.incidence()
        self.cols: list[dict] = []
        hess = []
        for node in instance.nodes:
            c = {"u_ne": int(m.add_vars([0.0], [node.import_max], [node.import_price[t] * dt])[0])}
            c["u_t"] = int(m.add_vars([0.0], [node.tank.u_max], [0.0])[0])
            if node.battery is not None:
                bat = node.battery
                c["up"] = int(m.add_vars([0.0], [bat.u_max], [0.0])[0])
                c["um"] = int(m.add_vars([0.0], [-bat.u_min], [0.0])[0])
                c["b"] = int(m.add_vars([bat.b_min], [bat.b_max], [0.0])[0])
            c["h"] = int(m.add_vars([node.tank.h_min], [node.tank.h_max], [0.0])[0])
            self.cols.append(c)
        self.q = m.add_vars(ec.q_min[t], ec.q_max[t], ec.lin[t]) if instance.num_edges else np.zeros(0, np.int32)
        self.theta = None
        self.z = None
        if self.last:
            self.z = m.add_vars(np.zeros(instance.num_nodes), np.full(instance.num_nodes, np.inf), np.ones(instance.num_nodes))
        else:
            self.theta = int(m.add_vars([-np.inf], [np.inf], [1.0])[0])
        hess = np.zeros(m.num_cols)
        if instance.num_edges:
            hess[self.q] = 2.0 * ec.quad[t]
        if np.any(hess):
            m.set_hessian_diag(hess)
        # state-out column order matches the global state vector
        self.x_cols = []
        for c, node in zip(self.cols, instance.nodes):
            if node.battery is not None:
                self.x_cols.append(c["b"])
            self.x_cols.append(c["h"])
        self.x_cols = np.array(self.x_cols, dtype=np.int32)

        tank_rows, bat_rows, bal_rows = [], [], []
        for i, (c, node) in enumerate(zip(self.cols, instance.nodes)):
            tk = node.tank
            tank_rows.append(([c["h"], c["u_t"]], [1.0, -dt * tk.conversion]))
            if node.battery is not None:
                bat = node.battery
                bat_rows.append(([c["b"], c["up"], c["um"]], [1.0, -dt * bat.charge_yield, dt / bat.discharge_yield]))
            cols, vals = [c["u_ne"], c["u_t"]], [1.0, -1.0]
            if node.battery is not None:
                cols += [c["up"], c["um"]]
                vals += [-1.0, 1.0]
            for e in np.flatnonzero(A[i]):
                cols.append(int(self.q[e]))
                vals.append(A[i, e])
            bal_rows.append((cols, vals))
        zeros = lambda rows: np.zeros(len(rows))
        self.tank_rows = m.add_rows(zeros(tank_rows), zeros(tank_rows), tank_rows)
        self.bat_rows = m.add_rows(zeros(bat_rows), zeros(bat_rows), bat_rows) if bat_rows else np.zeros(0, np.int32)
        self.bal_rows = m.add_rows(zeros(bal_rows), zeros(bal_rows), bal_rows)
        if self.last:
            rows, lo = [], []
            for i, (c, node) in enumerate(zip(self.cols, instance.nodes)):
                rows.append(([int(self.z[i]), c["h"]], [1.0, node.tank.penalty]))
                lo.append(node.tank.penalty * node.tank.h_ref)
            m.add_rows(lo, np.full(len(lo), np.inf), rows)
        self.fixed_rows = m.num_rows
        self.battery_nodes = [i for i, n in enumerate(instance.nodes) if n.battery is not None]

    def set_cuts(self, cuts) -> None:
        """Replace the cut rows ``theta >= c + g.x_out``."""
        if self.theta is None:
            raise SddpError("the last stage has no future-cost variable")
        m = self.m
        m.delete_rows(np.arange(self.fixed_rows, m.num_rows))
        if cuts:
            self.add_cuts(cuts)

    def add_cuts(self, cuts) -> None:
        rows = []
        for cut in cuts:
            nz = np.flatnonzero(cut.slope)
            rows.append(([self.theta] + [int(self.x_cols[j]) for j in nz], [1.0] + [-cut.slope[j] for j in nz]))
        self.m.add_rows([c.intercept for c in cuts], np.full(len(cuts), np.inf), rows)

    def solve(self, x_in, w) -> StageSolution:
        """``x_in`` is the global state, ``w`` the (N_V, 2) noise ``(d_hw, d_el)``."""
        inst, m = self.instance, self.m
        dt = inst.dt
        x_in = np.asarray(x_in, dtype=float)
        w = np.asarray(w, dtype=float).reshape(inst.num_nodes, 2)
        parts = [x_in[s] for s in inst.state_slices()]
        tank_rhs = np.array([n.tank.conduction_loss * p[-1] for n, p in zip(inst.nodes, parts)]) - w[:, 0]
        m.set_row_bounds(self.tank_rows, tank_rhs, tank_rhs)
        if len(self.bat_rows):
            bat_rhs = np.array([inst.nodes[i].battery.auto_discharge * parts[i][0] for i in self.battery_nodes])
            m.set_row_bounds(self.bat_rows, bat_rhs, bat_rhs)
        bal = w[:, 1] / dt
        m.set_row_bounds(self.bal_rows, bal, bal)
        sol = m.solve()
        if not sol.optimal:
            raise SddpError(f"stage {self.t} problem is {sol.status} for noise {w.tolist()}")
        x = sol.x
        future = x[self.theta] if self.theta is not None else float(np.sum(x[self.z]))
        # d value / d x_in through the dynamics right-hand sides
        sub = np.empty_like(x_in)
        k = 0
        bat_k = 0
        for i, node in enumerate(inst.nodes):
            if node.battery is not None:
                sub[k] = node.battery.auto_discharge * sol.row_dual[self.bat_rows[bat_k]]
                bat_k += 1
                k += 1
            sub[k] = node.tank.conduction_loss * sol.row_dual[self.tank_rows[i]]
            k += 1
        u_ne = np.array([x[c["u_ne"]] for c in self.cols])
        u_t = np.array([x[c["u_t"]] for c in self.cols])
        u_b = np.array([x[c["up"]] - x[c["um"]] if "up" in c else 0.0 for c in self.cols])
        q = x[self.q] if len(self.q) else np.zeros(0)
        f = -(inst.incidence() @ q) if len(q) else np.zeros(inst.num_nodes)
        return StageSolution(
            sol.objective,
            sol.objective - future,
            x[self.x_cols].copy(),
            sub,
            u_ne,
            u_b,
            u_t,
            q.copy(),
            f,
        )


def future_lower_bounds(instance: Instance) -> np.ndarray:
    """``L[t]``: valid lower bound on V_t, from nonnegative imports and edge minima."""
    T = instance.horizon
    per_stage = np.array([instance.edge_costs.stage_lower_bound(t) for t in range(T)])
    return np.concatenate([np.cumsum(per_stage[::-1])[::-1], [0.0]])


def _check_prices(instance: Instance) -> None:
    for i, node in enumerate(instance.nodes):
        if np.any(node.import_price < 0):
            raise SddpError(f"node {i + 1} has a negative import price; split battery variables need p_el >= 0")
        if np.any(instance.edge_costs.quad < 0):
            raise SddpError("edge costs must be convex")


def stage_solve(instance: Instance, t: int, x_in, w, pool: CutPool | None = None) -> StageSolution:
    """One-off stage solve; ``pool`` approximates V_{t+1} (ignored at the last stage)."""
    model = StageModel(instance, t)
    if model.theta is not None:
        L = future_lower_bounds(instance)[t + 1]
        cuts = list(pool.cuts) if pool is not None and len(pool) else [Cut(L, np.zeros(instance.state_dim), t + 1, -1)]
        model.add_cuts(cuts)
    return model.solve(x_in, w)


@dataclass(frozen=True)
class SddpOptions:
    resample_k: int = 100
    resample_samples: int = 10_000
    max_iters: int = 2000
    gap_tol: float = 0.01
    ub_every: int = 10
    ub_scenarios: int = 1000
    cut_cap: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.resample_k < 1 or self.max_iters < 1 or self.ub_every < 1 or self.ub_scenarios < 2 or self.cut_cap < 1:
            raise ValueError("SDDP counts must be positive (at least two upper-bound scenarios)")
        if self.gap_tol < 0:
            raise ValueError("gap tolerance must be nonnegative")


@dataclass
class SddpResult:
    pools: list  # index t in 0..T; None where no pool exists
    lower_bound: float
    lb_trace: list[float]
    ub_trace: list[tuple[int, float, float]]  # (iteration, mean, half width)
    iterations: int
    stop_reason: str
    laws: list[FiniteDistribution]

    def write_trace(self, path) -> None:
        ub = {it: (m, h) for it, m, h in self.ub_trace}
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "lower_bound", "ub_mean", "ub_half_width"])
            for k, lb in enumerate(self.lb_trace, start=1):
                m, h = ub.get(k, ("", ""))
                w.writerow([k, repr(lb), repr(m) if m != "" else "", repr(h) if h != "" else ""])


class SddpPolicy:
    """Stage models carrying the current cuts; the policy of a pool family."""

    def __init__(self, instance: Instance, pools):
        self.instance = instance
        T = instance.horizon
        L = future_lower_bounds(instance)
        self.models = [StageModel(instance, t) for t in range(T)]
        for t in range(T - 1):
            pool = pools[t + 1]
            cuts = list(pool.cuts) if pool is not None and len(pool) else [Cut(L[t + 1], np.zeros(instance.state_dim), t + 1, -1)]
            self.models[t].add_cuts(cuts)

    def solve(self, t: int, x, w) -> StageSolution:
        return self.models[t].solve(x, w)


def _clip_state(instance: Instance, x) -> np.ndarray:
    lo = np.concatenate([n.state_bounds()[0] for n in instance.nodes])
    hi = np.concatenate([n.state_bounds()[1] for n in instance.nodes])
    return np.clip(x, lo, hi)


def rollout_costs(instance: Instance, policy: SddpPolicy, noise_values: np.ndarray) -> np.ndarray:
    """Total cost of the policy along each scenario (n, T, N_V, 2)."""
    T = instance.horizon
    costs = np.empty(len(noise_values))
    for s, scen in enumerate(noise_values):
        x = instance.global_x0()
        total = 0.0
        for t in range(T):
            sol = policy.solve(t, x, scen[t])
            total += sol.immediate
            x = _clip_state(instance, sol.x_out)
        total += sum(
            n.tank.penalty * max(0.0, n.tank.h_ref - x[sl][-1]) for n, sl in zip(instance.nodes, instance.state_slices())
        )
        costs[s] = total
    return costs


def statistical_upper_bound(pools, instance: Instance, n: int, seed: int, policy: SddpPolicy | None = None):
    """Mean cost of the cut policy on ``n`` fresh scenarios of the original noise, and the 95% half width."""
    policy = policy or SddpPolicy(instance, pools)
    _, vals = sample_scenarios(instance.noise, n, seed)
    costs = rollout_costs(instance, policy, vals)
    half = 1.96 * costs.std(ddof=1) / math.sqrt(n) if n > 1 else 0.0
    return float(costs.mean()), float(half)


def sddp_run(instance: Instance, opts: SddpOptions = SddpOptions(), x0=None) -> SddpResult:
    """Forward/backward passes until the gap to the statistical upper bound is below ``gap_tol``."""
    _check_prices(instance)
    T = instance.horizon
    x_start = instance.global_x0() if x0 is None else np.asarray(x0, dtype=float)
    laws = [
        resample_product(instance.noise, t, opts.resample_k, opts.resample_samples, seed=opts.seed) for t in range(T)
    ]
    L = future_lower_bounds(instance)
    pools: list = [None] * (T + 1)
    for t in range(1, T):
        pools[t] = CutPool(t, opts.cut_cap)
        pools[t].add(L[t], np.zeros(instance.state_dim))
    policy = SddpPolicy(instance, pools)
    models = policy.models
    rng = np.random.default_rng([opts.seed, 1])

    def stage_expectation(t, x):
        law = laws[t]
        val, grad = 0.0, np.zeros_like(x)
        for atom, prob in zip(law.atoms, law.probabilities):
            sol = models[t].solve(x, atom)
            val += prob * sol.value
            grad += prob * sol.subgradient
        return val, grad

    lb_trace: list[float] = []
    ub_trace: list[tuple[int, float, float]] = []
    reason = "iteration cap"
    k = 0
    for k in range(1, opts.max_iters + 1):
        # forward pass on the resampled law
        x = x_start.copy()
        visited = [None] * T
        for t in range(T):
            visited[t] = x.copy()
            law = laws[t]
            j = rng.choice(law.size, p=law.probabilities)
            x = _clip_state(instance, models[t].solve(x, law.atoms[j]).x_out)
        # backward pass
        for t in range(T - 1, 0, -1):
            xt = visited[t]
            val, grad = stage_expectation(t, xt)
            pool = pools[t]
            pool.visited.append(xt)
            cut = pool.add(val - grad @ xt, grad)
            if len(pool) > pool.cap:
                pools[t] = cut_select_level1(pool)
                models[t - 1].set_cuts(pools[t].cuts)
            else:
                models[t - 1].add_cuts([cut])
        lb, _ = stage_expectation(0, x_start)
        lb_trace.append(lb)
        if k % opts.ub_every == 0:
            mean, half = statistical_upper_bound(pools, instance, opts.ub_scenarios, opts.seed + k, policy)
            ub_trace.append((k, mean, half))
            log.info("sddp iteration %d: lower %.6g, upper %.6g +- %.2g", k, lb, mean, half)
            if mean - lb <= opts.gap_tol * abs(mean):
                reason = "gap"
                break
    return SddpResult(pools, lb_trace[-1], lb_trace, ub_trace, k, reason, laws)

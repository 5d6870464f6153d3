"""Per-node hazard-decision dynamic programming on a state grid.

Two subproblems share one backward recursion:

* price: the node pays ``p_t * f_t`` for its injection, the import ``u_ne``
  is optimized in closed form (the objective is affine in it);
* resource: the injection is pinned to ``r_t``, which eliminates ``u_ne``.

Value functions are tables on a tensor grid evaluated by multilinear
interpolation. ``+inf`` marks infeasible states and saturates: a cell with
an infinite corner carrying positive weight evaluates to ``+inf``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .prosumer import NodeModel, battery_step, tank_step, terminal_cost
from .uncertainty import FiniteDistribution

FEAS_TOL = 1e-9
DEFAULT_STATE_POINTS = 51
DEFAULT_CONTROL_POINTS = 21


class NodalInfeasibility(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class StateGrid:
    axes: tuple[np.ndarray, ...]

    def __post_init__(self):
        axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        for a in axes:
            if a.ndim != 1 or len(a) < 2 or np.any(np.diff(a) <= 0):
                raise ValueError("each grid axis needs >= 2 strictly increasing points")
        object.__setattr__(self, "axes", axes)

    @classmethod
    def uniform(cls, lows, highs, counts) -> "StateGrid":
        return cls(tuple(np.linspace(lo, hi, int(n)) for lo, hi, n in zip(lows, highs, counts)))

    @classmethod
    def for_node(cls, node: NodeModel, points: int = DEFAULT_STATE_POINTS) -> "StateGrid":
        lo, hi = node.state_bounds()
        return cls.uniform(lo, hi, [points] * len(lo))

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(len(a) for a in self.axes)

    @property
    def dim(self) -> int:
        return len(self.axes)

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


@dataclass(frozen=True, eq=False)
class ControlGrid:
    """Candidate battery powers (None without battery) and heating powers."""

    battery: np.ndarray | None
    heating: np.ndarray

    @classmethod
    def for_node(cls, node: NodeModel, points: int = DEFAULT_CONTROL_POINTS) -> "ControlGrid":
        heating = np.linspace(0.0, node.tank.u_max, points)
        battery = None
        if node.battery is not None:
            battery = np.union1d(
                np.linspace(node.battery.u_min, node.battery.u_max, points), [0.0]
            )
        return cls(battery, heating)

    def battery_values(self) -> np.ndarray:
        return np.zeros(1) if self.battery is None else np.asarray(self.battery, dtype=float)

    @property
    def size(self) -> int:
        return len(self.battery_values()) * len(self.heating)


@dataclass(frozen=True, eq=False)
class TabularValueFunction:
    grid: StateGrid
    values: np.ndarray
    stage: int

    def __call__(self, x):
        return evaluate(self, x)


def _axis_weights(axis: np.ndarray, x):
    """Lower/upper bracketing indices and weight of the upper one (clamped)."""
    x = np.asarray(x, dtype=float)
    n = len(axis)
    if n == 1:
        z = np.zeros(x.shape, dtype=np.int64)
        return z, z, np.zeros(x.shape)
    xc = np.clip(x, axis[0], axis[-1])
    lo = np.clip(np.searchsorted(axis, xc, side="right") - 1, 0, n - 2)
    w = (xc - axis[lo]) / (axis[lo + 1] - axis[lo])
    return lo, lo + 1, w


def _lerp(lo, hi, w):
    lo_inf, hi_inf = np.isinf(lo), np.isinf(hi)
    out = (1.0 - w) * np.where(lo_inf, 0.0, lo) + w * np.where(hi_inf, 0.0, hi)
    bad = (lo_inf & (w < 1.0)) | (hi_inf & (w > 0.0))
    return np.where(bad, np.inf, out)


def interpolate(axes: Sequence[np.ndarray], values: np.ndarray, points) -> np.ndarray:
    """Saturating multilinear interpolation of a grid table at ``points`` (..., d)."""
    pts = np.asarray(points, dtype=float)
    d = len(axes)
    if pts.shape[-1] != d:
        raise ValueError(f"points have dimension {pts.shape[-1]}, grid has {d}")
    # contract one axis at a time from the last, keeping a leading batch of points
    batch = pts.shape[:-1]
    flat = pts.reshape(-1, d)
    cur = np.broadcast_to(values, (flat.shape[0],) + values.shape)
    for k in range(d):
        lo, hi, w = _axis_weights(axes[k], flat[:, k])
        rows = np.arange(flat.shape[0])
        a = cur[rows, lo]
        b = cur[rows, hi]
        wk = w.reshape((-1,) + (1,) * (a.ndim - 1))
        cur = _lerp(a, b, wk)
    return cur.reshape(batch)


def evaluate(vf: TabularValueFunction, x) -> float | np.ndarray:
    """Interpolated value; coordinates outside the grid clamp to its boundary."""
    out = interpolate(vf.grid.axes, vf.values, x)
    return float(out) if np.ndim(out) == 0 else out


# --- backward recursion -----------------------------------------------------


def _node_axes(node: NodeModel, grid: StateGrid):
    if node.battery is None:
        return np.zeros(1), grid.axes[0]
    return grid.axes[0], grid.axes[1]


def _battery_block(node, grid, controls, v_next2):
    """Interpolate along the battery axis for every (b, u_b): (Nb, nb, Nh)."""
    b_axis, _ = _node_axes(node, grid)
    ub = controls.battery_values()
    if node.battery is None:
        return v_next2[:, None, :]
    bat = node.battery
    b_next = battery_step(bat, b_axis[:, None], ub[None, :], node.dt)
    lo, hi, w = _axis_weights(b_axis, b_next)
    vb = _lerp(v_next2[lo], v_next2[hi], w[..., None])
    infeasible = (b_next < bat.b_min - FEAS_TOL) | (b_next > bat.b_max + FEAS_TOL)
    vb[infeasible] = np.inf
    return vb


def _next_values(node, grid, controls, vb, d_hw):
    """Continuation values for every (b, u_b, h, u_t): (Nb, nb, Nh, nt)."""
    _, h_axis = _node_axes(node, grid)
    tank = node.tank
    h_next = tank_step(tank, h_axis[:, None], controls.heating[None, :], d_hw, node.dt)
    lo, hi, w = _axis_weights(h_axis, h_next)
    vn = _lerp(vb[:, :, lo], vb[:, :, hi], w[None, None])
    infeasible = (h_next < tank.h_min - FEAS_TOL) | (h_next > tank.h_max + FEAS_TOL)
    vn[:, :, infeasible] = np.inf
    return vn


def _import_for_price(node: NodeModel, t: int, price: float) -> float:
    coeff = node.import_price[t] * node.dt + price
    return node.import_max if coeff < 0 else 0.0


def stage_control_costs(node: NodeModel, controls: ControlGrid, t: int, d_el: float, mode: str, coord: float):
    """Immediate cost of each (u_b, u_t) pair for one noise atom: (nb, nt).

    ``mode`` is ``"price"`` (``coord`` is the node price at ``t``) or
    ``"resource"`` (``coord`` is the pinned injection at ``t``).
    """
    ub = controls.battery_values()[:, None]
    ut = controls.heating[None, :]
    pel = node.import_price[t]
    if mode == "price":
        u_ne = _import_for_price(node, t, coord)
        flow = u_ne - d_el / node.dt - ub - ut
        return pel * node.dt * u_ne + coord * flow
    if mode == "resource":
        u_ne = coord + d_el / node.dt + ub + ut
        cost = pel * node.dt * u_ne
        bad = (u_ne < -FEAS_TOL) | (u_ne > node.import_max + FEAS_TOL)
        return np.where(bad, np.inf, cost)
    raise ValueError(f"unknown mode {mode!r}")


def _stage_update(node, law: FiniteDistribution, grid, controls, v_next, t, mode, coord, information):
    nb_axis = 1 if node.battery is None else len(grid.axes[0])
    v2 = v_next.reshape(nb_axis, -1)
    vb = _battery_block(node, grid, controls, v2)
    acc = None
    for (d_hw, d_el), prob in zip(law.atoms, law.probabilities):
        if prob == 0:
            continue
        vn = _next_values(node, grid, controls, vb, d_hw)
        q = vn + stage_control_costs(node, controls, t, d_el, mode, coord)[None, :, None, :]
        term = q if information == "decision-hazard" else q.min(axis=(1, 3))
        term = np.where(np.isinf(term), np.inf, prob * term)
        acc = term if acc is None else acc + term
    if information == "decision-hazard":
        acc = acc.min(axis=(1, 3))
    return acc.reshape(grid.shape)


def _check_laws(node: NodeModel, laws: Sequence[FiniteDistribution], coord):
    T = node.horizon
    if len(laws) != T:
        raise ValueError(f"node horizon is {T} but {len(laws)} stage laws were given")
    coord = np.asarray(coord, dtype=float)
    if coord.shape != (T,):
        raise ValueError(f"coordination vector must have length {T}, got shape {coord.shape}")
    if not np.all(np.isfinite(coord)):
        raise ValueError("coordination vector must be finite")
    return coord


def terminal_values(node: NodeModel, grid: StateGrid) -> np.ndarray:
    return np.asarray(terminal_cost(node.tank, grid.points()), dtype=float).reshape(grid.shape)


def _backward(node, laws, grid, controls, coord, mode, information, suffix=None, start=None):
    """Tables V_0..V_T; with ``suffix`` given, only stages ``start..0`` are recomputed."""
    T = node.horizon
    tables = [None] * (T + 1)
    if suffix is None:
        tables[T] = terminal_values(node, grid)
        start = T - 1
    else:
        tables[start + 1 :] = suffix[start + 1 :]
    for t in range(start, -1, -1):
        tables[t] = _stage_update(node, laws[t], grid, controls, tables[t + 1], t, mode, coord[t], information)
    return tables


def _wrap(grid, tables):
    return [TabularValueFunction(grid, v, t) for t, v in enumerate(tables)]


def solve_price_dp(
    node: NodeModel,
    laws: Sequence[FiniteDistribution],
    price,
    grid: StateGrid,
    controls: ControlGrid | None = None,
    x0=None,
    information: str = "hazard-decision",
) -> list[TabularValueFunction]:
    """Local price value functions V_0..V_T for node price vector ``price``.

    ``information="decision-hazard"`` computes the diagnostic variant where
    storage controls are fixed before the noise is seen.
    """
    price = _check_laws(node, laws, price)
    controls = controls or ControlGrid.for_node(node)
    vfs = _wrap(grid, _backward(node, laws, grid, controls, price, "price", information))
    if x0 is not None and not np.isfinite(evaluate(vfs[0], x0)):
        raise NodalInfeasibility("price subproblem infeasible at the initial state")
    return vfs


def solve_resource_dp(
    node: NodeModel,
    laws: Sequence[FiniteDistribution],
    resource,
    grid: StateGrid,
    controls: ControlGrid | None = None,
    information: str = "hazard-decision",
) -> list[TabularValueFunction]:
    """Local resource value functions with the injection pinned to ``resource``.

    Entries where no control is feasible are ``+inf``; an infinite value at
    the initial state means the resource is nodally infeasible.
    """
    resource = _check_laws(node, laws, resource)
    controls = controls or ControlGrid.for_node(node)
    return _wrap(grid, _backward(node, laws, grid, controls, resource, "resource", information))


def resource_value(node, laws, resource, grid, controls, x0) -> float:
    vfs = solve_resource_dp(node, laws, resource, grid, controls)
    return evaluate(vfs[0], x0)


KINK_REFINEMENTS = 2
SLOPE_AGREEMENT = 1e-8


def _guarded_slope(value_at, t, h, base, up, down) -> float:
    step = h
    right, left = (up - base) / step, (base - down) / step
    for _ in range(KINK_REFINEMENTS):
        if abs(right - left) <= SLOPE_AGREEMENT * max(1.0, abs(right), abs(left)):
            break
        up_s, down_s = value_at(t, step / 10), value_at(t, -step / 10)
        if not (np.isfinite(up_s) and np.isfinite(down_s)):
            break
        step /= 10
        up, down = up_s, down_s
        right, left = (up - base) / step, (base - down) / step
    small, large = sorted((abs(right), abs(left)))
    if abs(right - left) > SLOPE_AGREEMENT and large > 2.0 * small:
        return right if abs(right) <= abs(left) else left
    return (up - down) / (2 * step)


def central_difference(
    value_at,
    x,
    h: float,
    base: float | None = None,
    on_boundary: str = "raise",
    kink_guard: bool = False,
):
    """Central finite differences of a scalar function, one coordinate at a time.

    ``value_at(t, delta)`` returns the function at ``x + delta * e_t``. Falls
    back to a one-sided difference when one side is infinite; when both are,
    raises or (``on_boundary="nan"``) leaves NaN in that coordinate.

    ``kink_guard`` is meant for piecewise affine functions. When the two
    one-sided slopes disagree the stencil is shrunk tenfold, up to
    ``KINK_REFINEMENTS`` times, until it fits inside one affine piece. If
    they still differ by more than a factor of two, the stencil straddles a
    jump and only the slope on the smooth side is kept. Clipping it to zero
    instead would not survive a projection that mixes coordinates, and the
    line search already rejects steps across the jump.
    """
    x = np.asarray(x, dtype=float)
    grad = np.empty(x.size)
    for t in range(x.size):
        up, down = value_at(t, h), value_at(t, -h)
        if base is None and (kink_guard or not (np.isfinite(up) and np.isfinite(down))):
            base = value_at(t, 0.0)
        if np.isfinite(up) and np.isfinite(down):
            grad[t] = (up - down) / (2 * h)
            if kink_guard and np.isfinite(base):
                grad[t] = _guarded_slope(value_at, t, h, base, up, down)
            continue
        if np.isfinite(up) and np.isfinite(base):
            grad[t] = (up - base) / h
        elif np.isfinite(down) and np.isfinite(base):
            grad[t] = (base - down) / h
        elif on_boundary == "nan":
            grad[t] = np.nan
        else:
            raise NodalInfeasibility(f"resource at stage {t} is on the boundary of the feasible domain")
    return grad


def resource_gradient(
    node: NodeModel,
    laws: Sequence[FiniteDistribution],
    resource,
    grid: StateGrid,
    x0,
    h: float = 1e-2,
    controls: ControlGrid | None = None,
    base_tables=None,
    on_boundary: str = "raise",
    kink_guard: bool = True,
) -> np.ndarray:
    """Central-difference gradient of V_0[r](x0) with respect to the resource.

    Perturbing ``r_t`` leaves V_{t+1..T} untouched, so each evaluation only
    recomputes stages ``t..0`` on top of the unperturbed tables. The value
    is piecewise affine in ``r`` with jumps where a grid control changes
    feasibility; the kink guard keeps such jumps out of the gradient.
    """
    resource = _check_laws(node, laws, resource)
    controls = controls or ControlGrid.for_node(node)
    if base_tables is None:
        base_tables = _backward(node, laws, grid, controls, resource, "resource", "hazard-decision")
    base = float(interpolate(grid.axes, base_tables[0], x0))

    def value_at(t, delta):
        if delta == 0.0:
            return base
        r = resource.copy()
        r[t] += delta
        tables = _backward(node, laws, grid, controls, r, "resource", "hazard-decision", base_tables, t)
        return float(interpolate(grid.axes, tables[0], x0))

    return central_difference(value_at, resource, h, base, on_boundary, kink_guard)


# --- forward simulation -----------------------------------------------------


def continuation_values(node: NodeModel, vf: TabularValueFunction, x, d_hw, controls: ControlGrid):
    """V_{t+1}(g(x, u, w)) for a batch of states, every control: (M, nb, nt).

    Infeasible next states get ``+inf``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d_hw = np.broadcast_to(np.asarray(d_hw, dtype=float), (x.shape[0],))
    b_axis, h_axis = _node_axes(node, vf.grid)
    nb_axis = len(b_axis)
    v2 = vf.values.reshape(nb_axis, -1)
    ub = controls.battery_values()
    tank = node.tank
    h_next = tank_step(tank, x[:, -1:], controls.heating[None, :], d_hw[:, None], node.dt)
    hl, hh, hw = _axis_weights(h_axis, h_next)
    h_bad = (h_next < tank.h_min - FEAS_TOL) | (h_next > tank.h_max + FEAS_TOL)
    if node.battery is None:
        out = _lerp(v2[0][hl], v2[0][hh], hw)[:, None, :]
        out[np.broadcast_to(h_bad[:, None, :], out.shape)] = np.inf
        return out
    bat = node.battery
    b_next = battery_step(bat, x[:, :1], ub[None, :], node.dt)
    bl, bh, bw = _axis_weights(b_axis, b_next)
    b_bad = (b_next < bat.b_min - FEAS_TOL) | (b_next > bat.b_max + FEAS_TOL)
    # bilinear: first along b for each (m, u_b), then along h for each (m, u_t)
    lo_rows = v2[bl]  # (M, nb, Nh)
    hi_rows = v2[bh]
    rows = _lerp(lo_rows, hi_rows, bw[..., None])
    m_idx = np.arange(x.shape[0])[:, None, None]
    b_idx = np.arange(len(ub))[None, :, None]
    a = rows[m_idx, b_idx, hl[:, None, :]]
    b = rows[m_idx, b_idx, hh[:, None, :]]
    out = _lerp(a, b, hw[:, None, :])
    out[b_bad[:, :, None] | h_bad[:, None, :]] = np.inf
    return out


@dataclass
class NodalSimulation:
    flows: np.ndarray  # (M, T), NaN rows for flagged scenarios
    mean_flow: np.ndarray  # (T,)
    flagged: np.ndarray  # (M,) bool
    states: np.ndarray  # (M, T+1, d)

    @property
    def flagged_count(self) -> int:
        return int(self.flagged.sum())


def simulate_nodal(
    node: NodeModel,
    vfs: Sequence[TabularValueFunction],
    price,
    noise_values,
    x0,
    controls: ControlGrid | None = None,
) -> NodalSimulation:
    """Roll the greedy price policy along scenarios; ``noise_values`` is (M, T, 2).

    Controls are re-optimized at the continuous state against the
    interpolated next-stage table. Scenarios reaching a state with no
    feasible control are flagged and excluded from the mean.
    """
    controls = controls or ControlGrid.for_node(node)
    noise_values = np.asarray(noise_values, dtype=float)
    M, T = noise_values.shape[:2]
    price = np.asarray(price, dtype=float)
    x = np.tile(np.asarray(x0, dtype=float), (M, 1))
    states = np.empty((M, T + 1, x.shape[1]))
    states[:, 0] = x
    flows = np.empty((M, T))
    flagged = np.zeros(M, dtype=bool)
    ub = controls.battery_values()
    ut = controls.heating
    nt = len(ut)
    for t in range(T):
        d_hw, d_el = noise_values[:, t, 0], noise_values[:, t, 1]
        cont = continuation_values(node, vfs[t + 1], x, d_hw, controls)
        u_ne = _import_for_price(node, t, price[t])
        # the import term is the same for every control; only -p*(u_b+u_t) varies
        q = cont - price[t] * (ub[None, :, None] + ut[None, None, :])
        flat = q.reshape(M, -1)
        best = np.argmin(flat, axis=1)
        ok = np.isfinite(flat[np.arange(M), best])
        flagged |= ~ok
        jb, jt = np.divmod(best, nt)
        flows[:, t] = u_ne - d_el / node.dt - ub[jb] - ut[jt]
        h = tank_step(node.tank, x[:, -1], ut[jt], d_hw, node.dt)
        if node.battery is not None:
            b = battery_step(node.battery, x[:, 0], ub[jb], node.dt)
            x = np.stack([b, h], axis=1)
        else:
            x = h[:, None]
        lo, hi = node.state_bounds()
        x = np.clip(x, lo, hi)
        states[:, t + 1] = x
    flows[flagged] = np.nan
    good = ~flagged
    mean = flows[good].mean(axis=0) if good.any() else np.full(T, np.nan)
    return NodalSimulation(flows, mean, flagged, states)

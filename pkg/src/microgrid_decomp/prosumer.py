"""Building (node) physics: battery and hot-water tank dynamics, balance and costs.

Units: controls are powers (kW), stocks and demands are energies (kWh per
step), ``dt`` is in hours. Node flows ``f`` and edge flows ``q`` are powers,
positive ``f`` meaning the node injects into the network.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class BatteryParams:
    auto_discharge: float
    charge_yield: float
    discharge_yield: float
    b_min: float
    b_max: float
    u_min: float  # signed, < 0 (discharge)
    u_max: float

    def __post_init__(self):
        if not 0 < self.auto_discharge <= 1:
            raise ValueError(f"auto_discharge must lie in (0, 1], got {self.auto_discharge}")
        if not (0 < self.charge_yield <= 1 and 0 < self.discharge_yield <= 1):
            raise ValueError("battery yields must lie in (0, 1]")
        if not 0 <= self.b_min < self.b_max:
            raise ValueError(f"need 0 <= b_min < b_max, got [{self.b_min}, {self.b_max}]")
        if not self.u_min < 0 < self.u_max:
            raise ValueError(f"need u_min < 0 < u_max, got [{self.u_min}, {self.u_max}]")


@dataclass(frozen=True)
class TankParams:
    conduction_loss: float
    conversion: float
    h_min: float
    h_max: float
    u_max: float
    h_ref: float
    penalty: float

    def __post_init__(self):
        if not 0 < self.conduction_loss <= 1:
            raise ValueError(f"conduction_loss must lie in (0, 1], got {self.conduction_loss}")
        if self.conversion <= 0:
            raise ValueError("conversion must be positive")
        if not 0 <= self.h_min <= self.h_ref <= self.h_max:
            raise ValueError(
                f"need 0 <= h_min <= h_ref <= h_max, got {self.h_min}, {self.h_ref}, {self.h_max}"
            )
        if self.u_max < 0 or self.penalty < 0:
            raise ValueError("heating bound and terminal penalty must be nonnegative")


@dataclass(frozen=True, eq=False)
class NodeModel:
    tank: TankParams
    battery: Optional[BatteryParams]
    import_max: float
    dt: float
    import_price: np.ndarray  # per stage, cost per kWh

    def __post_init__(self):
        price = np.asarray(self.import_price, dtype=float)
        price.setflags(write=False)
        object.__setattr__(self, "import_price", price)
        if self.import_max < 0:
            raise ValueError("import bound must be nonnegative")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @property
    def has_battery(self) -> bool:
        return self.battery is not None

    @property
    def state_dim(self) -> int:
        return 2 if self.has_battery else 1

    @property
    def horizon(self) -> int:
        return len(self.import_price)

    def state_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Bounds in state order ``(b, h)`` or ``(h,)``."""
        lo, hi = [self.tank.h_min], [self.tank.h_max]
        if self.battery is not None:
            lo.insert(0, self.battery.b_min)
            hi.insert(0, self.battery.b_max)
        return np.array(lo), np.array(hi)


def battery_step(params: BatteryParams, b, u_b, dt: float):
    """Next battery level; no clamping."""
    u_b = np.asarray(u_b, dtype=float)
    charge = np.maximum(u_b, 0.0)
    discharge = np.maximum(-u_b, 0.0)
    return params.auto_discharge * np.asarray(b, dtype=float) + dt * (
        params.charge_yield * charge - discharge / params.discharge_yield
    )


def tank_step(params: TankParams, h, u_t, d_hw, dt: float):
    """Next tank level; ``d_hw`` is the energy drawn over the step."""
    return (
        params.conduction_loss * np.asarray(h, dtype=float)
        + dt * params.conversion * np.asarray(u_t, dtype=float)
        - np.asarray(d_hw, dtype=float)
    )


def node_balance(u_ne, d_el, u_b, u_t, dt: float):
    """Node injection (power): import minus residual demand, battery and heating."""
    return np.asarray(u_ne) - np.asarray(d_el) / dt - np.asarray(u_b) - np.asarray(u_t)


def stage_cost(price, u_ne, dt: float):
    return np.asarray(price) * np.asarray(u_ne) * dt


def terminal_cost(params: TankParams, x_T) -> float | np.ndarray:
    """Hinge penalty on the tank level, which is the last state component."""
    h = np.asarray(x_T, dtype=float)[..., -1]
    return params.penalty * np.maximum(0.0, params.h_ref - h)


def next_state(node: NodeModel, x, u_b, u_t, d_hw):
    """Apply the node dynamics to a state in ``(b, h)`` / ``(h,)`` order."""
    x = np.asarray(x, dtype=float)
    h_next = tank_step(node.tank, x[..., -1], u_t, d_hw, node.dt)
    if node.battery is None:
        return h_next[..., None]
    b_next = battery_step(node.battery, x[..., 0], u_b, node.dt)
    b_next, h_next = np.broadcast_arrays(b_next, h_next)
    return np.stack([b_next, h_next], axis=-1)

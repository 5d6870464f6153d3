import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from microgrid_decomp.prosumer import (
    BatteryParams,
    NodeModel,
    TankParams,
    battery_step,
    next_state,
    node_balance,
    stage_cost,
    tank_step,
    terminal_cost,
)

BAT = BatteryParams(1.0, 0.95, 0.95, 0.0, 3.0, -1.5, 1.5)
TANK = TankParams(1.0, 1.0, 0.0, 6.0, 2.0, 2.0, 10.0)


def test_battery_examples():
    assert battery_step(BAT, 2.0, 1.0, 0.25) == pytest.approx(2.2375, abs=1e-12)
    assert battery_step(BAT, 2.0, -1.0, 0.25) == pytest.approx(2 - 0.25 / 0.95, abs=1e-12)
    assert battery_step(BAT, 2.0, 0.0, 0.25) == 2.0


def test_tank_examples():
    assert tank_step(TANK, 5.0, 2.0, 0.25, 0.25) == pytest.approx(5.25)
    decay = TankParams(0.9, 1.0, 0.0, 6.0, 2.0, 2.0, 1.0)
    assert tank_step(decay, 5.0, 0.0, 0.0, 0.25) == pytest.approx(4.5)
    assert tank_step(TANK, 0.0, 0.0, 0.0, 0.25) == 0.0


def test_balance_cost_terminal_examples():
    assert node_balance(3.0, 1.5 * 0.25, 0.5, 1.0, 0.25) == pytest.approx(0.0)
    assert node_balance(0, 0, 0, 0, 0.25) == 0
    assert node_balance(0.0, 0.5, 0.0, 0.0, 0.25) == pytest.approx(-2.0)
    assert stage_cost(0.1, 2.0, 0.25) == pytest.approx(0.05)
    assert stage_cost(0.1, 0.0, 0.25) == 0
    assert stage_cost(0.0, 5.0, 0.25) == 0
    assert terminal_cost(TANK, [1.5]) == pytest.approx(5.0)
    assert terminal_cost(TANK, [3.0]) == 0
    free = TankParams(1.0, 1.0, 0.0, 6.0, 2.0, 2.0, 0.0)
    assert terminal_cost(free, [0.5]) == 0


@given(st.floats(0.5, 1.0), st.floats(0.5, 1.0), st.floats(0.5, 1.0), st.floats(0.0, 3.0), st.floats(0.01, 1.5))
def test_round_trip_loses_energy(alpha, rc, rd, b, power):
    bat = BatteryParams(alpha, rc, rd, 0.0, 10.0, -2.0, 2.0)
    back = battery_step(bat, battery_step(bat, b, power, 0.25), -power, 0.25)
    # what two idle steps would leave
    idle = alpha * alpha * b
    assert back <= idle + 1e-12
    if alpha * rc * rd < 1.0:
        assert back < idle


def test_lossless_round_trip_is_exact():
    bat = BatteryParams(1.0, 1.0, 1.0, 0.0, 10.0, -2.0, 2.0)
    assert battery_step(bat, battery_step(bat, 1.0, 1.5, 0.25), -1.5, 0.25) == pytest.approx(1.0, abs=1e-15)


@given(st.lists(st.floats(-5, 5), min_size=5, max_size=5))
def test_balance_is_affine(v):
    u_ne, d_el, u_b, u_t, s = v
    dt = 0.25
    base = node_balance(u_ne, d_el, u_b, u_t, dt)
    assert node_balance(u_ne + s, d_el, u_b, u_t, dt) - base == pytest.approx(s, abs=1e-9)
    assert node_balance(u_ne, d_el, u_b + s, u_t, dt) - base == pytest.approx(-s, abs=1e-9)
    assert node_balance(u_ne, d_el, u_b, u_t + s, dt) - base == pytest.approx(-s, abs=1e-9)


def test_terminal_cost_convex_nonincreasing():
    h = np.linspace(-1, 8, 400)
    c = terminal_cost(TANK, h[:, None])
    assert np.all(np.diff(c) <= 1e-12)
    assert np.all(np.diff(c, 2) >= -1e-9)
    assert np.all(c[h >= TANK.h_ref] == 0)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(auto_discharge=0.0),
        dict(charge_yield=1.2),
        dict(b_min=3.0),
        dict(u_min=0.5),
    ],
)
def test_battery_validation(kwargs):
    base = dict(auto_discharge=1.0, charge_yield=0.9, discharge_yield=0.9, b_min=0.0, b_max=3.0, u_min=-1.0, u_max=1.0)
    base.update(kwargs)
    with pytest.raises(ValueError):
        BatteryParams(**base)


def test_tank_validation():
    with pytest.raises(ValueError):
        TankParams(1.0, 1.0, 0.0, 6.0, 2.0, 7.0, 1.0)
    with pytest.raises(ValueError):
        TankParams(1.1, 1.0, 0.0, 6.0, 2.0, 2.0, 1.0)
    with pytest.raises(ValueError):
        TankParams(1.0, 1.0, 0.0, 6.0, 2.0, 2.0, -1.0)


def test_node_model_state_dimension():
    price = np.full(4, 0.1)
    with_bat = NodeModel(TANK, BAT, 10.0, 0.25, price)
    without = NodeModel(TANK, None, 10.0, 0.25, price)
    assert with_bat.state_dim == 2 and without.state_dim == 1
    assert with_bat.horizon == 4
    lo, hi = with_bat.state_bounds()
    assert lo.tolist() == [0.0, 0.0] and hi.tolist() == [3.0, 6.0]
    x = next_state(with_bat, [2.0, 5.0], 1.0, 2.0, 0.25)
    assert np.allclose(x, [2.2375, 5.25])
    assert np.allclose(next_state(without, [5.0], 0.0, 2.0, 0.25), [5.25])
    with pytest.raises(ValueError):
        NodeModel(TANK, None, -1.0, 0.25, price)

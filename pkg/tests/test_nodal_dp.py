import numpy as np
import pytest

from microgrid_decomp.instance import single_node_instance, tiny_grids, tiny_instance
from microgrid_decomp.nodal_dp import (
    ControlGrid,
    NodalInfeasibility,
    StateGrid,
    TabularValueFunction,
    central_difference,
    evaluate,
    resource_gradient,
    resource_value,
    simulate_nodal,
    solve_price_dp,
    solve_resource_dp,
)
from microgrid_decomp.prosumer import NodeModel, TankParams, terminal_cost
from microgrid_decomp.uncertainty import make_distribution
from reference import grids_as_pairs, reference_value

DT = 0.25
FLAT_TANK = TankParams(1.0, 1.0, 0.0, 2.0, 0.0, 0.0, 0.0)
FLAT_GRID = StateGrid.uniform([0.0], [2.0], [3])
NO_HEAT = ControlGrid(None, np.array([0.0]))


def one_stage_node(price=1.0, import_max=5.0):
    return NodeModel(FLAT_TANK, None, import_max, DT, np.array([price]))


def unit_demand():
    # residual demand of 1 kW over the step
    return [make_distribution([[0.0, DT]], [1.0])]


@pytest.mark.parametrize("coord, expected", [(0.0, 0.0), (2 * DT, -2 * DT), (-2 * DT, -3 * DT)])
def test_price_dp_linear_examples(coord, expected):
    vfs = solve_price_dp(one_stage_node(), unit_demand(), [coord], FLAT_GRID, NO_HEAT)
    assert evaluate(vfs[0], [1.0]) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("coord, flow", [(2 * DT, -1.0), (-2 * DT, 4.0)])
def test_deterministic_simulation_follows_argmin(coord, flow):
    node = one_stage_node()
    vfs = solve_price_dp(node, unit_demand(), [coord], FLAT_GRID, NO_HEAT)
    sim = simulate_nodal(node, vfs, [coord], np.array([[[0.0, DT]]]), [1.0], NO_HEAT)
    assert sim.flows.tolist() == [[flow]] and sim.flagged_count == 0


def test_evaluate_examples():
    vf = TabularValueFunction(StateGrid.uniform([0.0], [1.0], [2]), np.array([0.0, 10.0]), 0)
    assert evaluate(vf, [0.5]) == pytest.approx(5.0)
    assert evaluate(vf, [1.0]) == 10.0
    assert evaluate(vf, [1.2]) == 10.0
    assert evaluate(vf, [-3.0]) == 0.0


def test_evaluate_bilinear_and_saturation():
    grid = StateGrid.uniform([0.0, 0.0], [1.0, 1.0], [2, 2])
    vf = TabularValueFunction(grid, np.array([[0.0, 1.0], [2.0, np.inf]]), 0)
    assert evaluate(vf, [0.5, 0.0]) == pytest.approx(1.0)
    assert evaluate(vf, [0.0, 0.5]) == pytest.approx(0.5)
    # a zero-weight infinite corner leaves grid faces finite
    assert evaluate(vf, [1.0, 0.0]) == 2.0
    assert evaluate(vf, [0.5, 0.5]) == np.inf


def test_two_atom_simulation_by_hand():
    tank = TankParams(1.0, 1.0, 0.0, 2.0, 2.0, 1.0, 10.0)
    node = NodeModel(tank, None, 10.0, DT, np.array([1.0]))
    law = make_distribution([[0.0, 0.25], [0.5, 0.5]], [0.3, 0.7])
    grid = StateGrid.uniform([0.0], [2.0], [9])
    controls = ControlGrid(None, np.array([0.0, 1.0, 2.0]))
    p = [-0.1]
    vfs = solve_price_dp(node, [law], p, grid, controls)
    # no draw: stay idle, flow -1; draw 0.5 kWh: heat 2 kW, flow -4
    assert evaluate(vfs[0], [1.0]) == pytest.approx(0.3 * 0.1 + 0.7 * 0.4, abs=1e-12)
    sim = simulate_nodal(node, vfs, p, np.array([[law.atoms[0]], [law.atoms[1]]]), [1.0], controls)
    assert sim.flows[:, 0] == pytest.approx([-1.0, -4.0])
    weighted = law.probabilities @ sim.flows[:, 0]
    assert weighted == pytest.approx(-3.1)


def test_simulation_is_reproducible():
    inst = tiny_instance()
    g = tiny_grids(inst)[0]
    node, laws = inst.nodes[0], inst.noise.node_laws(0)
    p = np.array([0.01, -0.02, 0.03])
    vfs = solve_price_dp(node, laws, p, g.state, g.controls)
    noise = np.random.default_rng(4).choice([0, 1], size=(200, 3))
    vals = laws[0].atoms[noise]
    a = simulate_nodal(node, vfs, p, vals, inst.x0[0], g.controls)
    b = simulate_nodal(node, vfs, p, vals, inst.x0[0], g.controls)
    assert np.array_equal(a.flows, b.flows) and np.array_equal(a.mean_flow, b.mean_flow)


def test_terminal_stage_is_exact():
    inst = tiny_instance()
    for node, g, i in zip(inst.nodes, tiny_grids(inst), range(2)):
        vfs = solve_price_dp(node, inst.noise.node_laws(i), np.zeros(3), g.state, g.controls)
        assert np.array_equal(vfs[-1].values.ravel(), terminal_cost(node.tank, g.state.points()))
        assert len(vfs) == inst.horizon + 1


def test_price_dp_matches_references_without_tariff():
    inst = single_node_instance(import_price=(0.0, 0.0, 0.0))
    g = tiny_grids(inst)[0]
    vfs = solve_price_dp(inst.nodes[0], inst.noise.node_laws(0), np.zeros(3), g.state, g.controls)
    expected = reference_value(inst, grids_as_pairs([g]))
    assert evaluate(vfs[0], inst.x0[0]) == pytest.approx(expected, abs=1e-9)


def test_resource_dp_at_zero_matches_reference():
    inst = single_node_instance()
    g = tiny_grids(inst)[0]
    value = resource_value(inst.nodes[0], inst.noise.node_laws(0), np.zeros(3), g.state, g.controls, inst.x0[0])
    assert value >= 0
    assert value == pytest.approx(reference_value(inst, grids_as_pairs([g])), abs=1e-9)


def test_resource_forced_export_is_infinite():
    inst = single_node_instance()
    g = tiny_grids(inst)[0]
    vfs = solve_resource_dp(inst.nodes[0], inst.noise.node_laws(0), np.full(3, -50.0), g.state, g.controls)
    assert evaluate(vfs[0], inst.x0[0]) == np.inf


def test_price_dp_reports_infeasible_start():
    tank = TankParams(1.0, 1.0, 0.0, 2.0, 0.0, 0.0, 0.0)
    node = NodeModel(tank, None, 5.0, DT, np.array([1.0]))
    law = [make_distribution([[0.5, 0.0]], [1.0])]
    with pytest.raises(NodalInfeasibility):
        solve_price_dp(node, law, [0.0], FLAT_GRID, NO_HEAT, x0=[0.0])


def test_input_validation():
    node = one_stage_node()
    with pytest.raises(ValueError):
        solve_price_dp(node, unit_demand() * 2, [0.0], FLAT_GRID, NO_HEAT)
    with pytest.raises(ValueError):
        solve_price_dp(node, unit_demand(), [0.0, 1.0], FLAT_GRID, NO_HEAT)
    with pytest.raises(ValueError):
        solve_price_dp(node, unit_demand(), [np.nan], FLAT_GRID, NO_HEAT)


def test_expectation_outside_min_is_lower():
    inst = tiny_instance()
    rng = np.random.default_rng(1)
    for i, g in enumerate(tiny_grids(inst)):
        p = rng.normal(scale=0.05, size=3)
        args = (inst.nodes[i], inst.noise.node_laws(i), p, g.state, g.controls)
        hd = solve_price_dp(*args)
        dh = solve_price_dp(*args, information="decision-hazard")
        for a, b in zip(hd, dh):
            fin = np.isfinite(b.values)
            assert np.all(a.values[fin] <= b.values[fin] + 1e-12)
            assert np.all(np.isfinite(a.values[fin]))


def test_price_value_is_concave():
    inst = tiny_instance()
    g = tiny_grids(inst)[0]
    node, laws, x0 = inst.nodes[0], inst.noise.node_laws(0), inst.x0[0]
    rng = np.random.default_rng(2)

    def V(p):
        return evaluate(solve_price_dp(node, laws, p, g.state, g.controls)[0], x0)

    for _ in range(10):
        p1, p2 = rng.normal(scale=0.1, size=(2, 3))
        lam = rng.uniform()
        assert V(lam * p1 + (1 - lam) * p2) >= lam * V(p1) + (1 - lam) * V(p2) - 1e-9


def _affine_node(import_max=20.0):
    tank = TankParams(1.0, 1.0, 0.0, 2.0, 1.0, 0.0, 0.0)
    node = NodeModel(tank, None, import_max, DT, np.array([0.2, 0.1, 0.3]))
    laws = [make_distribution([[0.0, 0.5], [0.0, 0.75]], [0.5, 0.5])] * 3
    return node, laws, StateGrid.uniform([0.0], [2.0], [9]), ControlGrid(None, np.array([0.0, 1.0]))


def test_resource_gradient_equals_tariff_slope():
    node, laws, grid, controls = _affine_node()
    mu = resource_gradient(node, laws, np.zeros(3), grid, [1.0], controls=controls)
    assert mu == pytest.approx(node.import_price * DT, abs=1e-9)


def test_resource_gradient_one_sided_at_import_bound():
    node, laws, grid, controls = _affine_node(import_max=3.0)
    # the larger draw needs exactly the 3 kW bound at r = 0, so the + side is infeasible
    r = np.zeros(3)
    vals = [
        resource_value(node, laws, r + d * np.eye(3)[2], grid, controls, [1.0]) for d in (-1e-2, 0.0, 1e-2)
    ]
    assert np.isfinite(vals[0]) and np.isfinite(vals[1]) and vals[2] == np.inf
    mu = resource_gradient(node, laws, r, grid, [1.0], controls=controls)
    assert mu[2] == pytest.approx((vals[1] - vals[0]) / 1e-2, abs=1e-9)
    assert mu == pytest.approx(node.import_price * DT, abs=1e-9)


def test_resource_gradient_both_sides_infeasible():
    tank = TankParams(1.0, 1.0, 0.0, 2.0, 0.0, 0.0, 0.0)
    node = NodeModel(tank, None, 0.0, DT, np.array([0.2]))
    law = [make_distribution([[0.0, 0.5]], [1.0])]
    r = np.array([-2.0])  # the only admissible point: u_ne = 0
    assert np.isfinite(resource_value(node, law, r, FLAT_GRID, NO_HEAT, [1.0]))
    with pytest.raises(NodalInfeasibility):
        resource_gradient(node, law, r, FLAT_GRID, [1.0], controls=NO_HEAT)
    mu = resource_gradient(node, law, r, FLAT_GRID, [1.0], controls=NO_HEAT, on_boundary="nan")
    assert np.isnan(mu[0])


def test_central_difference_second_order():
    x = np.array([0.3, -0.2, 0.1])
    c = np.array([1.0, 2.0, -0.5])
    exact = c * np.exp(c * x)

    def at(h):
        return central_difference(lambda t, d: float(np.sum(np.exp(c * (x + d * np.eye(3)[t])))), x, h)

    e1, e2 = np.abs(at(1e-2) - exact), np.abs(at(5e-3) - exact)
    assert np.all(e1 < 1e-3)
    assert np.all(np.abs(e1 / e2 - 4.0) < 0.1)


def test_central_difference_kink_guard_keeps_smooth_side():
    def f(t, d):
        r = d
        return r + (10.0 if r > 0.005 else 0.0)

    g = central_difference(f, np.zeros(1), 1e-2, kink_guard=True)
    assert g[0] == pytest.approx(1.0)
    raw = central_difference(f, np.zeros(1), 1e-2)
    assert raw[0] == pytest.approx((10.01 + 0.01) / 0.02)

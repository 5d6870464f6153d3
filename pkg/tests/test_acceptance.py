"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The generated-instance criteria (8, 9) run at smoke scale: coarse grids and
reduced sample counts. Their bounds are checked, not their accuracy.
"""

import math
import time

import numpy as np
import pytest

from conftest import TINY_DETERMINISTIC_ORACLE, TINY_ORACLE, record_criterion
from microgrid_decomp.cli import main
from microgrid_decomp.coordination import CoordinationOptions, dadp_run, padp_run
from microgrid_decomp.edges import EdgeCosts, solve_edge_resource
from microgrid_decomp.instance import FAMILIES, generate, make_grids, save, single_node_instance, tiny_grids, tiny_instance
from microgrid_decomp.network import GraphTopology, build_incidence, duality_pairing, project_onto_image
from microgrid_decomp.nodal_dp import (
    ControlGrid,
    StateGrid,
    central_difference,
    evaluate,
    resource_gradient,
    solve_price_dp,
    solve_resource_dp,
)
from microgrid_decomp.oracle import exhaustive_solve
from microgrid_decomp.policy import GlobalValueStack, simulate_policy
from microgrid_decomp.prosumer import NodeModel, TankParams
from microgrid_decomp.sddp import SddpOptions, sddp_run
from microgrid_decomp.uncertainty import make_distribution
from reference import lstsq_projection

SMOKE_GRID_POINTS = 11
SMOKE_CONTROL_POINTS = 5
SMOKE_DADP = CoordinationOptions(max_iters=30, mc_samples=200)
SMOKE_PADP = CoordinationOptions(max_iters=20)
SMOKE_SDDP = SddpOptions(max_iters=30, resample_k=20, resample_samples=2000, ub_scenarios=50)
REFERENCE_ITERATIONS = {"dadp": 30, "padp": 20, "sddp": 180}


def test_criterion_01_sandwich(tiny_dadp, tiny_padp, tiny_oracle):
    lb, ub = tiny_dadp.bound, tiny_padp.bound
    ok = lb <= tiny_oracle + 1e-6 and tiny_oracle <= ub + 1e-6
    record_criterion(1, "DADP LB <= oracle <= PADP UB on the tiny instance", ok, f"{lb:.6f} <= {tiny_oracle:.6f} <= {ub:.6f}")
    assert ok


def test_criterion_02_oracle_equivalence():
    free = single_node_instance(import_price=(0.0, 0.0, 0.0))
    g = tiny_grids(free)[0]
    price = evaluate(solve_price_dp(free.nodes[0], free.noise.node_laws(0), np.zeros(3), g.state, g.controls)[0], free.x0[0])
    price_ref = exhaustive_solve(free, tiny_grids(free))
    tariffed = single_node_instance()
    g = tiny_grids(tariffed)[0]
    resource = evaluate(
        solve_resource_dp(tariffed.nodes[0], tariffed.noise.node_laws(0), np.zeros(3), g.state, g.controls)[0], tariffed.x0[0]
    )
    resource_ref = exhaustive_solve(tariffed, tiny_grids(tariffed))
    err = max(abs(price - price_ref), abs(resource - resource_ref))
    ok = err <= 1e-9
    record_criterion(2, "nodal DPs at p = 0 and r = 0 equal the exhaustive oracle", ok, f"max error {err:.1e}")
    assert ok


def _family_topologies():
    return {name: generate(name, seed=0, horizon=1).topology for name in sorted(FAMILIES, key=lambda k: FAMILIES[k])}


def test_criterion_03_duality_identity():
    rng = np.random.default_rng(3)
    topologies = list(_family_topologies().values())
    worst = 0.0
    for k in range(100):
        topo = topologies[k % len(topologies)]
        A = build_incidence(topo)
        p, f = rng.normal(size=(2, 4, topo.num_nodes))
        q = rng.normal(size=(4, topo.num_edges))
        lhs, rhs = duality_pairing(A, p, f, q)
        worst = max(worst, abs(lhs - rhs))
    ok = worst <= 1e-12
    record_criterion(3, "<p,f> + <A'p,q> = <p,Aq+f> on 100 draws", ok, f"max gap {worst:.1e}")
    assert ok


def test_criterion_04_projection():
    rng = np.random.default_rng(4)
    topologies = list(_family_topologies().values())
    worst = 0.0
    for k in range(50):
        topo = topologies[k % len(topologies)]
        r = rng.normal(size=(3, topo.num_nodes))
        out = project_onto_image(r, topo)
        worst = max(worst, np.abs(project_onto_image(out, topo) - out).max())
        worst = max(worst, np.abs(out - lstsq_projection(r, build_incidence(topo))).max())
        for comp in topo.components():
            worst = max(worst, np.abs(out[:, comp].sum(axis=1)).max())
    ok = worst <= 1e-9
    record_criterion(4, "projection idempotent, zero-sum per component, equals least squares", ok, f"max error {worst:.1e}")
    assert ok


def test_criterion_05_sddp_soundness(tiny_sddp):
    lb = tiny_sddp.lb_trace
    drop = max((a - b for a, b in zip(lb, lb[1:])), default=0.0)
    det = sddp_run(tiny_instance(stochastic=False, edge_quad=0.0, edge_lin=0.01), SddpOptions(max_iters=50))
    checks = {
        "monotone": drop <= 1e-9,
        "deterministic": abs(det.lower_bound - TINY_DETERMINISTIC_ORACLE) <= 1e-6,
        "jensen": tiny_sddp.lower_bound <= TINY_ORACLE + 1e-6,
        "gap stop": tiny_sddp.stop_reason == "gap",
    }
    ok = all(checks.values())
    detail = (
        f"LB drop {max(drop, 0.0):.1e}, deterministic LB {det.lower_bound:.8f}, "
        f"stochastic LB {tiny_sddp.lower_bound:.6f}, stop {tiny_sddp.stop_reason}"
    )
    record_criterion(5, "SDDP lower bound monotone, exact when deterministic, below oracle, gap stop", ok, detail)
    assert ok, checks


def _edge_stage_fd(costs, topo, r, t, i, h=1e-6):
    direction = project_onto_image(np.eye(topo.num_nodes)[i][None], topo)[0]
    vals = []
    for s in (h, -h):
        rr = r.copy()
        rr[t] += s * direction
        vals.append(solve_edge_resource(costs, topo, rr).stage_values[t])
    return (vals[0] - vals[1]) / (2 * h)


def test_criterion_06_multipliers():
    rng = np.random.default_rng(6)
    shapes = [
        GraphTopology.from_one_based(3, [(1, 2), (2, 3), (1, 3)]),
        GraphTopology.from_one_based(3, [(1, 2), (2, 3)]),
    ]
    xi_err, checked = 0.0, 0
    for k in range(20):
        topo = shapes[k % 2]
        E, T = topo.num_edges, 2
        bound = rng.uniform(0.6, 1.5, (T, E))
        costs = EdgeCosts(rng.uniform(0.2, 2.0, (T, E)), rng.normal(scale=0.5, size=(T, E)), -bound, bound)
        r = project_onto_image(rng.normal(scale=0.5, size=(T, topo.num_nodes)), topo)
        sol = solve_edge_resource(costs, topo, r)
        for t in range(T):
            if not np.isfinite(sol.stage_values[t]):
                continue
            checked += 1
            for i in range(topo.num_nodes):
                xi_err = max(xi_err, abs(sol.xi[t, i] - _edge_stage_fd(costs, topo, r, t, i)))

    # the nodal resource value is affine in r with slope price * dt
    tank = TankParams(1.0, 1.0, 0.0, 2.0, 1.0, 0.0, 0.0)
    node = NodeModel(tank, None, 20.0, 0.25, np.array([0.2, 0.1, 0.3]))
    laws = [make_distribution([[0.0, 0.5], [0.0, 0.75]], [0.5, 0.5])] * 3
    grid, controls = StateGrid.uniform([0.0], [2.0], [9]), ControlGrid(None, np.array([0.0, 1.0]))
    mu = resource_gradient(node, laws, np.zeros(3), grid, [1.0], controls=controls)
    mu_err = np.abs(mu - node.import_price * node.dt).max()

    # second order of the difference scheme on a smooth function with known gradient
    x, c = np.array([0.3, -0.2, 0.1]), np.array([1.0, 2.0, -0.5])
    exact = c * np.exp(c * x)

    def fd(h):
        return central_difference(lambda t, d: float(np.sum(np.exp(c * (x + d * np.eye(3)[t])))), x, h)

    ratio = np.abs(fd(1e-2) - exact) / np.abs(fd(5e-3) - exact)
    ok = checked >= 20 and xi_err <= 1e-4 and mu_err <= 1e-9 and np.all(np.abs(ratio - 4.0) < 0.1)
    detail = f"xi vs FD {xi_err:.1e} over {checked} stages, mu vs slope {mu_err:.1e}, error ratio {ratio.min():.3f}-{ratio.max():.3f}"
    record_criterion(6, "edge multipliers and resource gradient match finite differences", ok, detail)
    assert ok


def test_criterion_07_policy_admissibility(tiny, tiny_g, tiny_sddp, tiny_dadp, tiny_padp):
    stacks = {
        "sddp": GlobalValueStack.from_sddp(tiny_sddp),
        "dadp": GlobalValueStack.from_coordination(tiny_dadp),
        "padp": GlobalValueStack.from_coordination(tiny_padp),
    }
    lb, ub = tiny_dadp.bound, tiny_padp.bound
    ok, parts = True, []
    for kind, stack in stacks.items():
        rep = simulate_policy(tiny, stack, 1000, seed=7, grids=tiny_g)
        admissible = rep.flagged == 0 and rep.max_violation <= 1e-9
        ok &= admissible and rep.mean + rep.half_width >= lb and rep.mean - rep.half_width <= ub
        parts.append(f"{kind} {rep.mean:.6f} +- {rep.half_width:.6f} (violation {rep.max_violation:.0e}, flagged {rep.flagged})")
    detail = f"LB {lb:.6f}, UB {ub:.6f}; " + "; ".join(parts)
    record_criterion(7, "1000-scenario policies admissible and placed against the bounds", ok, detail)
    assert ok


def _generated_runs(family):
    inst = generate(family, seed=0)
    grids = make_grids(inst, SMOKE_GRID_POINTS, SMOKE_CONTROL_POINTS)
    runs, times = {}, {}
    for name, run in (
        ("dadp", lambda: dadp_run(inst, SMOKE_DADP, grids)),
        ("padp", lambda: padp_run(inst, SMOKE_PADP, grids)),
        ("sddp", lambda: sddp_run(inst, SMOKE_SDDP)),
    ):
        start = time.perf_counter()
        runs[name] = run()
        times[name] = time.perf_counter() - start
    return inst, runs, times


@pytest.fixture(scope="module")
def three_node_runs():
    return _generated_runs("3-nodes")


@pytest.fixture(scope="module")
def twelve_node_runs():
    return _generated_runs("12-nodes")


def test_criterion_08_monotone_coordination(three_node_runs):
    _, runs, _ = three_node_runs
    dadp, padp = runs["dadp"], runs["padp"]
    up = [r.bound for r in dadp.trace]
    down = [r.bound for r in padp.trace]
    checks = {
        "dadp nondecreasing": all(b >= a for a, b in zip(up, up[1:])),
        "padp nonincreasing": all(b <= a for a, b in zip(down, down[1:])),
        "dadp within cap": dadp.iterations <= SMOKE_DADP.max_iters,
        "padp within cap": padp.iterations <= SMOKE_PADP.max_iters,
    }
    ok = all(checks.values())
    detail = (
        f"dadp {up[0]:.4f} -> {up[-1]:.4f} in {dadp.iterations} ({dadp.stop_reason}), "
        f"padp {down[0]:.4f} -> {down[-1]:.4f} in {padp.iterations} ({padp.stop_reason})"
    )
    record_criterion(8, "DADP trace rises, PADP trace falls, both within the cap (3 nodes)", ok, detail)
    assert ok, checks


def test_criterion_09_protocol_smoke(twelve_node_runs):
    inst, runs, times = twelve_node_runs
    dadp, padp, sddp = runs["dadp"], runs["padp"], runs["sddp"]
    lower = max(dadp.bound, sddp.lower_bound)
    finite = all(math.isfinite(v) for v in (dadp.bound, padp.bound, sddp.lower_bound))
    ok = inst.state_dim == 16 and inst.horizon == 96 and finite and lower <= padp.bound + 1e-6 * max(1.0, abs(lower))
    iters = ", ".join(
        f"{k} {runs[k].iterations} iters (reference {REFERENCE_ITERATIONS[k]}) {times[k]:.0f}s" for k in ("dadp", "padp", "sddp")
    )
    detail = f"DADP LB {dadp.bound:.4f}, SDDP LB {sddp.lower_bound:.4f}, PADP UB {padp.bound:.4f}; {iters}"
    record_criterion(9, "12-node instance solved by all three methods with LB <= UB", ok, detail)
    assert ok


TINY_FLAGS = ["--grid-points", "9", "--control-points", "5"]


def test_criterion_10_reproducibility(tmp_path):
    inst = tmp_path / "tiny.json"
    save(tiny_instance(), inst)
    cases = {
        "dadp": TINY_FLAGS + ["--max-iters", "5", "--mc-samples", "200"],
        "padp": TINY_FLAGS + ["--max-iters", "5"],
        "sddp": ["--max-iters", "10", "--ub-scenarios", "50"],
    }
    mismatched = []
    for algo, extra in cases.items():
        dirs = [tmp_path / f"{algo}-{k}" for k in range(2)]
        for d in dirs:
            assert main(["solve", "--instance", str(inst), "--algo", algo, "--out", str(d), "--seed", "1", *extra]) == 0
            assert main(["simulate", "--run", str(d), "--scenarios", "30", "--seed", "2"]) == 0
        for name in ("summary.json", "simulation.json", "simulation.csv", "values.npz"):
            if (dirs[0] / name).read_bytes() != (dirs[1] / name).read_bytes():
                mismatched.append(f"{algo}/{name}")
    ok = not mismatched
    record_criterion(10, "solve and simulate reruns give byte-identical outputs", ok, ", ".join(mismatched) or "dadp, padp, sddp")
    assert ok

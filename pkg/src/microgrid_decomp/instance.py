"""Problem instances: data model, JSON schema, synthetic generator and tiny test cases.

The file format is JSON with a ``schema_version`` field. Node and edge
indices are 1-based in files and 0-based in memory. An infinite flow bound
is written as ``null``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .edges import EdgeCosts
from .network import GraphTopology, build_incidence
from .nodal_dp import DEFAULT_CONTROL_POINTS, DEFAULT_STATE_POINTS, ControlGrid, StateGrid
from .prosumer import BatteryParams, NodeModel, TankParams
from .uncertainty import FiniteDistribution, NoiseModel, make_distribution

SCHEMA_VERSION = 1

# (nodes, edges) per synthetic family
FAMILIES = {
    "3-nodes": (3, 3),
    "6-nodes": (6, 7),
    "12-nodes": (12, 16),
    "24-nodes": (24, 33),
    "48-nodes": (48, 69),
}


class InstanceError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Instance:
    topology: GraphTopology
    nodes: tuple[NodeModel, ...]
    edge_costs: EdgeCosts
    noise: NoiseModel
    x0: tuple[np.ndarray, ...]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        nodes = tuple(self.nodes)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "x0", tuple(np.asarray(x, dtype=float) for x in self.x0))
        N, T = self.topology.num_nodes, nodes[0].horizon if nodes else 0
        if len(nodes) != N:
            raise InstanceError(f"topology has {N} nodes but {len(nodes)} node models were given")
        if len({n.horizon for n in nodes}) != 1 or len({n.dt for n in nodes}) != 1:
            raise InstanceError("all nodes must share the horizon and the time step")
        if self.noise.horizon != T or self.noise.num_nodes != N:
            raise InstanceError("noise model shape does not match the nodes")
        for t in range(T):
            for i in range(N):
                if self.noise.law(t, i).dim != 2:
                    raise InstanceError("node noise atoms must be (hot water draw, residual demand)")
        ec = self.edge_costs
        if ec.quad.shape != (T, self.topology.num_edges):
            raise InstanceError(f"edge cost arrays must have shape {(T, self.topology.num_edges)}")
        linear_open = (ec.quad == 0) & ~(np.isfinite(ec.q_min) & np.isfinite(ec.q_max))
        if np.any(linear_open):
            t, e = np.argwhere(linear_open)[0]
            raise InstanceError(f"edge {e + 1} at stage {t} is linear with an open bound")
        if len(self.x0) != N:
            raise InstanceError("one initial state per node is required")
        for i, (node, x) in enumerate(zip(nodes, self.x0)):
            lo, hi = node.state_bounds()
            if x.shape != lo.shape or np.any(x < lo) or np.any(x > hi):
                raise InstanceError(f"initial state of node {i + 1} is outside its bounds")

    @property
    def horizon(self) -> int:
        return self.nodes[0].horizon

    @property
    def dt(self) -> float:
        return self.nodes[0].dt

    @property
    def num_nodes(self) -> int:
        return self.topology.num_nodes

    @property
    def num_edges(self) -> int:
        return self.topology.num_edges

    @property
    def state_dim(self) -> int:
        return sum(n.state_dim for n in self.nodes)

    @property
    def noise_dim(self) -> int:
        return 2 * self.num_nodes

    def incidence(self) -> np.ndarray:
        return build_incidence(self.topology)

    def state_slices(self) -> list[slice]:
        out, k = [], 0
        for n in self.nodes:
            out.append(slice(k, k + n.state_dim))
            k += n.state_dim
        return out

    def global_x0(self) -> np.ndarray:
        return np.concatenate(self.x0)


@dataclass(frozen=True)
class NodeGrids:
    state: StateGrid
    controls: ControlGrid


def make_grids(
    instance: Instance,
    state_points: int = DEFAULT_STATE_POINTS,
    control_points: int = DEFAULT_CONTROL_POINTS,
) -> list[NodeGrids]:
    return [
        NodeGrids(StateGrid.for_node(n, state_points), ControlGrid.for_node(n, control_points))
        for n in instance.nodes
    ]


# --- serialization -----------------------------------------------------------

_TOP_KEYS = {"schema_version", "horizon", "dt", "nodes", "edges", "metadata"}
_NODE_KEYS = {"battery", "tank", "import_max", "import_price", "x0", "noise"}
_NOISE_KEYS = {"atoms", "probabilities"}
_EDGE_KEYS = {"tail", "head", "quad", "lin", "q_min", "q_max"}
_BATTERY_KEYS = {"auto_discharge", "charge_yield", "discharge_yield", "b_min", "b_max", "u_min", "u_max"}
_TANK_KEYS = {"conduction_loss", "conversion", "h_min", "h_max", "u_max", "h_ref", "penalty"}


def _check_keys(obj: Any, allowed: set, where: str, required: set | None = None) -> None:
    if not isinstance(obj, dict):
        raise InstanceError(f"{where}: expected an object")
    extra = set(obj) - allowed
    if extra:
        raise InstanceError(f"{where}: unknown keys {sorted(extra)}")
    missing = (allowed if required is None else required) - set(obj)
    if missing:
        raise InstanceError(f"{where}: missing keys {sorted(missing)}")


def _per_stage(value, T: int, where: str, allow_null: bool = False, null_as: float = math.nan) -> np.ndarray:
    def conv(v):
        if v is None:
            if not allow_null:
                raise InstanceError(f"{where}: null not allowed")
            return null_as
        return float(v)

    if isinstance(value, list):
        if len(value) != T:
            raise InstanceError(f"{where}: expected {T} stage values, got {len(value)}")
        return np.array([conv(v) for v in value])
    return np.full(T, conv(value))


def _compact(arr: np.ndarray, null_inf: bool = False):
    def one(v):
        v = float(v)
        if null_inf and math.isinf(v):
            return None
        return v

    if np.all(arr == arr[0]):
        return one(arr[0])
    return [one(v) for v in arr]


def instance_to_dict(inst: Instance) -> dict:
    T = inst.horizon
    nodes = []
    for i, n in enumerate(inst.nodes):
        laws = inst.noise.node_laws(i)
        nodes.append(
            {
                "battery": None if n.battery is None else {k: getattr(n.battery, k) for k in sorted(_BATTERY_KEYS)},
                "tank": {k: getattr(n.tank, k) for k in sorted(_TANK_KEYS)},
                "import_max": float(n.import_max),
                "import_price": [float(v) for v in n.import_price],
                "x0": [float(v) for v in inst.x0[i]],
                "noise": {
                    "atoms": [law.atoms.tolist() for law in laws],
                    "probabilities": [law.probabilities.tolist() for law in laws],
                },
            }
        )
    ec = inst.edge_costs
    edges = []
    for e, (u, v) in enumerate(inst.topology.edges):
        edges.append(
            {
                "tail": u + 1,
                "head": v + 1,
                "quad": _compact(ec.quad[:, e]),
                "lin": _compact(ec.lin[:, e]),
                "q_min": _compact(ec.q_min[:, e], null_inf=True),
                "q_max": _compact(ec.q_max[:, e], null_inf=True),
            }
        )
    return {
        "schema_version": SCHEMA_VERSION,
        "horizon": T,
        "dt": float(inst.dt),
        "nodes": nodes,
        "edges": edges,
        "metadata": dict(inst.metadata),
    }


def instance_from_dict(doc: dict) -> Instance:
    _check_keys(doc, _TOP_KEYS, "instance", required=_TOP_KEYS - {"metadata"})
    if doc["schema_version"] != SCHEMA_VERSION:
        raise InstanceError(f"unsupported schema_version {doc['schema_version']!r}")
    T, dt = int(doc["horizon"]), float(doc["dt"])
    if T < 1:
        raise InstanceError("horizon must be at least 1")
    models, x0, laws_by_node = [], [], []
    try:
        for i, nd in enumerate(doc["nodes"]):
            where = f"nodes[{i}]"
            _check_keys(nd, _NODE_KEYS, where)
            bat = None
            if nd["battery"] is not None:
                _check_keys(nd["battery"], _BATTERY_KEYS, where + ".battery")
                bat = BatteryParams(**{k: float(v) for k, v in nd["battery"].items()})
            _check_keys(nd["tank"], _TANK_KEYS, where + ".tank")
            tank = TankParams(**{k: float(v) for k, v in nd["tank"].items()})
            price = _per_stage(nd["import_price"], T, where + ".import_price")
            models.append(NodeModel(tank, bat, float(nd["import_max"]), dt, price))
            x0.append(np.asarray(nd["x0"], dtype=float))
            _check_keys(nd["noise"], _NOISE_KEYS, where + ".noise")
            atoms, probs = nd["noise"]["atoms"], nd["noise"]["probabilities"]
            if len(atoms) != T or len(probs) != T:
                raise InstanceError(f"{where}.noise: expected {T} stage laws")
            laws_by_node.append([make_distribution(a, p) for a, p in zip(atoms, probs)])
        edge_list, cols = [], {k: [] for k in ("quad", "lin", "q_min", "q_max")}
        for e, ed in enumerate(doc["edges"]):
            where = f"edges[{e}]"
            _check_keys(ed, _EDGE_KEYS, where)
            edge_list.append((int(ed["tail"]), int(ed["head"])))
            cols["quad"].append(_per_stage(ed["quad"], T, where + ".quad"))
            cols["lin"].append(_per_stage(ed["lin"], T, where + ".lin"))
            cols["q_min"].append(_per_stage(ed["q_min"], T, where + ".q_min", True, -math.inf))
            cols["q_max"].append(_per_stage(ed["q_max"], T, where + ".q_max", True, math.inf))
        topo = GraphTopology.from_one_based(len(models), edge_list)
        E = len(edge_list)
        arr = {k: (np.stack(v, axis=1) if E else np.zeros((T, 0))) for k, v in cols.items()}
        costs = EdgeCosts(arr["quad"], arr["lin"], arr["q_min"], arr["q_max"])
        noise = NoiseModel([[laws_by_node[i][t] for i in range(len(models))] for t in range(T)])
        return Instance(topo, tuple(models), costs, noise, tuple(x0), dict(doc.get("metadata", {})))
    except InstanceError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise InstanceError(str(exc)) from exc


def dumps(inst: Instance) -> str:
    return json.dumps(instance_to_dict(inst), indent=1, sort_keys=True)


def save(inst: Instance, path) -> None:
    Path(path).write_text(dumps(inst) + "\n")


def load(path) -> Instance:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InstanceError(f"{path}: not valid JSON ({exc})") from exc
    return instance_from_dict(doc)


# --- synthetic generator -----------------------------------------------------

BATTERY = BatteryParams(0.999, 0.95, 0.95, 0.0, 3.0, -1.5, 1.5)
TANK = TankParams(0.998, 1.0, 0.0, 6.0, 2.2, 3.0, 0.3)
EDGE_QUAD, EDGE_BOUND = 0.002, 6.0
PEAK_PRICE, OFFPEAK_PRICE = 0.17, 0.13
ATOMS_PER_NODE = 10


def _bump(hours, center, width):
    return np.exp(-0.5 * ((hours - center) / width) ** 2)


def _random_graph(nv: int, ne: int, batteries, solar, rng) -> list[tuple[int, int]]:
    """Random connected simple graph; solar node j hangs off battery node j."""
    undirected: set[frozenset] = set()
    in_tree = [int(batteries[0])] if len(batteries) else [int(rng.integers(nv))]

    def link(u, v):
        undirected.add(frozenset((int(u), int(v))))

    for b in batteries[1:]:
        link(b, in_tree[int(rng.integers(len(in_tree)))])
        in_tree.append(int(b))
    for j, s in enumerate(solar):
        link(s, batteries[j % len(batteries)])
        in_tree.append(int(s))
    for v in rng.permutation(nv):
        if int(v) not in in_tree:
            link(v, in_tree[int(rng.integers(len(in_tree)))])
            in_tree.append(int(v))
    candidates = [(u, v) for u in range(nv) for v in range(u + 1, nv) if frozenset((u, v)) not in undirected]
    extra = rng.permutation(len(candidates))[: ne - len(undirected)]
    for k in extra:
        link(*candidates[k])
    edges = []
    for pair in sorted(tuple(sorted(p)) for p in undirected):
        u, v = pair
        edges.append((u, v) if rng.random() < 0.5 else (v, u))
    return edges


def generate(family, seed: int, horizon: int = 96, dt: float = 0.25) -> Instance:
    """Synthetic instance for a named family or a ``(num_nodes, num_edges)`` pair.

    A third of the buildings get a 3 kWh battery, another third a solar
    panel wired to one of the battery buildings. Demands follow daily
    profiles with seeded multiplicative noise, ten equiprobable atoms per
    node and stage.
    """
    if isinstance(family, str):
        if family not in FAMILIES:
            raise InstanceError(f"unknown family {family!r}; choose from {sorted(FAMILIES)}")
        nv, ne = FAMILIES[family]
        name = family
    else:
        nv, ne = (int(v) for v in family)
        name = f"custom-{nv}-{ne}"
        if nv < 1:
            raise InstanceError("at least one node is required")
        if ne < nv - 1:
            raise InstanceError(f"{ne} edges cannot connect {nv} nodes")
        if ne > nv * (nv - 1) // 2:
            raise InstanceError(f"{ne} edges exceed the simple-graph maximum for {nv} nodes")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(nv)
    n_bat = nv // 3
    batteries, solar = perm[:n_bat], perm[n_bat : 2 * n_bat]
    edges = _random_graph(nv, ne, batteries, solar, rng)
    topo = GraphTopology(nv, tuple(edges))

    hours = np.arange(horizon) * dt
    price = np.where((hours >= 6) & (hours < 22), PEAK_PRICE, OFFPEAK_PRICE)
    hw_profile = 0.02 + 0.25 * _bump(hours, 7.5, 0.7) + 0.2 * _bump(hours, 20.0, 1.0)
    el_profile = 0.08 + 0.12 * _bump(hours, 8.0, 1.5) + 0.2 * _bump(hours, 19.5, 2.0)
    pv_profile = 0.35 * np.clip(np.sin(np.pi * (hours - 7.0) / 12.0), 0.0, None)
    hw_cap = 0.9 * dt * TANK.conversion * TANK.u_max

    nodes, x0, laws = [], [], []
    for i in range(nv):
        scale = rng.uniform(0.8, 1.2)
        has_pv = i in set(solar.tolist())
        hw = hw_profile[:, None] * scale * np.exp(0.3 * rng.standard_normal((horizon, ATOMS_PER_NODE)) - 0.045)
        el = el_profile[:, None] * scale * np.exp(0.2 * rng.standard_normal((horizon, ATOMS_PER_NODE)) - 0.02)
        if has_pv:
            el = el - pv_profile[:, None] * rng.uniform(0.3, 1.0, (horizon, ATOMS_PER_NODE))
        hw = np.minimum(hw, hw_cap)
        el = np.maximum(el, 0.0)
        probs = np.full(ATOMS_PER_NODE, 1.0 / ATOMS_PER_NODE)
        laws.append([make_distribution(np.column_stack([hw[t], el[t]]), probs) for t in range(horizon)])
        bat = BATTERY if i in set(batteries.tolist()) else None
        peak = float(el.max()) / dt
        u_bat = bat.u_max if bat else 0.0
        import_max = max(3.0 * peak, peak + u_bat + TANK.u_max)
        nodes.append(NodeModel(TANK, bat, import_max, dt, price.copy()))
        x0.append(np.array([1.5, 3.0]) if bat else np.array([3.0]))
    E = len(edges)
    costs = EdgeCosts.constant(horizon, [EDGE_QUAD] * E, [0.0] * E, [-EDGE_BOUND] * E, [EDGE_BOUND] * E)
    noise = NoiseModel([[laws[i][t] for i in range(nv)] for t in range(horizon)])
    meta = {
        "generator": name,
        "seed": int(seed),
        "batteries": sorted(int(b) + 1 for b in batteries),
        "solar": sorted(int(s) + 1 for s in solar),
    }
    return Instance(topo, tuple(nodes), costs, noise, tuple(x0), meta)


# --- grid-exact tiny instances -----------------------------------------------

TINY_STEP = 0.25
TINY_BATTERY = BatteryParams(1.0, 1.0, 1.0, 0.0, 2.0, -2.0, 2.0)
TINY_TANK = TankParams(1.0, 1.0, 0.0, 2.0, 4.0, 1.0, 0.5)


def _two_atoms(a, b, p) -> FiniteDistribution:
    return make_distribution([a, b], [p, 1.0 - p])


def tiny_instance(stochastic: bool = True, edge_quad: float = 0.05, edge_lin: float = 0.0) -> Instance:
    """Two buildings, one line, three stages; every reachable state is a grid point.

    Use with :func:`tiny_grids`. Node 1 has a battery and a tank, node 2 a
    tank only; the two nodes face different tariffs so that exchanges pay.
    """
    T, dt = 3, TINY_STEP
    n1 = NodeModel(TINY_TANK, TINY_BATTERY, 10.0, dt, np.array([0.1, 0.3, 0.2]))
    n2 = NodeModel(TINY_TANK, None, 10.0, dt, np.array([0.2, 0.1, 0.3]))
    if stochastic:
        # demands off the quarter grid keep r = 0 away from feasibility switches
        law1 = _two_atoms([0.25, 0.3], [0.5, 0.7], 0.5)
        law2 = _two_atoms([0.0, 0.45], [0.25, 0.2], 0.4)
    else:
        law1 = make_distribution([[0.25, 0.5]], [1.0])
        law2 = make_distribution([[0.25, 0.25]], [1.0])
    noise = NoiseModel([[law1, law2] for _ in range(T)])
    costs = EdgeCosts.constant(T, [edge_quad], [edge_lin], [-3.0], [3.0])
    topo = GraphTopology(2, ((0, 1),))
    meta = {"generator": "tiny", "stochastic": stochastic}
    return Instance(topo, (n1, n2), costs, noise, (np.array([1.0, 1.0]), np.array([1.0])), meta)


def single_node_instance(import_price=(0.1, 0.3, 0.2), stochastic: bool = True) -> Instance:
    """Node 1 of :func:`tiny_instance` on its own (no edges)."""
    T, dt = 3, TINY_STEP
    node = NodeModel(TINY_TANK, TINY_BATTERY, 10.0, dt, np.asarray(import_price, dtype=float))
    law = _two_atoms([0.25, 0.25], [0.5, 0.75], 0.5) if stochastic else make_distribution([[0.25, 0.5]], [1.0])
    noise = NoiseModel([[law] for _ in range(T)])
    costs = EdgeCosts(np.zeros((T, 0)), np.zeros((T, 0)), np.zeros((T, 0)), np.zeros((T, 0)))
    meta = {"generator": "tiny-single", "stochastic": stochastic}
    return Instance(GraphTopology(1, ()), (node,), costs, noise, (np.array([1.0, 1.0]),), meta)


def tiny_grids(instance: Instance) -> list[NodeGrids]:
    """State grids with step 0.25 and integer control grids for the tiny instances."""
    out = []
    for n in instance.nodes:
        lo, hi = n.state_bounds()
        counts = np.rint((hi - lo) / TINY_STEP).astype(int) + 1
        battery = None
        if n.battery is not None:
            battery = np.arange(n.battery.u_min, n.battery.u_max + 0.5)
        heating = np.arange(0.0, n.tank.u_max + 0.5)
        out.append(NodeGrids(StateGrid.uniform(lo, hi, counts), ControlGrid(battery, heating)))
    return out

"""Graph topology, node-edge incidence algebra and projection onto im(A)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class TopologyError(ValueError):
    """Raised for malformed graphs (bad endpoints, self-loops)."""

    def __init__(self, message: str, edge: int | None = None):
        super().__init__(message)
        self.edge = edge


def _union_find_labels(num_nodes: int, edges: Sequence[tuple[int, int]]) -> tuple[int, ...]:
    parent = list(range(num_nodes))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for u, v in edges:
        ru, rv = find(u), find(v)
        if ru != rv:
            parent[max(ru, rv)] = min(ru, rv)
    roots = [find(i) for i in range(num_nodes)]
    relabel: dict[int, int] = {}
    return tuple(relabel.setdefault(r, len(relabel)) for r in roots)


@dataclass(frozen=True)
class GraphTopology:
    """Directed graph with 0-based node indices.

    ``edges[e] = (tail, head)``; component labels are computed once by
    union-find on the undirected graph.
    """

    num_nodes: int
    edges: tuple[tuple[int, int], ...]
    component_labels: tuple[int, ...] = field(init=False, repr=False)

    def __post_init__(self):
        if self.num_nodes < 1:
            raise TopologyError("a graph needs at least one node")
        edges = tuple((int(u), int(v)) for u, v in self.edges)
        for e, (u, v) in enumerate(edges):
            if not (0 <= u < self.num_nodes and 0 <= v < self.num_nodes):
                raise TopologyError(f"edge {e} has endpoint out of range: ({u}, {v})", edge=e)
            if u == v:
                raise TopologyError(f"edge {e} is a self-loop on node {u}", edge=e)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "component_labels", _union_find_labels(self.num_nodes, edges))

    @classmethod
    def from_one_based(cls, num_nodes: int, edges: Sequence[tuple[int, int]]) -> "GraphTopology":
        return cls(num_nodes, tuple((u - 1, v - 1) for u, v in edges))

    def to_one_based(self) -> list[list[int]]:
        return [[u + 1, v + 1] for u, v in self.edges]

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def num_components(self) -> int:
        return max(self.component_labels) + 1

    def components(self) -> list[np.ndarray]:
        labels = np.asarray(self.component_labels)
        return [np.flatnonzero(labels == c) for c in range(self.num_components)]

    def is_connected(self) -> bool:
        return self.num_components == 1


def build_incidence(topology: GraphTopology) -> np.ndarray:
    """Dense ``num_nodes x num_edges`` matrix, +1 at the tail, -1 at the head."""
    A = np.zeros((topology.num_nodes, topology.num_edges))
    for e, (u, v) in enumerate(topology.edges):
        A[u, e] = 1.0
        A[v, e] = -1.0
    return A


def kirchhoff_residual(A: np.ndarray, q: np.ndarray, f: np.ndarray, t: int) -> np.ndarray:
    """Return ``A q_t + f_t``; ``q`` is (T, N_E) and ``f`` is (T, N_V)."""
    q = np.atleast_2d(np.asarray(q, dtype=float))
    f = np.atleast_2d(np.asarray(f, dtype=float))
    if q.shape[0] != f.shape[0]:
        raise ValueError(f"time dimension mismatch: q has {q.shape[0]}, f has {f.shape[0]}")
    if q.shape[1] != A.shape[1] or f.shape[1] != A.shape[0]:
        raise ValueError(f"shape mismatch: A {A.shape}, q {q.shape}, f {f.shape}")
    if not 0 <= t < q.shape[0]:
        raise ValueError(f"time index {t} out of range [0, {q.shape[0] - 1}]")
    return A @ q[t] + f[t]


def project_onto_image(r: np.ndarray, topology: GraphTopology) -> np.ndarray:
    """Orthogonal projection of per-stage node vectors onto im(A).

    ``r`` has shape (T, N_V) (a flat vector of length T*N_V is accepted and
    returned flat). On each connected component the image of the incidence
    map is the zero-sum subspace, so the projection subtracts the component
    mean at every time step.
    """
    r = np.asarray(r, dtype=float)
    flat = r.ndim == 1
    n = topology.num_nodes
    if flat:
        if r.size % n:
            raise ValueError(f"length {r.size} is not a multiple of num_nodes={n}")
        r2 = r.reshape(-1, n)
    else:
        if r.shape[1] != n:
            raise ValueError(f"expected {n} nodes per time step, got {r.shape[1]}")
        r2 = r
    out = r2.copy()
    for comp in topology.components():
        out[:, comp] -= out[:, comp].mean(axis=1, keepdims=True)
    return out.reshape(r.shape)


def duality_pairing(A: np.ndarray, p: np.ndarray, f: np.ndarray, q: np.ndarray) -> tuple[float, float]:
    """Both sides of <p,f> + <A^T p, q> = <p, A q + f>, stage-wise A."""
    p, f, q = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (p, f, q))
    mu = p @ A
    lhs = float(np.sum(p * f) + np.sum(mu * q))
    rhs = float(np.sum(p * (q @ A.T + f)))
    return lhs, rhs

"""Finite stagewise-independent noise laws, scenario sampling and k-means quantization."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

PROB_TOL = 1e-12
LLOYD_MAX_ITER = 100


@dataclass(frozen=True, eq=False)
class FiniteDistribution:
    atoms: np.ndarray  # (n_atoms, dim)
    probabilities: np.ndarray  # (n_atoms,)

    @property
    def size(self) -> int:
        return len(self.probabilities)

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def mean(self) -> np.ndarray:
        return self.probabilities @ self.atoms

    def __eq__(self, other):
        if not isinstance(other, FiniteDistribution):
            return NotImplemented
        return np.array_equal(self.atoms, other.atoms) and np.array_equal(
            self.probabilities, other.probabilities
        )


def make_distribution(atoms, probabilities) -> FiniteDistribution:
    """Validate and freeze a finite law. Scalar atoms are promoted to 1-vectors."""
    if len(atoms) == 0:
        raise ValueError("a distribution needs at least one atom")
    if len(atoms) != len(probabilities):
        raise ValueError(f"{len(atoms)} atoms but {len(probabilities)} probabilities")
    rows = [np.atleast_1d(np.asarray(a, dtype=float)) for a in atoms]
    dims = {r.shape for r in rows}
    if len(dims) != 1 or rows[0].ndim != 1:
        raise ValueError(f"ragged atom dimensions: {sorted(dims)}")
    probs = np.asarray(probabilities, dtype=float)
    if np.any(probs < 0):
        raise ValueError(f"negative probability: {probs.min()}")
    total = probs.sum()
    if abs(total - 1.0) > PROB_TOL:
        raise ValueError(f"probabilities sum to {total:.15g}, not 1")
    atoms_arr = np.vstack(rows)
    atoms_arr.setflags(write=False)
    probs.setflags(write=False)
    return FiniteDistribution(atoms_arr, probs)


class NoiseModel:
    """``law(t, i)`` is the law of node ``i``'s noise ``(d_hw, d_el)`` used at stage ``t``.

    Stage ``t`` in ``0..T-1`` carries the noise revealed between ``t`` and
    ``t+1``. There is no cross-stage object, so laws are independent across
    stages by construction.
    """

    def __init__(self, laws: Sequence[Sequence[FiniteDistribution]]):
        self.laws = tuple(tuple(row) for row in laws)
        if not self.laws:
            raise ValueError("empty noise model")
        widths = {len(row) for row in self.laws}
        if len(widths) != 1:
            raise ValueError("every stage needs one law per node")

    @property
    def horizon(self) -> int:
        return len(self.laws)

    @property
    def num_nodes(self) -> int:
        return len(self.laws[0])

    def law(self, t: int, i: int) -> FiniteDistribution:
        return self.laws[t][i]

    def node_laws(self, i: int) -> list[FiniteDistribution]:
        return [row[i] for row in self.laws]

    def support_size(self, t: int) -> int:
        return int(np.prod([d.size for d in self.laws[t]], dtype=object))


@dataclass(frozen=True, eq=False)
class Scenario:
    indices: np.ndarray  # (T, N_V) atom indices
    values: np.ndarray  # (T, N_V, dim)
    seed: int

    def __eq__(self, other):
        return (
            isinstance(other, Scenario)
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values)
        )


def sample_atom_indices(model: NoiseModel, n: int, rng: np.random.Generator) -> np.ndarray:
    """Independent atom draws, shape (n, T, N_V)."""
    T, N = model.horizon, model.num_nodes
    out = np.zeros((n, T, N), dtype=np.int64)
    for t in range(T):
        for i in range(N):
            law = model.laws[t][i]
            if law.size > 1:
                out[:, t, i] = rng.choice(law.size, size=n, p=law.probabilities)
    return out


def scenario_values(model: NoiseModel, indices: np.ndarray) -> np.ndarray:
    """Map atom indices (..., T, N_V) to noise values (..., T, N_V, dim)."""
    T, N = model.horizon, model.num_nodes
    dim = model.laws[0][0].dim
    out = np.empty(indices.shape + (dim,))
    for t in range(T):
        for i in range(N):
            out[..., t, i, :] = model.laws[t][i].atoms[indices[..., t, i]]
    return out


def sample_scenarios(model: NoiseModel, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Batch of ``n`` scenarios as (indices, values); reproducible from ``seed``."""
    rng = np.random.default_rng(seed)
    idx = sample_atom_indices(model, n, rng)
    return idx, scenario_values(model, idx)


def sample_scenario(model: NoiseModel, seed: int) -> Scenario:
    idx, vals = sample_scenarios(model, 1, seed)
    return Scenario(idx[0], vals[0], seed)


def _sq_distances(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(axis=1)[:, None] - 2.0 * X @ C.T + (C * C).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(X: np.ndarray, w: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    chosen = [int(rng.choice(n, p=w / w.sum()))]
    d2 = _sq_distances(X, X[chosen])[:, 0]
    for _ in range(1, k):
        score = w * d2
        total = score.sum()
        if total <= 0:
            # all remaining mass sits on already-chosen points
            remaining = np.setdiff1d(np.arange(n), chosen)
            nxt = int(remaining[0])
        else:
            nxt = int(rng.choice(n, p=score / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_distances(X, X[[nxt]])[:, 0])
    return X[chosen].copy()


def _sse(X, w, C, labels) -> float:
    return float(np.sum(w * np.sum((X - C[labels]) ** 2, axis=1)))


def kmeans_quantize(samples, k: int, seed: int, weights=None, return_info: bool = False):
    """Quantize an (optionally weighted) sample cloud to ``k`` atoms.

    k-means++ seeding from ``seed`` followed by Lloyd iterations (at most
    100). An emptied cluster is repaired by moving the point of the heaviest
    cluster farthest from its centroid into it. Atom probabilities are the
    cluster weight fractions.
    """
    X = np.asarray(samples, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    w = np.ones(len(X)) if weights is None else np.asarray(weights, dtype=float)
    if k < 1:
        raise ValueError("k must be at least 1")
    # identical samples are merged up front
    uniq, inverse = np.unique(X, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    uw = np.bincount(inverse, weights=w, minlength=len(uniq))
    keep = uw > 0
    uniq, uw = uniq[keep], uw[keep]
    if k > len(uniq):
        raise ValueError(f"k={k} exceeds the number of distinct samples ({len(uniq)})")

    rng = np.random.default_rng(seed)
    C = _kmeanspp(uniq, uw, k, rng)
    labels = np.argmin(_sq_distances(uniq, C), axis=1)
    initial_sse = _sse(uniq, uw, C, labels)
    iterations = 0
    for iterations in range(1, LLOYD_MAX_ITER + 1):
        mass = np.bincount(labels, weights=uw, minlength=k)
        for j in np.flatnonzero(mass == 0):
            big = int(np.argmax(mass))
            members = np.flatnonzero(labels == big)
            far = members[np.argmax(np.sum((uniq[members] - C[big]) ** 2, axis=1))]
            labels[far] = j
            mass = np.bincount(labels, weights=uw, minlength=k)
        for j in range(k):
            m = labels == j
            C[j] = uw[m] @ uniq[m] / uw[m].sum()
        new_labels = np.argmin(_sq_distances(uniq, C), axis=1)
        if np.array_equal(new_labels, labels) and np.all(np.bincount(labels, minlength=k) > 0):
            break
        labels = new_labels
    mass = np.bincount(labels, weights=uw, minlength=k)
    probs = mass / mass.sum()
    dist = make_distribution(list(C), probs)
    if return_info:
        return dist, {
            "initial_sse": initial_sse,
            "final_sse": _sse(uniq, uw, C, labels),
            "iterations": iterations,
        }
    return dist


def product_support(model: NoiseModel, t: int) -> FiniteDistribution:
    """Exact joint law of the stage-``t`` global noise, flattened node-major."""
    laws = model.laws[t]
    atoms, probs = [], []
    for combo in itertools.product(*(range(d.size) for d in laws)):
        atoms.append(np.concatenate([laws[i].atoms[a] for i, a in enumerate(combo)]))
        probs.append(np.prod([laws[i].probabilities[a] for i, a in enumerate(combo)]))
    probs = np.asarray(probs)
    return make_distribution(atoms, probs / probs.sum())


def resample_product(
    model: NoiseModel,
    t: int,
    k: int,
    n_samples: int = 10_000,
    seed: int = 0,
    exact_support_limit: int | None = None,
) -> FiniteDistribution:
    """k-means quantization of the global stage-``t`` noise.

    When the product support has at most ``exact_support_limit`` points
    (defaults to ``n_samples``) the exact weighted support is quantized, which
    makes the quantized law a conditional-expectation contraction of the true
    one. Otherwise ``n_samples`` draws from the product law are clustered.
    ``k`` is clamped to the number of distinct points.
    """
    limit = n_samples if exact_support_limit is None else exact_support_limit
    rng = np.random.default_rng([seed, t])
    if model.support_size(t) <= limit:
        exact = product_support(model, t)
        X, w = exact.atoms, exact.probabilities
    else:
        laws = model.laws[t]
        cols = []
        for law in laws:
            idx = rng.choice(law.size, size=n_samples, p=law.probabilities)
            cols.append(law.atoms[idx])
        X, w = np.hstack(cols), None
    distinct = len(np.unique(X if w is None else X[w > 0], axis=0))
    k_eff = max(1, min(k, distinct))
    return kmeans_quantize(X, k_eff, seed=int(rng.integers(2**31)), weights=w)

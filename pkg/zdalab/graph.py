"""Undirected weighted communication graphs and their Laplacian spectra."""

from __future__ import annotations

import math
from collections.abc import Iterable
from dataclasses import dataclass, field
from functools import cached_property

import networkx as nx
import numpy as np
from scipy import linalg

from zdalab.errors import GraphError
from zdalab.settings import get_settings

Edge = tuple[int, int, float]


@dataclass(frozen=True)
class SpectralDecomposition:
    eigenvalues: np.ndarray
    Q: np.ndarray

    @property
    def n(self) -> int:
        return int(self.eigenvalues.shape[0])

    def reconstruct(self) -> np.ndarray:
        return self.Q @ np.diag(self.eigenvalues) @ self.Q.T

    def min_gap(self) -> float:
        if self.n < 2:
            return math.inf
        return float(np.min(np.diff(self.eigenvalues)))


@dataclass(frozen=True)
class Topology:
    """A physical communication network between n agents.

    The adjacency matrix is copied and frozen on construction. Laplacian and
    spectrum are computed lazily and cached on the instance.
    """

    id: int
    adjacency: np.ndarray = field(repr=False)
    label: str | None = None

    def __post_init__(self) -> None:
        adjacency = np.array(self.adjacency, dtype=float, copy=True)
        if adjacency.ndim != 2 or adjacency.shape[0] != adjacency.shape[1]:
            raise GraphError(f"Topology {self.id}: adjacency must be square")
        if not np.all(np.isfinite(adjacency)):
            raise GraphError(f"Topology {self.id}: adjacency has non-finite entries")
        if not np.array_equal(adjacency, adjacency.T):
            raise GraphError(f"Topology {self.id}: adjacency must be symmetric")
        if np.any(np.diag(adjacency) != 0.0):
            raise GraphError(f"Topology {self.id}: self-loops are not allowed")
        if np.any(adjacency < 0.0):
            raise GraphError(f"Topology {self.id}: weights must be nonnegative")
        adjacency.setflags(write=False)
        object.__setattr__(self, "adjacency", adjacency)

    @classmethod
    def from_edges(
        cls,
        topology_id: int,
        n: int,
        edges: Iterable[Edge],
        *,
        one_based: bool = True,
        label: str | None = None,
    ) -> Topology:
        if n < 1:
            raise GraphError("Topology needs at least one agent")
        offset = 1 if one_based else 0
        adjacency = np.zeros((n, n))
        seen: set[tuple[int, int]] = set()
        for i, j, weight in edges:
            a, b = int(i) - offset, int(j) - offset
            if not (0 <= a < n and 0 <= b < n):
                bounds = f"1..{n}" if one_based else f"0..{n - 1}"
                raise GraphError(f"Topology {topology_id}: edge ({i}, {j}) outside {bounds}")
            if a == b:
                raise GraphError(f"Topology {topology_id}: self-loop on agent {i}")
            key = (min(a, b), max(a, b))
            if key in seen:
                raise GraphError(f"Topology {topology_id}: duplicate edge ({i}, {j})")
            seen.add(key)
            adjacency[a, b] = adjacency[b, a] = float(weight)
        return cls(topology_id, adjacency, label)

    @classmethod
    def from_networkx(cls, topology_id: int, graph: nx.Graph, *, label: str | None = None) -> Topology:
        nodes = sorted(graph.nodes)
        adjacency = nx.to_numpy_array(graph, nodelist=nodes, weight="weight", dtype=float)
        return cls(topology_id, adjacency, label)

    @property
    def n(self) -> int:
        return int(self.adjacency.shape[0])

    def edges(self) -> list[Edge]:
        """Edge list with 1-based endpoints, i < j."""
        rows, cols = np.nonzero(np.triu(self.adjacency))
        return [(int(i) + 1, int(j) + 1, float(self.adjacency[i, j])) for i, j in zip(rows, cols)]

    def to_networkx(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_nodes_from(range(self.n))
        for i, j, weight in self.edges():
            graph.add_edge(i - 1, j - 1, weight=weight)
        return graph

    def with_adjacency(self, adjacency: np.ndarray, *, label: str | None = None) -> Topology:
        return Topology(self.id, adjacency, label if label is not None else self.label)

    @cached_property
    def laplacian(self) -> np.ndarray:
        return laplacian(self)

    @cached_property
    def spectrum(self) -> SpectralDecomposition:
        return spectral_decompose(self.laplacian)


def laplacian(topology: Topology) -> np.ndarray:
    adjacency = topology.adjacency
    L = -adjacency.copy()
    np.fill_diagonal(L, adjacency.sum(axis=1))
    L.setflags(write=False)
    return L


def relative_tolerance(eigenvalues: np.ndarray, tol: float | None = None) -> float:
    base = get_settings().eigen_tol if tol is None else tol
    top = float(np.max(np.abs(eigenvalues))) if eigenvalues.size else 0.0
    return base * max(1.0, top)


def _orient(vector: np.ndarray) -> np.ndarray:
    scale = float(np.max(np.abs(vector)))
    if scale == 0.0:
        return vector
    nonzero = np.flatnonzero(np.abs(vector) > 1e-12 * scale)
    if vector[nonzero[0]] < 0:
        return -vector
    return vector


def _cluster_basis(vectors: np.ndarray, seed: np.ndarray | None) -> np.ndarray:
    """Deterministic orthonormal basis of span(vectors).

    Candidates are the optional seed vector followed by e_1, e_2, ... projected
    onto the span, orthogonalized in that order (two Gram-Schmidt passes).
    """
    size, dim = vectors.shape
    projector = vectors @ vectors.T
    candidates: list[np.ndarray] = []
    if seed is not None:
        candidates.append(seed)
    candidates.extend(projector[:, i] for i in range(size))
    basis: list[np.ndarray] = []
    for candidate in candidates:
        if len(basis) == dim:
            break
        v = projector @ candidate
        for _ in range(2):
            for b in basis:
                v = v - (b @ v) * b
        norm = float(np.linalg.norm(v))
        if norm > 1e-6:
            basis.append(v / norm)
    if len(basis) < dim:
        # fall back to the solver's own vectors for whatever the sweep missed
        return vectors
    return np.column_stack(basis)


def spectral_decompose(L: np.ndarray, tol: float | None = None) -> SpectralDecomposition:
    L = np.asarray(L, dtype=float)
    scale = max(1.0, float(np.max(np.abs(L)))) if L.size else 1.0
    if not np.allclose(L, L.T, rtol=0.0, atol=1e-12 * scale):
        raise GraphError("Laplacian must be symmetric")
    n = L.shape[0]
    try:
        eigenvalues, vectors = linalg.eigh(L)
    except linalg.LinAlgError as exc:
        raise GraphError("Symmetric eigensolver failed", detail=str(exc)) from exc

    gap_tol = relative_tolerance(eigenvalues, tol)
    eigenvalues = np.where(np.abs(eigenvalues) <= gap_tol, 0.0, eigenvalues)
    eigenvalues[0] = 0.0

    columns: list[np.ndarray] = []
    start = 0
    while start < n:
        stop = start + 1
        while stop < n and eigenvalues[stop] - eigenvalues[stop - 1] <= gap_tol:
            stop += 1
        block = vectors[:, start:stop]
        seed = np.full(n, 1.0 / math.sqrt(n)) if start == 0 else None
        if stop - start > 1 or start == 0:
            block = _cluster_basis(block, seed)
        columns.extend(_orient(block[:, k]) for k in range(block.shape[1]))
        start = stop

    Q = np.column_stack(columns)
    # the consensus direction is exactly constant, not just up to roundoff
    Q[:, 0] = 1.0 / math.sqrt(n)
    eigenvalues.setflags(write=False)
    Q.setflags(write=False)
    return SpectralDecomposition(eigenvalues=eigenvalues, Q=Q)


def is_connected(L: np.ndarray, tol: float | None = None) -> bool:
    L = np.asarray(L, dtype=float)
    if L.shape[0] < 2:
        return True
    eigenvalues = linalg.eigvalsh(L)
    return bool(eigenvalues[1] > relative_tolerance(eigenvalues, tol))


def has_distinct_eigenvalues(L: np.ndarray, tol: float | None = None) -> bool:
    L = np.asarray(L, dtype=float)
    if L.shape[0] < 2:
        return True
    eigenvalues = linalg.eigvalsh(L)
    return bool(np.min(np.diff(eigenvalues)) > relative_tolerance(eigenvalues, tol))


def distinct_eigenvalue_count(L: np.ndarray, tol: float | None = None) -> int:
    eigenvalues = linalg.eigvalsh(np.asarray(L, dtype=float))
    if eigenvalues.size == 0:
        return 0
    gaps = np.diff(eigenvalues) > relative_tolerance(eigenvalues, tol)
    return 1 + int(np.count_nonzero(gaps))


def diameter(topology: Topology) -> int:
    """Longest shortest path, counting hops and ignoring weights."""
    graph = nx.from_numpy_array((topology.adjacency > 0).astype(int))
    if topology.n == 1:
        return 0
    if not nx.is_connected(graph):
        raise GraphError(f"Topology {topology.id} is disconnected: infinite diameter")
    return int(nx.diameter(graph))


def vandermonde_det(values: Iterable[float]) -> float:
    """Determinant of the Vandermonde matrix whose row k holds the k-th powers."""
    a = [float(v) for v in values]
    if not a:
        raise ValueError("vandermonde_det needs at least one value")
    n = len(a)
    sign = -1.0 if ((n * n - n) // 2) % 2 else 1.0
    product = 1.0
    for i in range(n):
        for j in range(i + 1, n):
            product *= a[i] - a[j]
    return sign * product

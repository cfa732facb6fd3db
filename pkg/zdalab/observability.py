"""Unobservable subspaces of the switched plant, privacy, and the two defense checks."""

from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy import linalg

from zdalab.dynamics import OutputConfig
from zdalab.graph import Topology, has_distinct_eigenvalues, is_connected, relative_tolerance
from zdalab.settings import get_settings


def _rank_tol(tol: float | None) -> float:
    return get_settings().rank_tol if tol is None else tol


def null_basis(M: np.ndarray, atol: float) -> np.ndarray:
    """Orthonormal kernel basis; singular values at or below ``atol`` count as zero."""
    M = np.atleast_2d(np.asarray(M))
    cols = M.shape[1]
    if M.shape[0] == 0:
        return np.eye(cols, dtype=M.dtype)
    _, s, vh = linalg.svd(M, full_matrices=True)
    rank = int(np.count_nonzero(s > atol))
    return vh[rank:].conj().T


@dataclass(frozen=True)
class Subspace:
    basis: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        basis = np.asarray(self.basis)
        if basis.ndim != 2:
            raise ValueError("subspace basis must be a matrix")
        object.__setattr__(self, "basis", basis)

    @classmethod
    def span(cls, vectors: np.ndarray, tol: float = 1e-10) -> Subspace:
        vectors = np.atleast_2d(np.asarray(vectors, dtype=float))
        if vectors.shape[1] == 0 or not np.any(vectors):
            return cls.zero(vectors.shape[0])
        return cls(linalg.orth(vectors, rcond=tol))

    @classmethod
    def zero(cls, size: int) -> Subspace:
        return cls(np.zeros((size, 0)))

    @classmethod
    def full(cls, size: int) -> Subspace:
        return cls(np.eye(size))

    @property
    def ambient(self) -> int:
        return int(self.basis.shape[0])

    @property
    def dim(self) -> int:
        return int(self.basis.shape[1])

    def projector(self) -> np.ndarray:
        return self.basis @ self.basis.conj().T

    def contains(self, vector: np.ndarray, tol: float = 1e-8) -> bool:
        vector = np.asarray(vector, dtype=float)
        scale = max(1.0, float(np.linalg.norm(vector)))
        return bool(np.linalg.norm(vector - self.projector() @ vector) <= tol * scale)

    def intersect(self, other: Subspace, tol: float | None = None) -> Subspace:
        """Intersection as the kernel of the stacked complement projectors."""
        if self.dim == 0 or other.dim == 0:
            return Subspace.zero(self.ambient)
        eye = np.eye(self.ambient)
        stacked = np.vstack([eye - self.projector(), eye - other.projector()])
        return Subspace(np.real_if_close(null_basis(stacked, _rank_tol(tol))))

    def image(self, M: np.ndarray) -> Subspace:
        if self.dim == 0:
            return Subspace.zero(M.shape[0])
        return Subspace.span(M @ self.basis)

    def distance(self, other: Subspace) -> float:
        """Spectral norm of the projector difference; 0 iff the subspaces coincide."""
        if self.dim == 0 and other.dim == 0:
            return 0.0
        return float(np.linalg.norm(self.projector() - other.projector(), 2))


def observability_matrix(A: np.ndarray, C: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    C = np.atleast_2d(np.asarray(C, dtype=float))
    blocks, row = [], C
    for _ in range(A.shape[0]):
        blocks.append(row)
        row = row @ A
    return np.vstack(blocks)


def shifted_observability_matrix(A: np.ndarray, C: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    return observability_matrix(A, np.atleast_2d(np.asarray(C, dtype=float)) @ A)


def observability_kernel(A: np.ndarray, C: np.ndarray, tol: float | None = None) -> Subspace:
    """Largest A-invariant subspace inside ker C, equal to the kernel of the observability matrix.

    Computed by shrinking ker C to vectors whose image stays inside the current
    subspace, which avoids forming high matrix powers.
    """
    A = np.asarray(A, dtype=float)
    C = np.atleast_2d(np.asarray(C, dtype=float))
    size = A.shape[0]
    rtol = _rank_tol(tol)
    V = null_basis(C, rtol * max(1.0, float(np.linalg.norm(C, 2))))
    a_scale = rtol * max(1.0, float(np.linalg.norm(A, 2)))
    for _ in range(size):
        if V.shape[1] == 0:
            break
        leak = (np.eye(size) - V @ V.T) @ A @ V
        W = null_basis(leak, a_scale)
        if W.shape[1] == V.shape[1]:
            break
        V = linalg.orth(V @ W) if W.shape[1] else np.zeros((size, 0))
    return Subspace(V)


def shifted_observability_kernel(A: np.ndarray, C: np.ndarray, tol: float | None = None) -> Subspace:
    """States z with A z in the observability kernel (kernel of the shifted matrix)."""
    A = np.asarray(A, dtype=float)
    inner = observability_kernel(A, C, tol)
    size = A.shape[0]
    leak = (np.eye(size) - inner.projector()) @ A
    rtol = _rank_tol(tol)
    return Subspace(null_basis(leak, rtol * max(1.0, float(np.linalg.norm(A, 2)))))


def unobservable_subspace(
    prefix: Sequence[tuple[np.ndarray, float]],
    C: np.ndarray,
    tol: float | None = None,
    *,
    shifted: bool = False,
) -> Subspace:
    """Initial states whose output vanishes over every dwell of a switching prefix.

    Walks the prefix backwards: the last window contributes its observability
    kernel; each earlier window intersects its own kernel with the states that
    its flow carries into the next window's subspace.
    """
    if not prefix:
        raise ValueError("unobservable_subspace needs a nonempty prefix")
    kernel = shifted_observability_kernel if shifted else observability_kernel
    A_last, _ = prefix[-1]
    N = kernel(A_last, C, tol)
    for A_q, dwell in reversed(prefix[:-1]):
        if N.dim == 0:
            break
        flow = linalg.expm(np.asarray(A_q, dtype=float) * dwell)
        pulled = Subspace.span(linalg.solve(flow, N.basis))
        N = kernel(A_q, C, tol).intersect(pulled, tol)
    return N


def privacy_preserved(N0: Subspace, monitored: Iterable[int], n: int, tol: float = 1e-10) -> bool:
    """Whether some kernel vector touches every non-monitored agent's position or velocity.

    Each non-monitored agent only needs a nonzero two-row restriction of the
    basis; a generic combination then hits all of them at once.
    """
    if N0.dim == 0:
        return False
    watched = set(monitored)
    for agent in range(n):
        if agent in watched:
            continue
        rows = N0.basis[[agent, agent + n], :]
        if not np.any(np.abs(rows) > tol):
            return False
    return True


def analytic_kernel(cfg: OutputConfig, n: int) -> Subspace | None:
    """Closed-form unobservable subspace when the defense conditions hold, or None."""
    ones, zeros = np.ones(n), np.zeros(n)
    mode = cfg.mode
    if mode == "velocity":
        return Subspace.span(np.concatenate([ones, zeros])[:, None])
    if mode == "position":
        return Subspace.zero(2 * n)
    if mode == "partial" and np.allclose(cfg.c1, cfg.c2):
        return Subspace.span(np.concatenate([ones, -ones])[:, None])
    return None


def matches_analytic_kernel(N0: Subspace, cfg: OutputConfig, n: int, tol: float = 1e-8) -> bool | None:
    expected = analytic_kernel(cfg, n)
    if expected is None:
        return None
    return N0.dim == expected.dim and N0.distance(expected) <= tol


@dataclass(frozen=True)
class DefenseReport:
    topology_ids: tuple[int, ...]
    connected: dict[int, bool]
    distinct_eigenvalues_ok: dict[int, bool]
    min_gaps: dict[int, float]
    F_set: tuple[int, ...]
    c2_positive_ok: bool
    row_difference_ok: bool
    monitored: tuple[int, ...]
    output_mode: str

    @property
    def all_distinct(self) -> bool:
        return all(self.distinct_eigenvalues_ok.values())

    @property
    def F_nonempty(self) -> bool:
        return bool(self.F_set)

    @property
    def intermittent_ok(self) -> bool:
        return self.all_distinct and self.F_nonempty

    @property
    def cooperative_ok(self) -> bool:
        return self.all_distinct and self.c2_positive_ok and self.row_difference_ok

    def verdicts(self) -> dict[str, str]:
        return {
            "intermittent": "pass" if self.intermittent_ok else "fail",
            "cooperative": "pass" if self.cooperative_ok else "fail",
        }

    def as_dict(self) -> dict[str, Any]:
        return {
            "topologies": list(self.topology_ids),
            "monitored": [i + 1 for i in self.monitored],
            "output_mode": self.output_mode,
            "connected": {str(k): v for k, v in self.connected.items()},
            "distinct_eigenvalues": {str(k): v for k, v in self.distinct_eigenvalues_ok.items()},
            "min_eigenvalue_gap": {str(k): v for k, v in self.min_gaps.items()},
            "full_support_agents": [i + 1 for i in self.F_set],
            "full_support_nonempty": self.F_nonempty,
            "velocity_gains_positive": self.c2_positive_ok,
            "monitored_rows_differ": self.row_difference_ok,
            "verdict": self.verdicts(),
        }

    def render_table(self) -> str:
        header = f"{'topology':>8}  {'connected':>9}  {'distinct':>8}  {'min_gap':>12}"
        lines = [header, "-" * len(header)]
        for tid in self.topology_ids:
            lines.append(
                f"{tid:>8}  {_yes(self.connected[tid]):>9}  "
                f"{_yes(self.distinct_eigenvalues_ok[tid]):>8}  {self.min_gaps[tid]:>12.4e}"
            )
        lines.append("")
        monitored = ",".join(str(i + 1) for i in self.monitored)
        support = ",".join(str(i + 1) for i in self.F_set) or "-"
        lines.append(f"monitored agents        {monitored} ({self.output_mode} outputs)")
        lines.append(f"full-support agents     {support}")
        lines.append(f"velocity gains positive {_yes(self.c2_positive_ok)}")
        lines.append(f"monitored rows differ   {_yes(self.row_difference_ok)}")
        verdicts = self.verdicts()
        lines.append(f"intermittent defense    {verdicts['intermittent'].upper()}")
        lines.append(f"cooperative defense     {verdicts['cooperative'].upper()}")
        return "\n".join(lines)

    def render_key_values(self) -> str:
        return "\n".join(f"{key}={_flat(value)}" for key, value in self.as_dict().items())


def _yes(flag: bool) -> str:
    return "yes" if flag else "no"


def _flat(value: Any) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, dict):
        return ",".join(f"{k}:{_flat(v)}" for k, v in value.items())
    if isinstance(value, list):
        return ",".join(_flat(v) for v in value)
    return str(value)


def defense_check(topologies: Mapping[int, Topology] | Sequence[Topology], cfg: OutputConfig, tol: float | None = None) -> DefenseReport:
    items = list(topologies.values()) if isinstance(topologies, Mapping) else list(topologies)
    ids = tuple(t.id for t in items)
    connected, distinct, gaps = {}, {}, {}
    full_support = set(cfg.monitored)
    rows_differ = True
    for topology in items:
        L = topology.laplacian
        spectrum = topology.spectrum
        entry_tol = relative_tolerance(spectrum.eigenvalues, tol)
        connected[topology.id] = is_connected(L, tol)
        distinct[topology.id] = has_distinct_eigenvalues(L, tol)
        gaps[topology.id] = spectrum.min_gap() if topology.n > 1 else float("inf")
        Q = spectrum.Q
        full_support &= {i for i in cfg.monitored if np.all(np.abs(Q[i]) > entry_tol)}
        for a, i in enumerate(cfg.monitored):
            for j in cfg.monitored[a + 1 :]:
                if np.any(np.abs(Q[i, 1:] - Q[j, 1:]) <= entry_tol):
                    rows_differ = False
    return DefenseReport(
        topology_ids=ids,
        connected=connected,
        distinct_eigenvalues_ok=distinct,
        min_gaps=gaps,
        F_set=tuple(sorted(full_support)),
        c2_positive_ok=bool(np.all(cfg.c2 > 0.0)),
        row_difference_ok=rows_differ,
        monitored=cfg.monitored,
        output_mode=cfg.mode,
    )

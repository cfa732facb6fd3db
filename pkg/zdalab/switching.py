"""Periodic topology switching: schedules, matrix-measure certificates, the switching driver."""

from __future__ import annotations

import bisect
import math
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any

import numpy as np
from scipy import linalg

from zdalab.dynamics import OutputConfig, Trajectory, output_matrices, rk4_step, system_matrix
from zdalab.errors import ConfigError, DivergenceError, GainConditionError, HypothesisError
from zdalab.graph import SpectralDecomposition, Topology, is_connected


@dataclass(frozen=True)
class Segment:
    """One dwell window of the periodic driver: topology ``topology_id`` over [start, end)."""

    k: int
    entry: int
    topology_id: int
    start: float
    end: float


@dataclass(frozen=True)
class SwitchingSchedule:
    entries: tuple[tuple[int, float], ...]
    t0: float = 0.0

    def __post_init__(self) -> None:
        entries = tuple((int(tid), float(dwell)) for tid, dwell in self.entries)
        if not entries:
            raise ConfigError("A switching schedule needs at least one entry")
        for tid, dwell in entries:
            if not dwell > 0.0:
                raise ConfigError(f"Dwell time for topology {tid} must be positive, got {dwell}")
        object.__setattr__(self, "entries", entries)

    @property
    def length(self) -> int:
        return len(self.entries)

    @cached_property
    def period(self) -> float:
        return math.fsum(dwell for _, dwell in self.entries)

    @cached_property
    def _ends(self) -> list[float]:
        ends, total = [], 0.0
        for _, dwell in self.entries:
            total += dwell
            ends.append(total)
        return ends

    @property
    def topology_ids(self) -> tuple[int, ...]:
        return tuple(dict.fromkeys(tid for tid, _ in self.entries))

    def entry_index(self, t: float) -> int:
        if t < self.t0:
            raise ValueError(f"t={t} precedes schedule start {self.t0}")
        offset = math.fmod(t - self.t0, self.period)
        return min(bisect.bisect_right(self._ends, offset), self.length - 1)

    def active_topology(self, t: float) -> int:
        return self.entries[self.entry_index(t)][0]

    def dwell_shares(self) -> dict[int, float]:
        shares: dict[int, float] = {}
        for tid, dwell in self.entries:
            shares[tid] = shares.get(tid, 0.0) + dwell / self.period
        return shares

    def step_counts(self, dt: float) -> tuple[int, ...]:
        """Integrator steps per entry; every dwell must sit on the dt grid."""
        counts = []
        for tid, dwell in self.entries:
            steps = round(dwell / dt)
            if steps < 1 or abs(steps * dt - dwell) > 1e-9 * max(1.0, dwell):
                raise ConfigError(
                    f"Dwell {dwell} of topology {tid} is not a multiple of dt {dt}",
                    code="grid_misaligned",
                )
            counts.append(steps)
        return tuple(counts)

    def segments(self, t_final: float) -> Iterator[Segment]:
        """Walk dwell windows in order: advance t_k by the dwell, then k, wrapping modulo l."""
        k, t_k = 0, self.t0
        while t_k < t_final:
            entry = k % self.length
            tid, dwell = self.entries[entry]
            end = min(t_k + dwell, t_final)
            yield Segment(k, entry, tid, t_k, end)
            t_k += dwell
            k += 1

    def with_dwell(self, entry: int, dwell: float) -> SwitchingSchedule:
        entries = list(self.entries)
        entries[entry] = (entries[entry][0], dwell)
        return SwitchingSchedule(tuple(entries), self.t0)


@dataclass(frozen=True)
class CertificateTerm:
    topology_id: int
    dwell: float
    weight: float
    measure: float


@dataclass(frozen=True)
class StabilityCertificate:
    kind: str
    reference_topology: int
    P: np.ndarray = field(repr=False)
    terms: tuple[CertificateTerm, ...]

    @property
    def convex_combination(self) -> float:
        return math.fsum(term.weight * term.measure for term in self.terms)

    @property
    def passed(self) -> bool:
        return self.convex_combination < 0.0

    def bottleneck(self) -> CertificateTerm:
        """Term contributing most to the combination; the dwell to shorten if it is positive."""
        return max(self.terms, key=lambda term: term.weight * term.measure)

    def as_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "reference_topology": self.reference_topology,
            "passed": self.passed,
            "convex_combination": self.convex_combination,
            "terms": [
                {"topology": t.topology_id, "dwell": t.dwell, "weight": t.weight, "measure": t.measure}
                for t in self.terms
            ],
        }


def _check_spd(P: np.ndarray) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ValueError("P must be square")
    if not np.allclose(P, P.T, rtol=1e-10, atol=1e-12):
        raise ValueError("P must be symmetric")
    try:
        linalg.cholesky(0.5 * (P + P.T))
    except linalg.LinAlgError as exc:
        raise ValueError("P must be positive definite") from exc
    return 0.5 * (P + P.T)


def matrix_measure(A: np.ndarray, P: np.ndarray) -> float:
    """Logarithmic norm of A induced by the weighted norm |x|_P = |P^{1/2} x|."""
    P = _check_spd(P)
    A = np.asarray(A, dtype=float)
    if A.shape != P.shape:
        raise ValueError(f"A is {A.shape}, P is {P.shape}")
    values, vectors = linalg.eigh(P)
    root = vectors @ np.diag(np.sqrt(values)) @ vectors.T
    root_inv = vectors @ np.diag(1.0 / np.sqrt(values)) @ vectors.T
    M = root @ A @ root_inv
    return 0.5 * float(np.max(linalg.eigvalsh(M + M.T)))


def reduced_consensus_matrix(ref: SpectralDecomposition, L_s: np.ndarray) -> np.ndarray:
    Q = ref.Q
    upsilon = Q.T @ np.asarray(L_s, dtype=float) @ Q
    block = upsilon[1:, 1:]
    size = block.shape[0]
    eye = np.eye(size)
    return np.block([[np.zeros((size, size)), eye], [-block, -eye]])


def observer_error_matrix(L: np.ndarray, gain: np.ndarray) -> np.ndarray:
    L = np.asarray(L, dtype=float)
    gain = np.asarray(gain, dtype=float)
    if gain.shape != L.shape:
        raise ValueError(f"gain is {gain.shape}, Laplacian is {L.shape}")
    n = L.shape[0]
    eye = np.eye(n)
    return np.block([[np.zeros((n, n)), eye], [-L - gain, -eye]])


def lyapunov_weight(A: np.ndarray) -> np.ndarray:
    """P solving A^T P + P A = -I; positive definite whenever A is Hurwitz."""
    A = np.asarray(A, dtype=float)
    P = linalg.solve_continuous_lyapunov(A.T, -np.eye(A.shape[0]))
    return 0.5 * (P + P.T)


def _is_hurwitz(A: np.ndarray) -> bool:
    return bool(np.max(np.real(linalg.eigvals(A))) < 0.0)


def _reference(schedule: SwitchingSchedule, topologies: Mapping[int, Topology]) -> int | None:
    shares = schedule.dwell_shares()
    connected = [tid for tid in schedule.topology_ids if is_connected(topologies[tid].laplacian)]
    if not connected:
        return None
    return max(connected, key=lambda tid: (shares[tid], -schedule.topology_ids.index(tid)))


def _resolve(schedule: SwitchingSchedule, topologies: Mapping[int, Topology]) -> None:
    missing = [tid for tid in schedule.topology_ids if tid not in topologies]
    if missing:
        raise ConfigError(f"Schedule references undefined topologies {missing}")


def _certificate(
    kind: str,
    schedule: SwitchingSchedule,
    reference: int,
    matrices: Mapping[int, np.ndarray],
    P: np.ndarray,
) -> StabilityCertificate:
    measures = {tid: matrix_measure(A, P) for tid, A in matrices.items()}
    terms = tuple(
        CertificateTerm(tid, dwell, dwell / schedule.period, measures[tid]) for tid, dwell in schedule.entries
    )
    return StabilityCertificate(kind=kind, reference_topology=reference, P=P, terms=terms)


def certify_consensus(
    schedule: SwitchingSchedule,
    topologies: Mapping[int, Topology],
    P: np.ndarray | None = None,
) -> StabilityCertificate:
    _resolve(schedule, topologies)
    n = topologies[schedule.entries[0][0]].n
    if n < 2:
        raise HypothesisError("Consensus certificate needs at least two agents")
    reference = _reference(schedule, topologies)
    if reference is None:
        raise HypothesisError("Switching sequence contains no connected topology")
    ref = topologies[reference].spectrum
    matrices = {
        tid: reduced_consensus_matrix(ref, topologies[tid].laplacian) for tid in schedule.topology_ids
    }
    if P is None:
        P = lyapunov_weight(matrices[reference])
    return _certificate("consensus", schedule, reference, matrices, P)


def _check_gain(gain: np.ndarray) -> np.ndarray:
    gain = np.asarray(gain, dtype=float)
    if np.any(gain < 0.0):
        raise GainConditionError("Observer gain has a negative entry")
    if not np.any(gain > 0.0):
        raise GainConditionError("Observer gain is zero")
    return gain


def certify_observer(
    schedule: SwitchingSchedule,
    topologies: Mapping[int, Topology],
    gain: np.ndarray,
    P: np.ndarray | None = None,
) -> StabilityCertificate:
    _resolve(schedule, topologies)
    gain = _check_gain(gain)
    matrices = {tid: observer_error_matrix(topologies[tid].laplacian, gain) for tid in schedule.topology_ids}
    reference = _reference(schedule, topologies)
    if P is None:
        if reference is not None and _is_hurwitz(matrices[reference]):
            P = lyapunov_weight(matrices[reference])
        else:
            P = np.eye(2 * topologies[schedule.entries[0][0]].n)
    return _certificate("observer", schedule, reference if reference is not None else -1, matrices, P)


def tune_dwell(
    schedule: SwitchingSchedule,
    certificate: StabilityCertificate,
    *,
    dt: float | None = None,
    margin: float = 0.05,
) -> SwitchingSchedule:
    """Lengthen the reference topology's first dwell until the certificate passes.

    Measures do not depend on dwell times, so the required dwell has a closed
    form; it is rounded up to the integrator grid when ``dt`` is given.
    """
    if certificate.passed:
        return schedule
    reference = certificate.reference_topology
    entry = next((i for i, (tid, _) in enumerate(schedule.entries) if tid == reference), None)
    measure = certificate.terms[entry].measure if entry is not None else math.inf
    if entry is None or measure >= 0.0:
        raise HypothesisError(
            "Reference topology has a nonnegative measure; no dwell time can satisfy the certificate"
        )
    others = math.fsum(t.dwell * t.measure for i, t in enumerate(certificate.terms) if i != entry)
    needed = others / -measure * (1.0 + margin)
    dwell = max(needed, schedule.entries[entry][1])
    if dt is not None:
        dwell = math.ceil(dwell / dt - 1e-9) * dt
    return schedule.with_dwell(entry, dwell)


def simulate_switched(
    initial: np.ndarray,
    schedule: SwitchingSchedule,
    topologies: Mapping[int, Topology],
    horizon: float,
    dt: float,
    *,
    outputs: OutputConfig | None = None,
    method: str = "rk4",
    record_every: int = 1,
    matrices: Mapping[int, np.ndarray] | None = None,
) -> Trajectory:
    """Unforced switched plant on the dt grid; ``method="expm"`` uses exact step matrices."""
    _resolve(schedule, topologies)
    counts = schedule.step_counts(dt)
    total = round(horizon / dt)
    z = np.asarray(initial, dtype=float).copy()
    n = z.size // 2
    A_of = {tid: (matrices or {}).get(tid, system_matrix(topologies[tid].laplacian)) for tid in schedule.topology_ids}
    step_of = {tid: linalg.expm(A * dt) for tid, A in A_of.items()} if method == "expm" else {}
    C = output_matrices(outputs, n)[0] if outputs is not None else np.zeros((0, 2 * n))

    times, states, ids = [schedule.t0], [z.copy()], [schedule.active_topology(schedule.t0)]
    step, entry, left = 0, 0, counts[0]
    while step < total:
        tid = schedule.entries[entry][0]
        if method == "expm":
            z = step_of[tid] @ z
        else:
            z = rk4_step(A_of[tid], z, dt)
        step += 1
        left -= 1
        if left == 0:
            entry = (entry + 1) % schedule.length
            left = counts[entry]
        if not np.all(np.isfinite(z)):
            raise DivergenceError(schedule.t0 + step * dt)
        if step % record_every == 0 or step == total:
            times.append(schedule.t0 + step * dt)
            states.append(z.copy())
            ids.append(schedule.entries[entry][0])
    states_arr = np.asarray(states)
    return Trajectory(
        times=np.asarray(times),
        states=states_arr,
        outputs=states_arr @ C.T,
        active_topology=np.asarray(ids, dtype=int),
    )


"""The adversary: zero-dynamics attack synthesis, intermittent scheduling, topology attacks."""

from __future__ import annotations

import bisect
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np
from scipy import linalg

from zdalab.dynamics import OutputConfig, StackedState, output_matrices, rk4_step, system_matrix
from zdalab.errors import AttackError
from zdalab.graph import Topology
from zdalab.observability import null_basis, observability_kernel
from zdalab.settings import get_settings
from zdalab.switching import SwitchingSchedule

SynthesisPolicy = Literal["intermittent", "classic"]

DEFAULT_ETA_GRID: tuple[complex, ...] = (1.0 + 0.0j, 0.08 - 2.0j)


@dataclass(frozen=True)
class ZdaCandidate:
    """One stealthy mode: deviation ``z0`` and input ``g`` with (eta I - A) z0 = g."""

    eta: complex
    z0: np.ndarray = field(repr=False)
    g: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.z0.size // 2

    @property
    def misbehaving(self) -> tuple[int, ...]:
        scale = max(1.0, float(np.max(np.abs(self.g))))
        return tuple(int(i) for i in np.flatnonzero(np.abs(self.g[self.n :]) > 1e-12 * scale))

    def residual(self, A: np.ndarray, C: np.ndarray, D: np.ndarray) -> float:
        size = A.shape[0]
        dynamics = (self.eta * np.eye(size) - A) @ self.z0 - self.g
        output = C @ self.z0 + D @ self.g
        return float(np.linalg.norm(dynamics) + np.linalg.norm(output))

    def as_dict(self) -> dict[str, Any]:
        return {
            "eta": [self.eta.real, self.eta.imag],
            "z0": [[v.real, v.imag] for v in self.z0],
            "g": [[v.real, v.imag] for v in self.g],
            "misbehaving": [i + 1 for i in self.misbehaving],
        }


def _normalize(z0: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = float(np.linalg.norm(z0))
    z0, g = z0 / norm, g / norm
    lead = z0[np.flatnonzero(np.abs(z0) > 1e-10)[0]]
    phase = np.conj(lead) / abs(lead)
    return z0 * phase, g * phase


def _pencil_eigenvalues(E: np.ndarray, F: np.ndarray, tol: float) -> list[complex] | None:
    """Finite eta with rank drop of (eta E - F); None when the pencil is singular for all eta."""
    rows, cols = E.shape
    scale = max(1.0, float(np.linalg.norm(E, 2)), float(np.linalg.norm(F, 2)))
    rng = np.random.default_rng(0)
    points = rng.normal(size=2) + 1j * rng.normal(size=2)
    ranks = [np.linalg.matrix_rank(z * E - F, tol=tol * scale * 10) for z in points]
    if rows < cols or max(ranks) < cols:
        return None
    W = rng.normal(size=(cols, rows))
    values = linalg.eigvals(W @ F, W @ E)
    found: list[complex] = []
    for value in values:
        if not np.isfinite(value) or abs(value) > 1e8:
            continue
        smallest = linalg.svdvals(value * E - F)[-1]
        if smallest > 1e-6 * scale:
            continue
        if any(abs(value - seen) <= 1e-6 * (1.0 + abs(seen)) for seen in found):
            continue
        found.append(complex(value))
    return found


def synthesize_zda(
    A: np.ndarray,
    C: np.ndarray,
    D: np.ndarray,
    misbehaving: Iterable[int],
    *,
    policy: SynthesisPolicy = "intermittent",
    eta_grid: Sequence[complex] | None = None,
    tol: float | None = None,
) -> list[ZdaCandidate]:
    """Enumerate nontrivial stealthy modes with input restricted to ``misbehaving`` velocities.

    With the intermittent policy the deviation must also be unobservable, which
    is what an attack that starts late and pauses at switches needs. An empty
    list means no stealthy attack exists for this configuration.
    """
    A = np.asarray(A, dtype=float)
    C = np.atleast_2d(np.asarray(C, dtype=float))
    D = np.atleast_2d(np.asarray(D, dtype=float))
    size = A.shape[0]
    n = size // 2
    rtol = get_settings().rank_tol if tol is None else tol
    allowed = np.zeros(size, dtype=bool)
    for agent in misbehaving:
        allowed[n + int(agent)] = True
    blocked = ~allowed

    basis = observability_kernel(A, C, rtol).basis if policy == "intermittent" else np.eye(size)
    k = basis.shape[1]
    if k == 0:
        return []
    select = np.eye(size)[blocked]
    E = np.vstack([select @ basis, D @ basis])
    F = np.vstack([select @ A @ basis, (D @ A - C) @ basis])

    etas = _pencil_eigenvalues(E, F, rtol)
    gridded = etas is None
    if etas is None:
        etas = [complex(eta) for eta in (eta_grid or DEFAULT_ETA_GRID)]

    scale = max(1.0, float(np.linalg.norm(A, 2)))
    candidates: list[ZdaCandidate] = []
    for eta in etas:
        pencil = eta * E - F
        s = linalg.svdvals(pencil)
        # grid points are not exact eigenvalues; a wide pencil has no singular value for part of its kernel
        atol = (1e-7 if gridded else rtol) * max(1.0, s[0])
        kernel = null_basis(pencil.astype(complex), atol)
        for column in kernel.T:
            z0 = basis @ column
            if np.linalg.norm(z0) <= 1e-12:
                continue
            g = (eta * np.eye(size) - A) @ z0
            g[blocked] = 0.0
            if np.linalg.norm(g) <= rtol * scale * np.linalg.norm(z0):
                continue
            z0, g = _normalize(z0, g)
            candidate = ZdaCandidate(complex(eta), z0, g)
            if candidate.residual(A, C, D) > 10.0 * atol:
                continue
            candidates.append(candidate)
    # slowest-growing modes first
    candidates.sort(key=lambda c: (round(abs(c.eta.real), 9), round(abs(c.eta), 9), c.eta.imag))
    return candidates


@dataclass(frozen=True)
class AttackWindow:
    topology_id: int
    resume: float
    pause: float
    eta: complex
    z_start: np.ndarray = field(repr=False)
    g: np.ndarray = field(repr=False)
    fitted: bool = True

    def mode(self, t: float) -> np.ndarray:
        return self.g * np.exp(self.eta * (t - self.resume))

    def deviation(self, t: float) -> np.ndarray:
        return np.real(self.z_start * np.exp(self.eta * (t - self.resume)))


@dataclass(frozen=True)
class ZdaPlan:
    """The attacker's program: false data at t0 and a sequence of injection windows.

    ``z0`` is the deviation the attacker plants in the observer's initial data;
    the observer receives ``-Re(z0)`` added to the true initial state.
    """

    n: int
    monitored: tuple[int, ...]
    d: np.ndarray
    z0: np.ndarray
    windows: tuple[AttackWindow, ...] = ()
    misbehaving: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        z0 = np.asarray(self.z0, dtype=complex).reshape(-1)
        if z0.size != 2 * self.n:
            raise AttackError(f"false data has {z0.size} entries, expected {2 * self.n}")
        windows = tuple(sorted(self.windows, key=lambda w: w.resume))
        K = set(self.misbehaving)
        for window in windows:
            if not window.resume <= window.pause:
                raise AttackError(f"window resumes at {window.resume} after pausing at {window.pause}")
            scale = max(1.0, float(np.max(np.abs(window.g))))
            if np.any(np.abs(window.g[: self.n]) > 1e-9 * scale):
                raise AttackError("attack input must have a zero position block")
            support = set(np.flatnonzero(np.abs(window.g[self.n :]) > 1e-12 * scale).tolist())
            if K and not support <= K:
                extra = sorted(i + 1 for i in support - K)
                raise AttackError(f"attack input touches agents {extra} outside the misbehaving set")
        for before, after in zip(windows, windows[1:]):
            if after.resume < before.pause:
                raise AttackError("attack windows overlap")
        object.__setattr__(self, "z0", z0)
        object.__setattr__(self, "windows", windows)
        object.__setattr__(self, "d", np.asarray(self.d, dtype=float).reshape(-1))
        idx = [self.n + i for i in self.monitored]
        held = [np.zeros(len(self.monitored))]
        for window in windows:
            last = np.real(window.mode(window.pause))[idx] * self.d
            held.append(held[-1] + last)
        object.__setattr__(self, "_held", tuple(held))
        object.__setattr__(self, "_resumes", [w.resume for w in windows])
        object.__setattr__(self, "_monitored_rows", idx)

    @classmethod
    def empty(cls, n: int, outputs: OutputConfig) -> ZdaPlan:
        return cls(n=n, monitored=outputs.monitored, d=outputs.d, z0=np.zeros(2 * n))

    @property
    def is_empty(self) -> bool:
        return not self.windows and not np.any(self.z0)

    @property
    def attacked_topologies(self) -> frozenset[int]:
        return frozenset(w.topology_id for w in self.windows)

    @property
    def etas(self) -> dict[int, complex]:
        return {w.topology_id: w.eta for w in self.windows}

    def false_data(self) -> np.ndarray:
        return -self.z0

    def crossing_windows(self, schedule: SwitchingSchedule) -> list[AttackWindow]:
        """Windows that keep injecting across a topology switch."""
        crossing = []
        for window in self.windows:
            for segment in schedule.segments(window.pause + schedule.period):
                if segment.start <= window.resume < segment.end:
                    if window.pause > segment.end + 1e-12:
                        crossing.append(window)
                    break
        return crossing

    def as_dict(self) -> dict[str, Any]:
        return {
            "misbehaving": [i + 1 for i in self.misbehaving],
            "attacked_topologies": sorted(self.attacked_topologies),
            "z0": [[v.real, v.imag] for v in self.z0],
            "windows": [
                {
                    "topology": w.topology_id,
                    "resume": w.resume,
                    "pause": w.pause,
                    "eta": [w.eta.real, w.eta.imag],
                    "fitted": w.fitted,
                }
                for w in self.windows
            ],
        }


def attack_signal(plan: ZdaPlan, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Real input injection on every agent and output injection on the monitored agents at time t.

    Inside a window the input is Re(g e^{eta (t - resume)}). Output injection adds
    the held values of all finished windows so it stays continuous at pauses.
    """
    k = bisect.bisect_right(plan._resumes, t) - 1
    zero_input = np.zeros(plan.n)
    if k < 0:
        return zero_input, plan._held[0].copy()
    window = plan.windows[k]
    if t < window.pause:
        value = np.real(window.mode(t))
        output = value[plan._monitored_rows] * plan.d + plan._held[k]
        return value[plan.n :], output
    return zero_input, plan._held[k + 1].copy()


def step_signals(plan: ZdaPlan, t: float, dt: float) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Input and output injections at t, t + dt/2 and t + dt for one integration step.

    All three samples come from the window active at the step midpoint, so a
    pause, resume or switch on the step boundary never leaks into the step.
    """
    samples = (t, t + 0.5 * dt, t + dt)
    k = bisect.bisect_right(plan._resumes, samples[1]) - 1
    if k >= 0 and samples[1] < plan.windows[k].pause:
        window = plan.windows[k]
        values = [np.real(window.mode(s)) for s in samples]
        inputs = [v[plan.n :] for v in values]
        injections = [v[plan._monitored_rows] * plan.d + plan._held[k] for v in values]
        return inputs, injections
    held = plan._held[k + 1]
    return [np.zeros(plan.n)] * 3, [held.copy() for _ in samples]


def _fit_candidate(
    options: Sequence[ZdaCandidate], deviation: np.ndarray
) -> tuple[np.ndarray, np.ndarray, complex, bool]:
    """Express the current real deviation through one eta group of modes, trying groups in order."""
    norm = float(np.linalg.norm(deviation))
    etas: list[complex] = []
    for c in options:
        if not any(abs(c.eta - e) <= 1e-9 * (1.0 + abs(e)) for e in etas):
            etas.append(c.eta)
    for eta in etas if norm > 0.0 else ():
        group = [c for c in options if abs(c.eta - eta) <= 1e-9 * (1.0 + abs(eta))]
        Z = np.column_stack([c.z0 for c in group])
        G = np.column_stack([c.g for c in group])
        M = np.hstack([Z.real, -Z.imag])
        coef, *_ = np.linalg.lstsq(M, deviation, rcond=None)
        if np.linalg.norm(M @ coef - deviation) <= 1e-8 * norm:
            k = len(group)
            alpha = coef[:k] + 1j * coef[k:]
            return Z @ alpha, G @ alpha, eta, True
    return options[0].z0, options[0].g, options[0].eta, False


def plan_intermittent(
    candidates: Mapping[int, Sequence[ZdaCandidate]],
    schedule: SwitchingSchedule,
    inference_delay: float,
    *,
    system_matrices: Mapping[int, np.ndarray],
    outputs: OutputConfig,
    horizon: float,
    false_data: np.ndarray | None = None,
    misbehaving: Iterable[int] | None = None,
    pause_at_switch: bool = True,
    synchronous_after_period: bool = True,
) -> ZdaPlan:
    """Pause at every switch, infer the new topology, resume with that topology's mode.

    During the first period the attacker needs ``inference_delay`` to identify
    each topology; afterwards it replays its recorded memory and resumes at the
    switch itself. Topologies without candidates get no window.
    """
    if inference_delay < 0:
        raise AttackError("inference_delay must be nonnegative")
    n = system_matrices[schedule.entries[0][0]].shape[0] // 2
    if false_data is None:
        first = next((candidates[tid] for tid, _ in schedule.entries if candidates.get(tid)), None)
        false_data = first[0].z0 if first else np.zeros(2 * n)
    z0 = np.asarray(false_data, dtype=complex)
    deviation = np.real(z0).astype(float)
    t_dev = schedule.t0
    windows: list[AttackWindow] = []

    for segment in schedule.segments(horizon):
        A = system_matrices[segment.topology_id]
        known = synchronous_after_period and segment.k >= schedule.length
        resume = segment.start if known else segment.start + inference_delay
        options = candidates.get(segment.topology_id) or ()
        if not options or resume >= segment.end:
            deviation = linalg.expm(A * (segment.end - t_dev)) @ deviation
            t_dev = segment.end
            continue
        deviation = linalg.expm(A * (resume - t_dev)) @ deviation
        z_start, g, eta, fitted = _fit_candidate(options, deviation)
        pause = segment.end if pause_at_switch else horizon
        windows.append(AttackWindow(segment.topology_id, resume, pause, eta, z_start, g, fitted))
        if not pause_at_switch:
            break
        span = pause - resume
        deviation = linalg.expm(A * span) @ (deviation - np.real(z_start)) + np.real(z_start * np.exp(eta * span))
        t_dev = pause

    if misbehaving is None:
        support: set[int] = set()
        for window in windows:
            support.update(np.flatnonzero(np.abs(window.g[n:]) > 1e-12).tolist())
        misbehaving = sorted(support)
    return ZdaPlan(
        n=n,
        monitored=outputs.monitored,
        d=outputs.d,
        z0=z0,
        windows=tuple(windows),
        misbehaving=tuple(int(i) for i in misbehaving),
    )


def continuous_plan(
    candidate: ZdaCandidate,
    topology_id: int,
    outputs: OutputConfig,
    horizon: float,
    *,
    start: float = 0.0,
) -> ZdaPlan:
    """A single mode injected from ``start`` to the horizon with matching false data."""
    window = AttackWindow(topology_id, start, horizon, candidate.eta, candidate.z0, candidate.g)
    return ZdaPlan(
        n=candidate.n,
        monitored=outputs.monitored,
        d=outputs.d,
        z0=candidate.z0,
        windows=(window,),
        misbehaving=candidate.misbehaving,
    )


@dataclass(frozen=True)
class TopologyAttack:
    """Edge rewrites (0-based endpoints) confined to the monitored agents in ``scope``."""

    target_edges: tuple[tuple[int, int, float], ...]
    scope: frozenset[int]

    def __post_init__(self) -> None:
        edges = tuple((int(i), int(j), float(w)) for i, j, w in self.target_edges)
        scope = frozenset(int(i) for i in self.scope)
        for i, j, weight in edges:
            if weight < 0.0:
                raise AttackError(f"edge ({i + 1}, {j + 1}) would get negative weight {weight}")
            if i == j:
                raise AttackError(f"self-loop on agent {i + 1}")
            if i not in scope or j not in scope:
                raise AttackError(f"edge ({i + 1}, {j + 1}) leaves the attack scope", code="scope_violation")
        object.__setattr__(self, "target_edges", edges)
        object.__setattr__(self, "scope", scope)

    @classmethod
    def create(cls, edges: Iterable[tuple[int, int, float]], monitored: Iterable[int]) -> TopologyAttack:
        edges = tuple(edges)
        watched = set(monitored)
        touched = {int(i) for i, _, _ in edges} | {int(j) for _, j, _ in edges}
        outside = sorted(a + 1 for a in touched - watched)
        if outside:
            raise AttackError(f"topology attack touches unmonitored agents {outside}", code="scope_violation")
        return cls(edges, frozenset(touched))


def apply_topology_attack(topology: Topology, atk: TopologyAttack) -> Topology:
    adjacency = np.array(topology.adjacency)
    for i, j, weight in atk.target_edges:
        if max(i, j) >= topology.n:
            raise AttackError(f"edge ({i + 1}, {j + 1}) outside topology {topology.id}")
        if weight < 0.0:
            raise AttackError(f"edge ({i + 1}, {j + 1}) would get negative weight {weight}")
        adjacency[i, j] = adjacency[j, i] = weight
    label = f"{topology.label or topology.id} (attacked)"
    return topology.with_adjacency(adjacency, label=label)


def cooperative_feasible(
    topology: Topology,
    atk: TopologyAttack,
    outputs: OutputConfig,
    state: StackedState | np.ndarray,
    depth: int | None = None,
    tol: float = 1e-9,
) -> bool:
    """Whether the corrupted Laplacian stays invisible to monitored velocities from ``state``.

    Checks C2 (L_hat - L) L^d w = 0 for w in {x, v} and d = 0..depth. A 2n-by-k
    array is read as a basis of states, making the check state independent.
    """
    n = topology.n
    if depth is None:
        depth = 2 * n
    if depth < 1:
        raise AttackError("cooperative feasibility depth must be at least 1")
    L = topology.laplacian
    delta = apply_topology_attack(topology, atk).laplacian - L
    touched = set(np.flatnonzero(np.any(delta != 0.0, axis=0)).tolist())
    if not touched <= set(atk.scope) or not touched <= set(outputs.monitored):
        return False
    C2 = np.zeros((outputs.m, n))
    for row, agent in enumerate(outputs.monitored):
        C2[row, agent] = outputs.c2[row]

    if isinstance(state, StackedState):
        vectors = [state.x, state.v]
    else:
        basis = np.atleast_2d(np.asarray(state, dtype=float))
        vectors = [basis[:n, k] for k in range(basis.shape[1])] + [basis[n:, k] for k in range(basis.shape[1])]

    delta_norm = max(1.0, float(np.linalg.norm(delta, 2)))
    for vector in vectors:
        current = np.asarray(vector, dtype=float)
        for _ in range(depth + 1):
            norm = float(np.linalg.norm(current))
            if norm == 0.0:
                break
            current = current / norm
            if np.linalg.norm(C2 @ delta @ current) > tol * delta_norm:
                return False
            current = L @ current
    return True


@dataclass(frozen=True)
class StealthReport:
    stealthy: bool
    max_output_gap: float
    max_law_error: float


def verify_stealthy(
    plan: ZdaPlan,
    *,
    topologies: Mapping[int, Topology],
    schedule: SwitchingSchedule,
    outputs: OutputConfig,
    initial: StackedState,
    horizon: float,
    dt: float,
    plant_topologies: Mapping[int, Topology] | None = None,
    tolerance: float = 1e-6,
) -> StealthReport:
    """Run the clean and attacked plants side by side and compare monitored outputs.

    ``plant_topologies`` replaces the defender's topologies on the attacked side
    (a physical topology attack). The attacked plant starts at the clean initial
    state plus Re(z0).
    """
    n = initial.n
    C, _ = output_matrices(outputs, n)
    plant = plant_topologies or topologies
    clean_A = {tid: system_matrix(topologies[tid].laplacian) for tid in schedule.topology_ids}
    attacked_A = {tid: system_matrix(plant[tid].laplacian) for tid in schedule.topology_ids}
    counts = schedule.step_counts(dt)
    total = round(horizon / dt)

    zeros = np.zeros(n)
    z = initial.z
    z_att = z + np.real(plan.z0)
    first = step_signals(plan, schedule.t0, dt)[1][0]
    gap = float(np.max(np.abs(C @ z - (C @ z_att + first)))) if C.size else 0.0
    law = 0.0
    step, entry, left = 0, 0, counts[0]
    while step < total:
        tid = schedule.entries[entry][0]
        t = schedule.t0 + step * dt
        inputs, injections = step_signals(plan, t, dt)
        forcing = [np.concatenate([zeros, u]) for u in inputs]
        z = rk4_step(clean_A[tid], z, dt)
        z_att = rk4_step(attacked_A[tid], z_att, dt, *forcing)
        step += 1
        left -= 1
        t_next = schedule.t0 + step * dt
        gap = max(gap, float(np.max(np.abs(C @ z - (C @ z_att + injections[2])))))
        for window in plan.windows:
            if window.fitted and window.topology_id == tid and window.resume <= t_next < window.pause:
                law = max(law, float(np.max(np.abs((z_att - z) - window.deviation(t_next)))))
        if left == 0:
            entry = (entry + 1) % schedule.length
            left = counts[entry]
    return StealthReport(stealthy=gap <= tolerance, max_output_gap=gap, max_law_error=law)


def complex_mode_errors(candidate: ZdaCandidate, A: np.ndarray, C: np.ndarray, D: np.ndarray, horizon: float, dt: float) -> tuple[float, float]:
    """Simulate the complex system verbatim and measure departures from the exact mode.

    Returns the worst relative error of z(t) against z0 e^{eta t} and the worst
    output magnitude |C z(t) + D g e^{eta t}|.
    """
    z = candidate.z0.astype(complex)
    steps = round(horizon / dt)
    state_error, output_error = 0.0, 0.0
    for k in range(steps):
        t = k * dt
        f = [candidate.g * np.exp(candidate.eta * s) for s in (t, t + 0.5 * dt, t + dt)]
        z = rk4_step(A, z, dt, *f)
        expected = candidate.z0 * np.exp(candidate.eta * (t + dt))
        state_error = max(state_error, float(np.linalg.norm(z - expected) / max(1e-300, np.linalg.norm(expected))))
        output_error = max(output_error, float(np.linalg.norm(C @ z + D @ f[2])))
    return state_error, output_error

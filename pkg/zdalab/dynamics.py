"""Second-order consensus plant: state-space matrices, control law and integration."""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy import linalg

from zdalab.errors import ConfigError, DivergenceError
from zdalab.graph import SpectralDecomposition, Topology

Forcing = Callable[[float], np.ndarray]
OutputMode = Literal["velocity", "position", "partial", "mixed"]


@dataclass(frozen=True)
class StackedState:
    x: np.ndarray
    v: np.ndarray

    def __post_init__(self) -> None:
        x = np.asarray(self.x, dtype=float).reshape(-1)
        v = np.asarray(self.v, dtype=float).reshape(-1)
        if x.shape != v.shape:
            raise ValueError(f"position and velocity sizes differ: {x.size} != {v.size}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "v", v)

    @classmethod
    def from_vector(cls, z: np.ndarray) -> StackedState:
        z = np.asarray(z, dtype=float).reshape(-1)
        if z.size % 2:
            raise ValueError("stacked state must have even length")
        n = z.size // 2
        return cls(z[:n], z[n:])

    @property
    def n(self) -> int:
        return int(self.x.size)

    @property
    def z(self) -> np.ndarray:
        return np.concatenate([self.x, self.v])


@dataclass(frozen=True)
class OutputConfig:
    """Monitored agents (0-based, strictly increasing) and their output coefficients.

    Monitored agent i reports c1*x_i + c2*v_i + d*g_i, where g_i is the attacker's
    input on that agent.
    """

    monitored: tuple[int, ...]
    c1: np.ndarray
    c2: np.ndarray
    d: np.ndarray

    def __post_init__(self) -> None:
        monitored = tuple(int(i) for i in self.monitored)
        if not monitored:
            raise ConfigError("At least one agent must be monitored")
        if any(b <= a for a, b in zip(monitored, monitored[1:])):
            raise ConfigError("Monitored agents must be strictly increasing")
        if monitored[0] < 0:
            raise ConfigError("Monitored agent indices must be nonnegative")
        m = len(monitored)
        arrays = {}
        for name in ("c1", "c2", "d"):
            value = np.asarray(getattr(self, name), dtype=float).reshape(-1)
            if value.size != m:
                raise ConfigError(f"{name} has {value.size} entries, expected {m}")
            value.setflags(write=False)
            arrays[name] = value
        if np.any((arrays["c1"] == 0.0) & (arrays["c2"] == 0.0)):
            raise ConfigError("Every monitored agent needs a nonzero position or velocity coefficient")
        object.__setattr__(self, "monitored", monitored)
        for name, value in arrays.items():
            object.__setattr__(self, name, value)

    @classmethod
    def velocity(cls, monitored: Sequence[int], gain: float = 1.0) -> OutputConfig:
        m = len(monitored)
        return cls(tuple(monitored), np.zeros(m), np.full(m, gain), np.zeros(m))

    @classmethod
    def position(cls, monitored: Sequence[int], gain: float = 1.0) -> OutputConfig:
        m = len(monitored)
        return cls(tuple(monitored), np.full(m, gain), np.zeros(m), np.zeros(m))

    @property
    def m(self) -> int:
        return len(self.monitored)

    @property
    def mode(self) -> OutputMode:
        pos = self.c1 != 0.0
        vel = self.c2 != 0.0
        if np.all(vel & ~pos):
            return "velocity"
        if np.all(pos & ~vel):
            return "position"
        if np.all(pos & vel):
            return "partial"
        return "mixed"


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    outputs: np.ndarray
    active_topology: np.ndarray

    def __post_init__(self) -> None:
        length = self.times.shape[0]
        if any(arr.shape[0] != length for arr in (self.states, self.outputs, self.active_topology)):
            raise ValueError("trajectory arrays must share their first dimension")
        if length > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")

    @property
    def n(self) -> int:
        return self.states.shape[1] // 2

    def state(self, index: int) -> StackedState:
        return StackedState.from_vector(self.states[index])

    @property
    def final(self) -> StackedState:
        return self.state(-1)


def system_matrix(L: np.ndarray) -> np.ndarray:
    L = np.asarray(L, dtype=float)
    n = L.shape[0]
    eye = np.eye(n)
    return np.block([[np.zeros((n, n)), eye], [-L, -eye]])


def output_matrices(cfg: OutputConfig, n: int) -> tuple[np.ndarray, np.ndarray]:
    if cfg.monitored[-1] >= n:
        raise ConfigError(f"Monitored agent {cfg.monitored[-1] + 1} outside 1..{n}")
    C = np.zeros((cfg.m, 2 * n))
    D = np.zeros((cfg.m, 2 * n))
    for row, agent in enumerate(cfg.monitored):
        C[row, agent] = cfg.c1[row]
        C[row, n + agent] = cfg.c2[row]
        D[row, n + agent] = cfg.d[row]
    return C, D


def control_input(state: StackedState, topology: Topology) -> np.ndarray:
    if state.n != topology.n:
        raise ValueError(f"state has {state.n} agents, topology {topology.id} has {topology.n}")
    return -state.v - topology.laplacian @ state.x


@dataclass(frozen=True)
class ExponentialForcing:
    """Real part of a single complex exponential mode, Re(g e^{eta (t - t_ref)})."""

    g: np.ndarray
    eta: complex
    t_ref: float = 0.0

    def __call__(self, t: float) -> np.ndarray:
        return np.real(self.g * np.exp(self.eta * (t - self.t_ref)))


def rk4_step(
    A: np.ndarray,
    z: np.ndarray,
    h: float,
    f0: np.ndarray | None = None,
    f_mid: np.ndarray | None = None,
    f1: np.ndarray | None = None,
) -> np.ndarray:
    """One classical Runge-Kutta step of z' = A z + f(t) given forcing samples."""
    if f0 is None:
        k1 = A @ z
        k2 = A @ (z + 0.5 * h * k1)
        k3 = A @ (z + 0.5 * h * k2)
        k4 = A @ (z + h * k3)
    else:
        k1 = A @ z + f0
        k2 = A @ (z + 0.5 * h * k1) + f_mid
        k3 = A @ (z + 0.5 * h * k2) + f_mid
        k4 = A @ (z + h * k3) + f1
    return z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _step_count(t0: float, t1: float, dt: float) -> int:
    span = t1 - t0
    return max(1, int(np.ceil(span / dt - 1e-9)))


def _exponential_solution(A: np.ndarray, z: np.ndarray, forcing: ExponentialForcing, t0: float, t1: float) -> np.ndarray:
    size = A.shape[0]
    a, b = forcing.eta.real, forcing.eta.imag
    # augment with phi(s) = [Re, Im] e^{eta (s - t_ref)}, phi' = S phi
    G = np.column_stack([np.real(forcing.g), -np.imag(forcing.g)])
    S = np.array([[a, -b], [b, a]])
    big = np.zeros((size + 2, size + 2))
    big[:size, :size] = A
    big[:size, size:] = G
    big[size:, size:] = S
    phase = np.exp(forcing.eta * (t0 - forcing.t_ref))
    start = np.concatenate([z, [phase.real, phase.imag]])
    return (linalg.expm(big * (t1 - t0)) @ start)[:size]


def propagate(
    state: StackedState,
    A: np.ndarray,
    forcing: Forcing | None,
    t0: float,
    t1: float,
    dt: float,
    *,
    method: Literal["rk4", "expm"] = "rk4",
) -> StackedState:
    if t1 <= t0:
        raise ValueError("propagate needs t1 > t0")
    if dt <= 0:
        raise ValueError("dt must be positive")
    z = state.z
    if method == "expm":
        if forcing is None:
            z = linalg.expm(A * (t1 - t0)) @ z
        elif isinstance(forcing, ExponentialForcing):
            z = _exponential_solution(A, z, forcing, t0, t1)
        else:
            raise ValueError("matrix-exponential propagation needs zero or single-mode forcing")
    else:
        steps = _step_count(t0, t1, dt)
        h = (t1 - t0) / steps
        for k in range(steps):
            t = t0 + k * h
            if forcing is None:
                z = rk4_step(A, z, h)
            else:
                z = rk4_step(A, z, h, forcing(t), forcing(t + 0.5 * h), forcing(t + h))
            if not np.all(np.isfinite(z)):
                raise DivergenceError(t + h)
    if not np.all(np.isfinite(z)):
        raise DivergenceError(t1)
    return StackedState.from_vector(z)


def target_location(x0: np.ndarray, v0: np.ndarray) -> float:
    return float(np.mean(x0) + np.mean(v0))


def consensus_error(state: StackedState) -> tuple[float, float]:
    return float(np.ptp(state.x)), float(np.max(np.abs(state.v)))


def fluctuation_coordinates(state: StackedState, reference: SpectralDecomposition) -> np.ndarray:
    """Reduced disagreement state in the eigenbasis of a reference Laplacian.

    Deviations from the agent averages are rotated by Q^T; the first rotated
    entry of each block is the consensus direction and is always zero.
    """
    x_tilde = state.x - np.mean(state.x)
    v_tilde = state.v - np.mean(state.v)
    Q = reference.Q
    return np.concatenate([(Q.T @ x_tilde)[1:], (Q.T @ v_tilde)[1:]])

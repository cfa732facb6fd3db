"""Switching-synchronized Luenberger observer, residuals and detection verdicts."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from functools import cached_property
from typing import Literal

import numpy as np

from zdalab.dynamics import OutputConfig, StackedState
from zdalab.graph import Topology

Measurement = np.ndarray | Sequence[np.ndarray]


@dataclass(frozen=True)
class ObserverState:
    q: np.ndarray
    w: np.ndarray
    r_integral: np.ndarray

    def __post_init__(self) -> None:
        q = np.asarray(self.q, dtype=float).reshape(-1)
        w = np.asarray(self.w, dtype=float).reshape(-1)
        rho = np.asarray(self.r_integral, dtype=float).reshape(-1)
        if q.shape != w.shape:
            raise ValueError(f"estimate sizes differ: {q.size} != {w.size}")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "r_integral", rho)

    @property
    def n(self) -> int:
        return int(self.q.size)

    @property
    def estimate(self) -> StackedState:
        return StackedState(self.q, self.w)


def observer_gain(cfg: OutputConfig, n: int) -> np.ndarray:
    """Diagonal feedback gain seen by the estimation error: c1 for position agents, c2 for integral agents."""
    gain = np.zeros((n, n))
    for row, agent in enumerate(cfg.monitored):
        gain[agent, agent] = cfg.c1[row] if cfg.c1[row] != 0.0 else cfg.c2[row]
    return gain


def initialize_observer(
    true_init: StackedState,
    false_data: np.ndarray | None = None,
    m: int = 0,
    *,
    mismatch: np.ndarray | None = None,
) -> ObserverState:
    """Observer start: the true initial state, shifted by Re(false_data) when the channel is corrupted.

    ``mismatch`` adds an honest estimation error on top, for convergence runs.
    """
    z = true_init.z
    if false_data is not None:
        offset = np.real(np.asarray(false_data, dtype=complex)).reshape(-1)
        if offset.size != z.size:
            raise ValueError(f"false data has {offset.size} entries, expected {z.size}")
        z = z + offset
    if mismatch is not None:
        z = z + np.asarray(mismatch, dtype=float).reshape(-1)
    n = true_init.n
    return ObserverState(z[:n], z[n:], np.zeros(m))


def residual(obs: ObserverState, measurement: np.ndarray, cfg: OutputConfig) -> np.ndarray:
    idx = list(cfg.monitored)
    return cfg.c1 * obs.q[idx] + cfg.c2 * obs.w[idx] - np.asarray(measurement, dtype=float)


def _split(measurement: Measurement) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(measurement, np.ndarray) and measurement.ndim == 1:
        return measurement, measurement, measurement
    y0, y_mid, y1 = (np.asarray(y, dtype=float) for y in measurement)
    return y0, y_mid, y1


def observer_step(
    obs: ObserverState,
    measurement: Measurement,
    topology: Topology | np.ndarray,
    cfg: OutputConfig,
    dt: float,
) -> tuple[ObserverState, np.ndarray]:
    """Advance the observer by one RK4 step; returns the new state and the residual at the step start.

    ``measurement`` is either one output vector held over the step or the
    triple (start, midpoint, end) sampled from the plant.
    """
    L = topology.laplacian if isinstance(topology, Topology) else np.asarray(topology, dtype=float)
    n = obs.n
    idx = np.asarray(cfg.monitored, dtype=int)
    position = cfg.c1 != 0.0
    y0, y_mid, y1 = _split(measurement)

    def rate(s: np.ndarray, y: np.ndarray) -> np.ndarray:
        q, w, rho = s[:n], s[n : 2 * n], s[2 * n :]
        r = cfg.c1 * q[idx] + cfg.c2 * w[idx] - y
        injection = np.zeros(n)
        injection[idx] = np.where(position, r, rho)
        return np.concatenate([w, -w - L @ q - injection, np.where(position, 0.0, r)])

    s = np.concatenate([obs.q, obs.w, obs.r_integral])
    k1 = rate(s, y0)
    k2 = rate(s + 0.5 * dt * k1, y_mid)
    k3 = rate(s + 0.5 * dt * k2, y_mid)
    k4 = rate(s + dt * k3, y1)
    s = s + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return ObserverState(s[:n], s[n : 2 * n], s[2 * n :]), residual(obs, y0, cfg)


def hermite_midpoint(z0: np.ndarray, z1: np.ndarray, f0: np.ndarray, f1: np.ndarray, dt: float) -> np.ndarray:
    """Cubic Hermite value at the middle of a step from endpoint states and derivatives."""
    return 0.5 * (z0 + z1) + (dt / 8.0) * (f0 - f1)


@dataclass(frozen=True)
class Detection:
    verdict: Literal["clean", "attack_detected"]
    time: float | None = None

    @property
    def detected(self) -> bool:
        return self.verdict == "attack_detected"

    def __str__(self) -> str:
        if self.time is None:
            return self.verdict
        return f"{self.verdict}({self.time:.6g})"


@dataclass(frozen=True)
class ResidualTrace:
    """Sampled residuals with a threshold rule.

    A detection needs ``debounce`` consecutive samples with max_i |r_i| above
    the threshold; it is timestamped at the first of them.
    """

    times: np.ndarray
    residuals: np.ndarray = field(repr=False)
    threshold: float
    debounce: int = 1

    def __post_init__(self) -> None:
        times = np.asarray(self.times, dtype=float).reshape(-1)
        residuals = np.asarray(self.residuals, dtype=float)
        if residuals.ndim == 1:
            residuals = residuals.reshape(-1, 1)
        if residuals.shape[0] != times.size:
            raise ValueError("residual samples and times differ in length")
        if self.debounce < 1:
            raise ValueError("debounce must be at least 1")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "residuals", residuals)

    @cached_property
    def magnitude(self) -> np.ndarray:
        if self.residuals.size == 0:
            return np.zeros(self.times.size)
        return np.max(np.abs(self.residuals), axis=1)

    @property
    def max_residual(self) -> float:
        return float(np.max(self.magnitude)) if self.magnitude.size else 0.0

    @cached_property
    def exceeding(self) -> np.ndarray:
        if math.isinf(self.threshold):
            return np.zeros(self.times.size, dtype=bool)
        return self.magnitude > self.threshold

    @cached_property
    def first_detection(self) -> float | None:
        run = 0
        for i, flag in enumerate(self.exceeding):
            run = run + 1 if flag else 0
            if run == self.debounce:
                return float(self.times[i - self.debounce + 1])
        return None


def detect(trace: ResidualTrace) -> Detection:
    first = trace.first_detection
    if first is None:
        return Detection("clean")
    return Detection("attack_detected", first)

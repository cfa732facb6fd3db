from __future__ import annotations

from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from zdalab.dynamics import OutputConfig, StackedState
from zdalab.graph import Topology
from zdalab.settings import get_settings
from zdalab.switching import SwitchingSchedule

ComplexValue = float | tuple[float, float]


def to_complex(value: ComplexValue) -> complex:
    if isinstance(value, (tuple, list)):
        return complex(float(value[0]), float(value[1]))
    return complex(float(value), 0.0)


def to_complex_vector(values: list[ComplexValue]) -> np.ndarray:
    return np.array([to_complex(v) for v in values], dtype=complex)


def _on_grid(value: float, dt: float) -> bool:
    steps = round(value / dt)
    return steps >= 1 and abs(steps * dt - value) <= 1e-9 * max(1.0, value)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TopologyModel(_Strict):
    id: int
    edges: list[tuple[int, int] | tuple[int, int, float]] = Field(default_factory=list)
    label: str | None = None

    def weighted_edges(self) -> list[tuple[int, int, float]]:
        return [(e[0], e[1], e[2] if len(e) == 3 else 1.0) for e in self.edges]


class ScheduleEntryModel(_Strict):
    topology: int
    dwell: float = Field(..., gt=0)


class OutputsModel(_Strict):
    monitored: list[int] = Field(..., min_length=1)
    c1: float | list[float] = 0.0
    c2: float | list[float] = 1.0
    d: float | list[float] = 0.0

    @field_validator("monitored")
    @classmethod
    def _increasing(cls, value: list[int]) -> list[int]:
        if any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError("monitored agents must be listed in strictly increasing order")
        return value

    def coefficients(self, name: str) -> list[float]:
        value = getattr(self, name)
        if isinstance(value, list):
            return value
        return [value] * len(self.monitored)


class InitialModel(_Strict):
    x: list[float]
    v: list[float]


class ObserverModel(_Strict):
    threshold: float | None = Field(None, gt=0)
    debounce: int | None = Field(None, ge=1)
    mismatch: list[float] | None = None


class CapabilitiesModel(_Strict):
    knows_initial_topology: bool = True
    knows_switching_times: bool = True
    records_memory: bool = True
    knows_monitored_outputs: bool = True


class ZdaModel(_Strict):
    misbehaving: list[int] = Field(..., min_length=1)
    synthesize: bool = True
    policy: Literal["intermittent", "classic"] = "intermittent"
    eta: ComplexValue | None = None
    z0: list[ComplexValue] | None = None
    g: list[ComplexValue] | None = None
    topologies: list[int] | None = None
    candidate: int = Field(0, ge=0)
    eta_grid: list[ComplexValue] | None = None
    inference_delay: float = Field(0.0, ge=0)
    pause_at_switch: bool = True
    intervals: list[tuple[float, float]] | None = None
    false_data: list[ComplexValue] | None = None

    @property
    def explicit(self) -> bool:
        return self.eta is not None and self.g is not None


class TopologyAttackModel(_Strict):
    topology: int
    edges: list[tuple[int, int, float]] = Field(..., min_length=1)
    start: float = Field(0.0, ge=0)


class AttackModel(_Strict):
    zda: ZdaModel | None = None
    topology: TopologyAttackModel | None = None
    capabilities: CapabilitiesModel = Field(default_factory=CapabilitiesModel)


class ScenarioConfig(_Strict):
    """A complete experiment: graphs, schedule, monitoring, initial state, attacks.

    Agent indices are 1-based here and converted to 0-based by the builders.
    """

    name: str = "scenario"
    n: int = Field(..., ge=1)
    horizon: float = Field(..., gt=0)
    dt: float | None = Field(None, gt=0)
    record_every: int | None = Field(None, ge=1)
    seed: int = 0
    t0: float = 0.0
    topologies: list[TopologyModel] = Field(..., min_length=1)
    schedule: list[ScheduleEntryModel] = Field(..., min_length=1)
    outputs: OutputsModel
    initial: InitialModel
    observer: ObserverModel = Field(default_factory=ObserverModel)
    attack: AttackModel | None = None
    notes: str | None = None

    @model_validator(mode="after")
    def _cross_references(self) -> ScenarioConfig:
        n = self.n
        ids = [t.id for t in self.topologies]
        if len(set(ids)) != len(ids):
            raise ValueError(f"topology ids must be unique, got {ids}")
        defined = set(ids)
        for topology in self.topologies:
            for i, j, weight in topology.weighted_edges():
                if not (1 <= i <= n and 1 <= j <= n):
                    raise ValueError(f"topology {topology.id}: edge ({i}, {j}) outside agents 1..{n}")
                if weight < 0:
                    raise ValueError(f"topology {topology.id}: edge ({i}, {j}) has negative weight")
        for entry in self.schedule:
            if entry.topology not in defined:
                raise ValueError(f"schedule references undefined topology {entry.topology}")

        dt = self.effective_dt
        for entry in self.schedule:
            if not _on_grid(entry.dwell, dt):
                raise ValueError(
                    f"dwell {entry.dwell} of topology {entry.topology} is not a multiple of dt {dt} (grid misaligned)"
                )
        if not _on_grid(self.horizon, dt):
            raise ValueError(f"horizon {self.horizon} is not a multiple of dt {dt} (grid misaligned)")

        monitored = self.outputs.monitored
        outside = [a for a in monitored if not 1 <= a <= n]
        if outside:
            raise ValueError(f"monitored agents {outside} outside 1..{n}")
        for name in ("c1", "c2", "d"):
            if len(self.outputs.coefficients(name)) != len(monitored):
                raise ValueError(f"outputs.{name} needs one entry per monitored agent")
        for c1, c2 in zip(self.outputs.coefficients("c1"), self.outputs.coefficients("c2")):
            if c1 == 0.0 and c2 == 0.0:
                raise ValueError("every monitored agent needs a nonzero c1 or c2")

        if len(self.initial.x) != n or len(self.initial.v) != n:
            raise ValueError(f"initial.x and initial.v need {n} entries")
        if self.observer.mismatch is not None and len(self.observer.mismatch) != 2 * n:
            raise ValueError(f"observer.mismatch needs {2 * n} entries")
        if self.attack is not None:
            self._check_attack(defined)
        return self

    def _check_attack(self, defined: set[int]) -> None:
        n = self.n
        zda = self.attack.zda
        if zda is not None:
            bad = [a for a in zda.misbehaving if not 1 <= a <= n]
            if bad:
                raise ValueError(f"misbehaving agents {bad} outside 1..{n}")
            for tid in zda.topologies or []:
                if tid not in defined:
                    raise ValueError(f"attack references undefined topology {tid}")
            if not zda.synthesize and not zda.explicit:
                raise ValueError("attack.zda needs eta and g when synthesize is false")
            if zda.g is not None and len(zda.g) not in (n, 2 * n):
                raise ValueError(f"attack.zda.g needs {n} velocity entries or {2 * n} entries")
            for name in ("z0", "false_data"):
                value = getattr(zda, name)
                if value is not None and len(value) != 2 * n:
                    raise ValueError(f"attack.zda.{name} needs {2 * n} entries")
            for resume, pause in zda.intervals or []:
                if not self.t0 <= resume <= pause:
                    raise ValueError(f"attack interval ({resume}, {pause}) is not ordered")
        topo = self.attack.topology
        if topo is not None:
            if topo.topology not in defined:
                raise ValueError(f"topology attack references undefined topology {topo.topology}")
            watched = set(self.outputs.monitored)
            for i, j, weight in topo.edges:
                if i not in watched or j not in watched:
                    raise ValueError(f"topology attack edge ({i}, {j}) touches unmonitored agents")
                if weight < 0:
                    raise ValueError(f"topology attack edge ({i}, {j}) has negative weight")

    @property
    def effective_dt(self) -> float:
        return self.dt if self.dt is not None else get_settings().default_dt

    @property
    def effective_record_every(self) -> int:
        return self.record_every if self.record_every is not None else get_settings().record_every

    @property
    def threshold(self) -> float:
        if self.observer.threshold is not None:
            return self.observer.threshold
        return get_settings().detection_threshold

    @property
    def debounce(self) -> int:
        if self.observer.debounce is not None:
            return self.observer.debounce
        return get_settings().debounce_samples

    def build_topologies(self) -> dict[int, Topology]:
        return {
            t.id: Topology.from_edges(t.id, self.n, t.weighted_edges(), label=t.label) for t in self.topologies
        }

    def build_schedule(self) -> SwitchingSchedule:
        return SwitchingSchedule(tuple((e.topology, e.dwell) for e in self.schedule), self.t0)

    def build_outputs(self) -> OutputConfig:
        return OutputConfig(
            tuple(a - 1 for a in self.outputs.monitored),
            np.array(self.outputs.coefficients("c1")),
            np.array(self.outputs.coefficients("c2")),
            np.array(self.outputs.coefficients("d")),
        )

    def build_initial(self) -> StackedState:
        return StackedState(np.array(self.initial.x), np.array(self.initial.v))


class HealthResponse(BaseModel):
    status: Literal["ok"]
    version: str
    output_dir: str


class RunResponse(BaseModel):
    name: str
    output_dir: str
    trajectory_csv: str
    residual_csv: str
    detection: str
    summary: dict[str, Any]

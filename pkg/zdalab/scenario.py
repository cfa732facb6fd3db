"""Experiment harness: scenario loading, lockstep plant/observer runs, artifacts, plot scripts."""

from __future__ import annotations

import json
import logging
import time

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import ValidationError
from scipy import linalg

from zdalab.attack import (
    AttackWindow,
    TopologyAttack,
    ZdaCandidate,
    ZdaPlan,
    apply_topology_attack,
    plan_intermittent,
    step_signals,
    synthesize_zda,
)
from zdalab.dynamics import OutputConfig, StackedState, output_matrices, rk4_step, system_matrix
from zdalab.errors import ArtifactError, ConfigError, DivergenceError, GainConditionError, HypothesisError, LabError
from zdalab.export import (
    atomic_write_json,
    atomic_write_text,
    summarize,
    write_residual_csv,
    write_trajectory_csv,
)
from zdalab.graph import Topology
from zdalab.models import ScenarioConfig, to_complex, to_complex_vector
from zdalab.observability import DefenseReport, defense_check
from zdalab.observer import (
    Detection,
    ResidualTrace,
    detect,
    hermite_midpoint,
    initialize_observer,
    observer_gain,
    observer_step,
    residual,
)
from zdalab.settings import get_settings
from zdalab.switching import StabilityCertificate, SwitchingSchedule, certify_consensus, certify_observer

logger = logging.getLogger("zdalab")


def _log(event: str, **fields: Any) -> None:
    logger.info(json.dumps({"event": event, **fields}, separators=(",", ":"), default=str))


def load_config(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"Cannot read scenario {path}", code="unreadable_config", detail=str(exc)) from exc
    try:
        data = tomllib.loads(raw)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}", code="parse_error") from exc
    return parse_config(data, source=str(path))


def parse_config(data: dict[str, Any], source: str = "<scenario>") -> ScenarioConfig:
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as exc:
        first = exc.errors()[0]
        where = ".".join(str(part) for part in first["loc"]) or "scenario"
        raise ConfigError(f"{source}: {where}: {first['msg']}", detail=str(exc)) from exc


@dataclass
class Scenario:
    """A validated config resolved into domain objects (0-based agents)."""

    config: ScenarioConfig
    topologies: dict[int, Topology]
    schedule: SwitchingSchedule
    outputs: OutputConfig
    initial: StackedState
    dt: float

    @classmethod
    def from_config(cls, config: ScenarioConfig) -> Scenario:
        try:
            topologies = config.build_topologies()
            outputs = config.build_outputs()
        except LabError as exc:
            raise ConfigError(exc.message, detail=exc.detail) from exc
        return cls(
            config=config,
            topologies=topologies,
            schedule=config.build_schedule(),
            outputs=outputs,
            initial=config.build_initial(),
            dt=config.effective_dt,
        )

    @property
    def n(self) -> int:
        return self.config.n

    @cached_property
    def active_topologies(self) -> dict[int, Topology]:
        return {tid: self.topologies[tid] for tid in self.schedule.topology_ids}

    def defense_report(self) -> DefenseReport:
        return defense_check(self.active_topologies, self.outputs)

    def certificates(self) -> dict[str, StabilityCertificate]:
        gain = observer_gain(self.outputs, self.n)
        return {
            "consensus": certify_consensus(self.schedule, self.topologies),
            "observer": certify_observer(self.schedule, self.topologies, gain),
        }

    @cached_property
    def topology_attack(self) -> TopologyAttack | None:
        attack = self.config.attack
        if attack is None or attack.topology is None:
            return None
        if not attack.capabilities.knows_monitored_outputs:
            logger.warning("topology attack disabled: attacker does not know the monitored outputs")
            return None
        edges = [(i - 1, j - 1, w) for i, j, w in attack.topology.edges]
        return TopologyAttack.create(edges, self.outputs.monitored)

    @cached_property
    def plant_topologies(self) -> dict[int, Topology]:
        """Topologies the physical plant runs on once the topology attack is active."""
        plant = dict(self.topologies)
        atk = self.topology_attack
        if atk is not None:
            tid = self.config.attack.topology.topology
            plant[tid] = apply_topology_attack(self.topologies[tid], atk)
        return plant

    def candidates(self, topology_id: int, policy: str | None = None) -> list[ZdaCandidate]:
        if topology_id not in self.topologies:
            raise ConfigError(f"Topology {topology_id} is not defined")
        zda = self.config.attack.zda if self.config.attack is not None else None
        misbehaving = [a - 1 for a in zda.misbehaving] if zda is not None else []
        if not misbehaving:
            misbehaving = [a for a in range(self.n) if a not in self.outputs.monitored]
        A = system_matrix(self.plant_topologies[topology_id].laplacian)
        C, D = output_matrices(self.outputs, self.n)
        grid = [to_complex(v) for v in zda.eta_grid] if zda is not None and zda.eta_grid else None
        chosen = policy or (zda.policy if zda is not None else "intermittent")
        return synthesize_zda(A, C, D, misbehaving, policy=chosen, eta_grid=grid)

    def _explicit_candidate(self, topology_id: int) -> ZdaCandidate:
        zda = self.config.attack.zda
        n = self.n
        eta = to_complex(zda.eta)
        g = to_complex_vector(zda.g)
        if g.size == n:
            g = np.concatenate([np.zeros(n, dtype=complex), g])
        if zda.z0 is not None:
            z0 = to_complex_vector(zda.z0)
        else:
            A = system_matrix(self.plant_topologies[topology_id].laplacian)
            z0 = linalg.solve(eta * np.eye(2 * n) - A, g)
        return ZdaCandidate(eta, z0, g)

    def build_plan(self) -> ZdaPlan:
        attack = self.config.attack
        if attack is None or attack.zda is None:
            return ZdaPlan.empty(self.n, self.outputs)
        zda = attack.zda
        caps = attack.capabilities
        targets = zda.topologies or list(self.schedule.topology_ids)
        options: dict[int, list[ZdaCandidate]] = {}
        for tid in targets:
            found = [self._explicit_candidate(tid)] if zda.explicit else self.candidates(tid)
            if zda.candidate and len(found) > zda.candidate:
                found.insert(0, found.pop(zda.candidate))
            if found:
                options[tid] = found
            else:
                logger.warning("no stealthy mode on topology %s; window skipped", tid)

        false_data = to_complex_vector(zda.false_data) if zda.false_data is not None else None
        if not caps.knows_initial_topology:
            false_data = np.zeros(2 * self.n, dtype=complex)
        misbehaving = [a - 1 for a in zda.misbehaving]
        if zda.intervals:
            return self._interval_plan(options, false_data, misbehaving)
        A_of = {tid: system_matrix(self.plant_topologies[tid].laplacian) for tid in self.schedule.topology_ids}
        return plan_intermittent(
            options,
            self.schedule,
            zda.inference_delay,
            system_matrices=A_of,
            outputs=self.outputs,
            horizon=self.config.horizon,
            false_data=false_data,
            misbehaving=misbehaving,
            pause_at_switch=zda.pause_at_switch and caps.knows_switching_times,
            synchronous_after_period=caps.records_memory,
        )

    def _interval_plan(
        self,
        options: dict[int, list[ZdaCandidate]],
        false_data: np.ndarray | None,
        misbehaving: list[int],
    ) -> ZdaPlan:
        windows = []
        for resume, pause in self.config.attack.zda.intervals:
            tid = self.schedule.active_topology(resume)
            if tid not in options:
                continue
            mode = options[tid][0]
            windows.append(AttackWindow(tid, resume, pause, mode.eta, mode.z0, mode.g, fitted=False))
        if false_data is None:
            false_data = windows[0].z_start if windows else np.zeros(2 * self.n)
        return ZdaPlan(
            n=self.n,
            monitored=self.outputs.monitored,
            d=self.outputs.d,
            z0=false_data,
            windows=tuple(windows),
            misbehaving=tuple(misbehaving),
        )


@dataclass(frozen=True)
class RunArtifacts:
    output_dir: Path
    trajectory_csv: Path
    residual_csv: Path
    summary_json: Path
    report_txt: Path
    defense: DefenseReport
    certificates: dict[str, StabilityCertificate]
    detection: Detection
    summary: dict[str, Any] = field(repr=False)
    threshold: float = 0.0
    attacked: bool = False
    n: int = 0
    m: int = 0


def _certificates_or_warn(scenario: Scenario) -> dict[str, StabilityCertificate]:
    try:
        certificates = scenario.certificates()
    except (HypothesisError, GainConditionError) as exc:
        logger.warning("certificate unavailable: %s", exc.message)
        return {}
    for name, certificate in certificates.items():
        if not certificate.passed:
            logger.warning("%s certificate does not pass (combination %.4g)", name, certificate.convex_combination)
    return certificates


def run_experiment(config: ScenarioConfig, output_dir: str | Path | None = None) -> RunArtifacts:
    """Advance plant, attacker and observer in lockstep over the horizon and write artifacts.

    The observer runs on the preprogrammed topologies; the plant runs on the
    topology-attacked ones while that attack is active.
    """
    started = time.perf_counter()
    scenario = Scenario.from_config(config)
    out = Path(output_dir) if output_dir is not None else Path(get_settings().output_dir) / config.name
    n, dt = scenario.n, scenario.dt
    outputs = scenario.outputs
    m = outputs.m
    schedule = scenario.schedule
    counts = schedule.step_counts(dt)
    total = round(config.horizon / dt)
    stride = config.effective_record_every
    _log("run_start", scenario=config.name, n=n, horizon=config.horizon, dt=dt, steps=total)

    report = scenario.defense_report()
    certificates = _certificates_or_warn(scenario)
    plan = scenario.build_plan()
    atk_start = config.attack.topology.start if scenario.topology_attack is not None else None
    atk_tid = config.attack.topology.topology if scenario.topology_attack is not None else None

    clean_A = {tid: system_matrix(scenario.topologies[tid].laplacian) for tid in schedule.topology_ids}
    attacked_A = {tid: system_matrix(scenario.plant_topologies[tid].laplacian) for tid in schedule.topology_ids}
    defender = scenario.topologies
    C, _ = output_matrices(outputs, n)
    zeros = np.zeros(n)

    mismatch = np.array(config.observer.mismatch) if config.observer.mismatch is not None else None
    false_data = None if plan.is_empty else plan.false_data()
    obs = initialize_observer(scenario.initial, false_data, m, mismatch=mismatch)
    z = scenario.initial.z

    times, states, ys, ids, residuals = [], [], [], [], []
    step, entry, left = 0, 0, counts[0]
    while step < total:
        t = schedule.t0 + step * dt
        tid = schedule.entries[entry][0]
        A = attacked_A[tid] if atk_tid == tid and t + 0.5 * dt >= atk_start else clean_A[tid]
        inputs, injections = step_signals(plan, t, dt)
        f0, f_mid, f1 = (np.concatenate([zeros, u]) for u in inputs)
        z1 = rk4_step(A, z, dt, f0, f_mid, f1)
        z_mid = hermite_midpoint(z, z1, A @ z + f0, A @ z1 + f1, dt)
        y0 = C @ z + injections[0]
        y1 = C @ z1 + injections[2]
        obs, r = observer_step(obs, (y0, C @ z_mid + injections[1], y1), defender[tid], outputs, dt)
        if step % stride == 0:
            times.append(t)
            states.append(z)
            ys.append(y0)
            ids.append(tid)
            residuals.append(r)
        z = z1
        step += 1
        left -= 1
        if left == 0:
            entry = (entry + 1) % schedule.length
            left = counts[entry]
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(obs.q)) and np.all(np.isfinite(obs.w))):
            logger.error(json.dumps({"event": "run_diverged", "scenario": config.name, "t": t + dt}))
            raise DivergenceError(t + dt)

    t_end = schedule.t0 + total * dt
    y_end = y1 if total else C @ z + step_signals(plan, t_end, dt)[1][0]
    times.append(t_end)
    states.append(z)
    ys.append(y_end)
    ids.append(schedule.entries[entry][0])
    residuals.append(residual(obs, y_end, outputs))

    times_arr = np.asarray(times)
    states_arr = np.asarray(states)
    residual_arr = np.asarray(residuals).reshape(len(times), m)
    trace = ResidualTrace(times_arr, residual_arr, config.threshold, config.debounce)
    detection = detect(trace)
    flags = times_arr >= detection.time if detection.detected else np.zeros(times_arr.size, dtype=bool)

    trajectory_csv = out / "trajectory.csv"
    residual_csv = out / "residuals.csv"
    write_trajectory_csv(trajectory_csv, times_arr, states_arr, np.asarray(ys).reshape(len(times), m), np.asarray(ids))
    write_residual_csv(residual_csv, times_arr, residual_arr, flags)

    summary = summarize(states_arr, times_arr, residual_arr, flags)
    summary_json = out / "summary.json"
    atomic_write_json(
        summary_json,
        {
            "scenario": config.name,
            "n": n,
            "horizon": config.horizon,
            "dt": dt,
            "detection": str(detection),
            "threshold": config.threshold,
            "summary": summary,
            "defense": report.as_dict(),
            "certificates": {name: cert.as_dict() for name, cert in certificates.items()},
            "attack": plan.as_dict(),
        },
    )
    report_txt = out / "defense_report.txt"
    atomic_write_text(report_txt, report.render_table() + "\n\n" + report.render_key_values() + "\n")

    elapsed_ms = int((time.perf_counter() - started) * 1000)
    _log(
        "run_finish",
        scenario=config.name,
        steps=total,
        detection=str(detection),
        max_residual=summary["max_residual"],
        elapsed_ms=elapsed_ms,
    )
    return RunArtifacts(
        output_dir=out,
        trajectory_csv=trajectory_csv,
        residual_csv=residual_csv,
        summary_json=summary_json,
        report_txt=report_txt,
        defense=report,
        certificates=certificates,
        detection=detection,
        summary=summary,
        threshold=config.threshold,
        attacked=not plan.is_empty or scenario.topology_attack is not None,
        n=n,
        m=m,
    )


_PLOT_TEMPLATE = '''"""Velocity and residual panels for run {name}."""

import matplotlib.pyplot as plt
import numpy as np

trajectory = np.loadtxt({trajectory!r}, delimiter=",", skiprows=1, ndmin=2)
residuals = np.loadtxt({residuals!r}, delimiter=",", skiprows=1, ndmin=2)
n, m = {n}, {m}

fig, (top, bottom) = plt.subplots(2, 1, sharex=True, figsize=(8, 6))
for i in range(n):
    top.plot(trajectory[:, 0], trajectory[:, 1 + n + i], linewidth=0.8)
top.set_ylabel("velocity")
for j in range(m):
    bottom.plot(residuals[:, 0], residuals[:, 1 + j], linewidth=0.8, label=f"r{{j + 1}}")
{threshold_lines}bottom.set_xlabel("t")
bottom.set_ylabel("residual")
bottom.legend(loc="upper right", fontsize="small")
fig.tight_layout()
fig.savefig({figure!r}, dpi=150)
'''


def emit_plot_script(artifacts: RunArtifacts, path: str | Path) -> Path:
    """Write a self-contained matplotlib script that draws the run's CSVs."""
    for csv_path in (artifacts.trajectory_csv, artifacts.residual_csv):
        if not Path(csv_path).is_file():
            raise ArtifactError(f"Missing artifact {csv_path}")
    path = Path(path)
    threshold_lines = ""
    if artifacts.attacked and np.isfinite(artifacts.threshold):
        threshold_lines = (
            f'bottom.axhline({artifacts.threshold!r}, color="k", linestyle="--", linewidth=0.8, label="threshold")\n'
            f'bottom.axhline({-artifacts.threshold!r}, color="k", linestyle="--", linewidth=0.8)\n'
        )
    script = _PLOT_TEMPLATE.format(
        name=artifacts.output_dir.name,
        trajectory=str(Path(artifacts.trajectory_csv).resolve()),
        residuals=str(Path(artifacts.residual_csv).resolve()),
        n=artifacts.n,
        m=artifacts.m,
        threshold_lines=threshold_lines,
        figure=str(path.with_suffix(".png").resolve()),
    )
    atomic_write_text(path, script)
    return path

"""Analog versions of four 16-agent reference experiments.

The reference graphs are only known from drawings, so every scenario here
runs on an analog topology built to exhibit the same property (defense
condition violated or satisfied). Initial conditions and the intermittent
attack values match the reference runs. Dwell times match too unless the
analog graphs fail a stability certificate, in which case the reference
dwell is lengthened with ``tune_dwell``. Horizons are our choice, long
enough to show the qualitative outcome.
"""

from __future__ import annotations

from collections.abc import Callable
from pathlib import Path
from typing import Any

from zdalab.export import atomic_write_text
from zdalab.models import ScenarioConfig
from zdalab.scenario import RunArtifacts, Scenario, emit_plot_script, run_experiment
from zdalab.settings import get_settings
from zdalab.switching import tune_dwell

N_AGENTS = 16
INITIAL_X = [2.0] * 8 + [4.0] * 8
INITIAL_V = [6.0] * 8 + [8.0] * 8

# intermittent mode on the leaf pair (4, 5)
ETA = (0.08, -2.0)
G4 = (2.9136, 2.32)
G5 = (-2.9136, -2.32)


def _path(n: int, first_weight: float = 1.0) -> list[list[float]]:
    edges = [[1, 2, first_weight]]
    edges.extend([i, i + 1, 1.0] for i in range(2, n))
    return edges


def _clique_with_twin_leaves(with_link: bool) -> list[list[float]]:
    """Agents 4 and 5 are leaves on agent 3; the other fourteen agents form a clique, minus (1,7) if asked."""
    core = [1, 2, 3, *range(6, N_AGENTS + 1)]
    edges = [
        [i, j, 1.0]
        for a, i in enumerate(core)
        for j in core[a + 1 :]
        if with_link or (i, j) != (1, 7)
    ]
    edges.extend([[3, 4, 1.0], [3, 5, 1.0]])
    return edges


def _twin_diamond(with_link: bool) -> list[list[float]]:
    edges = [[1, 2, 1.0], [1, 3, 1.0], [2, 4, 1.0], [3, 4, 1.0]]
    edges.extend([i, i + 1, 1.0] for i in range(4, N_AGENTS))
    if with_link:
        edges.append([2, 3, 1.0])
    return edges


def _base(name: str, horizon: float, notes: str) -> dict[str, Any]:
    return {
        "name": name,
        "n": N_AGENTS,
        "horizon": horizon,
        "dt": 1e-3,
        "record_every": 10,
        "initial": {"x": list(INITIAL_X), "v": list(INITIAL_V)},
        "notes": notes,
    }


def _certified(data: dict[str, Any], periods: int) -> ScenarioConfig:
    """Validate ``data``, lengthening the reference dwell until both certificates pass.

    The horizon is reset to ``periods`` whole periods of the final schedule.
    """
    config = ScenarioConfig.model_validate(data)
    dt = data["dt"]
    for _ in range(2):
        scenario = Scenario.from_config(config)
        schedule = scenario.schedule
        for certificate in scenario.certificates().values():
            schedule = tune_dwell(schedule, certificate, dt=dt)
        if schedule == scenario.schedule:
            break
        data["schedule"] = [{"topology": tid, "dwell": dwell} for tid, dwell in schedule.entries]
        data["horizon"] = round(periods * schedule.period / dt) * dt
        data["notes"] += f"; dwells tuned to {[dwell for _, dwell in schedule.entries]}"
        config = ScenarioConfig.model_validate(data)
    return config


def intermittent_evasion() -> ScenarioConfig:
    """Intermittent attack evades a schedule whose topologies share twin leaves."""
    zero = (0.0, 0.0)
    z0 = [0.0] * N_AGENTS + [zero] * N_AGENTS
    z0[3], z0[4] = -1.0, 1.0
    z0[N_AGENTS + 3] = (-ETA[0], -ETA[1])
    z0[N_AGENTS + 4] = ETA
    g = [zero] * N_AGENTS
    g[3], g[4] = G4, G5
    data = _base(
        "intermittent_evasion",
        18.0,
        "analog topologies: clique with twin leaves 4 and 5 on agent 3, with and without link (1,7)",
    )
    data |= {
        "topologies": [
            {"id": 1, "edges": _clique_with_twin_leaves(True), "label": "clique + twin leaves"},
            {"id": 2, "edges": _clique_with_twin_leaves(False), "label": "clique - (1,7) + twin leaves"},
        ],
        "schedule": [{"topology": 1, "dwell": 3.0}, {"topology": 2, "dwell": 6.0}],
        "outputs": {"monitored": [1], "c1": 0.0, "c2": 1.0},
        "attack": {
            "zda": {
                "misbehaving": [4, 5],
                "synthesize": False,
                "eta": ETA,
                "z0": z0,
                "g": g,
                "topologies": [1, 2],
                "inference_delay": 0.2,
            }
        },
    }
    return _certified(data, periods=2)


def bias_detected() -> ScenarioConfig:
    """A bias attack that keeps injecting across a switch between two defense-valid paths."""
    g = [0.0] * N_AGENTS
    g[0], g[1], g[2] = -1.0, 2.0, -1.0
    z0 = [0.0] * (2 * N_AGENTS)
    z0[1] = 1.0
    data = _base("bias_detected", 9.0, "analog topologies: unit path and path with a12 = 2, both defense-valid")
    data |= {
        "topologies": [
            {"id": 1, "edges": _path(N_AGENTS), "label": "path"},
            {"id": 2, "edges": _path(N_AGENTS, 2.0), "label": "weighted path"},
        ],
        "schedule": [{"topology": 1, "dwell": 3.0}, {"topology": 2, "dwell": 6.0}],
        "outputs": {"monitored": [1], "c1": 0.0, "c2": 1.0},
        "attack": {
            "zda": {
                "misbehaving": [1, 2, 3],
                "synthesize": False,
                "eta": 0.0,
                "z0": z0,
                "g": g,
                "topologies": [1],
                "pause_at_switch": False,
            }
        },
    }
    return ScenarioConfig.model_validate(data)


def _cooperative(
    name: str,
    horizon: float,
    notes: str,
    topologies: list[dict[str, Any]],
    *,
    agent: int,
    monitored: list[int],
    misbehaving: list[int],
    g: list[float],
    restore: list[float],
) -> ScenarioConfig:
    z0 = [0.0] * (2 * N_AGENTS)
    z0[agent - 1] = 1.0
    data = _base(name, horizon, notes)
    # the plant starts offset by the false data; the observer is told the nominal state
    data["initial"]["x"][agent - 1] += 1.0
    first, second = topologies[0]["id"], topologies[1]["id"]
    data |= {
        "topologies": topologies,
        "schedule": [{"topology": first, "dwell": 3.0}, {"topology": second, "dwell": 1.0}],
        "outputs": {"monitored": monitored, "c1": 0.0, "c2": 1.0},
        "attack": {
            "zda": {
                "misbehaving": misbehaving,
                "synthesize": False,
                "policy": "classic",
                "eta": 0.0,
                "z0": z0,
                "g": g,
                "topologies": [first],
                "pause_at_switch": False,
                "false_data": z0,
            },
            "topology": {"topology": second, "edges": [restore]},
        },
    }
    return ScenarioConfig.model_validate(data)


def cooperative_evasion() -> ScenarioConfig:
    """Cooperative attack evades when two monitored agents are twins."""
    g = [0.0] * N_AGENTS
    g[0], g[1], g[2], g[3] = -1.0, 3.0, -1.0, -1.0
    return _cooperative(
        "cooperative_evasion",
        12.0,
        "analog topologies: twins 2 and 3 adjacent to {1, 4}, link (2,3) present then absent",
        [
            {"id": 3, "edges": _twin_diamond(True), "label": "diamond + link (2,3)"},
            {"id": 4, "edges": _twin_diamond(False), "label": "diamond"},
        ],
        agent=2,
        monitored=[1, 2, 3],
        misbehaving=[1, 2, 3, 4],
        g=g,
        restore=[2, 3, 1.0],
    )


def cooperative_detected() -> ScenarioConfig:
    """Cooperative attack is detected when the monitored rows differ."""
    g = [0.0] * N_AGENTS
    g[0], g[1] = 1.0, -1.0
    return _cooperative(
        "cooperative_detected",
        12.0,
        "analog topologies: paths with a12 = 1 and a12 = 2",
        [
            {"id": 5, "edges": _path(N_AGENTS), "label": "path"},
            {"id": 6, "edges": _path(N_AGENTS, 2.0), "label": "weighted path"},
        ],
        agent=1,
        monitored=[1, 2],
        misbehaving=[1, 2],
        g=g,
        restore=[1, 2, 1.0],
    )


SCENARIOS: dict[str, Callable[[], ScenarioConfig]] = {
    "intermittent-evasion": intermittent_evasion,
    "bias-detected": bias_detected,
    "cooperative-evasion": cooperative_evasion,
    "cooperative-detected": cooperative_detected,
}

# short names accepted by `zdalab reproduce`
ALIASES: dict[str, str] = {
    "fig2": "intermittent-evasion",
    "fig3": "bias-detected",
    "fig5": "cooperative-evasion",
    "fig6": "cooperative-detected",
}


def reproduce(name: str, output_dir: str | Path | None = None) -> RunArtifacts:
    name = ALIASES.get(name, name)
    config = SCENARIOS[name]()
    out = Path(output_dir) if output_dir is not None else Path(get_settings().output_dir) / name
    artifacts = run_experiment(config, out)
    atomic_write_text(out / "scenario.json", config.model_dump_json(indent=2) + "\n")
    emit_plot_script(artifacts, out / "plot.py")
    return artifacts

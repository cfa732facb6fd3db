"""Run artifact writers: trajectory and residual CSVs, JSON summaries, atomic replacement."""

from __future__ import annotations

import io
import json
import os
from pathlib import Path
from typing import Any

import numpy as np

from zdalab.errors import ArtifactError

FLOAT_FORMAT = "%.17g"


def atomic_write_text(path: str | Path, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    temp_path = os.path.join(directory, f".{os.path.basename(path)}.tmp")
    flags = os.O_WRONLY | os.O_CREAT | os.O_TRUNC
    fd = os.open(temp_path, flags, 0o644)
    with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
        handle.write(text)
    os.replace(temp_path, path)


def atomic_write_json(path: str | Path, payload: dict[str, Any]) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _csv_text(header: list[str], rows: np.ndarray) -> str:
    buffer = io.StringIO()
    np.savetxt(buffer, rows, fmt=FLOAT_FORMAT, delimiter=",", header=",".join(header), comments="")
    return buffer.getvalue()


def trajectory_header(n: int, m: int) -> list[str]:
    return (
        ["t"]
        + [f"x{i}" for i in range(1, n + 1)]
        + [f"v{i}" for i in range(1, n + 1)]
        + [f"y{i}" for i in range(1, m + 1)]
        + ["topology"]
    )


def residual_header(m: int) -> list[str]:
    return ["t"] + [f"r{i}" for i in range(1, m + 1)] + ["detected"]


def write_trajectory_csv(
    path: str | Path,
    times: np.ndarray,
    states: np.ndarray,
    outputs: np.ndarray,
    topology_ids: np.ndarray,
) -> None:
    n = states.shape[1] // 2
    m = outputs.shape[1]
    rows = np.column_stack([times, states, outputs, topology_ids.astype(float)])
    atomic_write_text(path, _csv_text(trajectory_header(n, m), rows))


def write_residual_csv(path: str | Path, times: np.ndarray, residuals: np.ndarray, detected: np.ndarray) -> None:
    rows = np.column_stack([times, residuals, detected.astype(float)])
    atomic_write_text(path, _csv_text(residual_header(residuals.shape[1]), rows))


def read_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(f"Missing artifact {path}")
    with path.open("r", encoding="utf-8") as handle:
        header = handle.readline().strip().split(",")
        data = np.loadtxt(handle, delimiter=",", ndmin=2)
    return header, data


def summarize(states: np.ndarray, residual_times: np.ndarray, residuals: np.ndarray, flags: np.ndarray) -> dict[str, Any]:
    n = states.shape[1] // 2
    x0, v0 = states[0, :n], states[0, n:]
    x_final, v_final = states[-1, :n], states[-1, n:]
    first = float(residual_times[np.argmax(flags)]) if np.any(flags) else None
    return {
        "target_location": float(np.mean(x0) + np.mean(v0)),
        "final_position_spread": float(np.ptp(x_final)),
        "final_max_speed": float(np.max(np.abs(v_final))),
        "final_mean_position": float(np.mean(x_final)),
        "max_residual": float(np.max(np.abs(residuals))) if residuals.size else 0.0,
        "detection_time": first,
    }


def summary_from_csv(trajectory_csv: str | Path, residual_csv: str | Path) -> dict[str, Any]:
    """Recompute the run summary statistics from exported artifacts alone."""
    header, traj = read_csv(trajectory_csv)
    n = sum(1 for name in header if name.startswith("x"))
    _, res = read_csv(residual_csv)
    return summarize(traj[:, 1 : 2 * n + 1], res[:, 0], res[:, 1:-1], res[:, -1] > 0.5)

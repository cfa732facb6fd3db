from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from zdalab.errors import ArtifactError
from zdalab.export import (
    atomic_write_json,
    read_csv,
    residual_header,
    summarize,
    summary_from_csv,
    trajectory_header,
    write_residual_csv,
    write_trajectory_csv,
)


def test_headers() -> None:
    assert trajectory_header(2, 1) == ["t", "x1", "x2", "v1", "v2", "y1", "topology"]
    assert residual_header(2) == ["t", "r1", "r2", "detected"]


def test_trajectory_csv_keeps_full_precision(tmp_path: Path) -> None:
    times = np.array([0.0, 0.1, 0.2])
    states = np.array([[0.1, 1 / 3, 0.0, 2.0], [0.2, 0.3, -1e-17, 1.5], [np.pi, np.e, 1.0, 0.0]])
    outputs = states[:, [2]]
    path = tmp_path / "nested" / "trajectory.csv"
    write_trajectory_csv(path, times, states, outputs, np.array([1, 1, 2]))

    header, data = read_csv(path)
    assert header == trajectory_header(2, 1)
    assert_array_equal(data[:, 1:5], states)
    assert_array_equal(data[:, -1], [1.0, 1.0, 2.0])
    assert not list(path.parent.glob(".*.tmp"))


def test_summary_matches_after_export(tmp_path: Path) -> None:
    times = np.array([0.0, 1.0, 2.0])
    states = np.array([[0.0, 2.0, 1.0, 1.0], [1.0, 1.5, 0.5, 0.2], [1.9, 2.0, 0.1, -0.1]])
    residuals = np.array([[0.0], [0.3], [-0.4]])
    flags = np.array([False, True, True])
    write_trajectory_csv(tmp_path / "t.csv", times, states, states[:, [2]], np.ones(3))
    write_residual_csv(tmp_path / "r.csv", times, residuals, flags)

    summary = summarize(states, times, residuals, flags)
    assert summary["target_location"] == 2.0
    assert summary["final_position_spread"] == pytest.approx(0.1)
    assert summary["max_residual"] == 0.4
    assert summary["detection_time"] == 1.0
    assert summary_from_csv(tmp_path / "t.csv", tmp_path / "r.csv") == summary


def test_missing_artifact(tmp_path: Path) -> None:
    with pytest.raises(ArtifactError):
        read_csv(tmp_path / "absent.csv")


def test_atomic_json_is_sorted(tmp_path: Path) -> None:
    path = tmp_path / "summary.json"
    atomic_write_json(path, {"b": 1, "a": [1, 2]})
    text = path.read_text(encoding="utf-8")
    assert text.index('"a"') < text.index('"b"')
    assert json.loads(text) == {"a": [1, 2], "b": 1}

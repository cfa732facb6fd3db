from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from zdalab import cli
from zdalab.errors import DivergenceError
from zdalab.export import read_csv

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"
STEALTHY = str(SCENARIOS / "p3_stealthy.toml")


def test_check_defense_prints_table(capsys: pytest.CaptureFixture[str]) -> None:
    assert cli.main(["check-defense", STEALTHY]) == 0
    out = capsys.readouterr().out
    assert "intermittent defense    FAIL" in out
    assert "verdict=intermittent:fail" in out


def test_check_defense_json(capsys: pytest.CaptureFixture[str]) -> None:
    assert cli.main(["check-defense", STEALTHY, "--json"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["monitored"] == [2]
    assert payload["verdict"]["intermittent"] == "fail"


def test_invalid_config_exits_with_one(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    broken = tmp_path / "misaligned.toml"
    text = (SCENARIOS / "two_agent.toml").read_text(encoding="utf-8").replace("dwell = 0.5", "dwell = 0.505")
    broken.write_text(text, encoding="utf-8")
    assert cli.main(["certify", str(broken)]) == 1
    assert "grid misaligned" in capsys.readouterr().err


def test_usage_errors_exit_with_one(capsys: pytest.CaptureFixture[str]) -> None:
    assert cli.main(["bogus"]) == 1
    assert cli.main(["synthesize-attack", STEALTHY]) == 1
    assert "error:" in capsys.readouterr().err


def test_divergence_exits_with_two(monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> None:
    def diverge(*_args, **_kwargs):
        raise DivergenceError(1.5)

    monkeypatch.setattr(cli, "run_experiment", diverge)
    assert cli.main(["run", STEALTHY, "--output-dir", str(tmp_path)]) == 2


def test_unexpected_failure_exits_with_three(monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> None:
    def explode(*_args, **_kwargs):
        raise RuntimeError("boom")

    monkeypatch.setattr(cli, "run_experiment", explode)
    assert cli.main(["run", STEALTHY, "--output-dir", str(tmp_path)]) == 3


def test_run_with_plot(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    assert cli.main(["run", STEALTHY, "--plot", "--output-dir", str(tmp_path)]) == 0
    assert "p3_stealthy: clean" in capsys.readouterr().out
    out = tmp_path / "p3_stealthy"
    for name in ("trajectory.csv", "residuals.csv", "summary.json", "plot.py"):
        assert (out / name).is_file()


def test_synthesize_attack(capsys: pytest.CaptureFixture[str]) -> None:
    assert cli.main(["synthesize-attack", STEALTHY, "--topology", "1"]) == 0
    candidates = json.loads(capsys.readouterr().out)
    assert candidates
    assert all(c["misbehaving"] == [1, 3] for c in candidates)

    assert cli.main(["synthesize-attack", str(SCENARIOS / "two_agent.toml"), "--topology", "1"]) == 0
    assert "no stealthy attack" in capsys.readouterr().out


def test_certify_prints_both_certificates(capsys: pytest.CaptureFixture[str]) -> None:
    assert cli.main(["certify", STEALTHY]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert set(payload) == {"consensus", "observer"}
    assert payload["consensus"]["passed"] is True


def test_reproduce_bias_across_a_switch(tmp_path: Path) -> None:
    assert cli.main(["reproduce", "bias-detected", "--output-dir", str(tmp_path)]) == 0
    payload = json.loads((tmp_path / "summary.json").read_text(encoding="utf-8"))
    assert payload["scenario"] == "bias_detected"
    assert payload["summary"]["detection_time"] is not None
    assert payload["summary"]["detection_time"] >= 3.0
    assert (tmp_path / "scenario.json").is_file()


def test_reproduce_accepts_short_names(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    assert cli.main(["reproduce", "fig3", "--output-dir", str(tmp_path)]) == 0
    assert capsys.readouterr().out.startswith("fig3: ")
    payload = json.loads((tmp_path / "summary.json").read_text(encoding="utf-8"))
    assert payload["scenario"] == "bias_detected"
    assert payload["summary"]["max_residual"] > 1e-3

    header, residuals = read_csv(tmp_path / "residuals.csv")
    assert header == ["t", "r1", "detected"]
    before, after = residuals[residuals[:, 0] < 3.0], residuals[residuals[:, 0] > 3.0]
    assert np.max(np.abs(before[:, 1])) < 1e-6
    assert np.max(np.abs(after[:, 1])) > 1e-3

    assert cli.main(["reproduce", "fig4", "--output-dir", str(tmp_path)]) == 1

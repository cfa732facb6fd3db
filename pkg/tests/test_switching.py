from __future__ import annotations

import networkx as nx
import numpy as np
import pytest
from numpy.testing import assert_allclose

from zdalab.dynamics import OutputConfig, StackedState, fluctuation_coordinates
from zdalab.errors import ConfigError, GainConditionError, HypothesisError
from zdalab.graph import Topology
from zdalab.observer import observer_gain
from zdalab.switching import (
    SwitchingSchedule,
    certify_consensus,
    certify_observer,
    matrix_measure,
    observer_error_matrix,
    reduced_consensus_matrix,
    simulate_switched,
    tune_dwell,
)


def _path(topology_id: int, n: int) -> Topology:
    return Topology.from_edges(topology_id, n, [(i, i + 1, 1.0) for i in range(1, n)])


def _weighted_norm(z: np.ndarray, P: np.ndarray) -> float:
    return float(np.sqrt(z @ P @ z))


def test_active_topology_follows_the_periodic_sequence() -> None:
    schedule = SwitchingSchedule(((1, 3.0), (2, 6.0)))
    assert schedule.period == 9.0
    assert schedule.active_topology(0.0) == 1
    assert schedule.active_topology(3.0) == 2
    assert schedule.active_topology(4.0) == 2
    assert schedule.active_topology(9.0) == 1
    assert schedule.active_topology(12.5) == 2
    for t in (0.5, 4.2, 8.9):
        assert schedule.active_topology(t + 3 * schedule.period) == schedule.active_topology(t)
    with pytest.raises(ValueError):
        schedule.active_topology(-1.0)


def test_single_entry_schedule_is_constant() -> None:
    schedule = SwitchingSchedule(((4, 2.5),))
    assert {schedule.active_topology(t) for t in (0.0, 2.5, 7.1, 100.0)} == {4}


def test_schedule_validation() -> None:
    with pytest.raises(ConfigError):
        SwitchingSchedule(())
    with pytest.raises(ConfigError):
        SwitchingSchedule(((1, 0.0),))
    with pytest.raises(ConfigError):
        SwitchingSchedule(((1, 1.0), (2, -2.0)))


def test_dwell_shares_merge_repeated_topologies() -> None:
    schedule = SwitchingSchedule(((1, 1.0), (2, 1.0), (1, 2.0)))
    assert schedule.topology_ids == (1, 2)
    assert schedule.dwell_shares() == pytest.approx({1: 0.75, 2: 0.25})


def test_step_counts_and_grid_alignment() -> None:
    assert SwitchingSchedule(((1, 3.0), (2, 6.0))).step_counts(0.01) == (300, 600)
    with pytest.raises(ConfigError) as excinfo:
        SwitchingSchedule(((1, 3.0005), (2, 6.0))).step_counts(0.001)
    assert excinfo.value.code == "grid_misaligned"


def test_segments_walk_dwell_windows() -> None:
    segments = list(SwitchingSchedule(((1, 3.0), (2, 6.0))).segments(10.0))
    assert [(s.k, s.entry, s.topology_id, s.start, s.end) for s in segments] == [
        (0, 0, 1, 0.0, 3.0),
        (1, 1, 2, 3.0, 9.0),
        (2, 0, 1, 9.0, 10.0),
    ]


def test_matrix_measure_examples() -> None:
    eye = np.eye(2)
    assert matrix_measure(-eye, eye) == pytest.approx(-1.0)
    assert matrix_measure(np.array([[0.0, 1.0], [0.0, 0.0]]), eye) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        matrix_measure(eye, np.diag([1.0, -1.0]))
    with pytest.raises(ValueError):
        matrix_measure(np.eye(3), eye)


def test_matrix_measure_properties() -> None:
    rng = np.random.default_rng(7)
    for _ in range(25):
        A = rng.normal(size=(4, 4))
        B = rng.normal(size=(4, 4))
        root = rng.normal(size=(4, 4))
        P = root @ root.T + 0.5 * np.eye(4)
        mu = matrix_measure(A, P)
        assert matrix_measure(A + 2.5 * np.eye(4), P) == pytest.approx(mu + 2.5)
        assert matrix_measure(A + B, P) <= mu + matrix_measure(B, P) + 1e-10
        assert mu >= np.max(np.real(np.linalg.eigvals(A))) - 1e-10


def test_reduced_consensus_matrix_examples() -> None:
    k2 = Topology.from_edges(1, 2, [(1, 2, 1.0)])
    assert_allclose(reduced_consensus_matrix(k2.spectrum, k2.laplacian), [[0, 1], [-2, -1]], atol=1e-12)
    assert_allclose(reduced_consensus_matrix(k2.spectrum, np.zeros((2, 2))), [[0, 1], [0, -1]])
    p3 = _path(1, 3)
    reduced = reduced_consensus_matrix(p3.spectrum, p3.laplacian)
    assert_allclose(reduced[2:, :2], -np.diag([1.0, 3.0]), atol=1e-12)


def test_observer_error_matrix_examples() -> None:
    k2 = Topology.from_edges(1, 2, [(1, 2, 1.0)])
    expected = [[0, 0, 1, 0], [0, 0, 0, 1], [-2, 1, -1, 0], [1, -1, 0, -1]]
    assert_allclose(observer_error_matrix(k2.laplacian, np.diag([1.0, 0.0])), expected)
    with pytest.raises(ValueError):
        observer_error_matrix(k2.laplacian, np.eye(3))


def test_single_connected_topology_passes() -> None:
    topologies = {1: _path(1, 4)}
    schedule = SwitchingSchedule(((1, 1.0),))
    consensus = certify_consensus(schedule, topologies)
    assert consensus.passed
    assert consensus.reference_topology == 1
    gain = observer_gain(OutputConfig.velocity([0]), 4)
    assert certify_observer(schedule, topologies, gain).passed


def test_certificates_reject_invalid_inputs() -> None:
    edgeless = {1: Topology.from_edges(1, 3, [])}
    schedule = SwitchingSchedule(((1, 1.0),))
    with pytest.raises(HypothesisError):
        certify_consensus(schedule, edgeless)
    topologies = {1: _path(1, 3)}
    with pytest.raises(GainConditionError):
        certify_observer(schedule, topologies, np.zeros((3, 3)))
    with pytest.raises(GainConditionError):
        certify_observer(schedule, topologies, np.diag([1.0, -1.0, 0.0]))
    with pytest.raises(ConfigError):
        certify_consensus(SwitchingSchedule(((2, 1.0),)), topologies)


def test_long_disconnected_dwell_fails_until_tuned() -> None:
    topologies = {1: _path(1, 4), 2: Topology.from_edges(2, 4, [])}
    schedule = SwitchingSchedule(((1, 0.1), (2, 5.0)))
    certificate = certify_consensus(schedule, topologies)
    assert not certificate.passed
    assert certificate.bottleneck().topology_id == 2

    tuned = tune_dwell(schedule, certificate, dt=0.01)
    assert tuned.entries[0][1] > 0.1
    assert tuned.entries[1] == (2, 5.0)
    assert certify_consensus(tuned, topologies, certificate.P).passed
    assert tune_dwell(tuned, certify_consensus(tuned, topologies, certificate.P)) == tuned


def test_sixteen_agents_reach_the_target_location() -> None:
    n = 16
    complete = Topology.from_networkx(1, nx.complete_graph(n))
    matching = {(i, i + 8) for i in range(8)}
    sparse_edges = [(i + 1, j + 1, 1.0) for i, j in nx.complete_graph(n).edges if (i, j) not in matching]
    topologies = {1: complete, 2: Topology.from_edges(2, n, sparse_edges)}
    assert_allclose(topologies[2].spectrum.eigenvalues[1:], [14.0] * 8 + [16.0] * 7, atol=1e-10)

    schedule = SwitchingSchedule(((1, 3.0), (2, 1.0)))
    schedule = tune_dwell(schedule, certify_consensus(schedule, topologies), dt=0.01)
    assert certify_consensus(schedule, topologies).passed

    initial = np.concatenate([[2.0] * 8 + [4.0] * 8, [6.0] * 8 + [8.0] * 8])
    trajectory = simulate_switched(initial, schedule, topologies, 40.0, 0.01, method="expm", record_every=100)
    final = trajectory.final
    assert np.max(np.abs(final.x - 10.0)) < 1e-3
    assert np.max(np.abs(final.v)) < 1e-3


def test_weighted_disagreement_decreases_every_period() -> None:
    cycle = Topology.from_edges(2, 5, [(i, i % 5 + 1, 1.0) for i in range(1, 6)])
    topologies = {1: _path(1, 5), 2: cycle}
    schedule = SwitchingSchedule(((1, 2.0), (2, 1.0)))
    schedule = tune_dwell(schedule, certify_consensus(schedule, topologies), dt=0.01)
    certificate = certify_consensus(schedule, topologies)
    assert certificate.passed

    x0 = np.array([3.0, -1.0, 0.5, -2.0, -0.5])
    v0 = np.array([1.0, 0.0, -2.0, 0.5, 0.5])
    periods = 4
    per = round(schedule.period / 0.01)
    trajectory = simulate_switched(
        np.concatenate([x0, v0]), schedule, topologies, periods * per * 0.01, 0.01, method="expm"
    )
    reference = topologies[certificate.reference_topology].spectrum
    norms = [
        _weighted_norm(fluctuation_coordinates(StackedState.from_vector(z), reference), certificate.P)
        for z in trajectory.states[::per][: periods + 1]
    ]
    assert all(b < a for a, b in zip(norms, norms[1:]))


def test_observer_error_contracts_every_period() -> None:
    cycle = Topology.from_edges(2, 5, [(i, i % 5 + 1, 1.0) for i in range(1, 6)])
    topologies = {1: _path(1, 5), 2: cycle}
    gain = observer_gain(OutputConfig.velocity([0, 4]), 5)
    schedule = SwitchingSchedule(((1, 2.0), (2, 1.0)))
    schedule = tune_dwell(schedule, certify_observer(schedule, topologies, gain), dt=0.01)
    certificate = certify_observer(schedule, topologies, gain)
    assert certificate.passed

    matrices = {tid: observer_error_matrix(t.laplacian, gain) for tid, t in topologies.items()}
    periods = 4
    per = round(schedule.period / 0.01)
    error0 = np.array([1.0, -2.0, 0.0, 0.5, 1.5, 0.0, 1.0, -1.0, 0.0, 0.5])
    trajectory = simulate_switched(
        error0, schedule, topologies, periods * per * 0.01, 0.01, method="expm", matrices=matrices
    )
    norms = [_weighted_norm(z, certificate.P) for z in trajectory.states[::per][: periods + 1]]
    assert all(b < a for a, b in zip(norms, norms[1:]))

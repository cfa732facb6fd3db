from __future__ import annotations

import networkx as nx
import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import linalg

from zdalab.dynamics import OutputConfig, output_matrices, system_matrix
from zdalab.graph import Topology
from zdalab.observability import (
    Subspace,
    analytic_kernel,
    defense_check,
    matches_analytic_kernel,
    observability_kernel,
    observability_matrix,
    privacy_preserved,
    shifted_observability_kernel,
    shifted_observability_matrix,
    unobservable_subspace,
)


def _path(topology_id: int, n: int, first_weight: float = 1.0) -> Topology:
    edges = [(1, 2, first_weight)] + [(i, i + 1, 1.0) for i in range(2, n)]
    return Topology.from_edges(topology_id, n, edges)


def _random_connected(rng: np.random.Generator, topology_id: int, n: int) -> Topology:
    while True:
        graph = nx.gnp_random_graph(n, 0.6, seed=int(rng.integers(1_000_000)))
        if nx.is_connected(graph):
            break
    for i, j in graph.edges:
        graph[i][j]["weight"] = float(rng.uniform(0.5, 2.0))
    return Topology.from_networkx(topology_id, graph)


def _well_conditioned(topology: Topology) -> bool:
    spectrum = topology.spectrum
    return spectrum.min_gap() > 0.05 and float(np.min(np.abs(spectrum.Q[0, :]))) > 0.05


def _prefix_outputs(z0: np.ndarray, prefix: list[tuple[np.ndarray, float]], C: np.ndarray) -> np.ndarray:
    samples, z = [], z0
    for A, dwell in prefix:
        for s in np.linspace(0.0, dwell, 25):
            samples.append(C @ linalg.expm(A * s) @ z)
        z = linalg.expm(A * dwell) @ z
    return np.asarray(samples)


def test_kernel_examples() -> None:
    A = system_matrix(_path(1, 2).laplacian)
    assert observability_kernel(A, np.eye(4)).dim == 0
    assert observability_kernel(A, np.zeros((1, 4))).dim == 4

    C, _ = output_matrices(OutputConfig.velocity([0]), 2)
    kernel = observability_kernel(A, C)
    assert kernel.dim == 1
    assert kernel.distance(Subspace.span(np.array([[1.0], [1.0], [0.0], [0.0]]))) < 1e-10


def test_kernel_matches_rank_of_observability_matrix() -> None:
    A = system_matrix(_path(1, 3).laplacian)
    for agent, dim in ((0, 1), (1, 3)):
        C, _ = output_matrices(OutputConfig.velocity([agent]), 3)
        rank = np.linalg.matrix_rank(observability_matrix(A, C))
        assert observability_kernel(A, C).dim == dim == 6 - rank
        shifted_rank = np.linalg.matrix_rank(shifted_observability_matrix(A, C))
        assert shifted_observability_kernel(A, C).dim == 6 - shifted_rank


def test_consensus_directions_are_invariant() -> None:
    topology = _random_connected(np.random.default_rng(9), 1, 5)
    A = system_matrix(topology.laplacian)
    ones, zeros = np.ones(5), np.zeros(5)
    assert_allclose(A @ np.concatenate([ones, zeros]), 0.0, atol=1e-12)
    assert_allclose(A @ np.concatenate([ones, -ones]), -np.concatenate([ones, -ones]), atol=1e-12)


def test_observability_kernel_lies_in_the_shifted_kernel() -> None:
    p3 = _path(1, 3)
    A = system_matrix(p3.laplacian)
    for cfg in (OutputConfig.velocity([1]), OutputConfig.position([1]), OutputConfig.velocity([0])):
        C, _ = output_matrices(cfg, 3)
        inner = observability_kernel(A, C)
        shifted = shifted_observability_kernel(A, C)
        assert shifted.dim >= inner.dim
        assert all(shifted.contains(inner.basis[:, k]) for k in range(inner.dim))


def test_analytic_kernels_on_the_path() -> None:
    A = system_matrix(_path(1, 3).laplacian)
    cases = [
        (OutputConfig.velocity([0]), 1),
        (OutputConfig.position([0]), 0),
        (OutputConfig((0,), np.ones(1), np.ones(1), np.zeros(1)), 1),
    ]
    for cfg, dim in cases:
        C, _ = output_matrices(cfg, 3)
        kernel = observability_kernel(A, C)
        assert kernel.dim == dim
        assert matches_analytic_kernel(kernel, cfg, 3)
    assert analytic_kernel(OutputConfig((0,), np.ones(1), np.full(1, 2.0), np.zeros(1)), 3) is None


@pytest.mark.parametrize(
    "cfg",
    [
        OutputConfig.velocity([0]),
        OutputConfig.position([0]),
        OutputConfig((0,), np.ones(1), np.ones(1), np.zeros(1)),
    ],
    ids=["velocity", "position", "partial"],
)
def test_switched_kernel_matches_closed_form_on_random_graph_pairs(cfg: OutputConfig) -> None:
    rng = np.random.default_rng(21)
    expected_dim = {"velocity": 1, "position": 0, "partial": 1}[cfg.mode]
    checked = 0
    for _ in range(600):
        n = int(rng.integers(3, 9))
        first, second = _random_connected(rng, 1, n), _random_connected(rng, 2, n)
        if not (_well_conditioned(first) and _well_conditioned(second)):
            continue
        C, _ = output_matrices(cfg, n)
        prefix = [(system_matrix(first.laplacian), 1.0), (system_matrix(second.laplacian), 0.5)]
        N0 = unobservable_subspace(prefix, C)
        assert N0.dim == expected_dim
        assert matches_analytic_kernel(N0, cfg, n)
        if cfg.mode == "velocity":
            assert unobservable_subspace(prefix, C, shifted=True).dim == 1
        checked += 1
        if checked == 20:
            break
    assert checked == 20


def test_unobservable_subspace_shrinks_with_the_prefix() -> None:
    C, _ = output_matrices(OutputConfig.velocity([1]), 3)
    windows = [
        (system_matrix(_path(1, 3).laplacian), 1.0),
        (system_matrix(2.0 * _path(1, 3).laplacian), 0.7),
        (system_matrix(_path(2, 3, 2.0).laplacian), 0.4),
    ]
    dims = [unobservable_subspace(windows[: k + 1], C).dim for k in range(3)]
    assert dims == [3, 3, 1]
    with pytest.raises(ValueError):
        unobservable_subspace([], C)


@pytest.mark.parametrize(
    "second",
    [2.0 * _path(1, 3).laplacian, _path(2, 3, 2.0).laplacian],
    ids=["scaled_path", "reweighted_path"],
)
def test_unobservable_states_produce_zero_output(second: np.ndarray) -> None:
    rng = np.random.default_rng(13)
    C, _ = output_matrices(OutputConfig.velocity([1]), 3)
    prefix = [(system_matrix(_path(1, 3).laplacian), 1.0), (system_matrix(second), 0.8)]
    N0 = unobservable_subspace(prefix, C)
    assert N0.dim >= 1
    for _ in range(50):
        z0 = N0.basis @ rng.normal(size=N0.dim)
        outputs = _prefix_outputs(z0, prefix, C)
        assert np.max(np.abs(outputs)) <= 1e-8 * max(1.0, float(np.linalg.norm(z0)))
    for _ in range(50):
        z0 = rng.normal(size=6)
        assert not N0.contains(z0)
        assert np.max(np.abs(_prefix_outputs(z0, prefix, C))) > 1e-6


@pytest.mark.parametrize("seed", range(8))
def test_random_prefix_kernels_are_exactly_the_silent_states(seed: int) -> None:
    rng = np.random.default_rng(100 + seed)
    n = int(rng.integers(2, 5))
    cfg = OutputConfig.velocity([int(rng.integers(n))])
    C, _ = output_matrices(cfg, n)
    prefix = [
        (system_matrix(_random_connected(rng, k + 1, n).laplacian), float(rng.uniform(0.3, 1.5)))
        for k in range(int(rng.integers(1, 4)))
    ]
    N0 = unobservable_subspace(prefix, C)
    assert N0.dim >= 1
    for _ in range(50):
        z0 = N0.basis @ rng.normal(size=N0.dim)
        assert np.max(np.abs(_prefix_outputs(z0, prefix, C))) <= 1e-8 * max(1.0, float(np.linalg.norm(z0)))
    for _ in range(50):
        z0 = rng.normal(size=2 * n)
        assert not N0.contains(z0)
        assert np.max(np.abs(_prefix_outputs(z0, prefix, C))) > 1e-6


def test_privacy_examples() -> None:
    consensus = Subspace.span(np.concatenate([np.ones(3), np.zeros(3)])[:, None])
    assert privacy_preserved(consensus, [0], 3)
    assert not privacy_preserved(Subspace.zero(6), [0], 3)
    agent_one_only = Subspace.span(np.eye(6)[:, [0]])
    assert not privacy_preserved(agent_one_only, [0], 3)
    assert privacy_preserved(agent_one_only, [1, 2], 3)


@pytest.mark.parametrize(
    ("monitored", "intermittent", "cooperative"),
    [([0], True, True), ([1], False, True), ([0, 2], True, False), ([0, 1], True, True)],
)
def test_defense_check_on_the_path(monitored: list[int], intermittent: bool, cooperative: bool) -> None:
    report = defense_check({1: _path(1, 3)}, OutputConfig.velocity(monitored))
    assert report.intermittent_ok is intermittent
    assert report.cooperative_ok is cooperative
    assert report.connected == {1: True}
    assert report.min_gaps[1] == pytest.approx(1.0)


def test_defense_check_fails_on_repeated_eigenvalues_and_position_outputs() -> None:
    star = Topology.from_edges(1, 4, [(1, i, 1.0) for i in range(2, 5)])
    report = defense_check([star], OutputConfig.velocity([0]))
    assert not report.all_distinct
    assert report.verdicts() == {"intermittent": "fail", "cooperative": "fail"}
    assert not defense_check([_path(1, 3)], OutputConfig.position([0])).cooperative_ok


def test_defense_report_renderings() -> None:
    report = defense_check({1: _path(1, 3), 2: _path(2, 3, 2.0)}, OutputConfig.velocity([1]))
    payload = report.as_dict()
    assert payload["monitored"] == [2]
    assert payload["verdict"] == {"intermittent": "fail", "cooperative": "pass"}
    table = report.render_table()
    assert "intermittent defense    FAIL" in table
    assert "cooperative defense     PASS" in table
    assert "verdict=intermittent:fail,cooperative:pass" in report.render_key_values()

# pytest library
import pytest

import json

import numpy as np

from sdikit import CycleAnalyzer, StateProxy, alternating_probe, alternating_probe_set, analyze_states
from sdikit import autocorrelation, init_parameters, kmeans, lag_cosines, pca_power, power_iteration, preset_config
from sdikit import transition_matrix

# -------------------------------------------------------------------------------
# ---- Test power_iteration() / pca_power() ----
# -------------------------------------------------------------------------------

def test_power_iteration_dominant_pair():
    lam, v = power_iteration(np.diag([3.0, 1.0, 0.5]), np.array([1.0, 1.0, 1.0]))
    assert lam == pytest.approx(3.0)
    np.testing.assert_allclose(v, [1.0, 0.0, 0.0], atol=1e-4)

def test_power_iteration_sign_convention():
    _, v = power_iteration(np.array([[2.0, 1.0], [1.0, 2.0]]), np.array([-1.0, -0.5]))
    assert v[np.argmax(np.abs(v))] > 0

def test_power_iteration_zero_start_and_bad_shapes():
    lam, _ = power_iteration(np.eye(2) * 4.0, np.zeros(2))
    assert lam == pytest.approx(4.0)
    with pytest.raises(ValueError):
        power_iteration(np.ones((2, 3)), np.ones(2))
    with pytest.raises(ValueError):
        power_iteration(np.eye(2), np.ones(3))

def test_pca_matches_eigendecomposition():
    X = np.random.default_rng(0).normal(size=(50, 4)) * np.array([5.0, 2.0, 0.5, 0.1])
    coords, components, eigenvalues = pca_power(X, 2)
    cov = np.cov(X, rowvar=False)
    expected = np.sort(np.linalg.eigvalsh(cov))[::-1][:2]
    np.testing.assert_allclose(eigenvalues, expected, rtol=1e-6)
    assert coords.shape == (50, 2) and components.shape == (2, 4)
    assert abs(float(components[0] @ components[1])) < 1e-4

# -------------------------------------------------------------------------------
# ---- Test kmeans() / transition_matrix() ----
# -------------------------------------------------------------------------------

def _alternating_points(n=12):
    rng = np.random.default_rng(1)
    centers = np.array([[0.0, 0.0], [10.0, 10.0]])
    return np.array([centers[i % 2] + 0.1 * rng.normal(size=2) for i in range(n)])

def test_kmeans_two_alternating_clusters():
    labels, centers, inertia = kmeans(_alternating_points(), 2, seed=0)
    assert labels.tolist() == [0, 1] * 6
    np.testing.assert_allclose(centers[1], [10.0, 10.0], atol=0.2)
    assert inertia < 1.0

def test_kmeans_is_seed_deterministic():
    X = np.random.default_rng(2).normal(size=(30, 3))
    a, b = kmeans(X, 4, seed=5), kmeans(X, 4, seed=5)
    assert np.array_equal(a[0], b[0]) and a[2] == b[2]

@pytest.mark.parametrize("k", [0, 13])
def test_kmeans_invalid_k(k):
    with pytest.raises(ValueError):
        kmeans(_alternating_points(), k)

def test_transition_matrix_rows_and_absorbing_state():
    T = transition_matrix([0, 1, 0, 1, 1], 3)
    np.testing.assert_allclose(T, [[0.0, 1.0, 0.0], [0.5, 0.5, 0.0], [0.0, 0.0, 1.0]])

# -------------------------------------------------------------------------------
# ---- Test lag_cosines() / autocorrelation() ----
# -------------------------------------------------------------------------------

def test_lag_cosines_of_period_two():
    states = np.array([[1.0, 0.0], [0.0, 2.0]] * 3)
    table = lag_cosines(states, max_lag=8)
    assert sorted(table) == [1, 2, 3, 4, 5]
    np.testing.assert_allclose(table[1], 0.0)
    np.testing.assert_allclose(table[2], 1.0)

def test_autocorrelation_of_alternating_series():
    ac = autocorrelation([1.0, -1.0] * 5, max_lag=2)
    assert ac[1] == pytest.approx(-0.9)
    assert ac[2] == pytest.approx(0.8)

def test_autocorrelation_of_constant_series():
    assert autocorrelation([2.0] * 4, max_lag=2) == {1: 0.0, 2: 0.0}

# -------------------------------------------------------------------------------
# ---- Test analyze_states() / StateProxy ----
# -------------------------------------------------------------------------------

def test_analyze_states_report():
    report, centers = analyze_states(_alternating_points(), k=2)
    assert report.state_sequence == [0, 1] * 6
    np.testing.assert_allclose(report.transition_matrix, [[0.0, 1.0], [1.0, 0.0]])
    assert not report.degenerate and centers.shape == (2, 2)
    assert len(report.pca_coords) == 12

def test_constant_states_are_degenerate():
    with pytest.warns(UserWarning):
        report, _ = analyze_states(np.ones((5, 3)), k=4)
    assert report.degenerate and report.k == 1
    assert report.transition_matrix == [[1.0]]

def test_state_proxy_lookup_and_gate():
    centers = np.array([[0.0, 0.0], [10.0, 10.0]])
    proxy = StateProxy.fit(centers, _alternating_points(), [0, 1] * 6, percentile=100.0)
    assert proxy.lookup == {0: 0, 1: 1}
    pred, confident = proxy.predict(np.array([[0.05, 0.0], [50.0, 50.0]]))
    assert pred.tolist() == [0, 1]
    assert confident.tolist() == [True, False]
    scores = proxy.score(np.array([[0.0, 0.0], [10.0, 10.0]]), [0, 0])
    assert scores == {"proxy_accuracy": 0.5, "selective_proxy_accuracy": 0.5, "selective_coverage": 1.0}

# -------------------------------------------------------------------------------
# ---- Test CycleAnalyzer ----
# -------------------------------------------------------------------------------

def test_analyzer_report_is_well_formed():
    config = preset_config("micro", d_model=16, n_heads=2)
    analyzer = CycleAnalyzer(init_parameters(config), config, k=2)
    probe = alternating_probe(4)
    report = analyzer.analyze(probe, alternating_probe_set([2, 3]), alternating_probe_set([5]))

    assert len(report.state_sequence) == probe.tau
    assert len(report.logit_margins) == probe.tau
    np.testing.assert_allclose(np.sum(report.transition_matrix, axis=1), 1.0)
    assert 0.0 <= report.proxy_accuracy <= 1.0
    assert report.probe == "0101"
    doc = json.loads(json.dumps(report.to_json()))
    assert doc["cosine_lag_table"]["1"] == report.cosine_lag_table[1]

def test_answer_states_shape():
    config = preset_config("micro", d_model=16, n_heads=2)
    analyzer = CycleAnalyzer(init_parameters(config), config)
    assert analyzer.answer_states(alternating_probe(3), tau=7).shape == (7, 16)

def test_analyzer_without_calibration_skips_proxy():
    config = preset_config("micro", d_model=16, n_heads=2)
    report = CycleAnalyzer(init_parameters(config), config, k=2).analyze(alternating_probe(3))
    assert report.proxy_accuracy is None and report.distance_threshold is None

@pytest.mark.parametrize("kwargs", [{"k": 0}, {"percentile": 0.0}, {"percentile": 101.0}])
def test_invalid_analyzer_arguments(kwargs):
    config = preset_config("micro", d_model=16, n_heads=2)
    with pytest.raises(ValueError):
        CycleAnalyzer(init_parameters(config), config, **kwargs)

# Mechanistic analysis of the hidden-state trajectory at the answer token:
# lag cosines, PCA by power iteration, k-means states, transition graph and a state -> parity proxy.

import warnings
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from sdikit import _constants
from sdikit._looped_model import ModelConfig, logit_margins, run_loop

# -----------------------------------------------------------------------------------------------
# ---- Linear algebra ----
# -----------------------------------------------------------------------------------------------

def power_iteration(A: np.ndarray, x0: np.ndarray, max_iterations: int = _constants.PCA_MAX_ITERATIONS,
                    tol: float = _constants.PCA_TOLERANCE) -> Tuple[float, np.ndarray]:
    """Dominant eigenpair of a symmetric matrix."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("A must be a square matrix")
    n = A.shape[0]

    x = np.asarray(x0, dtype=np.float64).reshape(-1)
    if x.size != n:
        raise ValueError(f"x0 must have shape ({n},)")
    norm = np.linalg.norm(x)
    x = np.ones(n) / np.sqrt(n) if norm == 0 else x / norm

    lam_old = None
    lam = float(x @ (A @ x))
    for _ in range(int(max_iterations)):
        z = A @ x
        nz = np.linalg.norm(z)
        if nz == 0:
            return 0.0, x
        x = z / nz
        lam = float(x @ (A @ x))
        if lam_old is not None and abs(lam - lam_old) <= tol * max(1.0, abs(lam)):
            break
        lam_old = lam

    # sign fixed so the largest-magnitude entry is positive
    if x[np.argmax(np.abs(x))] < 0:
        x = -x
    return lam, x


def pca_power(X: np.ndarray, n_components: int = 2, seed: int = 0) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Principal components of the rows of X by power iteration with deflation.
    Args:
        X (np.ndarray): (n_points, dim)
        n_components (int): number of components
        seed (int): seed of the starting vectors
    Returns:
        Tuple[np.ndarray, np.ndarray, np.ndarray]: coordinates (n_points, k), components (k, dim), eigenvalues (k,)
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError(f"X must be a non-empty 2-D array, got shape {X.shape}")

    centered = X - X.mean(axis=0)
    cov = centered.T @ centered / max(X.shape[0] - 1, 1)
    rng = np.random.default_rng(seed)

    components, eigenvalues = [], []
    for _ in range(min(n_components, X.shape[1])):
        lam, v = power_iteration(cov, rng.normal(size=cov.shape[0]))
        components.append(v)
        eigenvalues.append(max(lam, 0.0))
        cov = cov - lam * np.outer(v, v)

    components = np.array(components)
    return centered @ components.T, components, np.array(eigenvalues)

# -----------------------------------------------------------------------------------------------
# ---- Clustering and transitions ----
# -----------------------------------------------------------------------------------------------

def _kmeans_plus_plus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [X[rng.integers(X.shape[0])]]
    for _ in range(1, k):
        d2 = np.min(((X[:, None, :] - np.array(centers)[None, :, :]) ** 2).sum(axis=-1), axis=1)
        total = d2.sum()
        if total == 0:
            centers.append(X[rng.integers(X.shape[0])])
        else:
            centers.append(X[rng.choice(X.shape[0], p=d2 / total)])
    return np.array(centers)


def _lloyd(X: np.ndarray, centers: np.ndarray, max_iterations: int) -> Tuple[np.ndarray, np.ndarray, float]:
    labels = np.zeros(X.shape[0], dtype=np.int64)
    for _ in range(max_iterations):
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
        new_labels = d2.argmin(axis=1)
        new_centers = centers.copy()
        for j in range(centers.shape[0]):
            members = X[new_labels == j]
            # an emptied cluster keeps its previous centre
            if len(members):
                new_centers[j] = members.mean(axis=0)
        converged = np.array_equal(new_labels, labels) and np.allclose(new_centers, centers)
        labels, centers = new_labels, new_centers
        if converged:
            break
    inertia = float(((X - centers[labels]) ** 2).sum())
    return labels, centers, inertia


def _relabel_by_first_visit(labels: np.ndarray, centers: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    order = list(dict.fromkeys(labels.tolist()))
    order += [j for j in range(centers.shape[0]) if j not in order]
    mapping = {old: new for new, old in enumerate(order)}
    return np.array([mapping[l] for l in labels], dtype=np.int64), centers[order]


def kmeans(X: np.ndarray, k: int, restarts: int = _constants.KMEANS_RESTARTS, seed: int = 0,
           max_iterations: int = _constants.KMEANS_MAX_ITERATIONS) -> Tuple[np.ndarray, np.ndarray, float]:
    """
    k-means with k-means++ seeding; the restart with the lowest inertia is kept.
    Labels are renumbered in order of first appearance along the rows.
    Returns:
        Tuple[np.ndarray, np.ndarray, float]: labels (n,), centroids (k, dim), inertia
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError(f"X must be a non-empty 2-D array, got shape {X.shape}")
    if not 1 <= k <= X.shape[0]:
        raise ValueError(f"k must lie in [1, {X.shape[0]}], got {k}")

    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, restarts)):
        labels, centers, inertia = _lloyd(X, _kmeans_plus_plus(X, k, rng), max_iterations)
        if best is None or inertia < best[2]:
            best = (labels, centers, inertia)

    labels, centers = _relabel_by_first_visit(best[0], best[1])
    return labels, centers, best[2]


def transition_matrix(labels: Sequence[int], k: int) -> np.ndarray:
    """Row-stochastic empirical transitions; a state never left is made absorbing."""
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.zeros((k, k))
    np.add.at(counts, (labels[:-1], labels[1:]), 1.0)
    totals = counts.sum(axis=1)
    for j in np.flatnonzero(totals == 0):
        counts[j, j] = 1.0
    return counts / counts.sum(axis=1, keepdims=True)


def lag_cosines(states: np.ndarray, max_lag: int = _constants.CYCLE_MAX_LAG) -> Dict[int, List[float]]:
    """cos(h_t, h_{t+p}) for every t and p = 1..max_lag (lags beyond the trajectory are skipped)."""
    states = np.asarray(states, dtype=np.float64)
    norms = np.linalg.norm(states, axis=1)
    norms = np.where(norms == 0, 1.0, norms)
    unit = states / norms[:, None]
    return {p: (unit[:-p] * unit[p:]).sum(axis=1).tolist() for p in range(1, max_lag + 1) if p < states.shape[0]}


def autocorrelation(x: Sequence[float], max_lag: int = _constants.CYCLE_MAX_LAG) -> Dict[int, float]:
    """Sample autocorrelation of a centred series at lags 1..max_lag."""
    x = np.asarray(x, dtype=np.float64)
    c = x - x.mean()
    denom = float(c @ c)
    return {p: (float(c[:-p] @ c[p:]) / denom if denom > 0 else 0.0) for p in range(1, max_lag + 1) if p < x.shape[0]}

# -----------------------------------------------------------------------------------------------
# ---- Proxy circuit ----
# -----------------------------------------------------------------------------------------------

def _nearest(points: np.ndarray, centers: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    d = np.sqrt(((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1))
    idx = d.argmin(axis=1)
    return idx, d[np.arange(points.shape[0]), idx]


@dataclass
class StateProxy:
    """Lookup from k-means state to predicted parity, with a distance gate for selective use."""
    centers: np.ndarray
    lookup: Dict[int, int]
    threshold: float

    @classmethod
    def fit(cls, centers: np.ndarray, states: np.ndarray, labels: Sequence[int], percentile: float = 95.0) -> "StateProxy":
        idx, dist = _nearest(np.asarray(states, dtype=np.float64), centers)
        labels = np.asarray(labels, dtype=np.int64)
        lookup = {}
        for j in range(centers.shape[0]):
            votes = labels[idx == j]
            # unseen states default to 0; ties go to 0
            lookup[j] = int(votes.mean() > 0.5) if votes.size else 0
        return cls(centers, lookup, float(np.percentile(dist, percentile)))

    def predict(self, states: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Predicted parity and whether each state lies within the distance threshold."""
        idx, dist = _nearest(np.asarray(states, dtype=np.float64), self.centers)
        return np.array([self.lookup[int(j)] for j in idx], dtype=np.int64), dist <= self.threshold

    def score(self, states: np.ndarray, labels: Sequence[int]) -> Dict[str, Optional[float]]:
        pred, confident = self.predict(states)
        labels = np.asarray(labels, dtype=np.int64)
        correct = pred == labels
        return {
            "proxy_accuracy": float(correct.mean()) if correct.size else None,
            "selective_proxy_accuracy": float(correct[confident].mean()) if confident.any() else None,
            "selective_coverage": float(confident.mean()) if confident.size else None,
        }

# -----------------------------------------------------------------------------------------------
# ---- Report ----
# -----------------------------------------------------------------------------------------------

@dataclass
class CycleReport:
    k: int
    cosine_lag_table: Dict[int, List[float]]
    mean_lag_cosine: Dict[int, float]
    pca_coords: List[List[float]]
    pca_eigenvalues: List[float]
    state_sequence: List[int]
    transition_matrix: List[List[float]]
    inertia: float
    degenerate: bool
    logit_margins: List[float] = field(default_factory=list)
    margin_autocorrelation: Dict[int, float] = field(default_factory=dict)
    proxy_accuracy: Optional[float] = None
    selective_proxy_accuracy: Optional[float] = None
    selective_coverage: Optional[float] = None
    distance_threshold: Optional[float] = None
    probe: Optional[str] = None

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["schema_version"] = _constants.REPORT_SCHEMA_VERSION
        doc["cosine_lag_table"] = {str(p): v for p, v in self.cosine_lag_table.items()}
        doc["mean_lag_cosine"] = {str(p): v for p, v in self.mean_lag_cosine.items()}
        doc["margin_autocorrelation"] = {str(p): v for p, v in self.margin_autocorrelation.items()}
        return doc


def analyze_states(states: np.ndarray, k: int = 4, restarts: int = _constants.KMEANS_RESTARTS, seed: int = 0,
                   max_lag: int = _constants.CYCLE_MAX_LAG) -> Tuple[CycleReport, np.ndarray]:
    """
    Cycle statistics of a (tau, dim) trajectory. When fewer than k distinct states exist, k is
    reduced to that count and the report is flagged degenerate.
    Returns:
        Tuple[CycleReport, np.ndarray]: the report and the k-means centroids
    """
    states = np.asarray(states, dtype=np.float64)
    if states.ndim != 2:
        raise ValueError(f"states must be (steps, dim), got shape {states.shape}")

    distinct = np.unique(states, axis=0).shape[0]
    degenerate = k > distinct
    if degenerate:
        warnings.warn(f"only {distinct} distinct hidden states for k={k}; using k={distinct}")
    k_eff = min(k, distinct)

    labels, centers, inertia = kmeans(states, k_eff, restarts, seed)
    coords, _, eigenvalues = pca_power(states, 2, seed)
    cosines = lag_cosines(states, max_lag)

    report = CycleReport(
        k=k_eff,
        cosine_lag_table=cosines,
        mean_lag_cosine={p: float(np.mean(v)) for p, v in cosines.items()},
        pca_coords=coords.tolist(),
        pca_eigenvalues=eigenvalues.tolist(),
        state_sequence=labels.tolist(),
        transition_matrix=transition_matrix(labels, k_eff).tolist(),
        inertia=inertia,
        degenerate=bool(degenerate),
    )
    return report, centers


class CycleAnalyzer:
    """
    Runs a probe through the loop, records the hidden state at the answer token for every step,
    and summarises the trajectory as a small state machine.

    Args:
        params (Dict[str, np.ndarray]): model parameters (a checkpoint's)
        config (ModelConfig): model configuration
        k (int): number of k-means states
        restarts (int): k-means restarts
        seed (int): seed for k-means and PCA
        percentile (float): calibration distance percentile gating the selective proxy
        max_lag (int): largest lag for cosines and autocorrelation
        debug (bool): print progress
    """

    def __init__(self, params: Mapping[str, np.ndarray], config: ModelConfig, k: int = 4,
                 restarts: int = _constants.KMEANS_RESTARTS, seed: int = 0, percentile: float = 95.0,
                 max_lag: int = _constants.CYCLE_MAX_LAG, debug: bool = False):
        if k < 1:
            raise ValueError(f"'k' must be positive, got {k}")
        if not 0 < percentile <= 100:
            raise ValueError(f"'percentile' must lie in (0, 100], got {percentile}")
        self.params = params
        self.config = config
        self.k = k
        self.restarts = restarts
        self.seed = seed
        self.percentile = percentile
        self.max_lag = max_lag
        self.debug = debug

    def answer_states(self, example, tau: Optional[int] = None) -> np.ndarray:
        """h_1..h_tau at the example's answer position, shape (tau, d_model)."""
        tau = example.tau if tau is None else tau
        hidden, _ = run_loop(self.params, self.config, example.tokens, tau)
        return np.stack([h[0, example.answer_position] for h in hidden[1:]])

    def _readout_states(self, examples) -> np.ndarray:
        return np.stack([self.answer_states(ex)[ex.readout_step - 1] for ex in examples])

    def analyze(self, probe, calibration: Sequence = (), evaluation: Sequence = (),
                tau: Optional[int] = None) -> CycleReport:
        # ---- STEP 1: probe trajectory ----
        states = self.answer_states(probe, tau)
        print(f"[CycleAnalyzer] STEP 1: trajectory of {states.shape[0]} states for '{probe.bit_string()}'") if self.debug else None

        # ---- STEP 2: cosines, PCA, k-means, transitions ----
        report, centers = analyze_states(states, self.k, self.restarts, self.seed, self.max_lag)
        report.probe = probe.bit_string()
        print(f"[CycleAnalyzer] STEP 2: states {report.state_sequence}") if self.debug else None

        # ---- STEP 3: readout margins ----
        margins = logit_margins(self.params, self.config, probe.tokens, probe.answer_position,
                                int(probe.targets[probe.answer_position]), states.shape[0])
        report.logit_margins = margins.tolist()
        report.margin_autocorrelation = autocorrelation(margins, self.max_lag)

        # ---- STEP 4: proxy circuit ----
        if calibration and evaluation:
            proxy = StateProxy.fit(centers, self._readout_states(calibration), [ex.label for ex in calibration],
                                   self.percentile)
            scores = proxy.score(self._readout_states(evaluation), [ex.label for ex in evaluation])
            report.proxy_accuracy = scores["proxy_accuracy"]
            report.selective_proxy_accuracy = scores["selective_proxy_accuracy"]
            report.selective_coverage = scores["selective_coverage"]
            report.distance_threshold = proxy.threshold
            print(f"[CycleAnalyzer] STEP 4: proxy {scores}") if self.debug else None

        return report

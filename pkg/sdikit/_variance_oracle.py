"""
Exact expectation/variance of sketched inner products, with Monte-Carlo companions.

For TensorSketch of matrices X, Y (d x d') with sketch dimension m (even):

    Var<T(X), T(Y)> = (2/m^2) (P1 - N1) + (1/m) (P2 - N2)

    P1 = ||X^T Y||_F^2 + ||X Y^T||_F^2 + 2 <X o X, Y o Y>
    N1 = ||diag(X^T Y)||^2 + ||diag(X Y^T)||^2 + tr((X X^T) o (Y Y^T)) + tr((X^T X) o (Y^T Y))
    P2 = P1 + 2 tr((X^T Y)^2) + <X, Y>^2 + ||X||_F^2 ||Y||_F^2
    N2 = N1 + 2 [ ||diag(X^T Y)||^2 + ||diag(X Y^T)||^2 ]

N2 is sometimes written as 3[diag terms] + trace terms; that is the same quantity as
N1 + 2[diag terms] because N1 already holds one copy of each diag term. Both forms are
evaluated in `_n2_expanded` and must agree to 1e-9 relative.

For a 1 x d' matrix the formula collapses to the CountSketch variance
(1/m)(sum_{i!=j} x_i^2 y_j^2 + sum_{i!=j} x_i y_i x_j y_j).
"""

from dataclasses import asdict, dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from sdikit import _constants, _utils
from sdikit._errors import SketchConfigError
from sdikit._sketch_core import BUCKET_OUTPUT, SIGN_OUTPUT, HashFamily

IDENTITY_RTOL = 1e-9


def bound_factor(m: int) -> float:
    """4/m^2 + 6/m, the variance factor of the sketched inner product."""
    return 4.0 / m ** 2 + 6.0 / m


def prior_bound_factor(m: int) -> float:
    """8/m, the earlier TensorSketch variance factor."""
    return 8.0 / m


def prior_bound_ratio(m: int) -> float:
    """(4/m^2 + 6/m) / (8/m); equals 1 at m = 2 and is below 1 for every m >= 4."""
    return bound_factor(m) / prior_bound_factor(m)


@dataclass
class VarianceReport:
    m: int
    expected_dot: float
    P1: float
    N1: float
    P2: float
    N2: float
    exact_variance: float
    bound: float
    mc_mean: Optional[float] = None
    mc_mean_se: Optional[float] = None
    mc_variance: Optional[float] = None
    mc_variance_se: Optional[float] = None
    mc_trials: Optional[int] = None

    def mean_consistent(self, n_se: float = 4.0) -> bool:
        if self.mc_mean is None:
            raise ValueError("no Monte-Carlo companion has been computed")
        return abs(self.mc_mean - self.expected_dot) <= n_se * self.mc_mean_se + 1e-12 * max(1.0, abs(self.expected_dot))

    def variance_consistent(self, n_se: float = 5.0) -> bool:
        if self.mc_variance is None:
            raise ValueError("no Monte-Carlo companion has been computed")
        return abs(self.mc_variance - self.exact_variance) <= n_se * self.mc_variance_se + 1e-12 * max(1.0, self.bound)

    def to_json(self) -> dict:
        return asdict(self)


def _check_even(m: int) -> int:
    if isinstance(m, bool) or not isinstance(m, (int, np.integer)):
        raise TypeError(f"'m' must be an integer, got '{type(m).__name__}'")
    if m < 2 or m % 2 != 0:
        raise SketchConfigError(f"'m' must be a positive even integer, got {m}")
    return int(m)


def _frobenius_sq(A: np.ndarray) -> float:
    return float(np.sum(A * A))


def _terms(X: np.ndarray, Y: np.ndarray) -> dict:
    XtY = X.T @ Y
    XYt = X @ Y.T

    diag_xty = _frobenius_sq(np.diag(XtY))
    diag_xyt = _frobenius_sq(np.diag(XYt))
    hadamard = float(np.sum((X * X) * (Y * Y)))

    # tr((X X^T) o (Y Y^T)) pairs squared row norms; the X^T X version pairs column norms
    row_trace = float(np.sum(np.sum(X * X, axis=1) * np.sum(Y * Y, axis=1)))
    col_trace = float(np.sum(np.sum(X * X, axis=0) * np.sum(Y * Y, axis=0)))

    return {
        "xty_sq": _frobenius_sq(XtY),
        "xyt_sq": _frobenius_sq(XYt),
        "hadamard": hadamard,
        "diag_xty": diag_xty,
        "diag_xyt": diag_xyt,
        "row_trace": row_trace,
        "col_trace": col_trace,
        "trace_sq": float(np.trace(XtY @ XtY)),
        "inner": float(np.sum(X * Y)),
        "norms": _frobenius_sq(X) * _frobenius_sq(Y),
    }


def _n2_expanded(t: dict) -> float:
    return 3.0 * (t["diag_xty"] + t["diag_xyt"]) + t["row_trace"] + t["col_trace"]


def exact_ts_variance(X: np.ndarray, Y: np.ndarray, m: int, trials: int = 0, seed: int = 0) -> VarianceReport:
    """
    Closed-form mean and variance of <T(X), T(Y)> for TensorSketch with dimension m.
    Args:
        X (np.ndarray): d x d' matrix
        Y (np.ndarray): d x d' matrix
        m (int): even sketch dimension
        trials (int): if positive, attach Monte-Carlo statistics over this many hash draws
        seed (int): seed of the Monte-Carlo draws
    Returns:
        VarianceReport
    """
    X = _utils._as_matrix(X, "X")
    Y = _utils._as_matrix(Y, "Y")
    if X.shape != Y.shape:
        raise ValueError(f"X and Y must have the same shape, got {X.shape} and {Y.shape}")
    m = _check_even(m)

    t = _terms(X, Y)
    P1 = t["xty_sq"] + t["xyt_sq"] + 2.0 * t["hadamard"]
    N1 = t["diag_xty"] + t["diag_xyt"] + t["row_trace"] + t["col_trace"]
    P2 = P1 + 2.0 * t["trace_sq"] + t["inner"] ** 2 + t["norms"]
    N2 = N1 + 2.0 * (t["diag_xty"] + t["diag_xyt"])

    expanded = _n2_expanded(t)
    if abs(N2 - expanded) > IDENTITY_RTOL * max(1.0, abs(N2)):
        raise ArithmeticError(f"N2 identity violated: {N2} vs {expanded}")

    exact_variance = (2.0 / m ** 2) * (P1 - N1) + (1.0 / m) * (P2 - N2)
    # cancellation can leave a tiny negative value for 1-sparse inputs
    exact_variance = max(exact_variance, 0.0)

    report = VarianceReport(
        m=m,
        expected_dot=t["inner"],
        P1=P1, N1=N1, P2=P2, N2=N2,
        exact_variance=exact_variance,
        bound=bound_factor(m) * t["norms"],
    )

    if trials:
        samples = monte_carlo_ts_dot(X, Y, m, trials, seed)
        _attach_monte_carlo(report, samples)

    return report


def exact_cs_variance(x: Sequence[float], y: Sequence[float], m: int) -> float:
    """(1/m) (sum_{i!=j} x_i^2 y_j^2 + sum_{i!=j} x_i y_i x_j y_j) for CountSketch."""
    x = _utils._as_vector(x, "x")
    y = _utils._as_vector(y, "y")
    if x.shape != y.shape:
        raise ValueError(f"x and y must have the same length, got {x.shape[0]} and {y.shape[0]}")
    if m < 1:
        raise SketchConfigError(f"'m' must be positive, got {m}")

    diag = float(np.sum(x * x * y * y))
    off_squares = float(np.sum(x * x)) * float(np.sum(y * y)) - diag
    off_products = float(np.dot(x, y)) ** 2 - diag

    return max(off_squares + off_products, 0.0) / m


def witness_matrices(d: int, d_prime: int) -> np.ndarray:
    """The all-ones matrix with unit Frobenius norm; X = Y = this attains the bound as d, d' grow."""
    return np.full((d, d_prime), 1.0 / np.sqrt(d * d_prime))


def tightness_gap(d: int, d_prime: int, m: int) -> float:
    """bound - exact variance for X = Y = witness_matrices(d, d'), from the closed forms."""
    if d < 1 or d_prime < 1:
        raise ValueError(f"dimensions must be positive, got {d} x {d_prime}")
    m = _check_even(m)

    inv_dd = 1.0 / (d * d_prime)
    exact = (4.0 / m ** 2) * (1.0 + inv_dd - 1.0 / d - 1.0 / d_prime) \
        + (1.0 / m) * (6.0 + 2.0 * inv_dd - 4.0 / d - 4.0 / d_prime)
    return bound_factor(m) - exact


def exact_plan_variance(g: Mapping[str, np.ndarray], p: Mapping[str, np.ndarray], m: int) -> VarianceReport:
    """
    Exact mean/variance of <S(g), S(p)> for a block plan with independent per-tensor hashes:
    the variance of the sum is the sum of the per-tensor variances.
    """
    if set(g) != set(p):
        raise ValueError("g and p must hold the same tensor names")
    m = _check_even(m)

    expected, variance, norms_g, norms_p = 0.0, 0.0, 0.0, 0.0
    for name in g:
        a = np.asarray(g[name], dtype=np.float64)
        b = np.asarray(p[name], dtype=np.float64)
        if a.ndim == 1:
            expected += float(np.dot(a, b))
            variance += exact_cs_variance(a, b, m)
        else:
            r = exact_ts_variance(a, b, m)
            expected += r.expected_dot
            variance += r.exact_variance
        norms_g += _frobenius_sq(a)
        norms_p += _frobenius_sq(b)

    return VarianceReport(
        m=m, expected_dot=expected,
        P1=float("nan"), N1=float("nan"), P2=float("nan"), N2=float("nan"),
        exact_variance=variance,
        bound=bound_factor(m) * norms_g * norms_p,
    )


def sdi_mse_bound(etas: Sequence[float], g_norms: Sequence[float], p_norms: Sequence[float], m: int) -> float:
    """(4/m^2 + 6/m) (sum_k eta_k ||g_k|| ||p_{k,t}||)^2, the per-step SDI mean-squared-error bound."""
    etas = np.asarray(etas, dtype=np.float64)
    g_norms = np.asarray(g_norms, dtype=np.float64)
    p_norms = np.asarray(p_norms, dtype=np.float64)
    if not (etas.shape == g_norms.shape == p_norms.shape):
        raise ValueError("etas, g_norms and p_norms must have one entry per checkpoint")
    return bound_factor(m) * float(np.sum(np.abs(etas) * g_norms * p_norms)) ** 2

# -----------------------------------------------------------------------------------------------
# ---- Monte-Carlo companions (vectorised over hash draws) ----
# -----------------------------------------------------------------------------------------------

def _attach_monte_carlo(report: VarianceReport, samples: np.ndarray) -> VarianceReport:
    mean, se_mean, var, se_var = _utils._mean_and_variance_with_se(samples)
    report.mc_mean = mean
    report.mc_mean_se = se_mean
    report.mc_variance = var
    report.mc_variance_se = se_var
    report.mc_trials = int(samples.size)
    return report


def _draw_vector_tables(rng: np.random.Generator, trials: int, d: int, m: int):
    h = HashFamily.draw_tables(rng, trials, _constants.BUCKET_HASH_DEGREE, d, m, BUCKET_OUTPUT)
    s = HashFamily.draw_tables(rng, trials, _constants.SIGN_HASH_DEGREE, d, 2, SIGN_OUTPUT)
    return h, s


def _sketch_trials(values: np.ndarray, buckets: np.ndarray, signs: np.ndarray, m: int) -> np.ndarray:
    """Per-trial sketches of flattened values; buckets/signs have shape (trials, n)."""
    trials = buckets.shape[0]
    offsets = (np.arange(trials, dtype=np.int64) * m)[:, None] + buckets
    flat = np.bincount(offsets.ravel(), weights=(signs * values[None, :]).ravel(), minlength=trials * m)
    return flat.reshape(trials, m)


def _chunks(trials: int, chunk: int):
    done = 0
    while done < trials:
        size = min(chunk, trials - done)
        yield size
        done += size


def monte_carlo_cs_dot(x: np.ndarray, y: np.ndarray, m: int, trials: int, seed: int, chunk: int = 20000) -> np.ndarray:
    """Samples of <CS(x), CS(y)> over `trials` independent (h, s) draws."""
    x = _utils._as_vector(x, "x")
    y = _utils._as_vector(y, "y")
    rng = np.random.default_rng(seed)

    out = []
    for size in _chunks(trials, chunk):
        h, s = _draw_vector_tables(rng, size, x.shape[0], m)
        out.append(np.sum(_sketch_trials(x, h, s, m) * _sketch_trials(y, h, s, m), axis=1))
    return np.concatenate(out)


def monte_carlo_ts_dot(X: np.ndarray, Y: np.ndarray, m: int, trials: int, seed: int, chunk: int = 20000) -> np.ndarray:
    """Samples of <T(X), T(Y)> over `trials` independent (h1, s1, h2, s2) draws."""
    X = _utils._as_matrix(X, "X")
    Y = _utils._as_matrix(Y, "Y")
    d, d_prime = X.shape
    rng = np.random.default_rng(seed)

    chunk = max(1, min(chunk, 2_000_000 // max(1, d * d_prime)))
    out = []
    for size in _chunks(trials, chunk):
        h1, s1 = _draw_vector_tables(rng, size, d, m)
        h2, s2 = _draw_vector_tables(rng, size, d_prime, m)
        buckets = ((h1[:, :, None] + h2[:, None, :]) % m).reshape(size, -1)
        signs = (s1[:, :, None] * s2[:, None, :]).reshape(size, -1)
        out.append(np.sum(_sketch_trials(X.ravel(), buckets, signs, m) * _sketch_trials(Y.ravel(), buckets, signs, m), axis=1))
    return np.concatenate(out)


def monte_carlo_plan_dot(g: Mapping[str, np.ndarray], p: Mapping[str, np.ndarray], m: int,
                         trials: int, seed: int) -> np.ndarray:
    """Samples of <S(g), S(p)> for a block plan; every tensor gets its own independent stream."""
    if set(g) != set(p):
        raise ValueError("g and p must hold the same tensor names")

    streams = np.random.SeedSequence(seed).spawn(len(g))
    total = np.zeros(trials)
    for stream, name in zip(streams, g):
        sub_seed = int(stream.generate_state(1, dtype=np.uint64)[0])
        a = np.asarray(g[name], dtype=np.float64)
        b = np.asarray(p[name], dtype=np.float64)
        if a.ndim == 1:
            total += monte_carlo_cs_dot(a, b, m, trials, sub_seed)
        else:
            total += monte_carlo_ts_dot(a, b, m, trials, sub_seed)
    return total


def monte_carlo_report(g: Mapping[str, np.ndarray], p: Mapping[str, np.ndarray], m: int,
                       trials: int, seed: int) -> VarianceReport:
    """exact_plan_variance with Monte-Carlo statistics attached."""
    return _attach_monte_carlo(exact_plan_variance(g, p, m), monte_carlo_plan_dot(g, p, m, trials, seed))

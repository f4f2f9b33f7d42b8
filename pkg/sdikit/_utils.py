import os
from functools import lru_cache
from typing import Sequence, Tuple, Union

import numpy as np

from sdikit import _constants
from sdikit._errors import SketchConfigError

# -----------------------------------------------------------------------------------------------
# ---- Arithmetic modulo the Mersenne prime 2^61 - 1 (vectorised over uint64 arrays) ----
# -----------------------------------------------------------------------------------------------

_P = np.uint64(_constants.MERSENNE_PRIME)
_SHIFT_61 = np.uint64(_constants.MERSENNE_EXPONENT)
_MASK_32 = np.uint64(0xFFFFFFFF)
_MASK_29 = np.uint64((1 << 29) - 1)
_U3 = np.uint64(3)
_U29 = np.uint64(29)
_U32 = np.uint64(32)


def _reduce_mersenne61(x: np.ndarray) -> np.ndarray:
    """Reduce uint64 values (< 2^63) into [0, 2^61 - 1)."""
    x = (x & _P) + (x >> _SHIFT_61)
    x = (x & _P) + (x >> _SHIFT_61)
    return np.where(x >= _P, x - _P, x)


def _mulmod_mersenne61(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Multiply two uint64 arrays of residues (< 2^61) modulo 2^61 - 1 without overflow.
    Operands are split into 32-bit halves and the 128-bit product is folded using 2^61 = 1 (mod p).
    Args:
        a (np.ndarray): residues, any broadcastable shape
        b (np.ndarray): residues, any broadcastable shape
    Returns:
        np.ndarray: (a * b) mod (2^61 - 1) as uint64
    """
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)

    a_hi, a_lo = a >> _U32, a & _MASK_32
    b_hi, b_lo = b >> _U32, b & _MASK_32

    hi_hi = a_hi * b_hi                  # < 2^58, weight 2^64 = 8 (mod p)
    mid = a_hi * b_lo + a_lo * b_hi      # < 2^62, weight 2^32
    lo_lo = a_lo * b_lo                  # < 2^64, weight 1

    result = hi_hi << _U3
    result = result + (mid >> _U29) + ((mid & _MASK_29) << _U32)
    result = result + (lo_lo & _P) + (lo_lo >> _SHIFT_61)

    return _reduce_mersenne61(result)


def _poly_eval_mersenne61(coefficients: np.ndarray, x: np.ndarray) -> np.ndarray:
    """
    Evaluate polynomials c0 + c1*x + ... + ck*x^k over GF(2^61 - 1) with Horner's rule.
    Args:
        coefficients (np.ndarray): shape (..., k+1), lowest degree first
        x (np.ndarray): integer inputs, shape (n,)
    Returns:
        np.ndarray: uint64 array of shape (..., n)
    """
    coefficients = np.asarray(coefficients, dtype=np.uint64)
    x = _reduce_mersenne61(np.asarray(x, dtype=np.uint64))

    result = np.broadcast_to(coefficients[..., -1:], coefficients.shape[:-1] + x.shape).copy()
    for j in range(coefficients.shape[-1] - 2, -1, -1):
        result = _mulmod_mersenne61(result, x)
        result = _reduce_mersenne61(result + coefficients[..., j:j + 1])

    return result


def _parity_to_sign(values: np.ndarray) -> np.ndarray:
    """Map field elements to {-1, +1} by their lowest bit."""
    return 1.0 - 2.0 * (np.asarray(values, dtype=np.uint64) & np.uint64(1)).astype(np.float64)


def _reduce_to_buckets(values: np.ndarray, m: int) -> np.ndarray:
    """Map field elements to bucket ids in [0, m)."""
    return (np.asarray(values, dtype=np.uint64) % np.uint64(m)).astype(np.int64)

# -----------------------------------------------------------------------------------------------
# ---- Radix-2 FFT (iterative, decimation in time) ----
# -----------------------------------------------------------------------------------------------

def _is_power_of_two(n: int) -> bool:
    return isinstance(n, (int, np.integer)) and n > 0 and (n & (n - 1)) == 0


@lru_cache(maxsize=None)
def _bit_reverse_indices(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n, dtype=np.int64)
    rev = np.zeros(n, dtype=np.int64)
    for bit in range(bits):
        rev |= ((idx >> bit) & 1) << (bits - 1 - bit)
    rev.setflags(write=False)
    return rev


@lru_cache(maxsize=None)
def _twiddles(size: int, inverse: bool) -> np.ndarray:
    sign = 1.0 if inverse else -1.0
    w = np.exp(sign * 2j * np.pi * np.arange(size // 2) / size)
    w.setflags(write=False)
    return w


def _fft(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """
    Radix-2 FFT along the last axis, batched over all leading axes.
    Args:
        x (np.ndarray): real or complex input, last axis length a power of two
        inverse (bool): compute the inverse transform (scaled by 1/n)
    Returns:
        np.ndarray: complex128 transform, same shape as x
    """
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]

    if not _is_power_of_two(n):
        raise SketchConfigError(f"FFT length must be a power of two, got {n}")

    lead = x.shape[:-1]
    x = x[..., _bit_reverse_indices(n)]

    size = 2
    while size <= n:
        half = size // 2
        blocks = x.reshape(lead + (n // size, size))
        even = blocks[..., :half]
        odd = blocks[..., half:] * _twiddles(size, inverse)
        x = np.concatenate((even + odd, even - odd), axis=-1).reshape(lead + (n,))
        size *= 2

    if inverse:
        x = x / n

    return x


def _ifft(x: np.ndarray) -> np.ndarray:
    return _fft(x, inverse=True)

# -----------------------------------------------------------------------------------------------
# ---- Validation helpers ----
# -----------------------------------------------------------------------------------------------

def _check_sketch_dim(m: int, require_power_of_two: bool = True) -> int:
    """Validate a sketch dimension: positive even integer, optionally a power of two."""
    if isinstance(m, bool) or not isinstance(m, (int, np.integer)):
        raise TypeError(f"sketch dimension must be an integer, got '{type(m).__name__}'")
    m = int(m)
    if m < 2 or m % 2 != 0:
        raise SketchConfigError(f"sketch dimension must be a positive even integer, got {m}")
    if require_power_of_two and not _is_power_of_two(m):
        raise SketchConfigError(f"sketch dimension must be a power of two, got {m}")
    return m


def _as_vector(x: Union[Sequence[float], np.ndarray], name: str = "x") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"'{name}' must be a 1-D vector, got shape {arr.shape}")
    return arr


def _as_matrix(x: Union[Sequence[Sequence[float]], np.ndarray], name: str = "X") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"'{name}' must be a 2-D matrix, got shape {arr.shape}")
    return arr

# -----------------------------------------------------------------------------------------------
# ---- Error metrics and statistics ----
# -----------------------------------------------------------------------------------------------

def _relative_frobenius_error(estimate: np.ndarray, reference: np.ndarray) -> float:
    """||estimate - reference||_F / ||reference||_F (0 when both are zero)."""
    estimate = np.asarray(estimate, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if estimate.shape != reference.shape:
        raise ValueError(f"shape mismatch: {estimate.shape} vs {reference.shape}")

    diff = float(np.linalg.norm((estimate - reference).ravel()))
    ref = float(np.linalg.norm(reference.ravel()))
    if ref == 0.0:
        return 0.0 if diff == 0.0 else float("inf")
    return diff / ref


def _loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Least-squares slope of log(y) against log(x)."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.size < 2:
        raise ValueError("at least two points are needed to fit a slope")
    slope, _ = np.polyfit(np.log(xs), np.log(ys), 1)
    return float(slope)


def _mean_and_variance_with_se(samples: np.ndarray) -> Tuple[float, float, float, float]:
    """
    Sample mean and unbiased variance, each with a standard error.
    The variance SE uses the fourth central moment: sqrt((mu4 - var^2 (n-3)/(n-1)) / n).
    Returns:
        Tuple[float, float, float, float]: (mean, se_mean, variance, se_variance)
    """
    samples = np.asarray(samples, dtype=np.float64).ravel()
    n = samples.size
    if n < 4:
        raise ValueError("at least four samples are needed")

    mean = float(np.mean(samples))
    centered = samples - mean
    variance = float(np.sum(centered ** 2) / (n - 1))
    mu4 = float(np.mean(centered ** 4))
    se_var_sq = (mu4 - variance ** 2 * (n - 3) / (n - 1)) / n

    return mean, float(np.sqrt(variance / n)), variance, float(np.sqrt(max(se_var_sq, 0.0)))

# -----------------------------------------------------------------------------------------------
# ---- Environment ----
# -----------------------------------------------------------------------------------------------

def _thread_cap() -> int:
    """Worker cap from SDIKIT_THREADS (default 1)."""
    raw = os.environ.get(_constants.THREADS_ENV_VAR)
    if raw is None or raw.strip() == "":
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ValueError(f"{_constants.THREADS_ENV_VAR} must be a positive integer, got '{raw}'")
    if value < 1:
        raise ValueError(f"{_constants.THREADS_ENV_VAR} must be a positive integer, got '{raw}'")
    return value

# pytest library
import pytest

import numpy as np

from sdikit import _utils
from sdikit import SketchConfigError

# -------------------------------------------------------------------------------
# ---- Test the radix-2 FFT against the DFT definition ----
# -------------------------------------------------------------------------------

def _dft(x):
    n = x.shape[-1]
    k = np.arange(n)
    return x @ np.exp(-2j * np.pi * np.outer(k, k) / n)

@pytest.mark.parametrize("n", [1, 2, 4, 8, 64, 512])
def test_fft_matches_definition(n):
    x = np.random.default_rng(n).normal(size=n)
    np.testing.assert_allclose(_utils._fft(x), _dft(x.astype(np.complex128)), atol=1e-9 * max(1, n))

def test_fft_matches_numpy_batched():
    x = np.random.default_rng(0).normal(size=(3, 5, 128)) + 1j * np.random.default_rng(1).normal(size=(3, 5, 128))
    np.testing.assert_allclose(_utils._fft(x), np.fft.fft(x, axis=-1), atol=1e-10)

def test_inverse_fft_recovers_input():
    x = np.random.default_rng(2).normal(size=256)
    np.testing.assert_allclose(np.real(_utils._ifft(_utils._fft(x))), x, atol=1e-12)

def test_circular_convolution_theorem():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=16), rng.normal(size=16)
    direct = np.array([sum(a[i] * b[(k - i) % 16] for i in range(16)) for k in range(16)])
    via_fft = np.real(_utils._ifft(_utils._fft(a) * _utils._fft(b)))
    np.testing.assert_allclose(via_fft, direct, atol=1e-12)

@pytest.mark.parametrize("n", [3, 6, 12, 100])
def test_fft_rejects_non_power_of_two(n):
    with pytest.raises(SketchConfigError):
        _utils._fft(np.zeros(n))

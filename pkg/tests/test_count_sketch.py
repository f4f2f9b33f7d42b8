# pytest library
import pytest

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from sdikit import _utils
from sdikit import HashFamily, SketchConfigError, count_sketch, monte_carlo_cs_dot
from sdikit._sketch_core import BUCKET_OUTPUT, SIGN_OUTPUT
from sdikit._variance_oracle import _sketch_trials

# -------------------------------------------------------------------------------
# ---- Test count_sketch() ----
# -------------------------------------------------------------------------------

def _hashes(d, m, seed):
    rng = np.random.default_rng(seed)
    return HashFamily.sample(rng, 1, d, m, BUCKET_OUTPUT), HashFamily.sample(rng, 3, d, 2, SIGN_OUTPUT)

def test_basis_vector_lands_in_its_bucket():
    h, s = _hashes(10, 8, 0)
    for i in range(10):
        x = np.zeros(10)
        x[i] = 1.0
        out = count_sketch(x, h, s, 8)
        expected = np.zeros(8)
        expected[h.table()[i]] = s.table()[i]
        assert np.array_equal(out, expected)

def test_zero_vector_sketches_to_zero():
    h, s = _hashes(5, 4, 1)
    assert np.array_equal(count_sketch(np.zeros(5), h, s, 4), np.zeros(4))

def test_precomputed_tables_are_accepted():
    h, s = _hashes(12, 16, 2)
    x = np.arange(12.0)
    assert np.array_equal(count_sketch(x, h.table(), s.table(), 16), count_sketch(x, h, s, 16))

def test_shorter_input_uses_hash_prefix():
    h, s = _hashes(12, 16, 3)
    x = np.arange(1.0, 6.0)
    padded = np.concatenate([x, np.zeros(7)])
    np.testing.assert_array_equal(count_sketch(x, h, s, 16), count_sketch(padded, h, s, 16))

@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 1000))
def test_count_sketch_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=20), rng.normal(size=20)
    h, s = _hashes(20, 8, seed)
    lhs = count_sketch(a * x + b * y, h, s, 8)
    rhs = a * count_sketch(x, h, s, 8) + b * count_sketch(y, h, s, 8)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)

def test_input_longer_than_hash_domain_raises():
    h, s = _hashes(4, 8, 0)
    with pytest.raises(SketchConfigError):
        count_sketch(np.ones(5), h, s, 8)

def test_bucket_range_must_match_m():
    h, s = _hashes(4, 8, 0)
    with pytest.raises(SketchConfigError):
        count_sketch(np.ones(4), h, s, 16)

@pytest.mark.parametrize("m", [0, 3, -2])
def test_invalid_sketch_dimension(m):
    h, s = _hashes(4, 8, 0)
    with pytest.raises(SketchConfigError):
        count_sketch(np.ones(4), h, s, m)

def test_matrix_input_raises():
    h, s = _hashes(4, 8, 0)
    with pytest.raises(ValueError):
        count_sketch(np.ones((2, 2)), h, s, 8)

# -------------------------------------------------------------------------------
# ---- Test unbiasedness of the sketched inner product ----
# -------------------------------------------------------------------------------

def test_inner_product_unbiased_d64_m16():
    rng = np.random.default_rng(11)
    x, y = rng.normal(size=64), rng.normal(size=64)
    samples = monte_carlo_cs_dot(x, y, 16, 10_000, seed=12)
    mean, se, _, _ = _utils._mean_and_variance_with_se(samples)
    assert abs(mean - x @ y) <= 4 * se

def test_monte_carlo_matches_explicit_hash_objects():
    # the vectorised draws must sketch exactly like HashFamily objects with the same coefficients
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=9), rng.normal(size=9)
    h, s = _hashes(9, 8, 5)
    direct = count_sketch(x, h, s, 8) @ count_sketch(y, h, s, 8)
    buckets, signs = h.table()[None, :], s.table()[None, :]
    vectorised = _sketch_trials(x, buckets, signs, 8) @ _sketch_trials(y, buckets, signs, 8).T
    assert vectorised[0, 0] == pytest.approx(direct, abs=1e-12)

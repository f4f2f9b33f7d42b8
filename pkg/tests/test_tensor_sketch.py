# pytest library
import pytest

import numpy as np

from sdikit import HashFamily, SketchConfigError, tensor_sketch_matrix, tensor_sketch_outer_sum, tensor_sketch_pair
from sdikit._sketch_core import BUCKET_OUTPUT, SIGN_OUTPUT

# -------------------------------------------------------------------------------
# ---- Test tensor_sketch_pair() / tensor_sketch_outer_sum() / tensor_sketch_matrix() ----
# -------------------------------------------------------------------------------

def _maps(d_out, d_in, m, seed):
    rng = np.random.default_rng(seed)
    return {
        "h1": HashFamily.sample(rng, 1, d_out, m, BUCKET_OUTPUT),
        "s1": HashFamily.sample(rng, 3, d_out, 2, SIGN_OUTPUT),
        "h2": HashFamily.sample(rng, 1, d_in, m, BUCKET_OUTPUT),
        "s2": HashFamily.sample(rng, 3, d_in, 2, SIGN_OUTPUT),
    }

def test_basis_outer_product_single_entry():
    maps = _maps(5, 7, 16, 0)
    for i, j in [(0, 0), (2, 6), (4, 3)]:
        u, v = np.zeros(5), np.zeros(7)
        u[i], v[j] = 1.0, 1.0
        out = tensor_sketch_pair(u, v, maps, 16)
        bucket = (maps["h1"].table()[i] + maps["h2"].table()[j]) % 16
        sign = maps["s1"].table()[i] * maps["s2"].table()[j]
        expected = np.zeros(16)
        expected[bucket] = sign
        np.testing.assert_allclose(out, expected, atol=1e-12)

def test_fft_pair_matches_definitional_sketch():
    rng = np.random.default_rng(1)
    u, v = rng.normal(size=6), rng.normal(size=9)
    maps = _maps(6, 9, 32, 1)
    np.testing.assert_allclose(tensor_sketch_pair(u, v, maps, 32), tensor_sketch_matrix(np.outer(u, v), maps, 32), atol=1e-12)

def _index_sum_sketch(A, maps, m):
    h1, s1 = maps["h1"].table(), maps["s1"].table()
    h2, s2 = maps["h2"].table(), maps["s2"].table()
    out = np.zeros(m)
    for i in range(A.shape[0]):
        for j in range(A.shape[1]):
            out[(h1[i] + h2[j]) % m] += s1[i] * s2[j] * A[i, j]
    return out

@pytest.mark.parametrize("m", [4, 8, 16])
@pytest.mark.parametrize("d_out", range(1, 9))
def test_fft_and_matrix_sketch_match_index_sum_definition(m, d_out):
    for d_in in range(1, 9):
        for seed in range(100):
            rng = np.random.default_rng(1000 * d_in + seed)
            u, v = rng.normal(size=d_out), rng.normal(size=d_in)
            maps = _maps(d_out, d_in, m, seed)
            expected = _index_sum_sketch(np.outer(u, v), maps, m)
            np.testing.assert_allclose(tensor_sketch_pair(u, v, maps, m), expected, rtol=0, atol=1e-12)
            np.testing.assert_allclose(tensor_sketch_matrix(np.outer(u, v), maps, m), expected, rtol=0, atol=1e-12)

def test_outer_sum_matches_matrix_sketch():
    rng = np.random.default_rng(2)
    U, V = rng.normal(size=(4, 6)), rng.normal(size=(4, 5))
    maps = _maps(6, 5, 64, 2)
    out = tensor_sketch_outer_sum(list(zip(U, V)), maps, 64)
    np.testing.assert_allclose(out, tensor_sketch_matrix(U.T @ V, maps, 64), atol=1e-11)

def test_outer_sum_equals_sum_of_pairs():
    rng = np.random.default_rng(3)
    pairs = [(rng.normal(size=3), rng.normal(size=4)) for _ in range(5)]
    maps = _maps(3, 4, 8, 3)
    np.testing.assert_allclose(tensor_sketch_outer_sum(pairs, maps, 8),
                               sum(tensor_sketch_pair(u, v, maps, 8) for u, v in pairs), atol=1e-12)

def test_empty_outer_sum_is_zero():
    assert np.array_equal(tensor_sketch_outer_sum([], _maps(3, 3, 8, 0), 8), np.zeros(8))

def test_pair_requires_power_of_two():
    maps = _maps(3, 3, 12, 0)
    with pytest.raises(SketchConfigError):
        tensor_sketch_pair(np.ones(3), np.ones(3), maps, 12)

def test_missing_hash_raises():
    maps = _maps(3, 3, 8, 0)
    del maps["s2"]
    with pytest.raises(SketchConfigError):
        tensor_sketch_pair(np.ones(3), np.ones(3), maps, 8)

def test_inner_product_preserved_in_expectation():
    # averaged over many independent hash draws the sketched inner product approaches <X, Y>
    rng = np.random.default_rng(4)
    X, Y = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    samples = np.array([tensor_sketch_matrix(X, _maps(3, 4, 16, s), 16) @ tensor_sketch_matrix(Y, _maps(3, 4, 16, s), 16)
                        for s in range(2000)])
    se = samples.std(ddof=1) / np.sqrt(samples.size)
    assert abs(samples.mean() - np.sum(X * Y)) <= 4 * se

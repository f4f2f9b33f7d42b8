# pytest library
import pytest

import types

import numpy as np

from sdikit import Checkpoint, ModelConfig, SketchPlan
from sdikit import body_shapes, compute_sdi_from_checkpoints, fidelity_report, init_parameters
from sdikit._utils import _loglog_slope

# -------------------------------------------------------------------------------
# ---- Helpers ----
# -------------------------------------------------------------------------------

CONFIG = ModelConfig(vocab_size=6, d_model=16, n_heads=2, seq_len=8, loop_horizon=4, seed=0)

def _checkpoints():
    out = []
    for k, eta in enumerate([0.05, 0.03]):
        rng = np.random.default_rng(k)
        params = {name: v + 0.1 * rng.normal(size=v.shape) for name, v in init_parameters(CONFIG).items()}
        out.append(Checkpoint(params, eta, k + 1))
    return out

def _examples(seed, count):
    rng = np.random.default_rng(seed)
    return [types.SimpleNamespace(tokens=list(rng.integers(0, 2, size=6))) for _ in range(count)]

TRAIN = _examples(0, 6)
TEST = _examples(1, 3)

def _mean_errors(exact, m, seeds):
    errors = []
    for seed in range(seeds):
        plan = SketchPlan(body_shapes(CONFIG), m, seed)
        sketched = compute_sdi_from_checkpoints(_checkpoints(), TRAIN, TEST, CONFIG, plan=plan)
        errors.append(fidelity_report(exact, sketched))
    return (float(np.mean([e["rel_frobenius_sdi"] for e in errors])),
            float(np.mean([e["rel_frobenius_tracin"] for e in errors])))

# -------------------------------------------------------------------------------
# ---- Test sketched SDI approaches exact SDI as m grows ----
# -------------------------------------------------------------------------------

def test_error_decreases_with_sketch_dim():
    exact = compute_sdi_from_checkpoints(_checkpoints(), TRAIN, TEST, CONFIG)
    small_sdi, small_tracin = _mean_errors(exact, 32, 5)
    large_sdi, large_tracin = _mean_errors(exact, 512, 5)
    assert large_sdi < small_sdi
    assert large_tracin < small_tracin

def test_exact_against_exact_has_no_error():
    exact = compute_sdi_from_checkpoints(_checkpoints(), TRAIN, TEST, CONFIG)
    again = compute_sdi_from_checkpoints(_checkpoints(), TRAIN, TEST, CONFIG)
    assert fidelity_report(exact, again)["rel_frobenius_sdi"] == 0.0

@pytest.mark.slow
def test_error_decays_as_inverse_square_root():
    exact = compute_sdi_from_checkpoints(_checkpoints(), TRAIN, TEST, CONFIG)
    dims = [256, 512, 1024, 2048, 4096]
    errors = [_mean_errors(exact, m, 10)[0] for m in dims]
    assert -0.6 <= _loglog_slope(dims, errors) <= -0.4

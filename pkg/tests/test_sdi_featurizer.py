# pytest library
import pytest

import types

import numpy as np

from sdikit import Checkpoint, ModelConfig, PlanMismatchError, SDIFeaturizer, SketchPlan
from sdikit import body_gradient, body_shapes, exact_features, featurize_batch, global_sketch, init_parameters
from sdikit._looped_model import BODY_TENSORS
from sdikit._sdi_engine import _ByteCounter

# -------------------------------------------------------------------------------
# ---- Helpers ----
# -------------------------------------------------------------------------------

def _config(**overrides):
    base = dict(vocab_size=6, d_model=8, n_heads=2, seq_len=8, loop_horizon=4, seed=0)
    base.update(overrides)
    return ModelConfig(**base)

def _checkpoint(config, seed=1, eta=0.05, step=10):
    rng = np.random.default_rng(seed)
    params = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in init_parameters(config).items()}
    return Checkpoint(params, eta, step)

def _examples():
    return [
        types.SimpleNamespace(tokens=[1, 0, 1, 1, 0]),
        types.SimpleNamespace(tokens=[0, 1, 1, 0], example_id="b"),
        types.SimpleNamespace(tokens=[1, 1, 0, 1, 0, 0]),
    ]

# -------------------------------------------------------------------------------
# ---- Test SDIFeaturizer ----
# -------------------------------------------------------------------------------

def test_single_step_total_equals_step_bitwise():
    config = _config(loop_horizon=1)
    plan = SketchPlan(body_shapes(config), 32, 0)
    feats = featurize_batch(_checkpoint(config), _examples(), plan, config)
    assert np.array_equal(feats.totals, feats.steps[:, 0, :])

def test_totals_equal_summed_steps():
    config = _config()
    plan = SketchPlan(body_shapes(config), 32, 0)
    feats = featurize_batch(_checkpoint(config), _examples(), plan, config)
    assert feats.steps.shape == (3, 4, plan.sketch_dim_total)
    assert feats.conservation_residual() <= 1e-12

def test_streamed_sketch_equals_sketch_of_body_gradient():
    config = _config()
    checkpoint = _checkpoint(config)
    plan = SketchPlan(body_shapes(config), 64, 5)
    feats = featurize_batch(checkpoint, _examples(), plan, config)
    for i, example in enumerate(_examples()):
        reference = global_sketch(body_gradient(checkpoint.params, config, np.array(example.tokens)), plan).values
        np.testing.assert_allclose(feats.totals[i], reference, rtol=0, atol=1e-10 * np.linalg.norm(reference))

def test_sketched_features_match_exact_inner_products_on_average():
    config = _config(loop_horizon=2)
    checkpoint = _checkpoint(config)
    exact = exact_features(checkpoint, _examples()[:2], config)
    target = float(exact.totals[0] @ exact.totals[1])
    estimates = []
    for seed in range(200):
        feats = featurize_batch(checkpoint, _examples()[:2], SketchPlan(body_shapes(config), 64, seed), config)
        estimates.append(float(feats.totals[0] @ feats.totals[1]))
    estimates = np.array(estimates)
    se = estimates.std(ddof=1) / np.sqrt(estimates.size)
    assert abs(estimates.mean() - target) <= 4 * se

def test_metadata_and_ids():
    config = _config()
    plan = SketchPlan(body_shapes(config), 16, 0)
    feats = featurize_batch(_checkpoint(config, eta=0.02, step=7), _examples(), plan, config)
    assert feats.ids == [0, "b", 2]
    assert (feats.mode, feats.plan_id, feats.checkpoint_step, feats.eta) == ("sketched", plan.plan_id, 7, 0.02)

def test_threads_give_identical_features():
    config = _config()
    plan = SketchPlan(body_shapes(config), 32, 0)
    checkpoint = _checkpoint(config)
    serial = featurize_batch(checkpoint, _examples(), plan, config, threads=1)
    parallel = featurize_batch(checkpoint, _examples(), plan, config, threads=2)
    assert np.array_equal(serial.steps, parallel.steps)

def test_readout_beyond_horizon_is_clipped_with_warning():
    config = _config(loop_horizon=3)
    plan = SketchPlan(body_shapes(config), 16, 0)
    example = types.SimpleNamespace(tokens=[1, 0, 1], readout_step=5)
    with pytest.warns(UserWarning):
        feats = featurize_batch(_checkpoint(config), [example], plan, config)
    assert np.any(feats.steps[0, 2] != 0)

def test_early_readout_leaves_later_steps_zero():
    config = _config(loop_horizon=4)
    plan = SketchPlan(body_shapes(config), 16, 0)
    example = types.SimpleNamespace(tokens=[1, 0, 1], readout_step=2)
    feats = featurize_batch(_checkpoint(config), [example], plan, config)
    assert np.array_equal(feats.steps[0, 2:], np.zeros_like(feats.steps[0, 2:]))

# -------------------------------------------------------------------------------
# ---- Test memory accounting ----
# -------------------------------------------------------------------------------

def _peak(config, m):
    featurizer = SDIFeaturizer(SketchPlan(body_shapes(config), m, 0), config)
    _, _, peak = featurizer.featurize_example(_checkpoint(config).params, _examples()[0])
    return peak

def test_peak_bytes_scale_with_sketch_dim():
    config = _config()
    assert _peak(config, 128) / _peak(config, 64) == pytest.approx(2.0, rel=0.05)

def test_peak_bytes_do_not_grow_with_width():
    small, wide = _config(d_model=8), _config(d_model=16)
    assert _peak(wide, 64) / _peak(small, 64) <= 2.0

def test_vector_temporaries_are_counted_and_released():
    config = _config()
    featurizer = SDIFeaturizer(SketchPlan(body_shapes(config), 64, 0), config)
    counter = _ByteCounter()
    delta = np.ones((5, config.d_hidden))
    featurizer._sketch_factor("mlp.b1", delta, None, counter)
    assert counter.peak == 8 * config.d_hidden + 8 * 64
    assert counter.live == 0

# -------------------------------------------------------------------------------
# ---- Test plan checks ----
# -------------------------------------------------------------------------------

def test_plan_for_other_tensors_raises():
    config = _config()
    with pytest.raises(PlanMismatchError):
        SDIFeaturizer(SketchPlan({"w": (3, 4)}, 16, 0), config)

def test_plan_for_other_width_raises():
    with pytest.raises(PlanMismatchError):
        SDIFeaturizer(SketchPlan(body_shapes(_config(d_model=16)), 16, 0), _config())

def test_non_plan_raises():
    with pytest.raises(TypeError):
        SDIFeaturizer("plan", _config())

# -------------------------------------------------------------------------------
# ---- Test exact_features() ----
# -------------------------------------------------------------------------------

def test_exact_features_concatenate_body_gradients():
    config = _config()
    checkpoint = _checkpoint(config)
    feats = exact_features(checkpoint, _examples()[:1], config)
    grads = body_gradient(checkpoint.params, config, np.array(_examples()[0].tokens))
    flat = np.concatenate([grads[name].ravel() for name in BODY_TENSORS])
    np.testing.assert_allclose(feats.totals[0], flat, rtol=1e-10, atol=1e-14)
    assert feats.mode == "exact" and feats.plan_id is None

def test_exact_features_refuse_large_bodies():
    with pytest.raises(ValueError):
        exact_features(_checkpoint(_config()), _examples(), _config(), budget=100)

# pytest library
import pytest

import numpy as np

from sdikit import ModelConfig, ModelInputError, forward, init_parameters, preset_config, run_loop
from sdikit import body_shapes, parameter_shapes
from sdikit._looped_model import BODY_TENSORS, count_body_parameters, read_in, with_horizon

# -------------------------------------------------------------------------------
# ---- Test ModelConfig / preset_config() ----
# -------------------------------------------------------------------------------

def _config(**overrides):
    base = dict(vocab_size=6, d_model=8, n_heads=2, seq_len=8, loop_horizon=4, seed=0)
    base.update(overrides)
    return ModelConfig(**base)

@pytest.mark.parametrize("overrides, error", [
    ({"d_model": 10, "n_heads": 4}, ValueError),
    ({"loop_horizon": 0}, ValueError),
    ({"injection": "concat"}, ValueError),
    ({"nonlinearity": "tanh"}, ValueError),
    ({"truncation_k": 5}, ValueError),
    ({"truncation_k": 0}, ValueError),
    ({"d_model": 8.0}, TypeError),
])
def test_invalid_configs(overrides, error):
    with pytest.raises(error):
        _config(**overrides)

def test_micro_preset_sizes():
    config = preset_config("micro")
    assert (config.d_model, config.n_heads, config.vocab_size) == (64, 4, 6)
    assert config.d_head == 16 and config.d_hidden == 256

def test_preset_override_and_unknown_preset():
    assert preset_config("micro", d_model=32).d_model == 32
    with pytest.raises(ValueError):
        preset_config("huge")

def test_body_shapes_follow_fixed_tensor_order():
    config = _config()
    assert list(body_shapes(config)) == list(BODY_TENSORS)
    assert body_shapes(config)["mlp.W1"] == (32, 8)
    assert count_body_parameters(config) == sum(int(np.prod(s)) for s in body_shapes(config).values())

def test_init_parameters_deterministic():
    config = _config()
    a, b = init_parameters(config), init_parameters(config)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert set(a) == set(parameter_shapes(config))
    assert np.array_equal(a["ln1.gain"], np.ones(8))

def test_with_horizon_clips_truncation():
    config = with_horizon(_config(loop_horizon=6, truncation_k=4), 3)
    assert config.loop_horizon == 3 and config.truncation_k == 3

# -------------------------------------------------------------------------------
# ---- Test forward() / run_loop() ----
# -------------------------------------------------------------------------------

def test_forward_shapes_batched():
    config = _config()
    tokens = np.random.default_rng(0).integers(0, 6, size=(3, 5))
    trace = forward(init_parameters(config), config, tokens)
    assert len(trace.hidden) == config.loop_horizon + 1
    assert trace.hidden[0].shape == (3, 5, 8)
    assert trace.logits.shape == (3, 5, 6)
    assert trace.losses.shape == (3,)
    assert trace.readout_step == 4

def test_forward_single_sequence_becomes_batch_of_one():
    config = _config()
    trace = forward(init_parameters(config), config, [0, 1, 2])
    assert trace.batch_size == 1

def test_readout_step_selects_hidden_state():
    config = _config()
    params = init_parameters(config)
    tokens = np.array([[1, 0, 1, 2]])
    early = forward(params, config, tokens, readout_step=2)
    late = forward(params, config, tokens)
    assert np.array_equal(early.hidden[2], late.hidden[2])
    assert not np.allclose(early.logits, late.logits)

def test_tau_override():
    config = _config()
    hidden, caches = run_loop(init_parameters(config), config, np.array([[0, 1]]), tau=7)
    assert len(hidden) == 8 and len(caches) == 7

def test_no_injection_differs_from_additive():
    params = init_parameters(_config())
    tokens = np.array([[1, 1, 0]])
    a = forward(params, _config(), tokens).logits
    b = forward(params, _config(injection="none"), tokens).logits
    assert not np.allclose(a, b)

def test_read_in_adds_positions():
    params = init_parameters(_config())
    h0 = read_in(params, np.array([[3, 3]]))
    np.testing.assert_allclose(h0[0, 0] - h0[0, 1], params["pos"][0] - params["pos"][1])

def test_causal_attention_ignores_future_tokens():
    config = _config()
    params = init_parameters(config)
    a, _ = run_loop(params, config, np.array([[1, 0, 1, 0]]))
    b, _ = run_loop(params, config, np.array([[1, 0, 0, 1]]))
    np.testing.assert_allclose(a[-1][0, :2], b[-1][0, :2], atol=1e-12)

@pytest.mark.parametrize("tokens, kwargs", [
    ([0, 6, 1], {}),
    ([0, -1, 1], {}),
    (list(range(6)) + [0, 1, 2], {}),
    ([0.5, 1.0], {}),
    ([0, 1, 2], {"readout_step": 0}),
    ([0, 1, 2], {"readout_step": 5}),
    ([0, 1, 2], {"loss_mask": np.zeros(3, dtype=bool)}),
    ([0, 1, 2], {"targets": np.array([6, 6, 6])}),
])
def test_invalid_inputs_raise(tokens, kwargs):
    config = _config()
    with pytest.raises(ModelInputError):
        forward(init_parameters(config), config, np.array(tokens), **kwargs)

def test_default_loss_ignores_last_position():
    config = _config()
    trace = forward(init_parameters(config), config, np.array([[0, 1, 2]]))
    assert trace.loss_mask.tolist() == [[True, True, False]]
    assert trace.targets[0, :2].tolist() == [1, 2]

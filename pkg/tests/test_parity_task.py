# pytest library
import pytest

from hypothesis import given
from hypothesis import strategies as st

import numpy as np

from sdikit import Curriculum, FormatError, ParityExample
from sdikit import alternating_probe, alternating_probe_set, gen_parity, read_jsonl, tercile_subsample, write_jsonl
from sdikit import forward, preset_config, init_parameters, run_parity_training, sdi_test_side, exact_features
from sdikit import Checkpoint
from sdikit._parity_task import group_by_length, per_length_accuracy, to_batch

# -------------------------------------------------------------------------------
# ---- Test ParityExample ----
# -------------------------------------------------------------------------------

def test_even_string_has_label_zero():
    ex = ParityExample((0, 1, 0, 1))
    assert ex.label == 0
    assert ex.tokens.tolist() == [0, 1, 0, 1, 2, 3]
    assert ex.loss_mask.tolist() == [False, False, False, False, True, False]
    assert ex.targets[4] == 0

def test_single_one():
    ex = ParityExample.from_json({"bits": "1"})
    assert (ex.label, ex.readout_step, ex.tau, ex.answer_position) == (1, 1, 3, 1)
    assert ex.targets[1] == 1

@given(st.lists(st.integers(min_value=0, max_value=1), min_size=1, max_size=40))
def test_label_is_xor_of_bits(bits):
    assert ParityExample(tuple(bits)).label == sum(bits) % 2

@pytest.mark.parametrize("bits", [(), (0, 2), (1, -1)])
def test_invalid_bits(bits):
    with pytest.raises(ValueError):
        ParityExample(bits)

def test_json_record():
    ex = ParityExample((1, 1, 0))
    assert ex.to_json() == {"bits": "110", "n": 3, "label": 0}
    assert ParityExample.from_json(ex.to_json()).bits == (1, 1, 0)

@pytest.mark.parametrize("doc", [{"bits": "110", "label": 1}, {"bits": "110", "n": 4}, {"n": 3}, {"bits": "1a"}])
def test_inconsistent_records_raise(doc):
    with pytest.raises(FormatError):
        ParityExample.from_json(doc)

# -------------------------------------------------------------------------------
# ---- Test gen_parity() / probes ----
# -------------------------------------------------------------------------------

def test_gen_parity_lengths_and_determinism():
    examples = gen_parity(200, (2, 5), seed=3)
    assert {ex.n for ex in examples} == {2, 3, 4, 5}
    again = gen_parity(200, (2, 5), seed=3)
    assert [ex.bits for ex in examples] == [ex.bits for ex in again]
    assert [ex.example_id for ex in examples[:3]] == [0, 1, 2]

def test_label_mean_is_balanced():
    labels = [ex.label for ex in gen_parity(10_000, 8, seed=0)]
    assert abs(np.mean(labels) - 0.5) <= 0.02

@pytest.mark.parametrize("length_range", [0, (3, 2), (0, 4)])
def test_invalid_length_range(length_range):
    with pytest.raises(ValueError):
        gen_parity(5, length_range, seed=0)

def test_alternating_probes():
    assert alternating_probe(5).bits == (0, 1, 0, 1, 0)
    assert alternating_probe(4, start=1).bits == (1, 0, 1, 0)
    probes = alternating_probe_set([3, 4])
    assert [p.example_id for p in probes] == ["alt0_3", "alt1_3", "alt0_4", "alt1_4"]
    with pytest.raises(ValueError):
        alternating_probe(3, start=2)

# -------------------------------------------------------------------------------
# ---- Test batching, curriculum and subsampling ----
# -------------------------------------------------------------------------------

def test_to_batch_stacks_one_length():
    batch = to_batch([ParityExample((0, 1, 1)), ParityExample((1, 1, 1))])
    assert batch.tokens.shape == (2, 5)
    assert (batch.readout_step, batch.tau) == (3, 5)
    with pytest.raises(ValueError):
        to_batch([ParityExample((0,)), ParityExample((0, 1))])

def test_group_by_length_sorted():
    groups = group_by_length(gen_parity(50, (2, 4), seed=1))
    assert list(groups) == [2, 3, 4]

def test_curriculum_phases_and_batches():
    driver = Curriculum([(3, 4), (2, 6)], batch_size=5)
    assert driver.total_steps == 5 and driver.max_length == 6
    assert [driver.phase(s) for s in range(6)] == [0, 0, 0, 1, 1, 1]
    rng = np.random.default_rng(0)
    lengths = set()
    for step in range(3):
        batch = driver(step, rng)
        assert batch.tokens.shape[0] == 5
        lengths.add(batch.readout_step)
    assert lengths <= {2, 3, 4}

@pytest.mark.parametrize("schedule, batch_size", [([], 4), ([(0, 4)], 4), ([(3, 1)], 4), ([(3, 4)], 0)])
def test_invalid_curriculum(schedule, batch_size):
    with pytest.raises(ValueError):
        Curriculum(schedule, batch_size)

def test_tercile_subsample_covers_short_middle_long():
    examples = gen_parity(300, (2, 10), seed=4)
    chosen = tercile_subsample(examples, 5, seed=0)
    assert len(chosen) == 15
    lengths = [ex.n for ex in chosen]
    assert min(lengths) <= 4 and max(lengths) >= 8
    assert tercile_subsample(examples, 5, seed=0) == chosen

def test_tercile_subsample_takes_small_bins_whole():
    examples = [ParityExample((1,) * n) for n in (1, 2, 3)]
    assert len(tercile_subsample(examples, 5, seed=0)) == 3
    assert tercile_subsample([], 5, seed=0) == []

# -------------------------------------------------------------------------------
# ---- Test JSONL files ----
# -------------------------------------------------------------------------------

def test_jsonl_round_trip(tmp_path):
    path = str(tmp_path / "train.jsonl")
    examples = gen_parity(10, (2, 6), seed=2)
    write_jsonl(path, examples)
    loaded = read_jsonl(path)
    assert [ex.bits for ex in loaded] == [ex.bits for ex in examples]
    assert [ex.example_id for ex in loaded] == list(range(10))

def test_jsonl_bad_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"bits": "01"}\nnot json\n')
    with pytest.raises(FormatError):
        read_jsonl(str(path))

# -------------------------------------------------------------------------------
# ---- Test parity examples through the model ----
# -------------------------------------------------------------------------------

def test_probe_influence_vanishes_after_readout():
    config = preset_config("micro", d_model=16, n_heads=2, loop_horizon=6)
    checkpoint = Checkpoint(init_parameters(config), 0.05, 1)
    train = gen_parity(3, (2, 4), seed=0)
    probe = [alternating_probe(3)]
    result = sdi_test_side(exact_features(checkpoint, train, config), exact_features(checkpoint, probe, config), [0.05])
    assert np.array_equal(result.test_steps[..., 3:], np.zeros((3, 1, 3)))

def test_parity_loss_reads_equals_position():
    config = preset_config("micro", d_model=16, n_heads=2)
    ex = ParityExample((1, 0, 1))
    trace = forward(init_parameters(config), config, ex.tokens, ex.readout_step, ex.loss_mask, ex.targets, ex.tau)
    logits = trace.logits[0, 3]
    expected = -(logits[0] - np.log(np.sum(np.exp(logits))))
    assert trace.loss == pytest.approx(expected)

def test_per_length_accuracy_keys():
    config = preset_config("micro", d_model=16, n_heads=2)
    accuracy = per_length_accuracy(init_parameters(config), config, gen_parity(60, (2, 4), seed=5))
    assert sorted(accuracy) == [2, 3, 4]
    assert all(0.0 <= a <= 1.0 for a in accuracy.values())

@pytest.mark.slow
def test_micro_curriculum_reaches_full_accuracy():
    _, _, report = run_parity_training("micro", seed=0)
    assert report["train_accuracy"] == 1.0
    assert set(report["ood_accuracy"]) == {"20"}

# Synthetic parity data, alternating probes, the length curriculum and the parity training driver.

import json
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from sdikit import _constants
from sdikit._errors import FormatError
from sdikit._looped_model import (
    Batch,
    Checkpoint,
    ModelConfig,
    evaluate_accuracy,
    init_parameters,
    preset_config,
    train_sgd,
)


@dataclass(eq=False)
class ParityExample:
    """
    A bit string followed by '=' and one padding token.

    tokens = bits + [EQUALS] + [PAD] (length n + 2); the loss reads the '=' position (index n)
    at loop step n, and the model loops tau = n + 2 times.
    """
    bits: Tuple[int, ...]
    example_id: Any = None
    tokens: np.ndarray = field(init=False, repr=False)
    label: int = field(init=False)
    loss_mask: np.ndarray = field(init=False, repr=False)
    targets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.bits = tuple(int(b) for b in self.bits)
        if len(self.bits) < 1:
            raise ValueError("a parity example needs at least one bit")
        if any(b not in (0, 1) for b in self.bits):
            raise ValueError(f"bits must be 0 or 1, got {self.bits}")

        n = len(self.bits)
        self.label = int(np.bitwise_xor.reduce(np.array(self.bits)))
        self.tokens = np.array(
            [_constants.ONE_TOKEN if b else _constants.ZERO_TOKEN for b in self.bits]
            + [_constants.EQUALS_TOKEN, _constants.PAD_TOKEN],
            dtype=np.int64,
        )
        self.loss_mask = np.zeros(n + 2, dtype=bool)
        self.loss_mask[n] = True
        self.targets = np.zeros(n + 2, dtype=np.int64)
        self.targets[n] = _constants.ONE_TOKEN if self.label else _constants.ZERO_TOKEN

    @property
    def n(self) -> int:
        return len(self.bits)

    @property
    def readout_step(self) -> int:
        return self.n

    @property
    def tau(self) -> int:
        return self.n + 2

    @property
    def answer_position(self) -> int:
        return self.n

    def bit_string(self) -> str:
        return "".join(str(b) for b in self.bits)

    def to_json(self) -> dict:
        return {"bits": self.bit_string(), "n": self.n, "label": self.label}

    @classmethod
    def from_json(cls, doc: dict, example_id: Any = None) -> "ParityExample":
        try:
            example = cls(tuple(int(c) for c in doc["bits"]), example_id)
        except (KeyError, ValueError) as exc:
            raise FormatError(f"bad parity record {doc} ({exc})")
        if "n" in doc and int(doc["n"]) != example.n:
            raise FormatError(f"record says n={doc['n']} but holds {example.n} bits")
        if "label" in doc and int(doc["label"]) != example.label:
            raise FormatError(f"record label {doc['label']} is not the parity of '{doc['bits']}'")
        return example


def _length_bounds(length_range: Union[int, Tuple[int, int]]) -> Tuple[int, int]:
    lo, hi = (length_range, length_range) if isinstance(length_range, (int, np.integer)) else length_range
    if lo < 1 or hi < lo:
        raise ValueError(f"invalid length range ({lo}, {hi}); lengths must be >= 1")
    return int(lo), int(hi)


def gen_parity(count: int, length_range: Union[int, Tuple[int, int]], seed: int) -> List[ParityExample]:
    """
    Uniformly random bit strings with lengths uniform in length_range (inclusive).
    Args:
        count (int): number of examples
        length_range: a single length or an inclusive (min, max) pair
        seed (int): generator seed
    Returns:
        List[ParityExample]
    """
    lo, hi = _length_bounds(length_range)
    rng = np.random.default_rng(seed)
    lengths = rng.integers(lo, hi + 1, size=count)
    return [ParityExample(tuple(rng.integers(0, 2, size=n)), example_id=i) for i, n in enumerate(lengths)]


def alternating_probe(length: int, start: int = 0, example_id: Any = None) -> ParityExample:
    """Bits 0101... (start=0) or 1010... (start=1)."""
    if length < 1:
        raise ValueError(f"'length' must be positive, got {length}")
    if start not in (0, 1):
        raise ValueError(f"'start' must be 0 or 1, got {start}")
    return ParityExample(tuple((start + i) % 2 for i in range(length)), example_id)


def alternating_probe_set(lengths: Iterable[int]) -> List[ParityExample]:
    """Both alternating probes at every length, ids like 'alt0_12'."""
    return [alternating_probe(n, start, f"alt{start}_{n}") for n in lengths for start in (0, 1)]


def to_batch(examples: Sequence[ParityExample]) -> Batch:
    """Stack same-length examples into one Batch (tau = n + 2, readout at n)."""
    if not examples:
        raise ValueError("cannot batch an empty list")
    n = examples[0].n
    if any(ex.n != n for ex in examples):
        raise ValueError("batches hold examples of a single length")
    return Batch(
        tokens=np.stack([ex.tokens for ex in examples]),
        loss_mask=np.stack([ex.loss_mask for ex in examples]),
        targets=np.stack([ex.targets for ex in examples]),
        readout_step=n,
        tau=n + 2,
    )


def group_by_length(examples: Sequence[ParityExample]) -> Dict[int, List[ParityExample]]:
    groups: Dict[int, List[ParityExample]] = {}
    for ex in examples:
        groups.setdefault(ex.n, []).append(ex)
    return dict(sorted(groups.items()))


class Curriculum:
    """
    Training driver callback for train_sgd: phase p runs schedule[p][0] steps, each batch drawing one
    length uniformly in [2, schedule[p][1]].

    Args:
        schedule (Sequence[Tuple[int, int]]): (train_steps, max_length) per phase
        batch_size (int): examples per batch
        min_length (int): shortest length sampled
    """

    def __init__(self, schedule: Sequence[Tuple[int, int]], batch_size: int, min_length: int = 2):
        if not schedule:
            raise ValueError("a curriculum needs at least one phase")
        for steps, max_length in schedule:
            if steps < 1:
                raise ValueError(f"every phase needs a positive step count, got {steps}")
            if max_length < min_length:
                raise ValueError(f"max_length {max_length} is below the minimum length {min_length}")
        if batch_size < 1:
            raise ValueError(f"'batch_size' must be positive, got {batch_size}")

        self.schedule = [(int(s), int(n)) for s, n in schedule]
        self.batch_size = int(batch_size)
        self.min_length = int(min_length)
        self._ends = np.cumsum([s for s, _ in self.schedule])

    @property
    def total_steps(self) -> int:
        return int(self._ends[-1])

    @property
    def max_length(self) -> int:
        return max(n for _, n in self.schedule)

    def phase(self, step: int) -> int:
        return int(min(np.searchsorted(self._ends, step, side="right"), len(self.schedule) - 1))

    def __call__(self, step: int, rng: np.random.Generator) -> Batch:
        max_length = self.schedule[self.phase(step)][1]
        n = int(rng.integers(self.min_length, max_length + 1))
        bits = rng.integers(0, 2, size=(self.batch_size, n))
        return to_batch([ParityExample(tuple(row)) for row in bits])


def curriculum(schedule: Sequence[Tuple[int, int]], batch_size: int = 16) -> Curriculum:
    return Curriculum(schedule, batch_size)


def per_length_accuracy(params, config: ModelConfig, examples: Sequence[ParityExample]) -> Dict[int, float]:
    """Accuracy at the '=' position for each length present in `examples`."""
    return {n: evaluate_accuracy(params, config, [to_batch(group)]) for n, group in group_by_length(examples).items()}


def tercile_subsample(examples: Sequence[ParityExample], per_tercile: int, seed: int) -> List[ParityExample]:
    """
    Equal numbers of examples from the short, middle and long thirds of the observed lengths.
    Terciles with fewer examples than `per_tercile` are taken whole.
    """
    lengths = sorted({ex.n for ex in examples})
    if not lengths:
        return []
    bins = np.array_split(np.array(lengths), 3)
    rng = np.random.default_rng(seed)
    chosen = []
    for lengths_in_bin in bins:
        pool = [i for i, ex in enumerate(examples) if ex.n in set(lengths_in_bin.tolist())]
        if not pool:
            continue
        take = min(per_tercile, len(pool))
        chosen.extend(sorted(rng.choice(pool, size=take, replace=False).tolist()))
    return [examples[i] for i in chosen]


def write_jsonl(path: str, examples: Sequence[ParityExample]) -> None:
    with open(path, "w") as f:
        for ex in examples:
            f.write(json.dumps(ex.to_json()) + "\n")


def read_jsonl(path: str) -> List[ParityExample]:
    examples = []
    with open(path) as f:
        for line_no, line in enumerate(f):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"'{path}' line {line_no + 1} is not JSON ({exc})")
            examples.append(ParityExample.from_json(doc, example_id=len(examples)))
    return examples


def run_parity_training(preset: str = "micro", seed: int = 0, debug: bool = False,
                        **overrides) -> Tuple[List[Checkpoint], ModelConfig, dict]:
    """
    Train a looped model on the preset's parity curriculum.
    Returns:
        Tuple[List[Checkpoint], ModelConfig, dict]: checkpoints, the model config, and an accuracy
        report with per-length in-distribution and out-of-distribution accuracy
    """
    run = _constants.PRESETS[preset]
    config = preset_config(preset, seed=seed, **overrides)
    driver = Curriculum(run["curriculum"], run["batch_size"])

    # ---- STEP 1: train ----
    print(f"[train_parity] STEP 1: {driver.total_steps} SGD steps, curriculum {driver.schedule}") if debug else None
    checkpoints = train_sgd(driver, config, run["learning_rate"], run["checkpoint_every"],
                            n_steps=driver.total_steps, params=init_parameters(config), seed=seed, debug=debug)

    # ---- STEP 2: evaluate ----
    final = checkpoints[-1].params
    in_dist = gen_parity(64 * (driver.max_length - 1), (2, driver.max_length), seed + 1)
    ood = gen_parity(64, run["ood_length"], seed + 2)
    in_acc = per_length_accuracy(final, config, in_dist)
    ood_acc = per_length_accuracy(final, config, ood)
    print(f"[train_parity] STEP 2: in-distribution {in_acc}, OOD {ood_acc}") if debug else None

    report = {
        "schema_version": _constants.REPORT_SCHEMA_VERSION,
        "preset": preset,
        "seed": seed,
        "steps": driver.total_steps,
        "final_loss": checkpoints[-1].loss,
        "train_accuracy": float(np.mean(list(in_acc.values()))),
        "per_length_accuracy": {str(k): v for k, v in in_acc.items()},
        "ood_length": run["ood_length"],
        "ood_accuracy": {str(k): v for k, v in ood_acc.items()},
    }
    return checkpoints, config, report

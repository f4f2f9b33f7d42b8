"""
TracIn and step-decomposed influence (SDI) over loop-body parameters.

Features are either exact (flattened materialised per-step gradients) or sketched (the global
sketch of every per-step gradient, built while backpropagating). For a train example z, a test
example z' and checkpoints k:

    TracIn(z, z')       = sum_k eta_k <g_k(z), g_k(z')>
    test-side SDI_t     = sum_k eta_k <g_k(z), phi_{k,t}(z')>
    train-side SDI_s    = sum_k eta_k <phi_{k,s}(z), g_k(z')>
    step matrix [s, t]  = sum_k eta_k <phi_{k,s}(z), phi_{k,t}(z')>

with g = sum_t phi_t, so every decomposition sums back to TracIn.
"""

import csv
import hashlib
import io
import os
import threading
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from sdikit import _constants, _utils
from sdikit._errors import ConservationError, ModelInputError, PlanMismatchError
from sdikit._looped_model import (
    BODY_TENSORS,
    Checkpoint,
    ModelConfig,
    backward_with_hooks,
    body_shapes,
    count_body_parameters,
    forward,
    materialize_step_gradients,
)
from sdikit._serialization import read_feature_cache, write_feature_cache
from sdikit._sketch_core import SketchPlan, _count_sketch_rows

EXACT_MODE = "exact"
SKETCHED_MODE = "sketched"

# -----------------------------------------------------------------------------------------------
# ---- Feature containers ----
# -----------------------------------------------------------------------------------------------

@dataclass
class FeatureBatch:
    """
    Per-example features at one checkpoint.

    steps has shape (n_examples, tau, D) and totals (n_examples, D); D is (alpha + beta) * m in
    sketched mode and the number of body parameters in exact mode.
    """
    ids: List[Any]
    steps: np.ndarray
    totals: np.ndarray
    mode: str
    plan_id: Optional[str]
    checkpoint_step: int
    eta: float

    @property
    def tau(self) -> int:
        return int(self.steps.shape[1])

    def __len__(self) -> int:
        return int(self.steps.shape[0])

    def conservation_residual(self) -> float:
        """max |g - sum_t phi_t| over examples and features."""
        if self.steps.size == 0:
            return 0.0
        return float(np.max(np.abs(self.totals - self.steps.sum(axis=1))))


def _as_checkpoint_list(feats: Union[FeatureBatch, Sequence[FeatureBatch]]) -> List[FeatureBatch]:
    if isinstance(feats, FeatureBatch):
        return [feats]
    feats = list(feats)
    if not feats:
        raise ValueError("at least one checkpoint's features are needed")
    return feats


def _check_pairing(train: List[FeatureBatch], test: List[FeatureBatch], etas: Sequence[float]) -> np.ndarray:
    if len(train) != len(test):
        raise PlanMismatchError(f"{len(train)} train checkpoints vs {len(test)} test checkpoints")
    etas = np.asarray(etas, dtype=np.float64).ravel()
    if etas.shape[0] != len(train):
        raise ValueError(f"{etas.shape[0]} learning rates for {len(train)} checkpoints")

    reference = train[0]
    for a, b in zip(train, test):
        for batch in (a, b):
            if batch.mode != reference.mode or batch.plan_id != reference.plan_id:
                raise PlanMismatchError(
                    f"features mix mode/plan ('{batch.mode}', {batch.plan_id}) with ('{reference.mode}', {reference.plan_id})"
                )
            if batch.steps.shape[2] != reference.steps.shape[2]:
                raise PlanMismatchError("feature widths differ between batches")
        if a.checkpoint_step != b.checkpoint_step:
            raise PlanMismatchError(f"train checkpoint {a.checkpoint_step} paired with test checkpoint {b.checkpoint_step}")
        if a.tau != b.tau:
            raise PlanMismatchError(f"train tau {a.tau} vs test tau {b.tau}")
    for batches in (train, test):
        for batch in batches[1:]:
            if batch.ids != batches[0].ids:
                raise PlanMismatchError("example ids differ between checkpoints")
    return etas


@dataclass
class InfluenceTrajectory:
    steps: np.ndarray
    tracin: float
    train_id: Any
    test_id: Any
    mode: str

    def energy(self) -> float:
        return float(np.sum(np.abs(self.steps)))


@dataclass
class StepMatrix:
    """values[s - 1, t - 1] is the influence of train step s on test step t."""
    values: np.ndarray

    def train_side(self) -> np.ndarray:
        return self.values.sum(axis=1)

    def test_side(self) -> np.ndarray:
        return self.values.sum(axis=0)

    def total(self) -> float:
        return float(self.values.sum())


def _enforce_conservation(steps: np.ndarray, tracin: np.ndarray, what: str,
                          rtol: float = _constants.CONSERVATION_RTOL) -> None:
    """|tracin - sum_t steps| <= rtol * (|tracin| + sum_t |steps|) for every pair."""
    residual = np.abs(tracin - steps.sum(axis=-1))
    scale = np.abs(tracin) + np.abs(steps).sum(axis=-1)
    bad = residual > rtol * scale + 1e-300
    if np.any(bad):
        worst = float(np.max(residual / np.maximum(scale, 1e-300)))
        raise ConservationError(f"{what} does not sum to TracIn (worst relative residual {worst:.3e})")


@dataclass
class SDIResult:
    """
    TracIn and SDI for every (train, test) pair.

    test_steps[i, j, t - 1] is the test-side SDI of train example i on test example j at step t,
    train_steps the train-side counterpart (None when not computed).
    """
    train_ids: List[Any]
    test_ids: List[Any]
    tracin: np.ndarray
    test_steps: np.ndarray
    mode: str
    plan_id: Optional[str] = None
    train_steps: Optional[np.ndarray] = None
    step_matrices: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def tau(self) -> int:
        return int(self.test_steps.shape[2])

    def trajectory(self, i: int, j: int, side: str = "test") -> InfluenceTrajectory:
        if side == "test":
            steps = self.test_steps[i, j]
        elif side == "train":
            if self.train_steps is None:
                raise ValueError("train-side SDI was not computed")
            steps = self.train_steps[i, j]
        else:
            raise ValueError(f"Invalid side '{side}'. Options are 'test' or 'train'.")
        return InfluenceTrajectory(steps.copy(), float(self.tracin[i, j]), self.train_ids[i], self.test_ids[j], self.mode)

    def trajectories(self, side: str = "test") -> List[InfluenceTrajectory]:
        return [self.trajectory(i, j, side) for i in range(len(self.train_ids)) for j in range(len(self.test_ids))]

    def step_matrix(self, i: int, j: int) -> StepMatrix:
        if self.step_matrices is None:
            raise ValueError("step matrices were not computed")
        return StepMatrix(self.step_matrices[i, j].copy())

    def check_conservation(self) -> None:
        _enforce_conservation(self.test_steps, self.tracin, "test-side SDI")
        if self.train_steps is not None:
            _enforce_conservation(self.train_steps, self.tracin, "train-side SDI")

    def conservation_residual(self) -> float:
        return float(np.max(np.abs(self.tracin - self.test_steps.sum(axis=-1)))) if self.tracin.size else 0.0

    def to_json(self) -> dict:
        pairs = []
        for i, train_id in enumerate(self.train_ids):
            for j, test_id in enumerate(self.test_ids):
                entry = {
                    "train_id": train_id,
                    "test_id": test_id,
                    "tracin": float(self.tracin[i, j]),
                    "steps": [float(v) for v in self.test_steps[i, j]],
                }
                if self.train_steps is not None:
                    entry["train_steps"] = [float(v) for v in self.train_steps[i, j]]
                pairs.append(entry)
        return {
            "schema_version": _constants.REPORT_SCHEMA_VERSION,
            "mode": self.mode,
            "plan_id": self.plan_id,
            "tau": self.tau,
            "pairs": pairs,
        }

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "SDIResult":
        pairs = doc["pairs"]
        train_ids = list(dict.fromkeys(p["train_id"] for p in pairs))
        test_ids = list(dict.fromkeys(p["test_id"] for p in pairs))
        tau = int(doc["tau"])
        tracin = np.zeros((len(train_ids), len(test_ids)))
        steps = np.zeros((len(train_ids), len(test_ids), tau))
        has_train = bool(pairs) and all("train_steps" in p for p in pairs)
        train_steps = np.zeros_like(steps) if has_train else None

        row = {k: i for i, k in enumerate(train_ids)}
        col = {k: j for j, k in enumerate(test_ids)}
        for p in pairs:
            i, j = row[p["train_id"]], col[p["test_id"]]
            tracin[i, j] = p["tracin"]
            steps[i, j] = p["steps"]
            if has_train:
                train_steps[i, j] = p["train_steps"]
        return cls(train_ids, test_ids, tracin, steps, doc["mode"], doc.get("plan_id"), train_steps)

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer)
        writer.writerow(["train_id", "test_id", "tracin"] + [f"step_{t}" for t in range(1, self.tau + 1)])
        for i, train_id in enumerate(self.train_ids):
            for j, test_id in enumerate(self.test_ids):
                writer.writerow([train_id, test_id, repr(float(self.tracin[i, j]))]
                                + [repr(float(v)) for v in self.test_steps[i, j]])
        return buffer.getvalue()

# -----------------------------------------------------------------------------------------------
# ---- Featurization ----
# -----------------------------------------------------------------------------------------------

def _example_fields(example: Any, config: ModelConfig, tau: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    tokens = np.asarray(example.tokens, dtype=np.int64)
    if tokens.ndim != 1:
        raise ModelInputError(f"examples must hold a single token sequence, got shape {tokens.shape}")
    loss_mask = getattr(example, "loss_mask", None)
    if loss_mask is None:
        loss_mask = np.arange(tokens.shape[0]) < tokens.shape[0] - 1
    loss_mask = np.asarray(loss_mask, dtype=bool)
    targets = getattr(example, "targets", None)
    if targets is None:
        targets = np.append(tokens[1:], 0)
    readout = getattr(example, "readout_step", None)
    readout = tau if readout is None else int(readout)
    if readout > tau:
        warnings.warn(f"readout step {readout} exceeds the analysis horizon {tau}; reading out at {tau}")
        readout = tau
    return tokens, loss_mask, np.asarray(targets, dtype=np.int64), readout


def _example_id(example: Any, index: int) -> Any:
    example_id = getattr(example, "example_id", None)
    return index if example_id is None else example_id


def _run_examples(fn, examples: Sequence[Any], threads: int) -> list:
    if threads <= 1 or len(examples) <= 1:
        return [fn(i, ex) for i, ex in enumerate(examples)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda pair: fn(*pair), enumerate(examples)))


class _ByteCounter:
    """Live bytes of one example's sketch buffers and per-factor temporaries, with their peak."""

    def __init__(self):
        self.live = 0
        self.peak = 0

    def alloc(self, *arrays: np.ndarray) -> None:
        self.live += sum(a.nbytes for a in arrays)
        self.peak = max(self.peak, self.live)

    def free(self, *arrays: np.ndarray) -> None:
        self.live -= sum(a.nbytes for a in arrays)


class SDIFeaturizer:
    """
    Streaming sketched featurizer: per-step sketches are accumulated while backpropagating,
    so per-example state is O(tau * (alpha + beta) * m) whatever the body size.

    Args:
        plan (SketchPlan): plan covering exactly the body tensors
        config (ModelConfig): model configuration
        tau (int): analysis horizon (default config.loop_horizon)
        threads (int): worker threads over examples (default SDIKIT_THREADS, else 1)
        debug (bool): print progress
    """

    def __init__(self, plan: SketchPlan, config: ModelConfig, tau: Optional[int] = None,
                 threads: Optional[int] = None, debug: bool = False):
        if not isinstance(plan, SketchPlan):
            raise TypeError(f"'plan' must be a SketchPlan, got '{type(plan).__name__}'")

        expected = body_shapes(config)
        if plan.names != list(expected):
            raise PlanMismatchError(f"plan tensors {plan.names} do not match the body tensors {list(expected)}")
        for t in plan.per_tensor_maps:
            if t.shape != expected[t.name]:
                raise PlanMismatchError(f"plan shape {t.shape} for '{t.name}' but the body has {expected[t.name]}")

        self._plan = plan
        self._config = config
        self._tau = config.loop_horizon if tau is None else int(tau)
        if self._tau < 1:
            raise ValueError(f"'tau' must be positive, got {self._tau}")
        self._threads = _utils._thread_cap() if threads is None else int(threads)
        self.debug = debug

        self._m = plan.sketch_dim
        self._blocks = {name: plan.block(name) for name in plan.names}
        self._tables = {}
        for t in plan.per_tensor_maps:
            if t.kind == _constants.VECTOR_KIND:
                self._tables[t.name] = (t.hashes["h"].table(), t.hashes["s"].table())
            else:
                self._tables[t.name] = (t.hashes["h1"].table(), t.hashes["s1"].table(),
                                        t.hashes["h2"].table(), t.hashes["s2"].table())

        self._lock = threading.Lock()
        self.peak_live_bytes = 0

        print(f"[SDIFeaturizer] m={self._m}, tensors={plan.n_tensors}, tau={self._tau}, threads={self._threads}") if self.debug else None

    @property
    def plan(self) -> SketchPlan:
        return self._plan

    @property
    def tau(self) -> int:
        return self._tau

    def _sketch_factor(self, name: str, delta: np.ndarray, act: Optional[np.ndarray], counter: _ByteCounter) -> np.ndarray:
        m = self._m
        if act is None:
            h, s = self._tables[name]
            summed = delta.sum(axis=0)
            counter.alloc(summed)
            out = np.bincount(h, weights=s * summed, minlength=m)
            counter.alloc(out)
            counter.free(summed, out)
            return out

        h1, s1, h2, s2 = self._tables[name]
        left_rows = _count_sketch_rows(delta, h1, s1, m)
        right_rows = _count_sketch_rows(act, h2, s2, m)
        counter.alloc(left_rows, right_rows)
        left = _utils._fft(left_rows)
        right = _utils._fft(right_rows)
        counter.alloc(left, right)
        spectrum = np.sum(left * right, axis=0)
        counter.alloc(spectrum)
        out = np.real(_utils._ifft(spectrum))
        counter.alloc(out)
        counter.free(left_rows, right_rows, left, right, spectrum, out)
        return out

    def featurize_example(self, params: Mapping[str, np.ndarray], example: Any) -> Tuple[np.ndarray, np.ndarray, int]:
        """
        Sketch one example's per-step body gradients.
        Returns:
            Tuple[np.ndarray, np.ndarray, int]: steps (tau, D), total g (D,), peak live bytes
        """
        tokens, loss_mask, targets, readout = _example_fields(example, self._config, self._tau)
        trace = forward(params, self._config, tokens, readout, loss_mask, targets, self._tau)

        counter = _ByteCounter()
        steps = np.zeros((self._tau, self._plan.sketch_dim_total))
        total = np.zeros(self._plan.sketch_dim_total)
        counter.alloc(steps, total)

        def hook(t, name, delta, act):
            block = self._blocks[name]
            sketch = self._sketch_factor(name, delta[0], None if act is None else act[0], counter)
            steps[t - 1, block] += sketch
            total[block] += sketch

        backward_with_hooks(trace, params, self._config, hook=hook, keep_factors=False)
        return steps, total, counter.peak

    def featurize(self, checkpoint: Checkpoint, examples: Sequence[Any]) -> FeatureBatch:
        examples = list(examples)

        def work(i, example):
            print(f"[SDIFeaturizer] checkpoint {checkpoint.step}: example {i + 1}/{len(examples)}") if self.debug else None
            return self.featurize_example(checkpoint.params, example)

        results = _run_examples(work, examples, self._threads)

        D = self._plan.sketch_dim_total
        steps = np.stack([r[0] for r in results]) if results else np.zeros((0, self._tau, D))
        totals = np.stack([r[1] for r in results]) if results else np.zeros((0, D))
        with self._lock:
            self.peak_live_bytes = max([self.peak_live_bytes] + [r[2] for r in results])

        return FeatureBatch(
            ids=[_example_id(ex, i) for i, ex in enumerate(examples)],
            steps=steps, totals=totals, mode=SKETCHED_MODE, plan_id=self._plan.plan_id,
            checkpoint_step=int(checkpoint.step), eta=float(checkpoint.eta),
        )


def featurize_batch(checkpoint: Checkpoint, examples: Sequence[Any], plan: SketchPlan, config: ModelConfig,
                    tau: Optional[int] = None, threads: Optional[int] = None, debug: bool = False) -> FeatureBatch:
    """Sketched per-step features g~ and phi~_1..phi~_tau for every example at one checkpoint."""
    return SDIFeaturizer(plan, config, tau, threads, debug).featurize(checkpoint, examples)


def exact_features(checkpoint: Checkpoint, examples: Sequence[Any], config: ModelConfig, tau: Optional[int] = None,
                   budget: int = _constants.EXACT_PARAMETER_BUDGET) -> FeatureBatch:
    """Flattened materialised per-step body gradients; refuses bodies above `budget` parameters."""
    n_params = count_body_parameters(config)
    if n_params > budget:
        raise ValueError(f"exact features need {n_params} body parameters per step, above the budget of {budget}")
    if n_params > 0.9 * budget:
        warnings.warn(f"exact features use {n_params} body parameters, close to the budget of {budget}")

    tau = config.loop_horizon if tau is None else int(tau)
    examples = list(examples)
    steps = np.zeros((len(examples), tau, n_params))

    for i, example in enumerate(examples):
        tokens, loss_mask, targets, readout = _example_fields(example, config, tau)
        trace = forward(checkpoint.params, config, tokens, readout, loss_mask, targets, tau)
        factors = backward_with_hooks(trace, checkpoint.params, config)
        for t, grads in enumerate(materialize_step_gradients(factors, example=0)):
            steps[i, t] = np.concatenate([grads[name].ravel() for name in BODY_TENSORS])

    return FeatureBatch(
        ids=[_example_id(ex, i) for i, ex in enumerate(examples)],
        steps=steps, totals=steps.sum(axis=1), mode=EXACT_MODE, plan_id=None,
        checkpoint_step=int(checkpoint.step), eta=float(checkpoint.eta),
    )

# -----------------------------------------------------------------------------------------------
# ---- Influence reductions ----
# -----------------------------------------------------------------------------------------------

def tracin(train_feats: Union[FeatureBatch, Sequence[FeatureBatch]], test_feats: Union[FeatureBatch, Sequence[FeatureBatch]],
           etas: Sequence[float]) -> np.ndarray:
    """sum_k eta_k <g_k(z), g_k(z')> for every (train, test) pair, shape (n_train, n_test)."""
    train, test = _as_checkpoint_list(train_feats), _as_checkpoint_list(test_feats)
    etas = _check_pairing(train, test, etas)
    out = np.zeros((len(train[0]), len(test[0])))
    for eta, a, b in zip(etas, train, test):
        out += eta * (a.totals @ b.totals.T)
    return out


def self_influence(train_feats: Union[FeatureBatch, Sequence[FeatureBatch]], etas: Sequence[float]) -> np.ndarray:
    """TracIn(z, z) for every train example."""
    train = _as_checkpoint_list(train_feats)
    etas = _check_pairing(train, train, etas)
    out = np.zeros(len(train[0]))
    for eta, a in zip(etas, train):
        out += eta * np.sum(a.totals * a.totals, axis=1)
    return out


def _test_side_steps(train: List[FeatureBatch], test: List[FeatureBatch], etas: np.ndarray) -> np.ndarray:
    out = np.zeros((len(train[0]), len(test[0]), test[0].tau))
    for eta, a, b in zip(etas, train, test):
        out += eta * np.einsum("id,jtd->ijt", a.totals, b.steps)
    return out


def _train_side_steps(train: List[FeatureBatch], test: List[FeatureBatch], etas: np.ndarray) -> np.ndarray:
    out = np.zeros((len(train[0]), len(test[0]), train[0].tau))
    for eta, a, b in zip(etas, train, test):
        out += eta * np.einsum("isd,jd->ijs", a.steps, b.totals)
    return out


def sdi_test_side(train_feats, test_feats, etas: Sequence[float]) -> SDIResult:
    """steps[t] = sum_k eta_k <g_k(z), phi_{k,t}(z')>; conservation against TracIn is enforced."""
    train, test = _as_checkpoint_list(train_feats), _as_checkpoint_list(test_feats)
    etas = _check_pairing(train, test, etas)
    result = SDIResult(train[0].ids, test[0].ids, tracin(train, test, etas), _test_side_steps(train, test, etas),
                       train[0].mode, train[0].plan_id)
    result.check_conservation()
    return result


def sdi_train_side(train_feats, test_feats, etas: Sequence[float]) -> SDIResult:
    """steps[s] = sum_k eta_k <phi_{k,s}(z), g_k(z')>; held in both test_steps and train_steps."""
    train, test = _as_checkpoint_list(train_feats), _as_checkpoint_list(test_feats)
    etas = _check_pairing(train, test, etas)
    steps = _train_side_steps(train, test, etas)
    result = SDIResult(train[0].ids, test[0].ids, tracin(train, test, etas), steps, train[0].mode,
                       train[0].plan_id, train_steps=steps)
    result.check_conservation()
    return result


def sdi_matrix(train_feats, test_feats, etas: Sequence[float], train_index: int = 0, test_index: int = 0) -> StepMatrix:
    """values[s, t] = sum_k eta_k <phi_{k,s}(z), phi_{k,t}(z')> for one (train, test) pair."""
    train, test = _as_checkpoint_list(train_feats), _as_checkpoint_list(test_feats)
    etas = _check_pairing(train, test, etas)
    values = np.zeros((train[0].tau, test[0].tau))
    for eta, a, b in zip(etas, train, test):
        values += eta * (a.steps[train_index] @ b.steps[test_index].T)
    return StepMatrix(values)


def sdi_decomposition(train_feats, test_feats, etas: Sequence[float], with_step_matrices: bool = False) -> SDIResult:
    """TracIn with both test-side and train-side SDI (and optionally every step matrix)."""
    train, test = _as_checkpoint_list(train_feats), _as_checkpoint_list(test_feats)
    etas = _check_pairing(train, test, etas)
    matrices = None
    if with_step_matrices:
        matrices = np.zeros((len(train[0]), len(test[0]), train[0].tau, test[0].tau))
        for eta, a, b in zip(etas, train, test):
            matrices += eta * np.einsum("isd,jtd->ijst", a.steps, b.steps)
    result = SDIResult(train[0].ids, test[0].ids, tracin(train, test, etas), _test_side_steps(train, test, etas),
                       train[0].mode, train[0].plan_id, _train_side_steps(train, test, etas), matrices)
    result.check_conservation()
    return result


def fidelity_report(exact: SDIResult, sketched: SDIResult) -> Dict[str, float]:
    """Relative Frobenius errors of the sketched SDI tensor and TracIn matrix against exact ones."""
    if exact.train_ids != sketched.train_ids or exact.test_ids != sketched.test_ids:
        raise PlanMismatchError("exact and sketched results cover different pairs")
    if exact.test_steps.shape != sketched.test_steps.shape:
        raise PlanMismatchError(f"SDI shapes differ: {exact.test_steps.shape} vs {sketched.test_steps.shape}")
    return {
        "rel_frobenius_sdi": _utils._relative_frobenius_error(sketched.test_steps, exact.test_steps),
        "rel_frobenius_tracin": _utils._relative_frobenius_error(sketched.tracin, exact.tracin),
    }


def summed_profile(result: SDIResult, test_index: int = 0) -> np.ndarray:
    """sum over train examples of SDI(z, probe)_t, shape (tau,)."""
    return result.test_steps[:, test_index, :].sum(axis=0)

# -----------------------------------------------------------------------------------------------
# ---- Streaming over checkpoints ----
# -----------------------------------------------------------------------------------------------

def _cache_key(checkpoint: Checkpoint, examples: Sequence[Any], tau: int) -> str:
    """sha256 prefix over the horizon, the checkpoint parameters and every example's inputs."""
    digest = hashlib.sha256(np.asarray([tau, len(examples)], dtype="<i8").tobytes())
    for name in sorted(checkpoint.params):
        value = np.ascontiguousarray(checkpoint.params[name], dtype="<f8")
        digest.update(name.encode())
        digest.update(np.asarray(value.shape, dtype="<i8").tobytes())
        digest.update(value.tobytes())
    for example in examples:
        for field_name in ("tokens", "loss_mask", "targets", "readout_step"):
            value = getattr(example, field_name, None)
            digest.update(field_name.encode())
            digest.update(b"-" if value is None else np.ascontiguousarray(value, dtype="<i8").tobytes())
    return digest.hexdigest()[:16]


def _cached_features(featurize, cache_dir: Optional[str], split: str, checkpoint: Checkpoint,
                     examples: Sequence[Any], plan: SketchPlan, tau: int) -> FeatureBatch:
    if cache_dir is None:
        return featurize(checkpoint, examples)

    os.makedirs(cache_dir, exist_ok=True)
    key = _cache_key(checkpoint, examples, tau)
    path = os.path.join(cache_dir, f"{split}_{checkpoint.step:08d}_{plan.plan_id}_{key}.sdif")
    if os.path.exists(path):
        m, n_tensors, steps = read_feature_cache(path)
        if m == plan.sketch_dim and n_tensors == plan.n_tensors and steps.shape[:2] == (len(examples), tau):
            return FeatureBatch([_example_id(ex, i) for i, ex in enumerate(examples)], steps, steps.sum(axis=1),
                                SKETCHED_MODE, plan.plan_id, int(checkpoint.step), float(checkpoint.eta))
        warnings.warn(f"feature cache '{path}' does not match the plan, example set or horizon; rebuilding it")

    batch = featurize(checkpoint, examples)
    write_feature_cache(path, batch.steps, plan.sketch_dim, plan.n_tensors)
    return batch


def compute_sdi_from_checkpoints(checkpoints: Iterable[Checkpoint], train_examples: Sequence[Any],
                                 test_examples: Sequence[Any], config: ModelConfig, plan: Optional[SketchPlan] = None,
                                 tau: Optional[int] = None, cache_dir: Optional[str] = None,
                                 with_step_matrices: bool = False, threads: Optional[int] = None,
                                 debug: bool = False) -> SDIResult:
    """
    TracIn and SDI accumulated one checkpoint at a time; only the current checkpoint's features
    are held in memory. plan=None selects exact mode (never cached).
    """
    tau = config.loop_horizon if tau is None else int(tau)
    train_examples, test_examples = list(train_examples), list(test_examples)
    n_train, n_test = len(train_examples), len(test_examples)

    if plan is None:
        featurize = lambda ckpt, exs: exact_features(ckpt, exs, config, tau)
        cache_dir = None
    else:
        featurizer = SDIFeaturizer(plan, config, tau, threads, debug)
        featurize = featurizer.featurize

    tracin_sum = np.zeros((n_train, n_test))
    test_steps = np.zeros((n_train, n_test, tau))
    train_steps = np.zeros((n_train, n_test, tau))
    matrices = np.zeros((n_train, n_test, tau, tau)) if with_step_matrices else None
    train_ids = test_ids = None
    n_checkpoints = 0

    for checkpoint in checkpoints:
        print(f"[compute_sdi] checkpoint step {checkpoint.step} (eta={checkpoint.eta})") if debug else None
        a = _cached_features(featurize, cache_dir, "train", checkpoint, train_examples, plan, tau)
        b = _cached_features(featurize, cache_dir, "test", checkpoint, test_examples, plan, tau)
        eta = checkpoint.eta
        tracin_sum += eta * (a.totals @ b.totals.T)
        test_steps += eta * np.einsum("id,jtd->ijt", a.totals, b.steps)
        train_steps += eta * np.einsum("isd,jd->ijs", a.steps, b.totals)
        if with_step_matrices:
            matrices += eta * np.einsum("isd,jtd->ijst", a.steps, b.steps)
        train_ids, test_ids = a.ids, b.ids
        n_checkpoints += 1

    if n_checkpoints == 0:
        raise ValueError("no checkpoints to aggregate")

    result = SDIResult(train_ids, test_ids, tracin_sum, test_steps, EXACT_MODE if plan is None else SKETCHED_MODE,
                       None if plan is None else plan.plan_id, train_steps, matrices)
    result.check_conservation()
    return result

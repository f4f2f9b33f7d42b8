# Hash families, CountSketch, TensorSketch and the block-concatenated global sketch map.

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from sdikit import _constants, _utils
from sdikit._errors import PlanMismatchError, SketchConfigError

# -----------------------------------------------------------------------------------------------
# ---- Hash families ----
# -----------------------------------------------------------------------------------------------

BUCKET_OUTPUT = "bucket"
SIGN_OUTPUT = "sign"


class HashFamily:
    """
    A polynomial hash over GF(2^61 - 1) reduced to buckets [0, m) or signs {-1, +1}.

    A degree-k polynomial with uniformly drawn coefficients is (k+1)-wise independent,
    so degree 1 gives the 2-wise bucket hash and degree 3 the 4-wise sign hash.

    Args:
        degree (int): polynomial degree
        coefficients (Sequence[int]): degree+1 residues modulo 2^61 - 1, lowest degree first
        domain_size (int): number of input indices d
        range_size (int): m for buckets, 2 for signs
        output (str): "bucket" or "sign"
    """

    def __init__(self, degree: int, coefficients: Sequence[int], domain_size: int, range_size: int, output: str):
        if output not in (BUCKET_OUTPUT, SIGN_OUTPUT):
            raise ValueError(f"Invalid output '{output}'. Options are '{BUCKET_OUTPUT}' or '{SIGN_OUTPUT}'.")
        if degree < 0:
            raise ValueError(f"'degree' must be non-negative, got {degree}")
        if len(coefficients) != degree + 1:
            raise ValueError(f"a degree {degree} hash needs {degree + 1} coefficients, got {len(coefficients)}")
        if domain_size < 1:
            raise SketchConfigError(f"'domain_size' must be positive, got {domain_size}")
        if output == SIGN_OUTPUT and range_size != 2:
            raise SketchConfigError(f"sign hashes have range 2, got {range_size}")
        if range_size < 1:
            raise SketchConfigError(f"'range_size' must be positive, got {range_size}")

        self.degree = int(degree)
        self.coefficients = [int(c) % _constants.MERSENNE_PRIME for c in coefficients]
        self.domain_size = int(domain_size)
        self.range_size = int(range_size)
        self.output = output

        self._table = self.evaluate(np.arange(self.domain_size))
        self._table.setflags(write=False)

    @classmethod
    def sample(cls, rng: np.random.Generator, degree: int, domain_size: int, range_size: int, output: str) -> "HashFamily":
        coefficients = rng.integers(0, _constants.MERSENNE_PRIME, size=degree + 1, dtype=np.uint64)
        return cls(degree, [int(c) for c in coefficients], domain_size, range_size, output)

    @staticmethod
    def draw_tables(rng: np.random.Generator, trials: int, degree: int, domain_size: int,
                    range_size: int, output: str) -> np.ndarray:
        """
        Draw `trials` independent hash functions at once and return their value tables.
        Returns:
            np.ndarray: shape (trials, domain_size); int64 buckets or float64 signs
        """
        coefficients = rng.integers(0, _constants.MERSENNE_PRIME, size=(trials, degree + 1), dtype=np.uint64)
        raw = _utils._poly_eval_mersenne61(coefficients, np.arange(domain_size))
        if output == SIGN_OUTPUT:
            return _utils._parity_to_sign(raw)
        return _utils._reduce_to_buckets(raw, range_size)

    def evaluate(self, indices: Union[Sequence[int], np.ndarray]) -> np.ndarray:
        indices = np.asarray(indices, dtype=np.int64)
        if indices.size and (indices.min() < 0):
            raise ValueError("hash inputs must be non-negative indices")
        raw = _utils._poly_eval_mersenne61(np.asarray(self.coefficients, dtype=np.uint64), indices)
        if self.output == SIGN_OUTPUT:
            return _utils._parity_to_sign(raw)
        return _utils._reduce_to_buckets(raw, self.range_size)

    def table(self, d: Optional[int] = None) -> np.ndarray:
        """Hash values for indices 0..d-1 (the full domain by default)."""
        if d is None:
            return self._table
        if d > self.domain_size:
            raise SketchConfigError(f"input dimension {d} exceeds the hash domain size {self.domain_size}")
        return self._table[:d]

    def to_json(self) -> dict:
        return {
            "degree": self.degree,
            "coefficients": [str(c) for c in self.coefficients],
            "domain_size": self.domain_size,
            "range_size": self.range_size,
            "output": self.output,
        }

    def __eq__(self, other) -> bool:
        if not isinstance(other, HashFamily):
            return NotImplemented
        return self.to_json() == other.to_json()

    def __str__(self) -> str:
        return f"HashFamily(degree={self.degree}, domain_size={self.domain_size}, range_size={self.range_size}, output='{self.output}')"


def _table_for(hash_or_table: Union[HashFamily, np.ndarray], d: int, name: str) -> np.ndarray:
    if isinstance(hash_or_table, HashFamily):
        return hash_or_table.table(d)
    table = np.asarray(hash_or_table)
    if table.ndim != 1:
        raise SketchConfigError(f"'{name}' must be a HashFamily or a 1-D table")
    if table.shape[0] < d:
        raise SketchConfigError(f"input dimension {d} exceeds the '{name}' hash domain size {table.shape[0]}")
    return table[:d]


def _check_bucket_range(h: Union[HashFamily, np.ndarray], m: int) -> None:
    if isinstance(h, HashFamily) and h.range_size != m:
        raise SketchConfigError(f"bucket hash has range {h.range_size} but the sketch dimension is {m}")

# -----------------------------------------------------------------------------------------------
# ---- Per-tensor maps and the SketchPlan ----
# -----------------------------------------------------------------------------------------------

@dataclass(frozen=True)
class TensorMap:
    """Hashes for one parameter tensor: (h, s) for vectors, (h1, s1, h2, s2) for matrices."""
    name: str
    kind: str
    shape: Tuple[int, ...]
    subseed: int
    hashes: Mapping[str, HashFamily] = field(repr=False)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def _build_tensor_map(name: str, shape: Tuple[int, ...], subseed: int, m: int) -> TensorMap:
    rng = np.random.default_rng(subseed)

    if len(shape) == 1:
        d = shape[0]
        hashes = {
            "h": HashFamily.sample(rng, _constants.BUCKET_HASH_DEGREE, d, m, BUCKET_OUTPUT),
            "s": HashFamily.sample(rng, _constants.SIGN_HASH_DEGREE, d, 2, SIGN_OUTPUT),
        }
        return TensorMap(name, _constants.VECTOR_KIND, shape, subseed, hashes)

    if len(shape) == 2:
        d_out, d_in = shape
        hashes = {
            "h1": HashFamily.sample(rng, _constants.BUCKET_HASH_DEGREE, d_out, m, BUCKET_OUTPUT),
            "s1": HashFamily.sample(rng, _constants.SIGN_HASH_DEGREE, d_out, 2, SIGN_OUTPUT),
            "h2": HashFamily.sample(rng, _constants.BUCKET_HASH_DEGREE, d_in, m, BUCKET_OUTPUT),
            "s2": HashFamily.sample(rng, _constants.SIGN_HASH_DEGREE, d_in, 2, SIGN_OUTPUT),
        }
        return TensorMap(name, _constants.MATRIX_KIND, shape, subseed, hashes)

    raise SketchConfigError(f"tensor '{name}' has rank {len(shape)}; only vectors and matrices can be sketched")


class SketchPlan:
    """
    Frozen family of per-tensor CountSketch/TensorSketch maps defining the global sketch.

    Args:
        named_shapes (Mapping[str, Tuple[int, ...]]): ordered parameter names and shapes
        sketch_dim (int): m, an even power of two
        seed (int): 64-bit plan seed; per-tensor sub-seeds are spawned from it
        subseeds (Sequence[int]): explicit sub-seeds (used when rebuilding from JSON)
    """

    def __init__(self, named_shapes: Mapping[str, Sequence[int]], sketch_dim: int, seed: int,
                 subseeds: Optional[Sequence[int]] = None):
        self._m = _utils._check_sketch_dim(sketch_dim)

        if not isinstance(seed, (int, np.integer)) or isinstance(seed, bool):
            raise TypeError(f"'seed' must be an integer, got '{type(seed).__name__}'")
        if not 0 <= int(seed) < 2 ** 64:
            raise ValueError(f"'seed' must fit in 64 unsigned bits, got {seed}")
        self._seed = int(seed)

        names = list(named_shapes.keys())
        if not names:
            raise SketchConfigError("a SketchPlan needs at least one parameter tensor")

        if subseeds is None:
            subseeds = np.random.SeedSequence(self._seed).generate_state(len(names), dtype=np.uint64)
        if len(subseeds) != len(names):
            raise SketchConfigError(f"{len(names)} tensors but {len(subseeds)} sub-seeds")

        self._maps: List[TensorMap] = []
        for name, subseed in zip(names, subseeds):
            shape = tuple(int(s) for s in named_shapes[name])
            self._maps.append(_build_tensor_map(name, shape, int(subseed), self._m))

        self._plan_id = hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode("utf-8")).hexdigest()[:16]

    @classmethod
    def for_gradients(cls, grads: Mapping[str, np.ndarray], sketch_dim: int, seed: int) -> "SketchPlan":
        return cls({name: np.shape(g) for name, g in grads.items()}, sketch_dim, seed)

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "SketchPlan":
        tensors = doc["tensors"]
        named_shapes = {t["name"]: tuple(t["shape"]) for t in tensors}
        plan = cls(named_shapes, int(doc["m"]), int(doc["seed"]), subseeds=[int(t["subseed"]) for t in tensors])
        for entry, tensor_map in zip(tensors, plan.per_tensor_maps):
            if entry["kind"] != tensor_map.kind:
                raise SketchConfigError(f"tensor '{entry['name']}' declared as '{entry['kind']}' but has shape {tensor_map.shape}")
        return plan

    @property
    def sketch_dim(self) -> int:
        return self._m

    @property
    def seed(self) -> int:
        return self._seed

    @property
    def plan_id(self) -> str:
        return self._plan_id

    @property
    def per_tensor_maps(self) -> List[TensorMap]:
        return list(self._maps)

    @property
    def names(self) -> List[str]:
        return [t.name for t in self._maps]

    @property
    def n_tensors(self) -> int:
        return len(self._maps)

    @property
    def sketch_dim_total(self) -> int:
        """(alpha + beta) * m, the length of every SketchedVector of this plan."""
        return self._m * len(self._maps)

    def tensor_map(self, name: str) -> TensorMap:
        for t in self._maps:
            if t.name == name:
                return t
        raise SketchConfigError(f"tensor '{name}' is not part of this plan")

    def block(self, name: str) -> slice:
        """Slice of the global sketched vector holding tensor `name`."""
        for i, t in enumerate(self._maps):
            if t.name == name:
                return slice(i * self._m, (i + 1) * self._m)
        raise SketchConfigError(f"tensor '{name}' is not part of this plan")

    def kinds(self) -> Dict[str, str]:
        return {t.name: t.kind for t in self._maps}

    def to_json(self) -> dict:
        return {
            "seed": self._seed,
            "m": self._m,
            "tensors": [
                {"name": t.name, "kind": t.kind, "subseed": t.subseed, "shape": list(t.shape)}
                for t in self._maps
            ],
        }

    def __eq__(self, other) -> bool:
        if not isinstance(other, SketchPlan):
            return NotImplemented
        return self.to_json() == other.to_json()

    def __str__(self) -> str:
        n_vec = sum(1 for t in self._maps if t.kind == _constants.VECTOR_KIND)
        n_mat = len(self._maps) - n_vec
        return f"""SketchPlan Object:
    \tPlan id: '{self._plan_id}'
    \tSeed: '{self._seed}'
    \tSketch dim (m): '{self._m}'
    \tVector tensors: '{n_vec}'
    \tMatrix tensors: '{n_mat}'
    \tTotal length: '{self.sketch_dim_total}'"""


@dataclass
class SketchedVector:
    """A global sketch of one gradient collection, bound to the plan that produced it."""
    values: np.ndarray
    plan_id: str

    def __len__(self) -> int:
        return int(self.values.shape[0])

    def dot(self, other: "SketchedVector") -> float:
        if not isinstance(other, SketchedVector):
            raise TypeError(f"can only dot with a SketchedVector, got '{type(other).__name__}'")
        if other.plan_id != self.plan_id:
            raise PlanMismatchError(f"plan '{self.plan_id}' vs plan '{other.plan_id}'")
        return float(np.dot(self.values, other.values))

# -----------------------------------------------------------------------------------------------
# ---- CountSketch ----
# -----------------------------------------------------------------------------------------------

def count_sketch(x: Union[Sequence[float], np.ndarray], h: Union[HashFamily, np.ndarray],
                 s: Union[HashFamily, np.ndarray], m: int) -> np.ndarray:
    """
    CountSketch of a vector: out[j] = sum over i with h(i) = j of s(i) * x[i].
    Args:
        x: vector of length d
        h: bucket hash (or precomputed table) covering at least d indices
        s: sign hash (or precomputed table) covering at least d indices
        m (int): sketch dimension
    Returns:
        np.ndarray: length-m sketch
    """
    m = _utils._check_sketch_dim(m, require_power_of_two=False)
    x = _utils._as_vector(x, "x")
    _check_bucket_range(h, m)

    d = x.shape[0]
    buckets = _table_for(h, d, "h")
    signs = _table_for(s, d, "s")

    return np.bincount(buckets, weights=signs * x, minlength=m)[:m]


def _count_sketch_rows(rows: np.ndarray, buckets: np.ndarray, signs: np.ndarray, m: int) -> np.ndarray:
    """CountSketch applied independently to each row of an (L, d) array -> (L, m)."""
    n_rows, d = rows.shape
    offsets = (np.arange(n_rows, dtype=np.int64) * m)[:, None] + buckets[None, :d]
    flat = np.bincount(offsets.ravel(), weights=(rows * signs[None, :d]).ravel(), minlength=n_rows * m)
    return flat.reshape(n_rows, m)

# -----------------------------------------------------------------------------------------------
# ---- TensorSketch ----
# -----------------------------------------------------------------------------------------------

def _matrix_tables(maps: Union[TensorMap, Mapping[str, Any]], d_out: int, d_in: int) -> Tuple[np.ndarray, ...]:
    hashes = maps.hashes if isinstance(maps, TensorMap) else maps
    try:
        h1, s1, h2, s2 = hashes["h1"], hashes["s1"], hashes["h2"], hashes["s2"]
    except KeyError as exc:
        raise SketchConfigError(f"matrix maps need h1, s1, h2, s2 (missing {exc})")
    return _table_for(h1, d_out, "h1"), _table_for(s1, d_out, "s1"), _table_for(h2, d_in, "h2"), _table_for(s2, d_in, "s2")


def _check_matrix_ranges(maps: Union[TensorMap, Mapping[str, Any]], m: int) -> None:
    hashes = maps.hashes if isinstance(maps, TensorMap) else maps
    for key in ("h1", "h2"):
        if key in hashes:
            _check_bucket_range(hashes[key], m)


def _tensor_sketch_factors(U: np.ndarray, V: np.ndarray, tables: Tuple[np.ndarray, ...], m: int) -> np.ndarray:
    """sum_j TS(U[j], V[j]); rows are summed in the Fourier domain, one inverse FFT."""
    h1, s1, h2, s2 = tables
    left = _utils._fft(_count_sketch_rows(U, h1, s1, m))
    right = _utils._fft(_count_sketch_rows(V, h2, s2, m))
    return np.real(_utils._ifft(np.sum(left * right, axis=0)))


def tensor_sketch_pair(u: Union[Sequence[float], np.ndarray], v: Union[Sequence[float], np.ndarray],
                       maps: Union[TensorMap, Mapping[str, Any]], m: int) -> np.ndarray:
    """
    TensorSketch of the outer product u (x) v via circular convolution of two CountSketches.
    Args:
        u: vector of length d_out (hashed by h1, s1)
        v: vector of length d_in (hashed by h2, s2)
        maps: TensorMap or mapping with keys h1, s1, h2, s2
        m (int): sketch dimension, a power of two
    Returns:
        np.ndarray: length-m sketch, bucket of (i, j) is h1(i) + h2(j) mod m
    """
    m = _utils._check_sketch_dim(m)
    u = _utils._as_vector(u, "u")
    v = _utils._as_vector(v, "v")
    _check_matrix_ranges(maps, m)

    h1, s1, h2, s2 = _matrix_tables(maps, u.shape[0], v.shape[0])
    left = _utils._fft(count_sketch(u, h1, s1, m))
    right = _utils._fft(count_sketch(v, h2, s2, m))
    return np.real(_utils._ifft(left * right))


def tensor_sketch_outer_sum(pairs: Sequence[Tuple[np.ndarray, np.ndarray]],
                            maps: Union[TensorMap, Mapping[str, Any]], m: int) -> np.ndarray:
    """
    Sketch of sum_j u_j (x) v_j without materialising any d_out x d_in matrix.
    An empty list sketches the zero matrix.
    """
    m = _utils._check_sketch_dim(m)
    if len(pairs) == 0:
        return np.zeros(m)
    _check_matrix_ranges(maps, m)

    U = np.stack([_utils._as_vector(u, "u") for u, _ in pairs])
    V = np.stack([_utils._as_vector(v, "v") for _, v in pairs])

    return _tensor_sketch_factors(U, V, _matrix_tables(maps, U.shape[1], V.shape[1]), m)


def tensor_sketch_matrix(A: np.ndarray, maps: Union[TensorMap, Mapping[str, Any]], m: int) -> np.ndarray:
    """Definitional sketch of an explicit matrix: sum over (i, j) of [H(i,j) = k] S(i,j) A[i, j]."""
    m = _utils._check_sketch_dim(m, require_power_of_two=False)
    A = _utils._as_matrix(A, "A")
    _check_matrix_ranges(maps, m)

    d_out, d_in = A.shape
    h1, s1, h2, s2 = _matrix_tables(maps, d_out, d_in)
    buckets = (h1[:, None] + h2[None, :]) % m
    weights = s1[:, None] * s2[None, :] * A
    return np.bincount(buckets.ravel(), weights=weights.ravel(), minlength=m)

# -----------------------------------------------------------------------------------------------
# ---- Global block-concatenated sketch ----
# -----------------------------------------------------------------------------------------------

def _check_gradient_names(grads: Mapping[str, Any], plan: SketchPlan) -> None:
    missing = [n for n in plan.names if n not in grads]
    extra = [n for n in grads if n not in set(plan.names)]
    if missing or extra:
        raise SketchConfigError(f"gradient names do not match the plan (missing: {missing}, extra: {extra})")


def sketch_tensor(grad: np.ndarray, tensor_map: TensorMap, m: int) -> np.ndarray:
    """Sketch one materialised gradient tensor with its plan map (CS for vectors, TS for matrices)."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != tensor_map.shape:
        raise SketchConfigError(f"tensor '{tensor_map.name}' has shape {grad.shape}, plan expects {tensor_map.shape}")
    if tensor_map.kind == _constants.VECTOR_KIND:
        return count_sketch(grad, tensor_map.hashes["h"], tensor_map.hashes["s"], m)
    return tensor_sketch_matrix(grad, tensor_map, m)


def global_sketch(grads: Mapping[str, np.ndarray], plan: SketchPlan) -> SketchedVector:
    """
    Concatenate the per-tensor sketches of a named gradient collection in plan order.
    Args:
        grads (Mapping[str, np.ndarray]): one vector or matrix per plan tensor
        plan (SketchPlan): the sketch plan
    Returns:
        SketchedVector: length (alpha + beta) * m
    """
    if not isinstance(plan, SketchPlan):
        raise TypeError(f"'plan' must be a SketchPlan, got '{type(plan).__name__}'")
    _check_gradient_names(grads, plan)

    m = plan.sketch_dim
    blocks = [sketch_tensor(grads[t.name], t, m) for t in plan.per_tensor_maps]
    return SketchedVector(np.concatenate(blocks), plan.plan_id)

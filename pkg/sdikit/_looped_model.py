# A micro weight-tied looped transformer in numpy with hand-derived forward and backward passes.
#
# Every matrix parameter W (shape d_out x d_in) is used in exactly one tokenwise affine map
# c = a @ W.T + b, so the gradient a loop step t contributes to W is sum_j delta_{t,j} (x) a_{t,j}.
# The backward pass emits those (delta, a) row blocks per step through a hook and never forms
# the outer products itself.

import warnings
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from sdikit import _constants
from sdikit._errors import ModelInputError, TrainingDivergedError

ADDITIVE_INJECTION = "additive"
NO_INJECTION = "none"
INJECTIONS = (ADDITIVE_INJECTION, NO_INJECTION)
NONLINEARITIES = ("relu", "gelu")

READ_IN_TENSORS = ("embed", "pos")
BODY_TENSORS = (
    "ln1.gain", "ln1.bias",
    "attn.Wq", "attn.bq", "attn.Wk", "attn.bk", "attn.Wv", "attn.bv", "attn.Wo", "attn.bo",
    "ln2.gain", "ln2.bias",
    "mlp.W1", "mlp.b1", "mlp.W2", "mlp.b2",
)
READ_OUT_TENSORS = ("lnf.gain", "lnf.bias", "out.W", "out.b")

Params = Dict[str, np.ndarray]

# -----------------------------------------------------------------------------------------------
# ---- Configuration ----
# -----------------------------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    """
    Shape and behaviour of the looped transformer.

    Args:
        vocab_size (int): number of token ids
        d_model (int): hidden width
        n_heads (int): attention heads (must divide d_model)
        seq_len (int): length of the positional table, the maximum context
        loop_horizon (int): default number of body applications tau
        injection (str): "additive" (x_t = h_{t-1} + h_0) or "none" (x_t = h_{t-1})
        nonlinearity (str): "relu" or "gelu" in the MLP
        truncation_k (int): if set, only the last k loop steps receive gradient
        causal (bool): causal self-attention mask
        mlp_ratio (int): MLP hidden width is mlp_ratio * d_model
        seed (int): parameter initialisation seed
    """
    vocab_size: int
    d_model: int
    n_heads: int
    seq_len: int
    loop_horizon: int
    injection: str = ADDITIVE_INJECTION
    nonlinearity: str = "gelu"
    truncation_k: Optional[int] = None
    causal: bool = True
    mlp_ratio: int = 4
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "seq_len", "loop_horizon", "mlp_ratio"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise TypeError(f"'{name}' must be an integer, got '{type(value).__name__}'")
            if value < 1:
                raise ValueError(f"'{name}' must be positive, got {value}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if self.injection not in INJECTIONS:
            raise ValueError(f"Invalid injection '{self.injection}'. Options are {INJECTIONS}.")
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"Invalid nonlinearity '{self.nonlinearity}'. Options are {NONLINEARITIES}.")
        if self.truncation_k is not None:
            if self.truncation_k < 1 or self.truncation_k > self.loop_horizon:
                raise ValueError(f"'truncation_k' must lie in [1, {self.loop_horizon}], got {self.truncation_k}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_hidden(self) -> int:
        return self.mlp_ratio * self.d_model

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def preset_config(name: str, **overrides) -> ModelConfig:
    """ModelConfig for a named preset ("micro" or "full") with keyword overrides."""
    if name not in _constants.PRESETS:
        raise ValueError(f"Invalid preset '{name}'. Options are {list(_constants.PRESETS)}.")
    base = dict(_constants.PRESETS[name]["model"])
    base.update(overrides)
    return ModelConfig(**base)


def parameter_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    d, h, v = config.d_model, config.d_hidden, config.vocab_size
    return {
        "embed": (v, d),
        "pos": (config.seq_len, d),
        "ln1.gain": (d,), "ln1.bias": (d,),
        "attn.Wq": (d, d), "attn.bq": (d,),
        "attn.Wk": (d, d), "attn.bk": (d,),
        "attn.Wv": (d, d), "attn.bv": (d,),
        "attn.Wo": (d, d), "attn.bo": (d,),
        "ln2.gain": (d,), "ln2.bias": (d,),
        "mlp.W1": (h, d), "mlp.b1": (h,),
        "mlp.W2": (d, h), "mlp.b2": (d,),
        "lnf.gain": (d,), "lnf.bias": (d,),
        "out.W": (v, d), "out.b": (v,),
    }


def body_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    shapes = parameter_shapes(config)
    return {name: shapes[name] for name in BODY_TENSORS}


def init_parameters(config: ModelConfig, seed: Optional[int] = None) -> Params:
    """Gaussian matrices scaled by 1/sqrt(fan_in), unit LayerNorm gains, zero biases."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".gain"):
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        elif name in READ_IN_TENSORS:
            params[name] = rng.normal(0.0, 1.0, size=shape)
        else:
            scale = 1.0 / np.sqrt(shape[1])
            # output projections start small so early loops stay near the residual path
            if name in ("attn.Wo", "mlp.W2"):
                scale *= 0.5
            params[name] = rng.normal(0.0, scale, size=shape)
    return params


def body_parameters(params: Mapping[str, np.ndarray]) -> Params:
    return {name: params[name] for name in BODY_TENSORS}


def count_body_parameters(config: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in body_shapes(config).values()))

# -----------------------------------------------------------------------------------------------
# ---- Layers ----
# -----------------------------------------------------------------------------------------------

_GELU_C = np.sqrt(2.0 / np.pi)


def _activation(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return 0.5 * z * (1.0 + np.tanh(_GELU_C * (z + 0.044715 * z ** 3)))


def _activation_grad(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    t = np.tanh(_GELU_C * (z + 0.044715 * z ** 3))
    return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * z * z)


def _layer_norm(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    sigma = np.sqrt(var + _constants.LAYER_NORM_EPS)
    return (x - mu) / sigma, sigma


def _layer_norm_backward(dxhat: np.ndarray, xhat: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    return (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) / sigma


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    B, L, d = x.shape
    return x.reshape(B, L, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    B, H, L, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, H * dh)


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def read_in(params: Mapping[str, np.ndarray], tokens: np.ndarray) -> np.ndarray:
    """h_0 = token embedding + positional embedding, shape (B, L, d)."""
    L = tokens.shape[1]
    return params["embed"][tokens] + params["pos"][:L][None, :, :]


def read_out(params: Mapping[str, np.ndarray], h: np.ndarray) -> np.ndarray:
    """Final LayerNorm and linear head: logits of shape (..., vocab)."""
    xhat, _ = _layer_norm(h)
    u = xhat * params["lnf.gain"] + params["lnf.bias"]
    return u @ params["out.W"].T + params["out.b"]


def apply_body(params: Mapping[str, np.ndarray], config: ModelConfig, x: np.ndarray) -> Tuple[np.ndarray, dict]:
    """
    One application of the body F on an injected state x of shape (B, L, d).
    Returns:
        Tuple[np.ndarray, dict]: the new hidden state and the activation cache for backward
    """
    B, L, _ = x.shape
    H = config.n_heads
    scale = 1.0 / np.sqrt(config.d_head)

    xhat1, sigma1 = _layer_norm(x)
    u1 = xhat1 * params["ln1.gain"] + params["ln1.bias"]

    q = _split_heads(u1 @ params["attn.Wq"].T + params["attn.bq"], H)
    k = _split_heads(u1 @ params["attn.Wk"].T + params["attn.bk"], H)
    v = _split_heads(u1 @ params["attn.Wv"].T + params["attn.bv"], H)

    scores = (q @ k.swapaxes(-1, -2)) * scale
    if config.causal:
        future = np.triu(np.ones((L, L), dtype=bool), k=1)
        scores = np.where(future, -np.inf, scores)
    P = _softmax(scores)
    ctx = _merge_heads(P @ v)

    r1 = x + ctx @ params["attn.Wo"].T + params["attn.bo"]

    xhat2, sigma2 = _layer_norm(r1)
    u2 = xhat2 * params["ln2.gain"] + params["ln2.bias"]
    z1 = u2 @ params["mlp.W1"].T + params["mlp.b1"]
    act = _activation(z1, config.nonlinearity)
    h = r1 + act @ params["mlp.W2"].T + params["mlp.b2"]

    cache = {
        "xhat1": xhat1, "sigma1": sigma1, "u1": u1,
        "q": q, "k": k, "v": v, "P": P, "ctx": ctx,
        "xhat2": xhat2, "sigma2": sigma2, "u2": u2, "z1": z1, "act": act,
    }
    return h, cache


HookFn = Callable[[int, str, np.ndarray, Optional[np.ndarray]], None]


def _body_backward(cache: dict, params: Mapping[str, np.ndarray], config: ModelConfig,
                   dh: np.ndarray, emit: Callable[[str, np.ndarray, Optional[np.ndarray]], None]) -> np.ndarray:
    """Backward through one application of F; emits (delta, a) per body tensor, returns dL/dx."""
    H = config.n_heads
    scale = 1.0 / np.sqrt(config.d_head)

    # ---- MLP ----
    emit("mlp.W2", dh, cache["act"])
    emit("mlp.b2", dh, None)
    dz1 = (dh @ params["mlp.W2"]) * _activation_grad(cache["z1"], config.nonlinearity)
    emit("mlp.W1", dz1, cache["u2"])
    emit("mlp.b1", dz1, None)
    du2 = dz1 @ params["mlp.W1"]
    emit("ln2.gain", du2 * cache["xhat2"], None)
    emit("ln2.bias", du2, None)
    dr1 = dh + _layer_norm_backward(du2 * params["ln2.gain"], cache["xhat2"], cache["sigma2"])

    # ---- attention ----
    emit("attn.Wo", dr1, cache["ctx"])
    emit("attn.bo", dr1, None)
    dctx = _split_heads(dr1 @ params["attn.Wo"], H)
    P = cache["P"]
    dP = dctx @ cache["v"].swapaxes(-1, -2)
    dv = P.swapaxes(-1, -2) @ dctx
    dS = P * (dP - np.sum(dP * P, axis=-1, keepdims=True)) * scale
    dq = _merge_heads(dS @ cache["k"])
    dk = _merge_heads(dS.swapaxes(-1, -2) @ cache["q"])
    dv = _merge_heads(dv)

    u1 = cache["u1"]
    emit("attn.Wq", dq, u1)
    emit("attn.bq", dq, None)
    emit("attn.Wk", dk, u1)
    emit("attn.bk", dk, None)
    emit("attn.Wv", dv, u1)
    emit("attn.bv", dv, None)
    du1 = dq @ params["attn.Wq"] + dk @ params["attn.Wk"] + dv @ params["attn.Wv"]
    emit("ln1.gain", du1 * cache["xhat1"], None)
    emit("ln1.bias", du1, None)

    return dr1 + _layer_norm_backward(du1 * params["ln1.gain"], cache["xhat1"], cache["sigma1"])

# -----------------------------------------------------------------------------------------------
# ---- Traces and factors ----
# -----------------------------------------------------------------------------------------------

@dataclass
class StepTrace:
    """
    Everything forward() produced: hidden states h_0..h_tau, readout logits and per-example losses,
    and the per-step activation caches backward needs.
    """
    tokens: np.ndarray
    tau: int
    readout_step: int
    hidden: List[np.ndarray]
    logits: np.ndarray
    losses: np.ndarray
    loss_mask: np.ndarray
    targets: np.ndarray
    caches: List[dict] = field(repr=False)
    params: Mapping[str, np.ndarray] = field(repr=False)
    config: ModelConfig = field(repr=False)

    @property
    def loss(self) -> float:
        return float(np.mean(self.losses))

    @property
    def batch_size(self) -> int:
        return int(self.tokens.shape[0])


@dataclass
class StepFactors:
    """
    Per-step backward signals of the body tensors.

    steps[t - 1] maps tensor name -> (delta, a) for step t, with delta of shape (B, L, d_out)
    and a of shape (B, L, d_in) for matrices (a is None for vectors). A step that receives no
    gradient (beyond the readout step or truncated) holds None.
    """
    tau: int
    batch_size: int
    shapes: Dict[str, Tuple[int, ...]]
    steps: List[Optional[Dict[str, Tuple[np.ndarray, Optional[np.ndarray]]]]]

    def step(self, t: int) -> Optional[Dict[str, Tuple[np.ndarray, Optional[np.ndarray]]]]:
        if not 1 <= t <= self.tau:
            raise ModelInputError(f"step {t} outside [1, {self.tau}]")
        return self.steps[t - 1]

    def active_steps(self) -> List[int]:
        return [t for t in range(1, self.tau + 1) if self.steps[t - 1] is not None]


def _phi(delta: np.ndarray, act: Optional[np.ndarray], example: Optional[int]) -> np.ndarray:
    if example is not None:
        delta = delta[example:example + 1]
        act = None if act is None else act[example:example + 1]
    if act is None:
        return delta.sum(axis=(0, 1))
    return np.einsum("bli,blj->ij", delta, act)


def materialize_step_gradients(factors: StepFactors, example: Optional[int] = None) -> List[Params]:
    """
    Explicit per-step gradients phi_t for every body tensor.
    Args:
        factors (StepFactors): output of backward_with_hooks
        example (int): restrict to one example of the batch (default: sum over the batch)
    Returns:
        List[Dict[str, np.ndarray]]: element t-1 holds phi_t
    """
    if example is not None and not 0 <= example < factors.batch_size:
        raise ModelInputError(f"example {example} outside a batch of {factors.batch_size}")

    out = []
    for step in factors.steps:
        if step is None:
            out.append({name: np.zeros(shape) for name, shape in factors.shapes.items()})
            continue
        out.append({name: _phi(step[name][0], step[name][1], example) for name in factors.shapes})
    return out


def sum_step_gradients(step_grads: Sequence[Mapping[str, np.ndarray]]) -> Params:
    total = {name: np.zeros_like(g) for name, g in step_grads[0].items()}
    for grads in step_grads:
        for name, g in grads.items():
            total[name] += g
    return total

# -----------------------------------------------------------------------------------------------
# ---- Forward ----
# -----------------------------------------------------------------------------------------------

def _check_tokens(tokens: Union[Sequence[int], np.ndarray], config: ModelConfig) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or tokens.shape[1] < 1:
        raise ModelInputError(f"tokens must be a non-empty sequence or (batch, length) array, got shape {tokens.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise ModelInputError(f"tokens must be integers, got dtype {tokens.dtype}")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise ModelInputError(f"token ids must lie in [0, {config.vocab_size}), got range [{tokens.min()}, {tokens.max()}]")
    if tokens.shape[1] > config.seq_len:
        raise ModelInputError(f"sequence length {tokens.shape[1]} exceeds seq_len {config.seq_len}")
    return tokens.astype(np.int64)


def _resolve_tau(config: ModelConfig, tau: Optional[int]) -> int:
    tau = config.loop_horizon if tau is None else int(tau)
    if tau < 1:
        raise ModelInputError(f"loop horizon must be positive, got {tau}")
    return tau


def run_loop(params: Mapping[str, np.ndarray], config: ModelConfig, tokens: np.ndarray,
             tau: Optional[int] = None) -> Tuple[List[np.ndarray], List[dict]]:
    """Hidden states h_0..h_tau and per-step caches, without any loss."""
    tokens = _check_tokens(tokens, config)
    tau = _resolve_tau(config, tau)

    h0 = read_in(params, tokens)
    hidden, caches = [h0], []
    h = h0
    for _ in range(tau):
        x = h + h0 if config.injection == ADDITIVE_INJECTION else h
        h, cache = apply_body(params, config, x)
        hidden.append(h)
        caches.append(cache)
    return hidden, caches


def _default_targets(tokens: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    targets = np.zeros_like(tokens)
    targets[:, :-1] = tokens[:, 1:]
    mask = np.ones(tokens.shape, dtype=bool)
    mask[:, -1] = False
    return targets, mask


def _cross_entropy(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-example mean masked cross-entropy and the softmax probabilities."""
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    counts = mask.sum(axis=1)
    return (nll * mask).sum(axis=1) / counts, np.exp(logp)


def forward(params: Mapping[str, np.ndarray], config: ModelConfig, tokens: Union[Sequence[int], np.ndarray],
            readout_step: Optional[int] = None, loss_mask: Optional[np.ndarray] = None,
            targets: Optional[np.ndarray] = None, tau: Optional[int] = None) -> StepTrace:
    """
    Apply the body tau times and read out at `readout_step`.
    Args:
        params (Dict[str, np.ndarray]): model parameters
        config (ModelConfig): model configuration
        tokens: (L,) or (B, L) token ids, L <= seq_len
        readout_step (int): step whose hidden state feeds the loss (default tau)
        loss_mask (np.ndarray): boolean (B, L); default masks only the last position
        targets (np.ndarray): integer (B, L); default next-token targets
        tau (int): loop horizon for this call (default config.loop_horizon)
    Returns:
        StepTrace
    """
    tokens = _check_tokens(tokens, config)
    tau = _resolve_tau(config, tau)
    readout_step = tau if readout_step is None else int(readout_step)
    if not 1 <= readout_step <= tau:
        raise ModelInputError(f"readout_step must lie in [1, {tau}], got {readout_step}")

    default_targets, default_mask = _default_targets(tokens)
    targets = default_targets if targets is None else np.broadcast_to(np.asarray(targets, dtype=np.int64), tokens.shape)
    loss_mask = default_mask if loss_mask is None else np.broadcast_to(np.asarray(loss_mask, dtype=bool), tokens.shape)

    if np.any(loss_mask.sum(axis=1) == 0):
        raise ModelInputError("every example needs at least one position in its loss mask")
    if np.any(targets[loss_mask] < 0) or np.any(targets[loss_mask] >= config.vocab_size):
        raise ModelInputError(f"targets must lie in [0, {config.vocab_size})")
    targets = np.where(loss_mask, targets, 0)

    hidden, caches = run_loop(params, config, tokens, tau)
    logits = read_out(params, hidden[readout_step])
    losses, _ = _cross_entropy(logits, targets, loss_mask)

    return StepTrace(
        tokens=tokens, tau=tau, readout_step=readout_step, hidden=hidden, logits=logits,
        losses=losses, loss_mask=np.array(loss_mask), targets=np.array(targets),
        caches=caches, params=params, config=config,
    )

# -----------------------------------------------------------------------------------------------
# ---- Backward ----
# -----------------------------------------------------------------------------------------------

def _check_trace(trace: StepTrace, params: Mapping[str, np.ndarray], config: ModelConfig) -> None:
    if not isinstance(trace, StepTrace):
        raise TypeError(f"'trace' must be a StepTrace, got '{type(trace).__name__}'")
    if trace.config != config:
        raise ModelInputError("trace was produced under a different ModelConfig")
    for name in parameter_shapes(config):
        if name not in params:
            raise ModelInputError(f"parameter '{name}' is missing")
        if trace.params[name] is not params[name] and not np.array_equal(trace.params[name], params[name]):
            raise ModelInputError(f"parameter '{name}' differs from the one used to build the trace")


def first_trained_step(config: ModelConfig, tau: int) -> int:
    """Earliest loop step that receives gradient; steps before it are detached by truncation."""
    if config.truncation_k is None:
        return 1
    return max(1, tau - config.truncation_k + 1)


def _backward(trace: StepTrace, params: Mapping[str, np.ndarray], config: ModelConfig,
              hook: Optional[HookFn], weights: np.ndarray, keep_factors: bool,
              need_param_grads: bool) -> Tuple[StepFactors, Optional[Params]]:
    B = trace.batch_size
    tau, r = trace.tau, trace.readout_step
    first = first_trained_step(config, tau)
    shapes = body_shapes(config)

    grads = {name: np.zeros(s) for name, s in parameter_shapes(config).items()} if need_param_grads else None
    steps: List[Optional[dict]] = [None] * tau

    # ---- readout ----
    _, probs = _cross_entropy(trace.logits, trace.targets, trace.loss_mask)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, trace.targets[..., None], 1.0, axis=-1)
    scale = trace.loss_mask / trace.loss_mask.sum(axis=1, keepdims=True) * weights[:, None]
    dlogits = (probs - onehot) * scale[..., None]

    xhat_f, sigma_f = _layer_norm(trace.hidden[r])
    u_f = xhat_f * params["lnf.gain"] + params["lnf.bias"]
    du_f = dlogits @ params["out.W"]
    if need_param_grads:
        grads["out.W"] += np.einsum("blv,bld->vd", dlogits, u_f)
        grads["out.b"] += dlogits.sum(axis=(0, 1))
        grads["lnf.gain"] += (du_f * xhat_f).sum(axis=(0, 1))
        grads["lnf.bias"] += du_f.sum(axis=(0, 1))
    dh = _layer_norm_backward(du_f * params["lnf.gain"], xhat_f, sigma_f)

    # ---- loop steps r, r-1, ..., first ----
    dinj = np.zeros_like(dh)
    for t in range(r, first - 1, -1):
        step_store = {} if keep_factors else None

        def emit(name, delta, act, _t=t, _store=step_store):
            if hook is not None:
                hook(_t, name, delta, act)
            if _store is not None:
                _store[name] = (delta, act)
            if need_param_grads:
                grads[name] += delta.sum(axis=(0, 1)) if act is None else np.einsum("bli,blj->ij", delta, act)

        dx = _body_backward(trace.caches[t - 1], params, config, dh, emit)
        if keep_factors:
            steps[t - 1] = step_store
        if config.injection == ADDITIVE_INJECTION:
            dinj += dx
        dh = dx

    # the state entering step `first` is detached when truncating
    dh0 = dinj + (dh if first == 1 else 0.0)

    if need_param_grads:
        L = trace.tokens.shape[1]
        np.add.at(grads["embed"], trace.tokens.ravel(), dh0.reshape(-1, dh0.shape[-1]))
        grads["pos"][:L] += dh0.sum(axis=0)

    factors = StepFactors(tau=tau, batch_size=B, shapes=shapes, steps=steps)
    return factors, grads


def backward_with_hooks(trace: StepTrace, params: Mapping[str, np.ndarray], config: ModelConfig,
                        hook: Optional[HookFn] = None, keep_factors: bool = True) -> StepFactors:
    """
    Backpropagation through the loop, emitting per-step (delta, a) factors of every body tensor.

    Each example's factors belong to its own loss (per-example gradients, no batch averaging).
    `hook(t, name, delta, a)` is called as soon as a factor is available; with keep_factors=False
    nothing is retained and the returned StepFactors has only None steps.
    Steps after the readout step, and steps before tau - truncation_k + 1, get no factors.
    """
    _check_trace(trace, params, config)
    factors, _ = _backward(trace, params, config, hook, np.ones(trace.batch_size), keep_factors, need_param_grads=False)
    return factors


def total_gradient(params: Mapping[str, np.ndarray], config: ModelConfig, tokens: np.ndarray,
                   readout_step: Optional[int] = None, loss_mask: Optional[np.ndarray] = None,
                   targets: Optional[np.ndarray] = None, tau: Optional[int] = None) -> Tuple[float, Params]:
    """Batch-mean loss and its dense gradient for every parameter (read-in, body and read-out)."""
    trace = forward(params, config, tokens, readout_step, loss_mask, targets, tau)
    weights = np.full(trace.batch_size, 1.0 / trace.batch_size)
    _, grads = _backward(trace, params, config, None, weights, keep_factors=False, need_param_grads=True)
    return trace.loss, grads


def body_gradient(params: Mapping[str, np.ndarray], config: ModelConfig, tokens: np.ndarray,
                  readout_step: Optional[int] = None, loss_mask: Optional[np.ndarray] = None,
                  targets: Optional[np.ndarray] = None, tau: Optional[int] = None) -> Params:
    """dl/dw_body of a single example's loss."""
    tokens = _check_tokens(tokens, config)
    if tokens.shape[0] != 1:
        raise ModelInputError(f"body_gradient takes one example, got a batch of {tokens.shape[0]}")
    _, grads = total_gradient(params, config, tokens, readout_step, loss_mask, targets, tau)
    return body_parameters(grads)

# -----------------------------------------------------------------------------------------------
# ---- Readout diagnostics ----
# -----------------------------------------------------------------------------------------------

def logit_margins(params: Mapping[str, np.ndarray], config: ModelConfig, tokens: np.ndarray,
                  position: int, target: int, tau: Optional[int] = None) -> np.ndarray:
    """
    Readout margin logit[target] - max_{c != target} logit[c] at `position`, for h_1..h_tau
    of a single sequence.
    """
    hidden, _ = run_loop(params, config, tokens, tau)
    if hidden[0].shape[0] != 1:
        raise ModelInputError("logit_margins takes a single sequence")
    states = np.stack([h[0, position] for h in hidden[1:]])
    logits = read_out(params, states)
    others = np.delete(logits, target, axis=1)
    return logits[:, target] - others.max(axis=1)

# -----------------------------------------------------------------------------------------------
# ---- Training ----
# -----------------------------------------------------------------------------------------------

@dataclass
class Batch:
    """Fixed-length batch fed to train_sgd."""
    tokens: np.ndarray
    loss_mask: np.ndarray
    targets: np.ndarray
    readout_step: int
    tau: int


@dataclass
class Checkpoint:
    """Parameters saved during training with the learning rate in force at save time."""
    params: Params
    eta: float
    step: int
    loss: float = float("nan")

    def body(self) -> Params:
        return body_parameters(self.params)


def evaluate_accuracy(params: Mapping[str, np.ndarray], config: ModelConfig, batches: Sequence[Batch]) -> float:
    """Fraction of masked positions whose argmax readout equals the target."""
    correct, total = 0, 0
    for batch in batches:
        trace = forward(params, config, batch.tokens, batch.readout_step, batch.loss_mask, batch.targets, batch.tau)
        pred = trace.logits.argmax(axis=-1)
        correct += int(np.sum((pred == trace.targets) & trace.loss_mask))
        total += int(np.sum(trace.loss_mask))
    if total == 0:
        raise ValueError("no masked positions to evaluate")
    return correct / total


def _learning_rate(schedule: Union[float, Sequence[float], Callable[[int], float]], step: int) -> float:
    if callable(schedule):
        return float(schedule(step))
    if isinstance(schedule, (int, float)):
        return float(schedule)
    return float(schedule[step])


def train_sgd(dataset: Union[Sequence[Batch], Callable[[int, np.random.Generator], Batch]], config: ModelConfig,
              schedule: Union[float, Sequence[float], Callable[[int], float]], checkpoint_every: int,
              n_steps: Optional[int] = None, params: Optional[Params] = None, seed: Optional[int] = None,
              debug: bool = False) -> List[Checkpoint]:
    """
    Plain SGD: w <- w - eta_k * grad of the batch-mean loss.
    Args:
        dataset: a list of Batches (cycled in order) or a callable (step, rng) -> Batch
        config (ModelConfig): model configuration
        schedule: constant learning rate, per-step list, or callable step -> rate
        checkpoint_every (int): save a Checkpoint after every this many steps (and after the last)
        n_steps (int): number of SGD steps (default: len(schedule) or len(dataset))
        params (Dict[str, np.ndarray]): starting parameters (default init_parameters(config))
        seed (int): seed of the batch sampler (default config.seed)
        debug (bool): print progress
    Returns:
        List[Checkpoint]
    """
    if checkpoint_every < 1:
        raise ValueError(f"'checkpoint_every' must be positive, got {checkpoint_every}")
    if n_steps is None:
        if not callable(schedule) and not isinstance(schedule, (int, float)):
            n_steps = len(schedule)
        elif not callable(dataset):
            n_steps = len(dataset)
        else:
            raise ValueError("'n_steps' is required when both the schedule and the dataset are callables")

    rng = np.random.default_rng(config.seed if seed is None else seed)
    params = {k: np.array(v, dtype=np.float64) for k, v in (params or init_parameters(config)).items()}

    checkpoints: List[Checkpoint] = []
    last_finite = float("nan")
    window: List[float] = []

    for step in range(n_steps):
        batch = dataset(step, rng) if callable(dataset) else dataset[step % len(dataset)]
        eta = _learning_rate(schedule, step)

        loss, grads = total_gradient(params, config, batch.tokens, batch.readout_step,
                                     batch.loss_mask, batch.targets, batch.tau)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingDivergedError(
                f"loss became non-finite at step {step} (learning rate {eta}, last finite loss {last_finite})"
            )
        last_finite = loss
        window.append(loss)

        for name in params:
            params[name] -= eta * grads[name]

        done = step + 1
        if done % checkpoint_every == 0 or done == n_steps:
            mean_loss = float(np.mean(window))
            checkpoints.append(Checkpoint({k: v.copy() for k, v in params.items()}, eta, done, mean_loss))
            window = []
            print(f"[train_sgd] step {done}/{n_steps}: loss={mean_loss:.5f} eta={eta}") if debug else None

    if checkpoints and checkpoints[-1].loss > 10 * checkpoints[0].loss:
        warnings.warn(f"training loss grew from {checkpoints[0].loss:.4f} to {checkpoints[-1].loss:.4f}")

    return checkpoints


def with_horizon(config: ModelConfig, loop_horizon: int) -> ModelConfig:
    """Copy of config with a different default loop horizon (truncation_k clipped to it)."""
    k = config.truncation_k
    return replace(config, loop_horizon=loop_horizon, truncation_k=None if k is None else min(k, loop_horizon))

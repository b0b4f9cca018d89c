"""Small feed-forward CNN engine with hand-written backpropagation.

Tensors are plain numpy arrays in (batch, channels, height, width) order.
Parameters and gradients are ordered dicts keyed ``"<layer index>.<name>"``
so that a model cut into fragments keeps the same names in each fragment.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

Params = Dict[str, np.ndarray]
Grads = Dict[str, np.ndarray]

LAYER_KINDS = ("Conv2d", "Norm", "ReLU", "MaxPool", "Flatten", "FullyConnected")
NORM_EPS = 1e-5


class ConfigError(ValueError):
    """Raised for malformed model configurations or mismatched inputs."""


class NonFiniteError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    channels: int = 0  # Conv2d output channels
    kernel: int = 0
    stride: int = 0
    padding: int = 0
    width: int = 0  # FullyConnected output width

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind == "Conv2d":
            if self.channels <= 0 or self.kernel <= 0 or self.stride <= 0 or self.padding < 0:
                raise ConfigError(f"bad Conv2d hyperparameters: {self}")
        elif self.kind == "MaxPool":
            if self.kernel <= 0 or self.stride <= 0 or self.padding != 0:
                raise ConfigError(f"bad MaxPool hyperparameters: {self}")
        elif self.kind == "FullyConnected" and self.width <= 0:
            raise ConfigError(f"bad FullyConnected width: {self}")


def conv(channels: int, kernel: int = 3, stride: int = 2, padding: int = 1) -> LayerSpec:
    return LayerSpec("Conv2d", channels=channels, kernel=kernel, stride=stride, padding=padding)


def maxpool(kernel: int = 2, stride: int = 1) -> LayerSpec:
    return LayerSpec("MaxPool", kernel=kernel, stride=stride)


def fc(width: int) -> LayerSpec:
    return LayerSpec("FullyConnected", width=width)


NORM = LayerSpec("Norm")
RELU = LayerSpec("ReLU")
FLATTEN = LayerSpec("Flatten")


@dataclass(frozen=True)
class ModelConfig:
    """An ordered layer stack.

    ``first_index`` is the global position of ``layers[0]``; it is nonzero
    only for the aggregator fragment of a split model.
    """

    layers: Tuple[LayerSpec, ...]
    input_shape: Tuple[int, ...] = (1, 28, 28)
    num_classes: int = 10
    first_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        shapes = layer_shapes(self)
        if self.layers and self.layers[-1].kind == "FullyConnected":
            if shapes[-1] != (self.num_classes,):
                raise ConfigError(
                    f"final layer yields {shapes[-1]}, expected {self.num_classes} logits"
                )

    @property
    def output_shape(self) -> Tuple[int, ...]:
        return layer_shapes(self)[-1]

    def param_names(self) -> List[str]:
        names = []
        for i, spec in enumerate(self.layers, start=self.first_index):
            if spec.kind in ("Conv2d", "FullyConnected"):
                names += [f"{i}.weight", f"{i}.bias"]
            elif spec.kind == "Norm":
                names += [f"{i}.scale", f"{i}.shift"]
        return names


def default_config(num_classes: int = 10, channels: int = 64, hidden: int = 64,
                   blocks: int = 3, input_shape=(1, 28, 28)) -> ModelConfig:
    layers: List[LayerSpec] = []
    for _ in range(blocks):
        layers += [conv(channels), NORM, RELU, maxpool()]
    layers += [FLATTEN, fc(hidden), RELU, fc(hidden), RELU, fc(num_classes)]
    return ModelConfig(tuple(layers), input_shape, num_classes)


def _out_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def layer_shapes(cfg: ModelConfig) -> List[Tuple[int, ...]]:
    """Per-sample shape entering the stack followed by the output of every layer."""
    shape = tuple(cfg.input_shape)
    out = [shape]
    for spec in cfg.layers:
        if spec.kind in ("Conv2d", "MaxPool"):
            if len(shape) != 3:
                raise ConfigError(f"{spec.kind} needs a (C, H, W) input, got {shape}")
            c, h, w = shape
            h2 = _out_size(h, spec.kernel, spec.stride, spec.padding)
            w2 = _out_size(w, spec.kernel, spec.stride, spec.padding)
            if h2 <= 0 or w2 <= 0:
                raise ConfigError(f"{spec.kind} collapses spatial size {shape}")
            shape = (spec.channels if spec.kind == "Conv2d" else c, h2, w2)
        elif spec.kind == "Norm":
            if len(shape) != 3:
                raise ConfigError("Norm follows a convolution in this engine")
        elif spec.kind == "Flatten":
            shape = (int(np.prod(shape)),)
        elif spec.kind == "FullyConnected":
            if len(shape) != 1:
                raise ConfigError(f"FullyConnected needs a flat input, got {shape}")
            shape = (spec.width,)
        out.append(shape)
    return out


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> Params:
    """Kaiming-uniform fan-in weights, zero biases, unit norm scale.

    The uniform bound is ``1/sqrt(fan_in)``, the default Kaiming-uniform
    variant of common deep-learning frameworks (negative slope sqrt(5)).
    """
    rng = np.random.default_rng(seed)
    shapes = layer_shapes(cfg)
    params: Params = {}
    for j, spec in enumerate(cfg.layers):
        i = cfg.first_index + j
        in_shape = shapes[j]
        if spec.kind == "Conv2d":
            fan_in = in_shape[0] * spec.kernel * spec.kernel
            bound = 1.0 / math.sqrt(fan_in)
            w = rng.uniform(-bound, bound, (spec.channels, in_shape[0], spec.kernel, spec.kernel))
            params[f"{i}.weight"] = w.astype(dtype)
            params[f"{i}.bias"] = np.zeros(spec.channels, dtype)
        elif spec.kind == "FullyConnected":
            bound = 1.0 / math.sqrt(in_shape[0])
            params[f"{i}.weight"] = rng.uniform(-bound, bound, (spec.width, in_shape[0])).astype(dtype)
            params[f"{i}.bias"] = np.zeros(spec.width, dtype)
        elif spec.kind == "Norm":
            params[f"{i}.scale"] = np.ones(in_shape[0], dtype)
            params[f"{i}.shift"] = np.zeros(in_shape[0], dtype)
    return params


def zeros_like_params(params: Params) -> Grads:
    return {k: np.zeros_like(v) for k, v in params.items()}


def copy_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


def params_checksum(params: Params) -> str:
    import hashlib

    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------- layers

def _windows(xp: np.ndarray, k: int, s: int, h2: int, w2: int) -> np.ndarray:
    # (B, C, h2, w2, k, k) strided view into a padded input
    v = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return v[:, :, : (h2 - 1) * s + 1 : s, : (w2 - 1) * s + 1 : s]


def _conv_forward(x, w, b, spec):
    B, C, H, W = x.shape
    k, s, p = spec.kernel, spec.stride, spec.padding
    h2, w2 = _out_size(H, k, s, p), _out_size(W, k, s, p)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = _windows(xp, k, s, h2, w2)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * h2 * w2, C * k * k)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    y = out.reshape(B, h2, w2, -1).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y), (cols, x.shape)


def _conv_backward(dy, w, cache, spec):
    cols, xshape = cache
    B, C, H, W = xshape
    k, s, p = spec.kernel, spec.stride, spec.padding
    _, O, h2, w2 = dy.shape
    dy_mat = dy.transpose(0, 2, 3, 1).reshape(-1, O)
    dw = (dy_mat.T @ cols).reshape(w.shape)
    db = dy_mat.sum(axis=0)
    dcols = (dy_mat @ w.reshape(O, -1)).reshape(B, h2, w2, C, k, k)
    dcols = np.ascontiguousarray(dcols.transpose(4, 5, 0, 3, 1, 2))
    dxp = np.zeros((B, C, H + 2 * p, W + 2 * p), dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + (h2 - 1) * s + 1 : s, j : j + (w2 - 1) * s + 1 : s] += dcols[i, j]
    dx = dxp[:, :, p : p + H, p : p + W] if p else dxp
    return dw, db, dx


def _norm_forward(x, scale, shift):
    # batch statistics only, per channel over (B, H, W)
    mean = x.mean(axis=(0, 2, 3), keepdims=True)
    var = x.var(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + NORM_EPS)
    xhat = (x - mean) * inv
    y = xhat * scale[None, :, None, None] + shift[None, :, None, None]
    return y, (xhat, inv)


def _norm_backward(dy, scale, cache):
    xhat, inv = cache
    n = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dscale = (dy * xhat).sum(axis=(0, 2, 3))
    dshift = dy.sum(axis=(0, 2, 3))
    dxhat = dy * scale[None, :, None, None]
    dx = (inv / n) * (
        n * dxhat
        - dxhat.sum(axis=(0, 2, 3), keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
    )
    return dscale, dshift, dx


def _pool_forward(x, spec):
    B, C, H, W = x.shape
    k, s = spec.kernel, spec.stride
    h2, w2 = _out_size(H, k, s, 0), _out_size(W, k, s, 0)
    cands = [x[:, :, i : i + (h2 - 1) * s + 1 : s, j : j + (w2 - 1) * s + 1 : s]
             for i in range(k) for j in range(k)]
    y = cands[0].copy()
    for c in cands[1:]:
        np.maximum(y, c, out=y)
    # one-hot winner masks in row-major scan order; ties go to the first
    taken = np.zeros(y.shape, dtype=bool)
    masks = []
    for c in cands:
        m = c == y
        m &= ~taken
        taken |= m
        masks.append(m)
    return y, (masks, x.shape)


def _pool_backward(dy, cache, spec):
    masks, xshape = cache
    k, s = spec.kernel, spec.stride
    h2, w2 = dy.shape[2], dy.shape[3]
    dx = np.zeros(xshape, dtype=dy.dtype)
    for idx, m in enumerate(masks):
        i, j = divmod(idx, k)
        dx[:, :, i : i + (h2 - 1) * s + 1 : s, j : j + (w2 - 1) * s + 1 : s] += dy * m
    return dx


# ---------------------------------------------------------------- passes

@dataclass
class ActivationTrace:
    """Per-layer caches from :func:`forward` plus the final output."""

    input_shape: Tuple[int, ...]
    caches: List[Any]
    outputs: List[np.ndarray]
    kinds: List[str] = field(default_factory=list)

    @property
    def logits(self) -> np.ndarray:
        return self.outputs[-1]

    def patterns(self) -> List[np.ndarray]:
        """ReLU masks and pool winner indices; a change flags a kink."""
        pats = []
        for kind, c in zip(self.kinds, self.caches):
            if kind == "ReLU":
                pats.append(c[0])
            elif kind == "MaxPool":
                pats.extend(c[0])
        return pats


def _check_params(params: Params, cfg: ModelConfig):
    for name in cfg.param_names():
        if name not in params:
            raise ConfigError(f"missing parameter {name}")


def forward(params: Params, cfg: ModelConfig, batch: np.ndarray) -> ActivationTrace:
    _check_params(params, cfg)
    batch = np.asarray(batch)
    if batch.ndim != len(cfg.input_shape) + 1 or batch.shape[1:] != cfg.input_shape or batch.shape[0] < 1:
        raise ConfigError(f"batch shape {batch.shape} does not match (B, {cfg.input_shape})")
    dtype = next(iter(params.values())).dtype if params else batch.dtype
    x = batch.astype(dtype, copy=False)
    caches: List[Any] = []
    outputs: List[np.ndarray] = []
    for j, spec in enumerate(cfg.layers):
        i = cfg.first_index + j
        kind = spec.kind
        if kind == "Conv2d":
            x, cache = _conv_forward(x, params[f"{i}.weight"], params[f"{i}.bias"], spec)
        elif kind == "Norm":
            x, cache = _norm_forward(x, params[f"{i}.scale"], params[f"{i}.shift"])
        elif kind == "ReLU":
            mask = x > 0
            x, cache = x * mask, (mask, None)
        elif kind == "MaxPool":
            x, cache = _pool_forward(x, spec)
        elif kind == "Flatten":
            cache = x.shape
            x = x.reshape(x.shape[0], -1)
        else:
            cache = x
            x = x @ params[f"{i}.weight"].T + params[f"{i}.bias"]
        caches.append(cache)
        outputs.append(x)
    return ActivationTrace(batch.shape, caches, outputs, [s.kind for s in cfg.layers])


def backward(params: Params, cfg: ModelConfig, trace: ActivationTrace,
             grad_out: np.ndarray) -> Tuple[Grads, np.ndarray]:
    """Gradients of every parameter and of the input, given d(loss)/d(output)."""
    if len(trace.caches) != len(cfg.layers) or grad_out.shape != trace.outputs[-1].shape:
        raise ConfigError(
            f"stale trace: output {trace.outputs[-1].shape if trace.outputs else None}, "
            f"cotangent {grad_out.shape}"
        )
    grads: Grads = {}
    g = grad_out.astype(trace.outputs[-1].dtype, copy=False)
    for j in reversed(range(len(cfg.layers))):
        spec = cfg.layers[j]
        i = cfg.first_index + j
        cache = trace.caches[j]
        kind = spec.kind
        if kind == "Conv2d":
            dw, db, g = _conv_backward(g, params[f"{i}.weight"], cache, spec)
            grads[f"{i}.weight"], grads[f"{i}.bias"] = dw, db
        elif kind == "Norm":
            ds, dsh, g = _norm_backward(g, params[f"{i}.scale"], cache)
            grads[f"{i}.scale"], grads[f"{i}.shift"] = ds, dsh
        elif kind == "ReLU":
            g = g * cache[0]
        elif kind == "MaxPool":
            g = _pool_backward(g, cache, spec)
        elif kind == "Flatten":
            g = g.reshape(cache)
        else:
            x = cache
            grads[f"{i}.weight"] = g.T @ x
            grads[f"{i}.bias"] = g.sum(axis=0)
            g = g @ params[f"{i}.weight"]
    ordered = {name: grads[name] for name in cfg.param_names()}
    return ordered, g


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_softmax_ce(logits: np.ndarray, labels) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient ``(softmax - onehot) / B``."""
    labels = np.asarray(labels, dtype=np.int64)
    B, Y = logits.shape
    if labels.shape != (B,):
        raise ConfigError(f"expected {B} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= Y):
        raise ValueError(f"label out of range [0, {Y})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp_true = z[np.arange(B), labels] - logsum
    loss = float(-logp_true.mean())
    grad = softmax(logits)
    grad[np.arange(B), labels] -= 1
    grad /= B
    return loss, grad


def per_example_ce(logits: np.ndarray, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    z = logits - logits.max(axis=1, keepdims=True)
    return np.log(np.exp(z).sum(axis=1)) - z[np.arange(len(labels)), labels]


# ---------------------------------------------------------------- optimizers

def _check_finite(grads: Grads):
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in {k}")


def sgd_step(params: Params, grads: Grads, lr: float) -> Params:
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    _check_finite(grads)
    out = {}
    for k, w in params.items():
        g = grads[k]
        if g.shape != w.shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter shape {w.shape} for {k}")
        out[k] = (w - lr * g).astype(w.dtype, copy=False)
    return out


@dataclass
class OptimState:
    kind: str = "Adam"
    m: Grads = field(default_factory=dict)
    v: Grads = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def adam(cls, params: Params) -> "OptimState":
        return cls("Adam", zeros_like_params(params), zeros_like_params(params))

    @classmethod
    def sgd(cls) -> "OptimState":
        return cls("SGD")


def adam_step(params: Params, grads: Grads, lr: float,
              state: OptimState) -> Tuple[Params, OptimState]:
    _check_finite(grads)
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    m, v, out = {}, {}, {}
    for k, w in params.items():
        g = grads[k]
        m[k] = b1 * state.m[k] + (1 - b1) * g
        v[k] = b2 * state.v[k] + (1 - b2) * g * g
        mhat = m[k] / (1 - b1 ** t)
        vhat = v[k] / (1 - b2 ** t)
        out[k] = (w - lr * mhat / (np.sqrt(vhat) + state.eps)).astype(w.dtype, copy=False)
    return out, dataclasses.replace(state, m=m, v=v, step=t)


def optimizer_step(params: Params, grads: Grads, lr: float,
                   state: OptimState) -> Tuple[Params, OptimState]:
    if state.kind == "SGD":
        return sgd_step(params, grads, lr), state
    return adam_step(params, grads, lr, state)


# ---------------------------------------------------------------- verification

def _rel_err(a: float, b: float, floor: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(cfg: ModelConfig, seed: int = 0, eps: float = 1e-5, batch: int = 2,
               n_params: int = 200, floor: float = 1e-6,
               max_tries: Optional[int] = None) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Runs in float64 on a random batch with random labels. Parameters whose
    +/- perturbation flips any ReLU mask or pool winner sit on a kink, where
    the finite difference is meaningless; those are replaced by fresh draws.
    """
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed, np.float64)
    # random norm scale/shift so norm gradients are not trivially structured
    for k in params:
        if k.endswith(".scale") or k.endswith(".shift"):
            params[k] = params[k] + rng.normal(0, 0.1, params[k].shape)
    x = rng.random((batch,) + cfg.input_shape)
    labels = rng.integers(0, cfg.num_classes, batch)

    def loss_and_trace(p):
        tr = forward(p, cfg, x)
        return loss_softmax_ce(tr.logits, labels)[0], tr

    base_loss, trace = loss_and_trace(params)
    _, g_logits = loss_softmax_ce(trace.logits, labels)
    grads, _ = backward(params, cfg, trace, g_logits)

    names = list(params)
    sizes = np.array([params[n].size for n in names])
    worst = 0.0
    checked = 0
    tries = 0
    max_tries = max_tries or 20 * n_params
    # every tensor gets at least one probe, the rest by size
    order = list(range(len(names)))
    while checked < n_params and tries < max_tries:
        if tries < len(order):
            t = order[tries]
        else:
            t = int(rng.choice(len(names), p=sizes / sizes.sum()))
        tries += 1
        name = names[t]
        flat_idx = int(rng.integers(params[name].size))
        idx = np.unravel_index(flat_idx, params[name].shape)
        orig = params[name][idx]
        params[name][idx] = orig + eps
        lp, tp = loss_and_trace(params)
        params[name][idx] = orig - eps
        lm, tm = loss_and_trace(params)
        params[name][idx] = orig
        if any(not np.array_equal(a, b) for a, b in zip(tp.patterns(), tm.patterns())):
            continue
        numeric = (lp - lm) / (2 * eps)
        worst = max(worst, _rel_err(float(grads[name][idx]), numeric, floor))
        checked += 1
    if checked < n_params:
        raise RuntimeError(f"only {checked} kink-free parameters found in {tries} draws")
    return worst


def linear_config(width: int, num_classes: int) -> ModelConfig:
    """Flatten + one FullyConnected layer on a (width,) input."""
    return ModelConfig((FLATTEN, fc(num_classes)), (width,), num_classes)


def total_params(params: Params) -> int:
    return int(sum(v.size for v in params.values()))


def concat_params(parts: Sequence[Params]) -> Params:
    out: Params = {}
    for p in parts:
        out.update(p)
    return out

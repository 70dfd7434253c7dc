"""Minimal differentiable-network engine.

Dense float32 arrays in channels-last layout (N, H, W, C), a fixed layer
vocabulary (conv2d, maxpool, avgpool, fullyconnected, relu, softmax),
explicit forward caches, hand-written backward passes, ADAM, and a
finite-difference gradient checker.

Design constraints:
  * parameters and activations are float32; pooling and other reductions
    accumulate in float64 before casting back,
  * forward is a pure function of (params, input) and is bit-deterministic,
  * inference on an immutable parameter snapshot is thread-safe; a network
    being trained is owned by exactly one training loop,
  * any non-finite value in an output or gradient raises NumericError.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericError

CONV2D = "conv2d"
MAXPOOL = "maxpool"
AVGPOOL = "avgpool"
FULLYCONNECTED = "fullyconnected"
RELU = "relu"
SOFTMAX = "softmax"

LAYER_KINDS = (CONV2D, MAXPOOL, AVGPOOL, FULLYCONNECTED, RELU, SOFTMAX)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a sequential network.

    ``kernel``/``stride``/``padding`` apply to conv2d and the pools
    (pools require stride == kernel and evenly divisible spatial dims).
    ``out_channels`` is the unit count for fullyconnected layers;
    ``in_channels`` may be 0 and is filled in by ``build_network``.
    """

    kind: str
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    in_channels: int = 0
    out_channels: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


def conv(out_channels: int, kernel: int = 3, stride: int = 1, padding: int = 1) -> LayerSpec:
    return LayerSpec(CONV2D, kernel=kernel, stride=stride, padding=padding, out_channels=out_channels)


def maxpool(kernel: int = 2) -> LayerSpec:
    return LayerSpec(MAXPOOL, kernel=kernel, stride=kernel)


def avgpool(kernel: int) -> LayerSpec:
    return LayerSpec(AVGPOOL, kernel=kernel, stride=kernel)


def fc(out_channels: int) -> LayerSpec:
    return LayerSpec(FULLYCONNECTED, out_channels=out_channels)


def relu() -> LayerSpec:
    return LayerSpec(RELU)


def softmax() -> LayerSpec:
    return LayerSpec(SOFTMAX)


def _out_spatial(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ConfigError(f"layer reduces spatial size {size} below 1 (kernel={kernel}, stride={stride}, padding={padding})")
    return out


def infer_shapes(specs, input_shape):
    """Per-sample output shape after each layer; raises ConfigError on misfits."""
    shapes = []
    shape = tuple(int(s) for s in input_shape)
    for i, spec in enumerate(specs):
        if spec.kind == CONV2D:
            if len(shape) != 3:
                raise ConfigError(f"layer {i}: conv2d needs (H, W, C) input, got {shape}")
            h, w, c = shape
            if spec.in_channels and spec.in_channels != c:
                raise ConfigError(f"layer {i}: conv2d expects {spec.in_channels} channels, got {c}")
            shape = (
                _out_spatial(h, spec.kernel, spec.stride, spec.padding),
                _out_spatial(w, spec.kernel, spec.stride, spec.padding),
                spec.out_channels,
            )
        elif spec.kind in (MAXPOOL, AVGPOOL):
            if len(shape) != 3:
                raise ConfigError(f"layer {i}: {spec.kind} needs (H, W, C) input, got {shape}")
            h, w, c = shape
            k = spec.kernel
            if spec.stride != k:
                raise ConfigError(f"layer {i}: {spec.kind} supports stride == kernel only")
            if h % k or w % k:
                raise ConfigError(f"layer {i}: {spec.kind} kernel {k} does not tile {h}x{w}")
            shape = (h // k, w // k, c)
        elif spec.kind == FULLYCONNECTED:
            n_in = int(np.prod(shape))
            if spec.in_channels and spec.in_channels != n_in:
                raise ConfigError(f"layer {i}: fullyconnected expects {spec.in_channels} inputs, got {n_in}")
            shape = (spec.out_channels,)
        elif spec.kind in (RELU, SOFTMAX):
            pass
        else:
            raise ConfigError(f"layer {i}: unknown layer kind {spec.kind!r}")
        shapes.append(shape)
    return shapes


class Network:
    """A sequential stack of layers with a flat parameter dict.

    Parameters are keyed ``L{i}.w`` / ``L{i}.b``. The dict is shared, not
    copied; training loops mutate the arrays in place via the optimizer.
    """

    def __init__(self, specs, params, input_shape):
        self.specs = tuple(specs)
        self.params = params
        self.input_shape = tuple(int(s) for s in input_shape)
        self.output_shapes = infer_shapes(self.specs, self.input_shape)

    @property
    def output_shape(self):
        return self.output_shapes[-1] if self.specs else self.input_shape

    def param_count(self) -> int:
        return sum(int(p.size) for p in self.params.values())

    def copy(self, dtype=None) -> "Network":
        params = {k: np.array(v, dtype=dtype or v.dtype) for k, v in self.params.items()}
        return Network(self.specs, params, self.input_shape)


def build_network(specs, input_shape, rng: np.random.Generator) -> Network:
    """He-normal weights for conv/fc (ReLU fan-in scaling), zero biases.

    The RNG is mandatory: reproducibility of every trained model is a
    contract, so there is no implicit global seed path.
    """
    shapes = infer_shapes(specs, input_shape)
    params = {}
    shape = tuple(input_shape)
    normalized = []
    for i, spec in enumerate(specs):
        if spec.kind == CONV2D:
            cin = shape[2]
            fan_in = spec.kernel * spec.kernel * cin
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(spec.kernel, spec.kernel, cin, spec.out_channels))
            params[f"L{i}.w"] = w.astype(np.float32)
            params[f"L{i}.b"] = np.zeros(spec.out_channels, dtype=np.float32)
            spec = dataclasses.replace(spec, in_channels=cin)
        elif spec.kind == FULLYCONNECTED:
            n_in = int(np.prod(shape))
            w = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, spec.out_channels))
            params[f"L{i}.w"] = w.astype(np.float32)
            params[f"L{i}.b"] = np.zeros(spec.out_channels, dtype=np.float32)
            spec = dataclasses.replace(spec, in_channels=n_in)
        normalized.append(spec)
        shape = shapes[i]
    return Network(normalized, params, input_shape)


# ---------------------------------------------------------------------------
# layer forward/backward


def _conv2d_forward(x, w, b, stride, padding):
    n = x.shape[0]
    kh, kw, cin, cout = w.shape
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    hp, wp = x.shape[1], x.shape[2]
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * oh * ow, kh * kw * cin)
    y = cols @ w.reshape(kh * kw * cin, cout) + b
    return y.reshape(n, oh, ow, cout), (cols, x.shape)


def _conv2d_backward(dy, w, cache, stride, padding):
    cols, xp_shape = cache
    n, oh, ow, cout = dy.shape
    kh, kw, cin, _ = w.shape
    dy2 = dy.reshape(n * oh * ow, cout)
    dw = (cols.T @ dy2).reshape(kh, kw, cin, cout)
    db = dy2.sum(axis=0, dtype=np.float64).astype(dy.dtype)
    dwin = (dy2 @ w.reshape(kh * kw * cin, cout).T).reshape(n, oh, ow, kh, kw, cin)
    dxp = np.zeros(xp_shape, dtype=dy.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += dwin[:, :, :, i, j, :]
    if padding:
        dxp = dxp[:, padding:-padding, padding:-padding, :]
    return dxp, dw, db


def _pool_windows(x, k):
    n, h, w, c = x.shape
    oh, ow = h // k, w // k
    xr = x.reshape(n, oh, k, ow, k, c)
    return np.ascontiguousarray(xr.transpose(0, 1, 3, 5, 2, 4)).reshape(n, oh, ow, c, k * k)


def _maxpool_forward(x, k):
    win = _pool_windows(x, k)
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, (idx, x.shape)


def _maxpool_backward(dy, cache, k):
    idx, x_shape = cache
    n, oh, ow, c = dy.shape
    onehot = (np.arange(k * k) == idx[..., None]).astype(dy.dtype)
    dwin = (onehot * dy[..., None]).reshape(n, oh, ow, c, k, k)
    return dwin.transpose(0, 1, 4, 2, 5, 3).reshape(x_shape)


def _avgpool_forward(x, k):
    # upcast first, then reduce the contiguous window axis: the identical
    # float64 row-major reduction masked GAP uses, so the two agree bitwise
    win = _pool_windows(x, k).astype(np.float64)
    y = (win.sum(axis=-1) / (k * k)).astype(x.dtype)
    return y, (x.shape,)


def _avgpool_backward(dy, cache, k):
    (x_shape,) = cache
    n, oh, ow, c = dy.shape
    dwin = np.broadcast_to((dy / (k * k))[..., None], (n, oh, ow, c, k * k))
    dwin = dwin.reshape(n, oh, ow, c, k, k)
    return dwin.transpose(0, 1, 4, 2, 5, 3).reshape(x_shape)


def _fc_forward(x, w, b):
    n = x.shape[0]
    x2 = x.reshape(n, -1)
    return x2 @ w + b, (x2, x.shape)


def _fc_backward(dy, w, cache):
    x2, x_shape = cache
    dw = x2.T @ dy
    db = dy.sum(axis=0, dtype=np.float64).astype(dy.dtype)
    dx = (dy @ w.T).reshape(x_shape)
    return dx, dw, db


def _relu_forward(x):
    return np.maximum(x, 0), (x,)


def _relu_backward(dy, cache):
    (x,) = cache
    return dy * (x > 0)


def stable_softmax(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis; invariant to a constant shift of the logits."""
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_backward(dy, y):
    inner = (dy * y).sum(axis=-1, keepdims=True)
    return y * (dy - inner)


# ---------------------------------------------------------------------------
# network forward/backward


def forward(net: Network, x: np.ndarray):
    """Run the net on a batch; returns (output, caches).

    ``x`` is (N, *net.input_shape). The cache list holds per-layer state
    sufficient for :func:`backward` on the same input.
    """
    x = np.asarray(x)
    if x.shape[1:] != net.input_shape:
        raise ConfigError(f"input shape {x.shape[1:]} does not match network input {net.input_shape}")
    caches = []
    for i, spec in enumerate(net.specs):
        if spec.kind == CONV2D:
            x, cache = _conv2d_forward(x, net.params[f"L{i}.w"], net.params[f"L{i}.b"], spec.stride, spec.padding)
        elif spec.kind == MAXPOOL:
            x, cache = _maxpool_forward(x, spec.kernel)
        elif spec.kind == AVGPOOL:
            x, cache = _avgpool_forward(x, spec.kernel)
        elif spec.kind == FULLYCONNECTED:
            x, cache = _fc_forward(x, net.params[f"L{i}.w"], net.params[f"L{i}.b"])
        elif spec.kind == RELU:
            x, cache = _relu_forward(x)
        elif spec.kind == SOFTMAX:
            x = stable_softmax(x)
            cache = (x,)
        caches.append(cache)
    if not np.isfinite(x).all():
        raise NumericError("non-finite values in forward output")
    return x, caches


def infer(net: Network, x: np.ndarray) -> np.ndarray:
    """Forward pass without keeping caches; safe to call concurrently."""
    return forward(net, x)[0]


def backward(net: Network, caches, dy: np.ndarray, upto: int | None = None):
    """Backpropagate ``dy`` (gradient w.r.t. the net output) through all layers.

    Returns (grads, dx) where grads maps parameter names to arrays of the
    parameter's shape. Pass ``upto`` to start below the top (used for the
    fused cross-entropy path, which injects the logits gradient beneath
    the final softmax).
    """
    if len(caches) != len(net.specs):
        raise ConfigError("cache does not match network; run forward() on the same input first")
    grads = {}
    start = len(net.specs) - 1 if upto is None else upto
    for i in range(start, -1, -1):
        spec = net.specs[i]
        if spec.kind == CONV2D:
            dy, dw, db = _conv2d_backward(dy, net.params[f"L{i}.w"], caches[i], spec.stride, spec.padding)
            grads[f"L{i}.w"] = dw
            grads[f"L{i}.b"] = db
        elif spec.kind == MAXPOOL:
            dy = _maxpool_backward(dy, caches[i], spec.kernel)
        elif spec.kind == AVGPOOL:
            dy = _avgpool_backward(dy, caches[i], spec.kernel)
        elif spec.kind == FULLYCONNECTED:
            dy, dw, db = _fc_backward(dy, net.params[f"L{i}.w"], caches[i])
            grads[f"L{i}.w"] = dw
            grads[f"L{i}.b"] = db
        elif spec.kind == RELU:
            dy = _relu_backward(dy, caches[i])
        elif spec.kind == SOFTMAX:
            dy = _softmax_backward(dy, caches[i][0])
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
    if not np.isfinite(dy).all():
        raise NumericError("non-finite input gradient")
    return grads, dy


def backward_from_logits(net: Network, caches, dlogits: np.ndarray):
    """Backward pass that starts just below a terminal softmax layer.

    This is the training path: :func:`cross_entropy_loss` differentiates
    the loss w.r.t. the logits directly (softmax and log fused), which is
    exact where backprop through a saturated softmax is not.
    """
    if not net.specs or net.specs[-1].kind != SOFTMAX:
        raise ConfigError("backward_from_logits requires a network ending in softmax")
    return backward(net, caches, dlogits, upto=len(net.specs) - 2)


def cross_entropy_loss(probabilities: np.ndarray, labels):
    """Mean negative log-likelihood plus its gradient w.r.t. the logits.

    ``probabilities`` is (N, K) softmax output (rows must sum to 1 within
    1e-5); ``labels`` are class indices. p(label) is clamped at 1e-12
    before the log so saturated-wrong predictions yield a large finite
    loss. The logits gradient is (p - onehot) / N, exact regardless of
    the clamp.
    """
    p = np.asarray(probabilities)
    single = p.ndim == 1
    if single:
        p = p[None, :]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, k = p.shape
    if labels.shape != (n,):
        raise ConfigError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise ConfigError(f"label out of range for {k} classes")
    sums = p.sum(axis=-1)
    if np.abs(sums - 1.0).max() > 1e-5:
        raise ConfigError("probabilities do not sum to 1; pass softmax output")
    picked = p[np.arange(n), labels]
    loss = float(-np.log(np.maximum(picked, LOG_CLAMP), dtype=np.float64).mean())
    onehot = np.zeros_like(p)
    onehot[np.arange(n), labels] = 1
    dlogits = (p - onehot) / n
    return loss, (dlogits[0] if single else dlogits)


# ---------------------------------------------------------------------------
# ADAM


class Adam:
    """Bias-corrected ADAM over a named parameter dict.

    Per-parameter learning rates (``param_lrs``) support the dual-rate
    whole-image training where the stem learns slower than the head.
    The step counter ``t`` increases by exactly 1 per step.
    """

    def __init__(self, params: dict, lr: float, betas=(ADAM_BETA1, ADAM_BETA2), eps: float = ADAM_EPS, param_lrs: dict | None = None):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.lr = {name: float((param_lrs or {}).get(name, lr)) for name in params}
        self.m = {name: np.zeros_like(p) for name, p in params.items()}
        self.v = {name: np.zeros_like(p) for name, p in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name in sorted(params):
            g = grads[name]
            if g.shape != params[name].shape:
                raise ConfigError(f"gradient shape {g.shape} does not match parameter {name} {params[name].shape}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params[name] -= self.lr[name] * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    entries: list
    h: float
    tol: float

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def summary(self) -> str:
        lines = [f"gradient check (h={self.h:g}, tol={self.tol:g}): {'PASS' if self.passed else 'FAIL'}"]
        for e in self.entries:
            lines.append(f"  {e.name:24s} max rel err {e.max_rel_error:.3e} {'ok' if e.passed else 'FAIL'}")
        return "\n".join(lines)


MAX_CHECKABLE_PARAMS = 100_000


def gradient_check_fn(fn, params: dict, h: float = 1e-5, tol: float = 1e-3, abs_floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``fn(params, with_grads)`` returns (loss, grads-or-None). Parameters
    should be float64 for a meaningful comparison; the perturbation is
    applied in place and restored. The small default step keeps central
    differences from straddling ReLU/maxpool kinks; float64 headroom
    means truncation stays orders of magnitude under the tolerance. Per component the error is
    |a - n| / max(|a|, |n|, abs_floor), reported as a per-tensor maximum.
    """
    total = sum(int(p.size) for p in params.values())
    if total > MAX_CHECKABLE_PARAMS:
        raise ConfigError(f"{total} parameters exceed the finite-difference budget of {MAX_CHECKABLE_PARAMS}")
    _, grads = fn(params, True)
    entries = []
    for name in sorted(params):
        p = params[name]
        analytic = np.asarray(grads[name], dtype=np.float64)
        numeric = np.zeros(p.size, dtype=np.float64)
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp, _ = fn(params, False)
            flat[i] = orig - h
            lm, _ = fn(params, False)
            flat[i] = orig
            numeric[i] = (lp - lm) / (2.0 * h)
        numeric = numeric.reshape(p.shape)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), abs_floor)
        rel = float((np.abs(analytic - numeric) / denom).max()) if p.size else 0.0
        entries.append(GradCheckEntry(name, rel, rel <= tol))
    return GradCheckReport(entries, h, tol)


def gradient_check(net: Network, x: np.ndarray, labels, h: float = 1e-5, tol: float = 1e-3) -> GradCheckReport:
    """Finite-difference check of a softmax-terminated network under
    cross-entropy loss. Runs on float64 copies; the net is not modified."""
    net64 = net.copy(dtype=np.float64)
    x64 = np.asarray(x, dtype=np.float64)

    def fn(params, with_grads):
        trial = Network(net64.specs, params, net64.input_shape)
        probs, caches = forward(trial, x64)
        loss, dlogits = cross_entropy_loss(probs, labels)
        if not with_grads:
            return loss, None
        grads, _ = backward_from_logits(trial, caches, dlogits)
        return loss, grads

    return gradient_check_fn(fn, net64.params, h=h, tol=tol)

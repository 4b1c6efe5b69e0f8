"""Dense numerical kernels with analytic backward passes.

All arrays are plain numpy ndarrays in (B, C, H, W) layout for images and
(rows, channels) for token sequences.  Every kernel is a pure function:
forward functions take arrays and return arrays, backward functions take the
original inputs plus the upstream gradient and return exact gradients.
Kernels run in float32 for training and float64 for gradient checking; the
dtype of the input arrays decides.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf


class ShapeError(ValueError):
    """Raised when tensor shapes violate an operation's contract."""


class NonFiniteError(FloatingPointError):
    """Raised when a kernel produces NaN or Inf from finite inputs."""


def check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {name}")
    return arr


# ---------------------------------------------------------------------------
# MAC accounting
# ---------------------------------------------------------------------------

_MAC_TALLY = None


@contextlib.contextmanager
def count_macs():
    """Context manager collecting multiply-accumulate counts per op label.

    Only convolutions, dense matrix products and rational polynomial
    evaluations contribute; normalizations and elementwise ops are excluded
    by convention.
    """
    global _MAC_TALLY
    prev = _MAC_TALLY
    _MAC_TALLY = {}
    try:
        yield _MAC_TALLY
    finally:
        _MAC_TALLY = prev


def _tally_macs(label, n):
    if _MAC_TALLY is not None:
        _MAC_TALLY[label] = _MAC_TALLY.get(label, 0) + int(n)


# ---------------------------------------------------------------------------
# Padding
# ---------------------------------------------------------------------------


def _pad2d(x, pad, mode):
    if pad == 0:
        return x
    if mode == "zero":
        return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    if mode == "reflect":
        n = min(x.shape[2], x.shape[3])
        if pad > n - 1:
            raise ShapeError(f"reflect pad {pad} too large for spatial size {n}")
        return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
    raise ValueError(f"unknown pad mode {mode!r}")


def _unpad2d_grad(gp, pad, mode, out_h, out_w):
    """Fold the gradient of a padded array back onto the unpadded one."""
    if pad == 0:
        return gp
    if mode == "zero":
        return gp[:, :, pad:pad + out_h, pad:pad + out_w]
    # Reflect padding is separable (rows then columns), so fold columns
    # first, then rows.
    g = gp.copy()
    for k in range(pad):
        g[:, :, :, pad + (pad - k)] += g[:, :, :, k]
        g[:, :, :, pad + out_w - 2 - k] += g[:, :, :, pad + out_w + k]
    g = g[:, :, :, pad:pad + out_w]
    for k in range(pad):
        g[:, :, pad + (pad - k), :] += g[:, :, k, :]
        g[:, :, pad + out_h - 2 - k, :] += g[:, :, pad + out_h + k, :]
    return g[:, :, pad:pad + out_h, :]


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def _conv_cols(x, k, stride, padding, pad_mode):
    xp = _pad2d(x, padding, pad_mode)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(b * ho * wo, c * k * k), (ho, wo), xp.shape


def conv2d(x, w, b=None, stride=1, padding=0, pad_mode="zero"):
    """2-D cross-correlation over (B, Cin, H, W) with square kernels."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and weight")
    bs, cin, h, wd = x.shape
    cout, cin_w, k, k2 = w.shape
    if k != k2:
        raise ShapeError("conv2d requires square kernels")
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {cin}, weight {cin_w}")
    if h + 2 * padding < k or wd + 2 * padding < k:
        raise ShapeError("conv2d input smaller than kernel after padding")
    if stride < 1:
        raise ShapeError("conv2d stride must be >= 1")
    cols, (ho, wo), _ = _conv_cols(x, k, stride, padding, pad_mode)
    y = cols @ w.reshape(cout, -1).T
    if b is not None:
        y = y + b
    _tally_macs("conv2d", bs * ho * wo * cout * cin * k * k)
    y = y.reshape(bs, ho, wo, cout).transpose(0, 3, 1, 2)
    return check_finite("conv2d output", y)


def conv2d_backward(x, w, gy, stride=1, padding=0, pad_mode="zero", has_bias=True):
    """Exact gradients of conv2d w.r.t. input, weight and bias."""
    bs, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    cols, (ho, wo), xp_shape = _conv_cols(x, k, stride, padding, pad_mode)
    if gy.shape != (bs, cout, ho, wo):
        raise ShapeError(
            f"conv2d_backward upstream shape {gy.shape} != {(bs, cout, ho, wo)}")
    g2 = np.ascontiguousarray(gy.transpose(0, 2, 3, 1)).reshape(-1, cout)
    gw = (g2.T @ cols).reshape(w.shape)
    gb = gy.sum(axis=(0, 2, 3)) if has_bias else None
    gcols = g2 @ w.reshape(cout, -1)
    gc = gcols.reshape(bs, ho, wo, cin, k, k).transpose(0, 3, 1, 2, 4, 5)
    gxp = np.zeros(xp_shape, dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gc[..., i, j]
    gx = _unpad2d_grad(gxp, padding, pad_mode, h, wd)
    return gx, gw, gb


# ---------------------------------------------------------------------------
# Depth-to-space and friends
# ---------------------------------------------------------------------------


def pixel_shuffle(x, r):
    """Depth-to-space: (B, C*r*r, H, W) -> (B, C, r*H, r*W)."""
    b, c, h, w = x.shape
    if c % (r * r) != 0:
        raise ShapeError(f"pixel_shuffle: {c} channels not divisible by r^2={r * r}")
    co = c // (r * r)
    y = x.reshape(b, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(y.reshape(b, co, h * r, w * r))


def space_to_depth(x, r):
    """Inverse of pixel_shuffle: (B, C, r*H, r*W) -> (B, C*r*r, H, W)."""
    b, c, h, w = x.shape
    if h % r != 0 or w % r != 0:
        raise ShapeError("space_to_depth: spatial size not divisible by r")
    y = x.reshape(b, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(y.reshape(b, c * r * r, h // r, w // r))


def avg_pool(x, r):
    b, c, h, w = x.shape
    if h % r != 0 or w % r != 0:
        raise ShapeError("avg_pool: spatial size not divisible by pooling rate")
    return x.reshape(b, c, h // r, r, w // r, r).mean(axis=(3, 5))


def avg_pool_backward(gy, r):
    g = np.repeat(np.repeat(gy, r, axis=2), r, axis=3)
    return g / (r * r)


def nearest_upsample(x, r):
    return np.repeat(np.repeat(x, r, axis=2), r, axis=3)


def nearest_upsample_backward(gy, r):
    b, c, h, w = gy.shape
    return gy.reshape(b, c, h // r, r, w // r, r).sum(axis=(3, 5))


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def instance_norm(x, gamma, beta, eps=1e-5):
    """Per-(sample, channel) normalization over the spatial axes."""
    b, c, h, w = x.shape
    if h * w < 2:
        raise ShapeError("instance_norm on a 1x1 spatial map is degenerate")
    mu = x.mean(axis=(2, 3), keepdims=True)
    var = x.var(axis=(2, 3), keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    y = xhat * gamma.reshape(1, c, 1, 1) + beta.reshape(1, c, 1, 1)
    return check_finite("instance_norm output", y)


def instance_norm_backward(x, gamma, gy, eps=1e-5):
    b, c, h, w = x.shape
    n = h * w
    mu = x.mean(axis=(2, 3), keepdims=True)
    var = x.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    ggamma = (gy * xhat).sum(axis=(0, 2, 3))
    gbeta = gy.sum(axis=(0, 2, 3))
    gxhat = gy * gamma.reshape(1, c, 1, 1)
    s1 = gxhat.sum(axis=(2, 3), keepdims=True)
    s2 = (gxhat * xhat).sum(axis=(2, 3), keepdims=True)
    gx = inv / n * (n * gxhat - s1 - xhat * s2)
    return gx, ggamma, gbeta


def layer_norm(t, gamma, beta, eps=1e-5):
    """Per-row normalization over the channel axis of (rows, C) tokens."""
    if t.shape[-1] < 2:
        raise ShapeError("layer_norm needs at least 2 channels")
    mu = t.mean(axis=-1, keepdims=True)
    var = t.var(axis=-1, keepdims=True)
    xhat = (t - mu) / np.sqrt(var + eps)
    return check_finite("layer_norm output", xhat * gamma + beta)


def layer_norm_backward(t, gamma, gy, eps=1e-5):
    n = t.shape[-1]
    mu = t.mean(axis=-1, keepdims=True)
    var = t.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (t - mu) * inv
    flat_axes = tuple(range(t.ndim - 1))
    ggamma = (gy * xhat).sum(axis=flat_axes)
    gbeta = gy.sum(axis=flat_axes)
    gxhat = gy * gamma
    s1 = gxhat.sum(axis=-1, keepdims=True)
    s2 = (gxhat * xhat).sum(axis=-1, keepdims=True)
    gt = inv / n * (n * gxhat - s1 - xhat * s2)
    return gt, ggamma, gbeta


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
LRELU_SLOPE = 0.1


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def activation(x, kind):
    """Elementwise activation; kinds: relu, lrelu (slope 0.1), gelu, silu, tanh."""
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "lrelu":
        return np.where(x >= 0, x, LRELU_SLOPE * x)
    if kind == "silu":
        return x * sigmoid(x)
    if kind == "gelu":
        return 0.5 * x * (1.0 + erf(x / _SQRT2))
    if kind == "tanh":
        return np.tanh(x)
    raise ValueError(f"unknown activation kind {kind!r}")


def activation_backward(x, kind, gy):
    if kind == "relu":
        return gy * (x > 0)
    if kind == "lrelu":
        return gy * np.where(x >= 0, 1.0, LRELU_SLOPE)
    if kind == "silu":
        s = sigmoid(x)
        return gy * (s * (1.0 + x * (1.0 - s)))
    if kind == "gelu":
        cdf = 0.5 * (1.0 + erf(x / _SQRT2))
        return gy * (cdf + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI)
    if kind == "tanh":
        t = np.tanh(x)
        return gy * (1.0 - t * t)
    raise ValueError(f"unknown activation kind {kind!r}")


def lrelu(x, slope):
    return np.where(x >= 0, x, slope * x)


def lrelu_backward(x, slope, gy):
    return gy * np.where(x >= 0, 1.0, slope)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment buffers and step counter for one parameter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(m=np.zeros_like(param), v=np.zeros_like(param),
                   lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(param, grad, state, lr=None):
    """Bias-corrected Adam update, applied to ``param`` in place."""
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise ShapeError("adam_step shape mismatch")
    state.t += 1
    step_lr = state.lr if lr is None else lr
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    mhat = state.m / (1.0 - state.beta1 ** state.t)
    vhat = state.v / (1.0 - state.beta2 ** state.t)
    param -= step_lr * mhat / (np.sqrt(vhat) + state.eps)
    return param, state


# ---------------------------------------------------------------------------
# Module base
# ---------------------------------------------------------------------------


class Module:
    """Base class owning named parameter arrays and their gradients.

    Forward passes return ``(output, cache)``; backward passes take the
    cache plus the upstream gradient and accumulate into ``self.grads``.
    Weight sharing across several forward passes before a single optimizer
    step therefore sums gradients, as required.
    """

    def __init__(self):
        self.params = {}
        self.grads = {}

    def add_param(self, name, arr):
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)

    def accumulate(self, name, g):
        self.grads[name] += g

    def children(self):
        for value in self.__dict__.values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield item

    def named_parameters(self, prefix=""):
        for name in self.params:
            yield (prefix + name, self, name)
        for attr, value in self.__dict__.items():
            if isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{attr}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{attr}.{i}.")

    def zero_grads(self):
        for name in self.grads:
            self.grads[name][...] = 0.0
        for child in self.children():
            child.zero_grads()

    def set_dtype(self, dtype):
        for name in list(self.params):
            self.params[name] = self.params[name].astype(dtype)
            self.grads[name] = self.grads[name].astype(dtype)
        for child in self.children():
            child.set_dtype(dtype)

    def num_params(self):
        return sum(owner.params[key].size for _, owner, key in self.named_parameters())


class Adam:
    """Adam over every parameter of one or more modules."""

    def __init__(self, modules, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.entries = []
        for module in modules:
            for name, owner, key in module.named_parameters():
                state = AdamState.for_param(owner.params[key], lr=lr,
                                            beta1=beta1, beta2=beta2, eps=eps)
                self.entries.append((name, owner, key, state))

    def step(self, lr=None):
        for _, owner, key, state in self.entries:
            adam_step(owner.params[key], owner.grads[key], state, lr=lr)

    def named_states(self):
        for name, _, _, state in self.entries:
            yield name, state


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    worst_index: tuple
    checked: int


@dataclass
class GradCheckReport:
    tolerance: float
    entries: list = field(default_factory=list)

    @property
    def passed(self):
        return all(e.max_rel_error < self.tolerance for e in self.entries)

    @property
    def max_rel_error(self):
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def failure_message(self):
        bad = [e for e in self.entries if e.max_rel_error >= self.tolerance]
        if not bad:
            return ""
        worst = max(bad, key=lambda e: e.max_rel_error)
        return (f"gradient mismatch in {worst.name} at index {worst.worst_index}: "
                f"rel error {worst.max_rel_error:.3e} >= {self.tolerance:.1e}")


def finite_diff_check(loss_fn, tensors, analytic, h=1e-5, tolerance=1e-4,
                      max_checks=24, rng=None):
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` recomputes the scalar loss from the live arrays in
    ``tensors`` (mutated in place during probing, then restored).  Up to
    ``max_checks`` randomly sampled elements per tensor are probed.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    report = GradCheckReport(tolerance=tolerance)
    for name, arr in tensors.items():
        if arr.dtype != np.float64:
            raise ValueError(f"finite_diff_check requires float64 arrays ({name})")
        grad = analytic[name]
        size = arr.size
        idx = np.arange(size) if size <= max_checks else rng.choice(
            size, size=max_checks, replace=False)
        flat = arr.reshape(-1)
        max_rel, worst = 0.0, (0,)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn()
            flat[i] = orig - h
            lm = loss_fn()
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * h)
            a = grad.reshape(-1)[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            if rel > max_rel:
                max_rel, worst = rel, np.unravel_index(i, arr.shape)
        report.entries.append(GradCheckEntry(name, max_rel, worst, len(idx)))
    return report

"""Group-rational KAN layer: safe rational activations shared across channel
groups, followed by a full linear map."""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from .tensor import Module, ShapeError, _tally_macs, activation, check_finite


@dataclass
class RationalParams:
    """Per-group coefficients of the safe rational activation.

    ``a`` has shape (groups, m + 1), ``b`` has shape (groups, n).  The
    denominator is 1 + |b1*x + ... + bn*x^n|, so it is >= 1 for every real
    input and the function is total.
    """

    a: np.ndarray
    b: np.ndarray

    @property
    def groups(self):
        return self.a.shape[0]

    @property
    def m(self):
        return self.a.shape[1] - 1

    @property
    def n(self):
        return self.b.shape[1]


def _group_view(x, groups):
    c = x.shape[-1]
    if c % groups != 0:
        raise ShapeError(f"{c} channels not divisible into {groups} groups")
    return x.reshape(x.shape[:-1] + (groups, c // groups))


def _poly_terms(xg, a, b):
    """Horner evaluation of P(x), Qt(x) = b1*x + ... + bn*x^n per group."""
    m = a.shape[1] - 1
    n = b.shape[1]
    ae = a.reshape((1,) * (xg.ndim - 2) + (a.shape[0], 1, m + 1))
    be = b.reshape((1,) * (xg.ndim - 2) + (b.shape[0], 1, n))
    p = np.broadcast_to(ae[..., m], xg.shape).copy()
    for k in range(m - 1, -1, -1):
        p = p * xg + ae[..., k]
    qt = np.broadcast_to(be[..., n - 1], xg.shape).copy()
    for k in range(n - 2, -1, -1):
        qt = qt * xg + be[..., k]
    qt = qt * xg
    return p, qt


def rational_eval(x, params, group_index=None):
    """Safe rational F(x) = P(x) / (1 + |Qt(x)|), elementwise.

    With ``group_index`` the chosen group's coefficients apply to the whole
    array; otherwise the last axis is split into contiguous channel groups.
    """
    a, b = params.a, params.b
    if group_index is not None:
        a = a[group_index:group_index + 1]
        b = b[group_index:group_index + 1]
        p, qt = _poly_terms(np.asarray(x).reshape((-1, 1, 1)), a, b)
        y = (p / (1.0 + np.abs(qt))).reshape(np.shape(x))
    else:
        xg = _group_view(x, params.groups)
        p, qt = _poly_terms(xg, a, b)
        y = (p / (1.0 + np.abs(qt))).reshape(x.shape)
    _tally_macs("rational", x.size * (params.m + params.n + 2))
    return check_finite("rational_eval output", y)


def rational_backward(x, params, upstream, group_index=None):
    """Gradients of rational_eval w.r.t. x and both coefficient banks.

    At the nondifferentiable point Qt(x) = 0 the subgradient of abs() is 0.
    """
    a, b = params.a, params.b
    m, n = params.m, params.n
    if group_index is not None:
        a = a[group_index:group_index + 1]
        b = b[group_index:group_index + 1]
        xg = x.reshape((-1, 1, 1))
        gyg = upstream.reshape((-1, 1, 1))
    else:
        xg = _group_view(x, params.groups)
        gyg = _group_view(upstream, params.groups)
    p, qt = _poly_terms(xg, a, b)
    q = 1.0 + np.abs(qt)
    sgn = np.sign(qt)

    # dP/dx and dQt/dx by Horner on the derivative polynomials.
    ae = a.reshape((1,) * (xg.ndim - 2) + (a.shape[0], 1, m + 1))
    be = b.reshape((1,) * (xg.ndim - 2) + (b.shape[0], 1, n))
    dp = np.broadcast_to(m * ae[..., m], xg.shape).copy()
    for k in range(m - 1, 0, -1):
        dp = dp * xg + k * ae[..., k]
    dqt = np.broadcast_to(n * be[..., n - 1], xg.shape).copy()
    for k in range(n - 1, 0, -1):
        dqt = dqt * xg + k * be[..., k - 1]

    gx = gyg * (dp / q - p * sgn * dqt / (q * q))

    # Coefficient gradients: dF/da_k = x^k / Q, dF/db_k = -P*sgn*x^k / Q^2.
    red_axes = tuple(range(xg.ndim - 2)) + (xg.ndim - 1,)
    ga = np.empty_like(a)
    gb = np.empty_like(b)
    u_over_q = gyg / q
    u_p_q2 = gyg * p * sgn / (q * q)
    xpow = np.ones_like(xg)
    for k in range(max(m, n) + 1):
        if k <= m:
            ga[:, k] = (u_over_q * xpow).sum(axis=red_axes)
        if 1 <= k <= n:
            gb[:, k - 1] = (-u_p_q2 * xpow).sum(axis=red_axes)
        xpow = xpow * xg

    if group_index is not None:
        gx = gx.reshape(x.shape)
        ga_full = np.zeros_like(params.a)
        gb_full = np.zeros_like(params.b)
        ga_full[group_index] = ga[0]
        gb_full[group_index] = gb[0]
        return gx, ga_full, gb_full
    return gx.reshape(x.shape), ga, gb


@functools.lru_cache(maxsize=None)
def _fit_silu_cached(m, n):
    xs = np.linspace(-3.0, 3.0, 501)
    target = activation(xs, "silu")
    # Linearized init: P(x) - target * Qt(x) ~= target, linear in (a, b).
    cols = [xs ** k for k in range(m + 1)]
    cols += [-target * xs ** k for k in range(1, n + 1)]
    design = np.stack(cols, axis=1)
    coef, *_ = np.linalg.lstsq(design, target, rcond=None)

    def residual(theta):
        a = theta[:m + 1]
        b = theta[m + 1:]
        p = np.polyval(a[::-1], xs)
        qt = xs * np.polyval(b[::-1], xs) if n else np.zeros_like(xs)
        return p / (1.0 + np.abs(qt)) - target

    sol = least_squares(residual, coef, method="lm", xtol=1e-14, ftol=1e-14)
    return sol.x[:m + 1].copy(), sol.x[m + 1:].copy()


def fit_silu_coefficients(m=5, n=4):
    """Least-squares rational fit of SiLU over [-3, 3] (501 samples)."""
    a, b = _fit_silu_cached(m, n)
    return a.copy(), b.copy()


class GRKANLayer(Module):
    """Grouped rational activation followed by a dense linear map.

    The rational scaling factor is folded into the linear weight, so the
    layer's parameters are the coefficient banks plus (weight, bias).
    """

    def __init__(self, d_in, d_out, groups=8, m=5, n=4):
        super().__init__()
        if d_in % groups != 0:
            raise ShapeError(f"d_in={d_in} not divisible by groups={groups}")
        self.d_in = d_in
        self.d_out = d_out
        self.groups = groups
        self.add_param("a", np.zeros((groups, m + 1), dtype=np.float32))
        self.add_param("b", np.zeros((groups, n), dtype=np.float32))
        self.add_param("weight", np.zeros((d_out, d_in), dtype=np.float32))
        self.add_param("bias", np.zeros(d_out, dtype=np.float32))

    @property
    def rational(self):
        return RationalParams(self.params["a"], self.params["b"])

    def forward(self, tokens):
        if tokens.shape[-1] != self.d_in:
            raise ShapeError(f"expected {self.d_in} channels, got {tokens.shape[-1]}")
        act = rational_eval(tokens, self.rational)
        w = self.params["weight"]
        y = act @ w.T + self.params["bias"]
        rows = act.size // self.d_in
        _tally_macs("linear", rows * self.d_in * self.d_out)
        return check_finite("grkan output", y), (tokens, act)

    def backward(self, cache, gy):
        tokens, act = cache
        w = self.params["weight"]
        act2 = act.reshape(-1, self.d_in)
        gy2 = gy.reshape(-1, self.d_out)
        self.accumulate("weight", gy2.T @ act2)
        self.accumulate("bias", gy2.sum(axis=0))
        gact = (gy2 @ w).reshape(tokens.shape)
        gx, ga, gb = rational_backward(tokens, self.rational, gact)
        self.accumulate("a", ga)
        self.accumulate("b", gb)
        return gx


def grkan_forward(tokens, layer):
    y, _ = layer.forward(tokens)
    return y


def grkan_init(d_in, d_out, groups=8, mode="fit_silu", rng=None, m=5, n=4):
    """Build a GRKANLayer; ``identity`` sets F(x)=x, ``fit_silu`` starts the
    activation at a rational fit of SiLU (identical across groups)."""
    if rng is None:
        rng = np.random.default_rng(0)
    layer = GRKANLayer(d_in, d_out, groups=groups, m=m, n=n)
    if mode == "identity":
        layer.params["a"][:, 1] = 1.0
    elif mode == "fit_silu":
        a, b = fit_silu_coefficients(m, n)
        layer.params["a"][:] = a
        layer.params["b"][:] = b
    else:
        raise ValueError(f"unknown init mode {mode!r}")
    layer.params["weight"][:] = rng.normal(
        0.0, 1.0 / np.sqrt(d_in), size=(d_out, d_in))
    layer.set_dtype(np.float32)
    return layer

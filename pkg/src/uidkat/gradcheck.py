"""Finite-difference verification suite for every analytic backward pass.

Each check builds a small randomized problem in float64, computes analytic
gradients, and compares them against central differences.  Single ops are
held to 1e-4 relative error, composed blocks to 1e-3.
"""

from __future__ import annotations

import numpy as np

from .grkan import RationalParams, grkan_init, rational_backward, rational_eval
from .kat_block import BlockConfig, KATBlock
from .losses import (PatchSample, identity_grad, identity_loss,
                     lsgan_discriminator_grads, lsgan_discriminator_loss,
                     lsgan_generator_grad, lsgan_generator_loss,
                     patch_nce_loss)
from .networks import FeatureStack, ProjectionHead, SCConv
from .tensor import (conv2d, conv2d_backward, finite_diff_check,
                     instance_norm, instance_norm_backward, layer_norm,
                     layer_norm_backward)

SINGLE_OP_TOL = 1e-4
BLOCK_TOL = 1e-3


def _weighted_sum(y, wts):
    return float((y * wts).sum())


def check_rational(rng):
    x = rng.normal(size=(6, 16))
    params = RationalParams(rng.normal(scale=0.5, size=(8, 6)),
                            rng.normal(scale=0.5, size=(8, 4)))
    wts = rng.normal(size=x.shape)
    gx, ga, gb = rational_backward(x, params, wts)
    return finite_diff_check(
        lambda: _weighted_sum(rational_eval(x, params), wts),
        {"x": x, "a": params.a, "b": params.b},
        {"x": gx, "a": ga, "b": gb},
        tolerance=SINGLE_OP_TOL, rng=rng)


def check_grkan(rng):
    layer = grkan_init(16, 12, groups=8, mode="fit_silu", rng=rng)
    layer.set_dtype(np.float64)
    x = rng.normal(size=(5, 16))
    wts = rng.normal(size=(5, 12))

    def loss():
        y, _ = layer.forward(x)
        return _weighted_sum(y, wts)

    layer.zero_grads()
    y, cache = layer.forward(x)
    gx = layer.backward(cache, wts)
    tensors = {"x": x, **layer.params}
    analytic = {"x": gx, **layer.grads}
    return finite_diff_check(loss, tensors, analytic,
                             tolerance=SINGLE_OP_TOL, rng=rng)


def check_conv2d(rng):
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(scale=0.3, size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    wts = None
    reports = []
    for stride, pad, mode in [(1, 1, "zero"), (2, 1, "zero"), (1, 2, "reflect")]:
        y = conv2d(x, w, b, stride, pad, mode)
        wts = rng.normal(size=y.shape)
        gx, gw, gb = conv2d_backward(x, w, wts, stride, pad, mode)
        rep = finite_diff_check(
            lambda s=stride, p=pad, m=mode: _weighted_sum(
                conv2d(x, w, b, s, p, m), wts),
            {"x": x, "w": w, "b": b}, {"x": gx, "w": gw, "b": gb},
            tolerance=SINGLE_OP_TOL, rng=rng)
        reports.append(rep)
    worst = max(reports, key=lambda r: r.max_rel_error)
    return worst


def check_layer_norm(rng):
    t = rng.normal(size=(7, 12))
    gamma = rng.normal(size=12)
    beta = rng.normal(size=12)
    wts = rng.normal(size=t.shape)
    gx, gg, gb = layer_norm_backward(t, gamma, wts)
    return finite_diff_check(
        lambda: _weighted_sum(layer_norm(t, gamma, beta), wts),
        {"t": t, "gamma": gamma, "beta": beta},
        {"t": gx, "gamma": gg, "beta": gb},
        tolerance=SINGLE_OP_TOL, rng=rng)


def check_instance_norm(rng):
    x = rng.normal(size=(2, 4, 5, 6))
    gamma = rng.normal(size=4)
    beta = rng.normal(size=4)
    wts = rng.normal(size=x.shape)
    gx, gg, gb = instance_norm_backward(x, gamma, wts)
    return finite_diff_check(
        lambda: _weighted_sum(instance_norm(x, gamma, beta), wts),
        {"x": x, "gamma": gamma, "beta": beta},
        {"x": gx, "gamma": gg, "beta": gb},
        tolerance=SINGLE_OP_TOL, rng=rng)


def check_scconv(rng):
    sc = SCConv(8, rng)
    sc.set_dtype(np.float64)
    x = rng.normal(size=(1, 8, 8, 8))
    wts = rng.normal(size=(1, 8, 8, 8))

    def loss():
        y, _ = sc.forward(x)
        return _weighted_sum(y, wts)

    sc.zero_grads()
    y, cache = sc.forward(x)
    gx = sc.backward(cache, wts)
    tensors = {"x": x}
    analytic = {"x": gx}
    for name, owner, key in sc.named_parameters():
        tensors[name] = owner.params[key]
        analytic[name] = owner.grads[key]
    return finite_diff_check(loss, tensors, analytic,
                             tolerance=BLOCK_TOL, max_checks=6, rng=rng)


def check_kat_block(rng):
    cfg = BlockConfig(channels=8, patch_size=2, embed_dim=16, groups=4)
    block = KATBlock(cfg, rng)
    block.set_dtype(np.float64)
    x = rng.normal(size=(1, 8, 6, 6))
    wts = rng.normal(size=x.shape)

    def loss():
        y, _ = block.forward(x)
        return _weighted_sum(y, wts)

    block.zero_grads()
    y, cache = block.forward(x)
    gx = block.backward(cache, wts)
    tensors = {"x": x}
    analytic = {"x": gx}
    for name, owner, key in block.named_parameters():
        tensors[name] = owner.params[key]
        analytic[name] = owner.grads[key]
    return finite_diff_check(loss, tensors, analytic,
                             tolerance=BLOCK_TOL, max_checks=6, rng=rng)


def check_lsgan(rng):
    fake = rng.normal(size=(1, 1, 5, 5))
    real = rng.normal(size=(1, 1, 5, 5))
    g_fake = lsgan_generator_grad(fake)
    gr, gf = lsgan_discriminator_grads(real, fake)
    rep1 = finite_diff_check(
        lambda: lsgan_generator_loss(fake), {"fake": fake}, {"fake": g_fake},
        tolerance=SINGLE_OP_TOL, rng=rng)
    rep2 = finite_diff_check(
        lambda: lsgan_discriminator_loss(real, fake),
        {"real": real, "fake": fake}, {"real": gr, "fake": gf},
        tolerance=SINGLE_OP_TOL, rng=rng)
    return max([rep1, rep2], key=lambda r: r.max_rel_error)


def check_identity(rng):
    a = rng.normal(size=(1, 3, 6, 6))
    b = rng.normal(size=(1, 3, 6, 6))
    g = identity_grad(a, b)
    return finite_diff_check(
        lambda: identity_loss(a, b), {"a": a}, {"a": g},
        tolerance=SINGLE_OP_TOL, rng=rng)


def check_patch_nce(rng):
    head = ProjectionHead(6, rng, dim=10)
    head.set_dtype(np.float64)
    f_in = rng.normal(size=(1, 6, 5, 5))
    f_out = rng.normal(size=(1, 6, 5, 5))

    def run(compute_grads):
        head.zero_grads()
        return patch_nce_loss(
            FeatureStack(["a"], [f_in]), FeatureStack(["a"], [f_out]),
            [head], 6, np.random.default_rng(7),
            compute_grads=compute_grads)

    res = run(True)
    tensors = {"f_in": f_in, "f_out": f_out, **head.params}
    analytic = {"f_in": res.input_grads[0], "f_out": res.output_grads[0],
                **{k: v.copy() for k, v in head.grads.items()}}
    return finite_diff_check(lambda: run(False).loss, tensors, analytic,
                             tolerance=BLOCK_TOL, max_checks=10, rng=rng)


SUITE = [
    ("rational_eval", check_rational),
    ("grkan_layer", check_grkan),
    ("conv2d", check_conv2d),
    ("layer_norm", check_layer_norm),
    ("instance_norm", check_instance_norm),
    ("scconv", check_scconv),
    ("dual_grkan_block", check_kat_block),
    ("lsgan", check_lsgan),
    ("identity_loss", check_identity),
    ("patch_nce", check_patch_nce),
]


def run_suite(seed=0):
    """Run every check; returns a list of (name, GradCheckReport)."""
    results = []
    for name, fn in SUITE:
        rng = np.random.default_rng(seed)
        results.append((name, fn(rng)))
    return results

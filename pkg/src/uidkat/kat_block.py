"""Patch-token transformer block built from grouped-rational KAN mixers.

The block embeds a (B, C, H, W) feature map into patch tokens, runs a stack
of (norm -> mixer -> residual) units over the channel dimension of each
token, and unembeds back to the original feature shape via a 1x1 convolution
followed by a depth-to-space rearrangement.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .grkan import grkan_init
from .tensor import (Module, ShapeError, _tally_macs, activation,
                     activation_backward, check_finite, conv2d,
                     conv2d_backward, layer_norm, layer_norm_backward,
                     pixel_shuffle, space_to_depth)

MIXER_KINDS = ("grkan", "mlp", "attention", "identity")


@dataclass
class BlockConfig:
    channels: int
    patch_size: int = 4
    embed_dim: int = 256
    token_mixer: str = "grkan"
    channel_mixer: str = "grkan"
    grkan_stack: int = 2
    groups: int = 8

    def validate(self):
        if self.token_mixer not in MIXER_KINDS:
            raise ValueError(f"unknown token mixer {self.token_mixer!r}")
        if self.channel_mixer not in MIXER_KINDS:
            raise ValueError(f"unknown channel mixer {self.channel_mixer!r}")
        if not 1 <= self.grkan_stack <= 4:
            raise ValueError(f"grkan_stack must be in 1..4, got {self.grkan_stack}")
        if self.embed_dim % self.groups != 0:
            raise ShapeError("embed_dim not divisible by GR-KAN group count")


def _fan_in_normal(rng, shape, fan_in, dtype=np.float32):
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# Mixers (all map (B, N, D) -> (B, N, D); norm and residual are the caller's)
# ---------------------------------------------------------------------------


class IdentityMixer(Module):
    kind = "identity"

    def forward(self, t):
        return t, None

    def backward(self, cache, gy):
        return gy


class GRKANMixer(Module):
    kind = "grkan"

    def __init__(self, dim, groups, rng):
        super().__init__()
        self.layer = grkan_init(dim, dim, groups=groups, mode="fit_silu", rng=rng)

    def forward(self, t):
        y, cache = self.layer.forward(t)
        return y, cache

    def backward(self, cache, gy):
        return self.layer.backward(cache, gy)


class MlpMixer(Module):
    """Two dense layers with GELU between; hidden width 4x the token dim."""

    kind = "mlp"

    def __init__(self, dim, rng):
        super().__init__()
        hidden = 4 * dim
        self.add_param("w1", _fan_in_normal(rng, (hidden, dim), dim))
        self.add_param("b1", np.zeros(hidden, dtype=np.float32))
        self.add_param("w2", _fan_in_normal(rng, (dim, hidden), hidden))
        self.add_param("b2", np.zeros(dim, dtype=np.float32))

    def forward(self, t):
        h = t @ self.params["w1"].T + self.params["b1"]
        a = activation(h, "gelu")
        y = a @ self.params["w2"].T + self.params["b2"]
        rows = t.size // t.shape[-1]
        _tally_macs("linear", rows * t.shape[-1] * h.shape[-1] * 2)
        return y, (t, h, a)

    def backward(self, cache, gy):
        t, h, a = cache
        dim = t.shape[-1]
        hid = h.shape[-1]
        gy2 = gy.reshape(-1, dim)
        a2 = a.reshape(-1, hid)
        self.accumulate("w2", gy2.T @ a2)
        self.accumulate("b2", gy2.sum(axis=0))
        ga = (gy2 @ self.params["w2"]).reshape(h.shape)
        gh = activation_backward(h, "gelu", ga)
        gh2 = gh.reshape(-1, hid)
        t2 = t.reshape(-1, dim)
        self.accumulate("w1", gh2.T @ t2)
        self.accumulate("b1", gh2.sum(axis=0))
        return (gh2 @ self.params["w1"]).reshape(t.shape)


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class AttentionMixer(Module):
    """Single-head scaled dot-product self-attention over the token axis."""

    kind = "attention"

    def __init__(self, dim, rng):
        super().__init__()
        for name in ("wq", "wk", "wv", "wo"):
            self.add_param(name, _fan_in_normal(rng, (dim, dim), dim))
        self.add_param("bo", np.zeros(dim, dtype=np.float32))
        self.dim = dim

    def forward(self, t):
        q = t @ self.params["wq"].T
        k = t @ self.params["wk"].T
        v = t @ self.params["wv"].T
        scale = 1.0 / np.sqrt(self.dim)
        att = _softmax(np.einsum("bnd,bmd->bnm", q, k) * scale)
        ctx = np.einsum("bnm,bmd->bnd", att, v)
        y = ctx @ self.params["wo"].T + self.params["bo"]
        b, n, d = t.shape
        _tally_macs("linear", b * n * d * d * 4)
        _tally_macs("linear", 2 * b * n * n * d)
        return check_finite("attention output", y), (t, q, k, v, att, ctx)

    def backward(self, cache, gy):
        t, q, k, v, att, ctx = cache
        d = self.dim
        gy2 = gy.reshape(-1, d)
        self.accumulate("wo", gy2.T @ ctx.reshape(-1, d))
        self.accumulate("bo", gy2.sum(axis=0))
        gctx = (gy2 @ self.params["wo"]).reshape(ctx.shape)
        gatt = np.einsum("bnd,bmd->bnm", gctx, v)
        gv = np.einsum("bnm,bnd->bmd", att, gctx)
        # softmax backward per row
        gz = att * (gatt - (gatt * att).sum(axis=-1, keepdims=True))
        scale = 1.0 / np.sqrt(d)
        gq = np.einsum("bnm,bmd->bnd", gz, k) * scale
        gk = np.einsum("bnm,bnd->bmd", gz, q) * scale
        gt = np.zeros_like(t)
        t2 = t.reshape(-1, d)
        for name, g in (("wq", gq), ("wk", gk), ("wv", gv)):
            g2 = g.reshape(-1, d)
            self.accumulate(name, g2.T @ t2)
            gt += (g2 @ self.params[name]).reshape(t.shape)
        return gt

    def attention_map(self, t):
        q = t @ self.params["wq"].T
        k = t @ self.params["wk"].T
        return _softmax(np.einsum("bnd,bmd->bnm", q, k) / np.sqrt(self.dim))


def make_mixer(kind, dim, groups, rng):
    if kind == "identity":
        return IdentityMixer()
    if kind == "grkan":
        return GRKANMixer(dim, groups, rng)
    if kind == "mlp":
        return MlpMixer(dim, rng)
    if kind == "attention":
        return AttentionMixer(dim, rng)
    raise ValueError(f"unknown mixer kind {kind!r}")


def mixer_forward(tokens, kind, mixer):
    """Raw mixer output for (B, N, D) tokens (no norm, no residual)."""
    if kind != mixer.kind:
        raise ValueError(f"mixer kind mismatch: {kind!r} vs {mixer.kind!r}")
    y, _ = mixer.forward(tokens)
    return y


# ---------------------------------------------------------------------------
# Patch embedding / unembedding
# ---------------------------------------------------------------------------


def patch_embed(feat, weight, bias, patch_size):
    """Conv C->D with kernel=stride=P, flattened to (B, N, D) tokens."""
    b, c, h, w = feat.shape
    p = patch_size
    if h % p != 0 or w % p != 0:
        raise ShapeError(f"spatial size {h}x{w} not divisible by patch size {p}")
    y = conv2d(feat, weight, bias, stride=p, padding=0)
    d = y.shape[1]
    return np.ascontiguousarray(y.transpose(0, 2, 3, 1)).reshape(b, -1, d)


def patch_unembed(tokens, weight, bias, patch_size, out_hw):
    """1x1 conv D -> C*P^2 on the token grid, then depth-to-space by P."""
    b, n, d = tokens.shape
    h, w = out_hw
    p = patch_size
    gh, gw = h // p, w // p
    if n != gh * gw:
        raise ShapeError(f"token count {n} does not match grid {gh}x{gw}")
    grid = np.ascontiguousarray(tokens.reshape(b, gh, gw, d).transpose(0, 3, 1, 2))
    y = conv2d(grid, weight, bias, stride=1, padding=0)
    return pixel_shuffle(y, p)


class KATBlock(Module):
    """Embed -> n x (norm -> mixer -> residual) -> unembed, shape preserving."""

    def __init__(self, cfg: BlockConfig, rng):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c, d, p = cfg.channels, cfg.embed_dim, cfg.patch_size
        self.add_param("embed_w", _fan_in_normal(rng, (d, c, p, p), c * p * p))
        self.add_param("embed_b", np.zeros(d, dtype=np.float32))
        kinds = self._mixer_kinds()
        self.mixers = []
        for kind in kinds:
            self.add_param(f"ln{len(self.mixers)}_g", np.ones(d, dtype=np.float32))
            self.add_param(f"ln{len(self.mixers)}_b", np.zeros(d, dtype=np.float32))
            self.mixers.append(make_mixer(kind, d, cfg.groups, rng))
        self.add_param("unembed_w", _fan_in_normal(rng, (c * p * p, d, 1, 1), d))
        self.add_param("unembed_b", np.zeros(c * p * p, dtype=np.float32))

    def _mixer_kinds(self):
        cfg = self.cfg
        if cfg.token_mixer == "grkan" and cfg.channel_mixer == "grkan":
            return ["grkan"] * cfg.grkan_stack
        return [cfg.token_mixer, cfg.channel_mixer]

    def forward(self, feat):
        cfg = self.cfg
        if feat.shape[1] != cfg.channels:
            raise ShapeError(f"expected {cfg.channels} channels, got {feat.shape[1]}")
        hw = feat.shape[2:]
        t = patch_embed(feat, self.params["embed_w"], self.params["embed_b"],
                        cfg.patch_size)
        unit_caches = []
        for i, mixer in enumerate(self.mixers):
            g = self.params[f"ln{i}_g"]
            b = self.params[f"ln{i}_b"]
            normed = layer_norm(t, g, b)
            out, mcache = mixer.forward(normed)
            unit_caches.append((t, normed, mcache))
            t = t + out
        out = patch_unembed(t, self.params["unembed_w"], self.params["unembed_b"],
                            cfg.patch_size, hw)
        cache = (feat, unit_caches, t, hw)
        return out, cache

    def backward(self, bcache, gy):
        cfg = self.cfg
        feat, unit_caches, t_final, hw = bcache
        p = cfg.patch_size
        b = feat.shape[0]
        gh, gw = hw[0] // p, hw[1] // p
        d = cfg.embed_dim
        # unembed backward
        ggrid_out = space_to_depth(gy, p)
        grid_in = np.ascontiguousarray(
            t_final.reshape(b, gh, gw, d).transpose(0, 3, 1, 2))
        gx, gw_u, gb_u = conv2d_backward(grid_in, self.params["unembed_w"],
                                         ggrid_out, stride=1, padding=0)
        self.accumulate("unembed_w", gw_u)
        self.accumulate("unembed_b", gb_u)
        gt = np.ascontiguousarray(gx.transpose(0, 2, 3, 1)).reshape(b, -1, d)
        # mixer units in reverse
        for i in range(len(self.mixers) - 1, -1, -1):
            t_in, normed, mcache = unit_caches[i]
            gout = gt
            gnormed = self.mixers[i].backward(mcache, gout)
            gn, gg, gbb = layer_norm_backward(t_in, self.params[f"ln{i}_g"], gnormed)
            self.accumulate(f"ln{i}_g", gg)
            self.accumulate(f"ln{i}_b", gbb)
            gt = gt + gn
        # embed backward
        gtok_grid = np.ascontiguousarray(
            gt.reshape(b, gh, gw, d).transpose(0, 3, 1, 2))
        gfeat, gw_e, gb_e = conv2d_backward(feat, self.params["embed_w"], gtok_grid,
                                            stride=p, padding=0)
        self.accumulate("embed_w", gw_e)
        self.accumulate("embed_b", gb_e)
        return gfeat


def dual_grkan_forward(feat, block):
    """Forward through a block configured as the dual GR-KAN variant."""
    cfg = block.cfg
    if not (cfg.token_mixer == cfg.channel_mixer == "grkan" and cfg.grkan_stack == 2):
        raise ValueError("dual_grkan_forward requires the 2x GR-KAN configuration")
    y, _ = block.forward(feat)
    return y


def n_grkan_forward(feat, block):
    """Forward through an n x GR-KAN stack (n = cfg.grkan_stack)."""
    y, _ = block.forward(feat)
    return y


def build_block(channels, rng, **overrides):
    cfg = replace(BlockConfig(channels=channels), **overrides)
    return KATBlock(cfg, rng)

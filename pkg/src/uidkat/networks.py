"""Generator, discriminator and projection heads for unpaired dehazing.

The generator is a 4x downscaling encoder with self-calibrated convolutions,
a stack of patch-token GR-KAN transformer blocks operating on the latent
feature map, and a 4x upscaling decoder with additive skip connections and a
tanh output head.  The discriminator is a fully convolutional patch critic.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .kat_block import BlockConfig, KATBlock, _fan_in_normal
from .tensor import (Module, ShapeError, _tally_macs, activation,
                     activation_backward, avg_pool, avg_pool_backward, conv2d,
                     conv2d_backward, instance_norm, instance_norm_backward,
                     lrelu, lrelu_backward, nearest_upsample,
                     nearest_upsample_backward, sigmoid)

SCCONV_POOL_RATE = 2
PROJECTION_DIM = 256


@dataclass
class GeneratorConfig:
    """Architecture descriptor covering the published variants and the
    ablation axes (mixer kinds, stack depth, patch size, activations)."""

    first_channels: int = 32
    n_blocks: int = 9
    block: BlockConfig = None
    encoder_activation: str = "silu"
    skip_mode: str = "add"
    variant: str = "S"

    def __post_init__(self):
        if self.block is None:
            # Embedding width scales with the latent channel count; a fixed
            # width cannot reproduce the published parameter budgets of all
            # three variants simultaneously (see the audit assumptions).
            self.block = BlockConfig(channels=4 * self.first_channels,
                                     embed_dim=6 * self.first_channels)


VARIANT_PRESETS = {
    "T": dict(first_channels=16, n_blocks=9),
    "S": dict(first_channels=32, n_blocks=9),
    "B": dict(first_channels=64, n_blocks=5),
}


def generator_config(variant="S", **overrides):
    if variant not in VARIANT_PRESETS:
        raise ValueError(f"unknown variant {variant!r}; choose from T, S, B")
    block_overrides = {k[6:]: overrides.pop(k)
                       for k in list(overrides) if k.startswith("block_")}
    params = {**VARIANT_PRESETS[variant], **overrides}
    cfg = GeneratorConfig(variant=variant, **params)
    if block_overrides:
        cfg.block = replace(cfg.block, **block_overrides)
    return cfg


@dataclass
class FeatureStack:
    """Ordered (layer tag, feature map) pairs captured for contrastive use."""

    tags: list
    features: list

    def __len__(self):
        return len(self.features)


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


class ConvLayer(Module):
    """Convolution with optional instance norm and activation."""

    def __init__(self, cin, cout, k, stride, padding, pad_mode, rng,
                 norm=True, act="silu"):
        super().__init__()
        self.k, self.stride, self.padding, self.pad_mode = k, stride, padding, pad_mode
        self.norm = norm
        self.act = act
        self.add_param("w", _fan_in_normal(rng, (cout, cin, k, k), cin * k * k))
        self.add_param("b", np.zeros(cout, dtype=np.float32))
        if norm:
            self.add_param("gamma", np.ones(cout, dtype=np.float32))
            self.add_param("beta", np.zeros(cout, dtype=np.float32))

    def forward(self, x):
        y = conv2d(x, self.params["w"], self.params["b"], self.stride,
                   self.padding, self.pad_mode)
        pre_norm = y
        if self.norm:
            y = instance_norm(pre_norm, self.params["gamma"], self.params["beta"])
        pre_act = y
        if self.act is not None:
            y = activation(pre_act, self.act)
        return y, (x, pre_norm, pre_act)

    def backward(self, cache, gy):
        x, pre_norm, pre_act = cache
        if self.act is not None:
            gy = activation_backward(pre_act, self.act, gy)
        if self.norm:
            gy, gg, gb = instance_norm_backward(pre_norm, self.params["gamma"], gy)
            self.accumulate("gamma", gg)
            self.accumulate("beta", gb)
        gx, gw, gbias = conv2d_backward(x, self.params["w"], gy, self.stride,
                                        self.padding, self.pad_mode)
        self.accumulate("w", gw)
        self.accumulate("b", gbias)
        return gx


class SCConv(Module):
    """Self-calibrated convolution.

    The input splits into two channel halves: one passes a plain 3x3
    convolution, the other is gated by a sigmoid of itself plus an upsampled
    convolution of its pooled version, then convolved twice more.  Output
    channels equal input channels.
    """

    def __init__(self, channels, rng, pool_rate=SCCONV_POOL_RATE):
        super().__init__()
        if channels % 2 != 0:
            raise ShapeError(f"SCConv needs an even channel count, got {channels}")
        half = channels // 2
        self.pool_rate = pool_rate
        self.plain = ConvLayer(half, half, 3, 1, 1, "zero", rng, norm=False, act=None)
        self.pooled = ConvLayer(half, half, 3, 1, 1, "zero", rng, norm=False, act=None)
        self.spatial = ConvLayer(half, half, 3, 1, 1, "zero", rng, norm=False, act=None)
        self.out = ConvLayer(half, half, 3, 1, 1, "zero", rng, norm=False, act=None)

    def forward(self, x):
        r = self.pool_rate
        if x.shape[2] < r or x.shape[3] < r:
            raise ShapeError("SCConv input smaller than its pooling rate")
        c = x.shape[1]
        xa, xb = x[:, :c // 2], x[:, c // 2:]
        ya, ca = self.plain.forward(xa)
        pooled = avg_pool(xb, r)
        pconv, cp = self.pooled.forward(pooled)
        gate_in = xb + nearest_upsample(pconv, r)
        gate = sigmoid(gate_in)
        spat, cs = self.spatial.forward(xb)
        calibrated = spat * gate
        yb, co = self.out.forward(calibrated)
        y = np.concatenate([ya, yb], axis=1)
        return y, (x, ca, cp, cs, co, gate, spat)

    def backward(self, cache, gy):
        x, ca, cp, cs, co, gate, spat = cache
        c = x.shape[1]
        gya, gyb = gy[:, :c // 2], gy[:, c // 2:]
        gxa = self.plain.backward(ca, gya)
        gcal = self.out.backward(co, gyb)
        gspat = gcal * gate
        ggate = gcal * spat
        ggate_in = ggate * gate * (1.0 - gate)
        gxb = self.spatial.backward(cs, gspat)
        gxb = gxb + ggate_in
        gpconv = nearest_upsample_backward(ggate_in, self.pool_rate)
        gpooled = self.pooled.backward(cp, gpconv)
        gxb = gxb + avg_pool_backward(gpooled, self.pool_rate)
        return np.concatenate([gxa, gxb], axis=1)


def scconv_forward(feat, scconv):
    y, _ = scconv.forward(feat)
    return y


class Stage(Module):
    """Conv stage (conv + norm + act) followed by a self-calibrated conv."""

    def __init__(self, cin, cout, k, stride, padding, pad_mode, rng, act):
        super().__init__()
        self.conv = ConvLayer(cin, cout, k, stride, padding, pad_mode, rng, act=act)
        self.sc = SCConv(cout, rng)

    def forward(self, x):
        h, c1 = self.conv.forward(x)
        y, c2 = self.sc.forward(h)
        return y, (c1, c2)

    def backward(self, cache, gy):
        c1, c2 = cache
        gh = self.sc.backward(c2, gy)
        return self.conv.backward(c1, gh)


# ---------------------------------------------------------------------------
# Encoder / decoder
# ---------------------------------------------------------------------------


class Encoder(Module):
    """Stem + two stride-2 stages; 4x downscaling, channels x4."""

    def __init__(self, cfg: GeneratorConfig, rng):
        super().__init__()
        ngf = cfg.first_channels
        act = cfg.encoder_activation
        self.stem = Stage(3, ngf, 7, 1, 3, "reflect", rng, act)
        self.down1 = Stage(ngf, 2 * ngf, 3, 2, 1, "zero", rng, act)
        self.down2 = Stage(2 * ngf, 4 * ngf, 3, 2, 1, "zero", rng, act)

    def forward(self, img):
        if img.shape[2] % 16 or img.shape[3] % 16:
            raise ShapeError("encoder input size must be divisible by 16")
        e1, c1 = self.stem.forward(img)
        e2, c2 = self.down1.forward(e1)
        e3, c3 = self.down2.forward(e2)
        skips = [e1, e2]
        feats = [e1, e2, e3]
        return e3, skips, feats, (img, c1, c2, c3)

    def backward(self, cache, g_latent, g_skips=None, g_feats=None):
        _, c1, c2, c3 = cache
        g3 = g_latent.copy()
        if g_feats is not None and g_feats[2] is not None:
            g3 += g_feats[2]
        g2 = self.down2.backward(c3, g3)
        if g_skips is not None and g_skips[1] is not None:
            g2 = g2 + g_skips[1]
        if g_feats is not None and g_feats[1] is not None:
            g2 = g2 + g_feats[1]
        g1 = self.down1.backward(c2, g2)
        if g_skips is not None and g_skips[0] is not None:
            g1 = g1 + g_skips[0]
        if g_feats is not None and g_feats[0] is not None:
            g1 = g1 + g_feats[0]
        return self.stem.backward(c1, g1)


def encoder_forward(img, encoder):
    latent, skips, feats, _ = encoder.forward(img)
    return latent, skips, feats


class Decoder(Module):
    """Two upsample stages with additive skips, extra self-calibration at
    full resolution, and a tanh head into [-1, 1]."""

    def __init__(self, cfg: GeneratorConfig, rng):
        super().__init__()
        ngf = cfg.first_channels
        act = cfg.encoder_activation
        self.skip_mode = cfg.skip_mode
        mult = 2 if cfg.skip_mode == "concat" else 1
        self.up1 = Stage(4 * ngf, 2 * ngf, 3, 1, 1, "zero", rng, act)
        self.up2 = Stage(mult * 2 * ngf, ngf, 3, 1, 1, "zero", rng, act)
        self.pre_head = SCConv(mult * ngf, rng)
        self.head = ConvLayer(mult * ngf, 3, 7, 1, 3, "reflect", rng,
                              norm=False, act="tanh")

    def _merge(self, x, skip):
        if skip.shape != x.shape and self.skip_mode == "add":
            raise ShapeError(
                f"skip shape {skip.shape} does not match merge point {x.shape}")
        if self.skip_mode == "concat":
            return np.concatenate([x, skip], axis=1)
        return x + skip

    def forward(self, latent, skips):
        u1 = nearest_upsample(latent, 2)
        h1, c1 = self.up1.forward(u1)
        m1 = self._merge(h1, skips[1])
        u2 = nearest_upsample(m1, 2)
        h2, c2 = self.up2.forward(u2)
        m2 = self._merge(h2, skips[0])
        h3, c3 = self.pre_head.forward(m2)
        y, c4 = self.head.forward(h3)
        return y, (c1, c2, c3, c4, h1, h2)

    def backward(self, cache, gy):
        c1, c2, c3, c4, h1, h2 = cache
        g3 = self.head.backward(c4, gy)
        gm2 = self.pre_head.backward(c3, g3)
        if self.skip_mode == "concat":
            gh2, gskip0 = np.split(gm2, 2, axis=1)
        else:
            gh2, gskip0 = gm2, gm2
        gu2 = self.up2.backward(c2, gh2)
        gm1 = nearest_upsample_backward(gu2, 2)
        if self.skip_mode == "concat":
            gh1, gskip1 = np.split(gm1, 2, axis=1)
        else:
            gh1, gskip1 = gm1, gm1
        gu1 = self.up1.backward(c1, gh1)
        g_latent = nearest_upsample_backward(gu1, 2)
        return g_latent, [gskip0, gskip1]


def decoder_forward(latent, skips, decoder):
    y, _ = decoder.forward(latent, skips)
    return y


# ---------------------------------------------------------------------------
# Generator
# ---------------------------------------------------------------------------


class Generator(Module):
    def __init__(self, cfg: GeneratorConfig, rng):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng)
        self.blocks = [KATBlock(cfg.block, rng) for _ in range(cfg.n_blocks)]
        self.decoder = Decoder(cfg, rng)
        # contrastive layers: stem, down-1, latent, mid block, last block
        self.mid_block = (cfg.n_blocks + 1) // 2  # 1-based ceil(n/2)
        self.stack_tags = ["stem", "down1", "latent",
                           f"block{self.mid_block}", f"block{cfg.n_blocks}"]

    def stack_channels(self):
        ngf = self.cfg.first_channels
        return [ngf, 2 * ngf, 4 * ngf, 4 * ngf, 4 * ngf]

    def _run_blocks(self, latent):
        caches, feats = [], []
        h = latent
        for i, block in enumerate(self.blocks, start=1):
            h, c = block.forward(h)
            caches.append(c)
            if i == self.mid_block or i == len(self.blocks):
                feats.append(h)
        return h, feats, caches

    def forward(self, img):
        latent, skips, enc_feats, enc_cache = self.encoder.forward(img)
        h, block_feats, block_caches = self._run_blocks(latent)
        y, dec_cache = self.decoder.forward(h, skips)
        stack = FeatureStack(list(self.stack_tags), enc_feats + block_feats)
        cache = (enc_cache, block_caches, dec_cache)
        return y, stack, cache

    def forward_features(self, img):
        """Encoder + transformation stages only (for re-encoding G(x))."""
        latent, _, enc_feats, enc_cache = self.encoder.forward(img)
        _, block_feats, block_caches = self._run_blocks(latent)
        stack = FeatureStack(list(self.stack_tags), enc_feats + block_feats)
        return stack, (enc_cache, block_caches)

    def _blocks_backward(self, block_caches, g_out, stack_grads):
        g = g_out
        for i in range(len(self.blocks) - 1, -1, -1):
            num = i + 1
            if stack_grads is not None:
                if num == len(self.blocks) and stack_grads[4] is not None:
                    g = g + stack_grads[4]
                if num == self.mid_block and stack_grads[3] is not None:
                    g = g + stack_grads[3]
            g = self.blocks[i].backward(block_caches[i], g)
        return g

    def backward(self, cache, g_img, stack_grads=None):
        enc_cache, block_caches, dec_cache = cache
        g_latent_out, g_skips = self.decoder.backward(dec_cache, g_img)
        g_latent = self._blocks_backward(block_caches, g_latent_out, stack_grads)
        g_feats = None
        if stack_grads is not None:
            g_feats = stack_grads[:3]
        return self.encoder.backward(enc_cache, g_latent, g_skips, g_feats)

    def backward_features(self, cache, stack_grads):
        enc_cache, block_caches = cache
        # Block caches store (feat, unit_caches, t_final, hw); the last
        # block's output has the shape of its input feature map.
        g_out = np.zeros_like(block_caches[-1][0])
        g_latent = self._blocks_backward(block_caches, g_out, stack_grads)
        return self.encoder.backward(enc_cache, g_latent, None, stack_grads[:3])


def generator_forward(img, generator):
    y, stack, _ = generator.forward(img)
    return y, stack


# ---------------------------------------------------------------------------
# Discriminator
# ---------------------------------------------------------------------------

# Smallest input for which the critic still emits a 1x1 logit map; the
# nominal receptive field is 70x70 but smaller images remain valid.
DISC_MIN_INPUT = 24


class Discriminator(Module):
    """70x70 patch critic: stacked 4x4 convolutions with leaky-relu (0.2)."""

    def __init__(self, rng, base=64):
        super().__init__()
        specs = [(3, base, 2, False), (base, 2 * base, 2, True),
                 (2 * base, 4 * base, 2, True), (4 * base, 8 * base, 1, True)]
        self.layers = [ConvLayer(ci, co, 4, s, 1, "zero", rng, norm=n, act=None)
                       for ci, co, s, n in specs]
        self.final = ConvLayer(8 * base, 1, 4, 1, 1, "zero", rng,
                               norm=False, act=None)

    def forward(self, img):
        if img.shape[2] < DISC_MIN_INPUT or img.shape[3] < DISC_MIN_INPUT:
            raise ShapeError(
                f"discriminator input must be at least {DISC_MIN_INPUT} pixels")
        h = img
        caches = []
        for layer in self.layers:
            h, c = layer.forward(h)
            caches.append((c, h))
            h = lrelu(h, 0.2)
        logits, cf = self.final.forward(h)
        return logits, (caches, cf)

    def backward(self, cache, g_logits):
        caches, cf = cache
        g = self.final.backward(cf, g_logits)
        for layer, (c, pre) in zip(reversed(self.layers), reversed(caches)):
            g = lrelu_backward(pre, 0.2, g)
            g = layer.backward(c, g)
        return g


def discriminator_forward(img, disc):
    logits, _ = disc.forward(img)
    return logits


# ---------------------------------------------------------------------------
# Projection heads
# ---------------------------------------------------------------------------


class ProjectionHead(Module):
    """Two dense layers with ReLU, then row-wise L2 normalization."""

    def __init__(self, c_in, rng, dim=PROJECTION_DIM):
        super().__init__()
        self.add_param("w1", _fan_in_normal(rng, (dim, c_in), c_in))
        self.add_param("b1", np.zeros(dim, dtype=np.float32))
        self.add_param("w2", _fan_in_normal(rng, (dim, dim), dim))
        self.add_param("b2", np.zeros(dim, dtype=np.float32))

    def forward(self, rows):
        h = rows @ self.params["w1"].T + self.params["b1"]
        a = np.maximum(h, 0.0)
        z = a @ self.params["w2"].T + self.params["b2"]
        norms = np.sqrt((z * z).sum(axis=1, keepdims=True))
        norms = np.maximum(norms, 1e-12)
        y = z / norms
        _tally_macs("linear", rows.shape[0] * (rows.shape[1] + self.params["w2"].shape[1])
                    * self.params["w1"].shape[0])
        return y, (rows, h, a, z, norms)

    def backward(self, cache, gy):
        rows, h, a, z, norms = cache
        y = z / norms
        gz = (gy - y * (gy * y).sum(axis=1, keepdims=True)) / norms
        self.accumulate("w2", gz.T @ a)
        self.accumulate("b2", gz.sum(axis=0))
        ga = gz @ self.params["w2"]
        gh = ga * (h > 0)
        self.accumulate("w1", gh.T @ rows)
        self.accumulate("b1", gh.sum(axis=0))
        return gh @ self.params["w1"]


def projection_head_forward(stack, heads):
    """Embed every spatial location of each captured feature map."""
    if len(heads) != len(stack.features):
        raise ShapeError("one projection head required per captured layer")
    out = []
    for head, feat in zip(heads, stack.features):
        b, c, h, w = feat.shape
        rows = np.ascontiguousarray(feat.transpose(0, 2, 3, 1)).reshape(-1, c)
        y, _ = head.forward(rows)
        out.append(y)
    return out


def build_variant(tag, rng, **overrides):
    """Initialized generator, discriminator and projection heads."""
    cfg = generator_config(tag, **overrides)
    gen = Generator(cfg, rng)
    disc = Discriminator(rng)
    heads = [ProjectionHead(c, rng) for c in gen.stack_channels()]
    return gen, disc, heads


# ---------------------------------------------------------------------------
# Checkpoint tensor format
# ---------------------------------------------------------------------------


class CheckpointError(RuntimeError):
    pass


class CorruptManifestError(CheckpointError):
    pass


class TensorShapeMismatchError(CheckpointError):
    pass


class TruncatedBlobError(CheckpointError):
    pass


def save_tensors(directory, named_tensors):
    """Write an ordered list of (name, array) as manifest.json + weights.bin."""
    os.makedirs(directory, exist_ok=True)
    manifest = []
    offset = 0
    chunks = []
    for name, arr in named_tensors:
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape),
                         "dtype": "float32", "byte_offset": offset,
                         "byte_length": len(data)})
        chunks.append(data)
        offset += len(data)
    with open(os.path.join(directory, "weights.bin"), "wb") as f:
        for chunk in chunks:
            f.write(chunk)
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)


def load_tensors(directory):
    """Read back a checkpoint directory; returns an ordered name->array dict."""
    try:
        with open(os.path.join(directory, "manifest.json")) as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptManifestError(f"cannot read manifest: {exc}") from exc
    if not isinstance(manifest, list):
        raise CorruptManifestError("manifest must be a list of tensor records")
    with open(os.path.join(directory, "weights.bin"), "rb") as f:
        blob = f.read()
    out = {}
    for rec in manifest:
        try:
            name = rec["name"]
            shape = tuple(int(s) for s in rec["shape"])
            off = int(rec["byte_offset"])
            length = int(rec["byte_length"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptManifestError(f"malformed manifest record: {rec}") from exc
        expected = int(np.prod(shape, dtype=np.int64)) * 4
        if length != expected:
            raise TensorShapeMismatchError(
                f"tensor {name!r}: byte length {length} does not match shape {shape}")
        if off + length > len(blob):
            raise TruncatedBlobError(
                f"weights.bin truncated while reading tensor {name!r}")
        out[name] = np.frombuffer(blob[off:off + length], dtype="<f4").reshape(shape).copy()
    return out


def named_model_tensors(gen, disc=None, heads=None):
    tensors = [(f"gen.{n}", owner.params[k]) for n, owner, k in gen.named_parameters()]
    if disc is not None:
        tensors += [(f"disc.{n}", o.params[k]) for n, o, k in disc.named_parameters()]
    if heads is not None:
        for i, head in enumerate(heads):
            tensors += [(f"heads.{i}.{n}", o.params[k])
                        for n, o, k in head.named_parameters()]
    return tensors


def load_model_tensors(tensors, gen, disc=None, heads=None):
    for name, owner, key in gen.named_parameters():
        owner.params[key][...] = tensors[f"gen.{name}"]
    if disc is not None:
        for name, owner, key in disc.named_parameters():
            owner.params[key][...] = tensors[f"disc.{name}"]
    if heads is not None:
        for i, head in enumerate(heads):
            for name, owner, key in head.named_parameters():
                owner.params[key][...] = tensors[f"heads.{i}.{name}"]

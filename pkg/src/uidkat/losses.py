"""Training objectives: least-squares adversarial terms, identity loss, and
the patch-wise contrastive loss over sampled feature locations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError

DEFAULT_TAU = 0.07
DEFAULT_LOCATIONS = 64


@dataclass
class LossWeights:
    adversarial: float = 1.0
    identity: float = 1.0
    contrastive: float = 5.0

    def __post_init__(self):
        if min(self.adversarial, self.identity, self.contrastive) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class PatchSample:
    """One anchor with its positive and in-image negatives."""

    anchor: np.ndarray
    positive: np.ndarray
    negatives: np.ndarray
    tau: float = DEFAULT_TAU


# ---------------------------------------------------------------------------
# Least squares adversarial losses
# ---------------------------------------------------------------------------


def lsgan_generator_loss(fake_logits):
    """Mean of (D(G(x)) - 1)^2 over all patch logits."""
    return float(np.mean((fake_logits - 1.0) ** 2))


def lsgan_generator_grad(fake_logits):
    return 2.0 * (fake_logits - 1.0) / fake_logits.size


def lsgan_discriminator_loss(real_logits, fake_logits):
    """Mean (D(y) - 1)^2 plus mean D(G(x))^2."""
    return float(np.mean((real_logits - 1.0) ** 2) + np.mean(fake_logits ** 2))


def lsgan_discriminator_grads(real_logits, fake_logits):
    g_real = 2.0 * (real_logits - 1.0) / real_logits.size
    g_fake = 2.0 * fake_logits / fake_logits.size
    return g_real, g_fake


# ---------------------------------------------------------------------------
# Identity loss
# ---------------------------------------------------------------------------


def identity_loss(gen_on_clean, clean):
    """Mean absolute error between G(y) and y."""
    if gen_on_clean.shape != clean.shape:
        raise ShapeError("identity_loss shape mismatch")
    return float(np.mean(np.abs(gen_on_clean - clean)))


def identity_grad(gen_on_clean, clean):
    return np.sign(gen_on_clean - clean) / gen_on_clean.size


# ---------------------------------------------------------------------------
# Patch-wise contrastive loss
# ---------------------------------------------------------------------------


def _cosine(u, v):
    return float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))


def patch_nce_single(sample: PatchSample):
    """(N+1)-way classification loss for one anchor, with cosine similarity
    and max-subtraction for overflow safety."""
    v, vp, vn = sample.anchor, sample.positive, sample.negatives
    if np.linalg.norm(v) == 0 or np.linalg.norm(vp) == 0:
        raise ValueError("patch_nce_single: zero-norm vector")
    if vn.ndim != 2 or vn.shape[0] < 1:
        raise ShapeError("patch_nce_single needs at least one negative")
    sims = np.empty(vn.shape[0] + 1)
    sims[0] = _cosine(v, vp)
    for i, neg in enumerate(vn):
        if np.linalg.norm(neg) == 0:
            raise ValueError("patch_nce_single: zero-norm negative")
        sims[i + 1] = _cosine(v, neg)
    z = sims / sample.tau
    zmax = z.max()
    return float(np.log(np.exp(z - zmax).sum()) + zmax - z[0])


def _nce_layer(anchors, positives, tau):
    """Diagonal-target softmax cross-entropy over unit-norm rows.

    Returns (sum of losses, grad wrt anchors, grad wrt positives).
    """
    s = anchors.shape[0]
    logits = (anchors @ positives.T) / tau
    zmax = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - zmax)
    denom = e.sum(axis=1, keepdims=True)
    p = e / denom
    losses = np.log(denom[:, 0]) + zmax[:, 0] - logits[np.arange(s), np.arange(s)]
    g = p.copy()
    g[np.arange(s), np.arange(s)] -= 1.0
    g /= tau
    return float(losses.sum()), g @ positives, g.T @ anchors


@dataclass
class PatchNCEResult:
    loss: float
    input_grads: list = field(default_factory=list)
    output_grads: list = field(default_factory=list)
    locations: list = field(default_factory=list)


def patch_nce_loss(input_stack, output_stack, heads, locations_per_layer,
                   rng, tau=DEFAULT_TAU, compute_grads=False, grad_scale=1.0):
    """Contrastive loss over sampled feature locations of both stacks.

    Anchors come from the output-side stack (features of the restored
    image), positives from the input-side stack at the same locations, and
    negatives are the positives of the other sampled locations.  The loss
    is normalized by the total number of sampled locations.  With
    ``compute_grads``, gradients of ``grad_scale * loss`` w.r.t. the raw
    feature maps are returned and the same-scaled gradients accumulate
    into the projection heads.
    """
    n_layers = len(input_stack.features)
    if len(output_stack.features) != n_layers or len(heads) != n_layers:
        raise ShapeError("stacks and heads must have matching layer counts")
    if isinstance(locations_per_layer, int):
        locations_per_layer = [locations_per_layer] * n_layers
    batch = input_stack.features[0].shape[0]
    total = batch * int(np.sum(locations_per_layer))
    scale = grad_scale / total
    result = PatchNCEResult(loss=0.0)
    for layer, (f_in, f_out, head, s_l) in enumerate(zip(
            input_stack.features, output_stack.features, heads,
            locations_per_layer)):
        if f_in.shape != f_out.shape:
            raise ShapeError(f"layer {layer}: stack feature shapes differ")
        b, c, h, w = f_in.shape
        if s_l < 2:
            raise ValueError(
                f"layer {layer}: need at least 2 sampled locations for negatives")
        if s_l > h * w:
            raise ValueError(
                f"layer {layer}: {s_l} locations exceed the {h * w} available")
        g_in = np.zeros_like(f_in) if compute_grads else None
        g_out = np.zeros_like(f_out) if compute_grads else None
        layer_locs = []
        for bi in range(b):
            locs = rng.choice(h * w, size=s_l, replace=False)
            layer_locs.append(locs)
            rows_in = f_in[bi].reshape(c, -1).T[locs]
            rows_out = f_out[bi].reshape(c, -1).T[locs]
            z_pos, cache_in = head.forward(rows_in)
            z_anc, cache_out = head.forward(rows_out)
            lsum, g_anc, g_pos = _nce_layer(z_anc, z_pos, tau)
            result.loss += lsum
            if compute_grads:
                gr_out = head.backward(cache_out, g_anc * scale)
                gr_in = head.backward(cache_in, g_pos * scale)
                flat_out = g_out[bi].reshape(c, -1)
                flat_in = g_in[bi].reshape(c, -1)
                np.add.at(flat_out.T, locs, gr_out)
                np.add.at(flat_in.T, locs, gr_in)
        result.input_grads.append(g_in)
        result.output_grads.append(g_out)
        result.locations.append(layer_locs)
    result.loss /= total
    result.total_samples = total
    return result


def total_generator_loss(adv, ide, pc, weights: LossWeights):
    """Weighted sum of the three generator objectives."""
    return (weights.adversarial * adv + weights.identity * ide
            + weights.contrastive * pc)

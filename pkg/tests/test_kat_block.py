import numpy as np
import pytest

from uidkat.kat_block import (BlockConfig, KATBlock, build_block,
                              dual_grkan_forward, make_mixer, mixer_forward,
                              n_grkan_forward, patch_embed, patch_unembed)
from uidkat.tensor import ShapeError


def small_block(rng, **overrides):
    cfg = dict(channels=8, patch_size=2, embed_dim=16, groups=4)
    cfg.update(overrides)
    return KATBlock(BlockConfig(**cfg), rng)


def test_block_preserves_shape(rng):
    block = small_block(rng)
    x = rng.normal(size=(2, 8, 6, 6)).astype(np.float32)
    y, _ = block.forward(x)
    assert y.shape == x.shape


def test_block_rejects_wrong_channels(rng):
    block = small_block(rng)
    with pytest.raises(ShapeError):
        block.forward(rng.normal(size=(1, 6, 6, 6)).astype(np.float32))


def test_patch_embed_unembed_roundtrip_shapes(rng):
    w = rng.normal(size=(16, 8, 2, 2)).astype(np.float32)
    b = np.zeros(16, dtype=np.float32)
    t = patch_embed(rng.normal(size=(1, 8, 6, 4)).astype(np.float32), w, b, 2)
    assert t.shape == (1, 6, 16)
    wu = rng.normal(size=(8 * 4, 16, 1, 1)).astype(np.float32)
    y = patch_unembed(t, wu, np.zeros(32, dtype=np.float32), 2, (6, 4))
    assert y.shape == (1, 8, 6, 4)


def test_patch_embed_rejects_misaligned(rng):
    w = rng.normal(size=(16, 8, 2, 2)).astype(np.float32)
    with pytest.raises(ShapeError):
        patch_embed(rng.normal(size=(1, 8, 5, 4)).astype(np.float32),
                    w, np.zeros(16, np.float32), 2)


def test_dual_equals_stack_of_two(rng):
    block = small_block(np.random.default_rng(3), grkan_stack=2)
    x = rng.normal(size=(1, 8, 4, 4)).astype(np.float32)
    np.testing.assert_array_equal(dual_grkan_forward(x, block),
                                  n_grkan_forward(x, block))


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_grkan_stack_depths(rng, n):
    block = small_block(rng, grkan_stack=n)
    assert len(block._mixer_kinds()) == n
    x = rng.normal(size=(1, 8, 4, 4)).astype(np.float32)
    y, _ = block.forward(x)
    assert y.shape == x.shape


@pytest.mark.parametrize("kind", ["identity", "grkan", "mlp", "attention"])
def test_mixer_kinds_forward(rng, kind):
    mixer = make_mixer(kind, 16, 4, rng)
    t = rng.normal(size=(2, 5, 16)).astype(np.float32)
    y = mixer_forward(t, kind, mixer)
    assert y.shape == t.shape
    if kind == "identity":
        np.testing.assert_array_equal(y, t)


def test_attention_rows_sum_to_one(rng):
    mixer = make_mixer("attention", 16, 4, rng)
    t = rng.normal(size=(1, 6, 16)).astype(np.float32)
    attn = mixer.attention_map(t)
    np.testing.assert_allclose(attn.sum(axis=-1), 1.0, rtol=1e-5)


def test_mixed_block_gradcheck(rng):
    block = small_block(np.random.default_rng(1), token_mixer="attention",
                        channel_mixer="mlp")
    block.set_dtype(np.float64)
    from uidkat.tensor import finite_diff_check
    x = rng.normal(size=(1, 8, 4, 4))
    wts = rng.normal(size=x.shape)

    def loss():
        y, _ = block.forward(x)
        return float((y * wts).sum())

    block.zero_grads()
    _, cache = block.forward(x)
    gx = block.backward(cache, wts)
    tensors, analytic = {"x": x}, {"x": gx}
    for name, owner, key in block.named_parameters():
        tensors[name] = owner.params[key]
        analytic[name] = owner.grads[key]
    report = finite_diff_check(loss, tensors, analytic, tolerance=1e-3,
                               max_checks=4, rng=rng)
    assert report.passed, report.failure_message()


def test_build_block_override():
    block = build_block(8, np.random.default_rng(0), patch_size=2,
                        embed_dim=16, groups=4, token_mixer="mlp")
    assert block.cfg.token_mixer == "mlp"


def test_invalid_mixer_kind():
    with pytest.raises(ValueError):
        BlockConfig(channels=8, token_mixer="conv").validate()

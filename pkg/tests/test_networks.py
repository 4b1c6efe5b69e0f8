import json
import os

import numpy as np
import pytest

from uidkat.networks import (CorruptManifestError, Discriminator, Generator,
                             ProjectionHead, TensorShapeMismatchError,
                             TruncatedBlobError, build_variant,
                             generator_config, load_model_tensors,
                             load_tensors, named_model_tensors, save_tensors)
from uidkat.tensor import ShapeError


def tiny_generator(seed=0, **overrides):
    cfg = generator_config("T", n_blocks=2, **overrides)
    return Generator(cfg, np.random.default_rng(seed))


def test_generator_shape_and_range(rng):
    gen = tiny_generator()
    x = rng.uniform(-1, 1, size=(1, 3, 32, 32)).astype(np.float32)
    y, stack, _ = gen.forward(x)
    assert y.shape == x.shape
    assert y.min() >= -1.0 and y.max() <= 1.0
    assert len(stack.features) == 5


def test_generator_rejects_misaligned_input(rng):
    gen = tiny_generator()
    with pytest.raises(ShapeError):
        gen.forward(rng.normal(size=(1, 3, 30, 30)).astype(np.float32))


def test_stack_channels_match_features(rng):
    gen = tiny_generator()
    x = rng.uniform(-1, 1, size=(1, 3, 32, 32)).astype(np.float32)
    _, stack, _ = gen.forward(x)
    assert [f.shape[1] for f in stack.features] == gen.stack_channels()


def test_discriminator_patch_map(rng):
    disc = Discriminator(np.random.default_rng(0))
    x = rng.uniform(-1, 1, size=(1, 3, 256, 256)).astype(np.float32)
    logits, _ = disc.forward(x)
    assert logits.shape == (1, 1, 30, 30)


def test_discriminator_fully_convolutional(rng):
    disc = Discriminator(np.random.default_rng(0))
    x = rng.uniform(-1, 1, size=(1, 3, 64, 96)).astype(np.float32)
    logits, _ = disc.forward(x)
    assert logits.shape[2] < logits.shape[3]


def test_discriminator_min_input(rng):
    disc = Discriminator(np.random.default_rng(0))
    with pytest.raises(ShapeError):
        disc.forward(rng.normal(size=(1, 3, 16, 16)).astype(np.float32))


def test_projection_head_rows_unit_norm(rng):
    head = ProjectionHead(8, np.random.default_rng(0), dim=16)
    y, _ = head.forward(rng.normal(size=(7, 8)).astype(np.float32))
    np.testing.assert_allclose(np.linalg.norm(y, axis=1), 1.0, rtol=1e-5)


def test_build_variant_head_widths():
    gen, disc, heads = build_variant("T", np.random.default_rng(0))
    assert len(heads) == 5
    assert heads[0].params["w1"].shape[1] == gen.cfg.first_channels


def test_checkpoint_roundtrip_bit_exact(tmp_path, rng):
    gen = tiny_generator()
    tensors = named_model_tensors(gen)
    save_tensors(tmp_path, tensors)
    loaded = load_tensors(tmp_path)
    for name, arr in tensors:
        np.testing.assert_array_equal(loaded[name], arr)
    # manifest byte length / 4 equals the parameter count
    manifest = json.load(open(tmp_path / "manifest.json"))
    assert sum(e["byte_length"] for e in manifest) // 4 == gen.num_params()


def test_checkpoint_truncation_detected(tmp_path):
    gen = tiny_generator()
    save_tensors(tmp_path, named_model_tensors(gen))
    blob = tmp_path / "weights.bin"
    data = blob.read_bytes()
    blob.write_bytes(data[:-1])
    with pytest.raises(TruncatedBlobError):
        load_tensors(tmp_path)


def test_checkpoint_shape_mismatch_named(tmp_path):
    gen = tiny_generator()
    save_tensors(tmp_path, named_model_tensors(gen))
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest[0]["shape"] = [1, 2, 3]
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(TensorShapeMismatchError) as exc:
        load_tensors(tmp_path)
    assert manifest[0]["name"] in str(exc.value)


def test_checkpoint_corrupt_manifest(tmp_path):
    gen = tiny_generator()
    save_tensors(tmp_path, named_model_tensors(gen))
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(CorruptManifestError):
        load_tensors(tmp_path)


def test_load_model_tensors_restores_weights(tmp_path):
    gen_a = tiny_generator(seed=0)
    gen_b = tiny_generator(seed=1)
    save_tensors(tmp_path, named_model_tensors(gen_a))
    load_model_tensors(load_tensors(tmp_path), gen_b)
    for (na, oa, ka), (_, ob, kb) in zip(gen_a.named_parameters(),
                                         gen_b.named_parameters()):
        np.testing.assert_array_equal(oa.params[ka], ob.params[kb])


def test_variant_config_validation():
    with pytest.raises(ValueError):
        generator_config("X")

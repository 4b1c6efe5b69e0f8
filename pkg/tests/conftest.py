import numpy as np
import pytest

from uidkat.training import substream, synthesize_haze


def toy_clean_images(rng, n, size=64, cell=8):
    """Dark blocky images: haze is very damaging on these, so restoration
    quality is measurable even after a short run."""
    images = []
    for _ in range(n):
        base = rng.uniform(0.0, 0.45, (size // cell, size // cell, 3))
        images.append(np.kron(base, np.ones((cell, cell, 1))).astype(np.float32))
    return images


def toy_domains(seed, n, size=64):
    """Returns (hazy01, clean01) lists of HWC float images in [0, 1]."""
    rng = substream(seed, "toy-data")
    clean = toy_clean_images(rng, n, size)
    hazy = [synthesize_haze(c, rng).astype(np.float32) for c in clean]
    return hazy, clean


def to_chw_pm1(images):
    return [img.transpose(2, 0, 1) * 2.0 - 1.0 for img in images]


@pytest.fixture
def rng():
    return np.random.default_rng(0)

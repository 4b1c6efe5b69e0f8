import numpy as np
import pytest
from PIL import Image

from uidkat.metrics import eval_folder, psnr, ssim, to_luma
from uidkat.tensor import ShapeError


def test_psnr_identical_is_inf(rng):
    x = rng.uniform(0, 1, (16, 16, 3))
    assert psnr(x, x) == np.inf


def test_psnr_uniform_error():
    a = np.full((8, 8), 0.6)
    b = np.full((8, 8), 0.5)
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)


def test_psnr_zero_db():
    assert psnr(np.ones((4, 4)), np.zeros((4, 4))) == pytest.approx(0.0)


def test_psnr_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        psnr(rng.uniform(0, 1, (4, 4)), rng.uniform(0, 1, (5, 5)))


def test_ssim_self_is_one(rng):
    x = rng.uniform(0, 1, (24, 24, 3))
    assert ssim(x, x) == 1.0


def test_ssim_symmetric(rng):
    x = rng.uniform(0, 1, (20, 20))
    y = rng.uniform(0, 1, (20, 20))
    assert ssim(x, y) == pytest.approx(ssim(y, x), rel=1e-12)


def test_ssim_anticorrelated_negative(rng):
    x = (rng.uniform(0, 1, (24, 24)) > 0.5).astype(float)
    assert ssim(x, 1 - x) < 0


def test_ssim_constant_closed_form():
    a = np.full((15, 15), 0.5)
    b = np.full((15, 15), 0.25)
    c1 = 0.01 ** 2
    expected = (2 * 0.5 * 0.25 + c1) / (0.5 ** 2 + 0.25 ** 2 + c1)
    assert ssim(a, b) == pytest.approx(expected, rel=1e-12)


def test_ssim_too_small(rng):
    with pytest.raises(ShapeError):
        ssim(rng.uniform(0, 1, (8, 8)), rng.uniform(0, 1, (8, 8)))


def test_luma_weights():
    img = np.zeros((2, 2, 3))
    img[..., 1] = 1.0
    np.testing.assert_allclose(to_luma(img), 0.587)


def _write(path, arr):
    Image.fromarray(np.rint(arr * 255).astype(np.uint8)).save(path)


def test_eval_folder(tmp_path, rng):
    pred = tmp_path / "pred"
    gt = tmp_path / "gt"
    pred.mkdir()
    gt.mkdir()
    imgs = [rng.uniform(0, 1, (16, 16, 3)) for _ in range(2)]
    for i, img in enumerate(imgs):
        _write(pred / f"{i}.png", img)
        _write(gt / f"{i}.png", img)
    csv = tmp_path / "m.csv"
    rows, (mp, ms) = eval_folder(pred, gt, csv_path=csv)
    assert [r[0] for r in rows] == ["0.png", "1.png"]
    assert ms == pytest.approx(1.0)
    lines = csv.read_text().splitlines()
    assert lines[0] == "name,psnr_db,ssim"
    assert lines[-1].startswith("mean,")


def test_eval_folder_missing_counterpart(tmp_path, rng):
    pred = tmp_path / "pred"
    gt = tmp_path / "gt"
    pred.mkdir()
    gt.mkdir()
    _write(pred / "only.png", rng.uniform(0, 1, (16, 16, 3)))
    with pytest.raises(FileNotFoundError) as exc:
        eval_folder(pred, gt)
    assert "only.png" in str(exc.value)

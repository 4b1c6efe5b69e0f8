"""PSNR and SSIM on [0, 1] images, plus folder-level evaluation."""

from __future__ import annotations

import os

import numpy as np

from .tensor import ShapeError

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def psnr(pred, gt, max_value=1.0):
    """10*log10(max^2 / MSE); identical images report +inf."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"psnr shapes differ: {pred.shape} vs {gt.shape}")
    mse = np.mean((pred - gt) ** 2)
    if mse == 0.0:
        return np.inf
    return float(10.0 * np.log10(max_value * max_value / mse))


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, kernel):
    """Separable 'valid'-mode correlation with a 1-D kernel on both axes."""
    from numpy.lib.stride_tricks import sliding_window_view
    k = kernel.size
    rows = sliding_window_view(img, k, axis=0) @ kernel
    return sliding_window_view(rows, k, axis=1) @ kernel


def to_luma(img):
    """HWC RGB (or single-channel HW) to a 2-D luma plane."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ LUMA_WEIGHTS
    raise ShapeError(f"expected HW or HW3 image, got {img.shape}")


def ssim(pred, gt, max_value=1.0, channel_mode="luma"):
    """Mean local SSIM, 11x11 Gaussian window (sigma 1.5), valid mode.

    Color images are first converted to luma; ``channel_mode='rgb_mean'``
    averages the per-channel scores instead.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"ssim shapes differ: {pred.shape} vs {gt.shape}")
    if channel_mode == "rgb_mean" and pred.ndim == 3:
        return float(np.mean([ssim(pred[..., c], gt[..., c], max_value)
                              for c in range(pred.shape[2])]))
    x, y = to_luma(pred), to_luma(gt)
    if min(x.shape) < SSIM_WINDOW:
        raise ShapeError(
            f"image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    kernel = _gaussian_window()
    c1 = (0.01 * max_value) ** 2
    c2 = (0.03 * max_value) ** 2
    mu_x = _filter_valid(x, kernel)
    mu_y = _filter_valid(y, kernel)
    var_x = _filter_valid(x * x, kernel) - mu_x * mu_x
    var_y = _filter_valid(y * y, kernel) - mu_y * mu_y
    cov = _filter_valid(x * y, kernel) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def _load01(path):
    from PIL import Image
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def eval_folder(pred_dir, gt_dir, csv_path=None):
    """Per-image and mean PSNR/SSIM over matching basenames.

    Rows are ordered lexicographically; a prediction without a ground-truth
    counterpart is an error naming the file.  Returns (rows, means) where
    each row is (name, psnr_db, ssim).
    """
    names = sorted(n for n in os.listdir(pred_dir)
                   if n.lower().endswith((".png", ".jpg", ".jpeg")))
    if not names:
        raise FileNotFoundError(f"no images in {pred_dir}")
    rows = []
    for name in names:
        gt_path = os.path.join(gt_dir, name)
        if not os.path.exists(gt_path):
            raise FileNotFoundError(f"no ground truth for {name} in {gt_dir}")
        pred = _load01(os.path.join(pred_dir, name))
        gt = _load01(gt_path)
        rows.append((name, psnr(pred, gt), ssim(pred, gt)))
    mean_psnr = float(np.mean([r[1] for r in rows]))
    mean_ssim = float(np.mean([r[2] for r in rows]))
    if csv_path is not None:
        with open(csv_path, "w") as f:
            f.write("name,psnr_db,ssim\n")
            for name, p, s in rows:
                f.write(f"{name},{p:.6f},{s:.6f}\n")
            f.write(f"mean,{mean_psnr:.6f},{mean_ssim:.6f}\n")
    return rows, (mean_psnr, mean_ssim)

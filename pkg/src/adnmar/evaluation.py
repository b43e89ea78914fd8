"""Image quality metrics, dataset evaluation and qualitative rendering.

PSNR and SSIM are computed against the declared dynamic range, optionally
excluding the metal footprint (the region is overwritten during synthesis,
so scoring it would reward nothing). SSIM uses the standard single-scale
formulation with an 11x11 Gaussian window, sigma 1.5, K1=0.01, K2=0.03;
window positions touching excluded pixels drop out of the mean.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.signal import fftconvolve

from .arrays import CTImage, HUWindow, NormalizedImage, normalize_hu
from .curation import ImageRef
from .networks import AdnModel, image_to_tensor, infer_correction_image, tensor_to_image

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

NORMALIZED_PEAK = 2.0


def _as_array_and_peak(img, peak: float | None) -> tuple[np.ndarray, float]:
    if isinstance(img, NormalizedImage):
        return img.pixels.astype(np.float64), NORMALIZED_PEAK if peak is None else peak
    if isinstance(img, CTImage):
        return img.pixels.astype(np.float64), HUWindow().width if peak is None else peak
    arr = np.asarray(img, dtype=np.float64)
    if peak is None:
        raise ValueError("peak must be declared for raw arrays")
    return arr, peak


def psnr(a, b, exclude_mask: np.ndarray | None = None, peak: float | None = None) -> float:
    """Peak signal-to-noise ratio in dB; +inf sentinel for identical images."""
    arr_a, peak_a = _as_array_and_peak(a, peak)
    arr_b, peak_b = _as_array_and_peak(b, peak)
    if arr_a.shape != arr_b.shape:
        raise ValueError(f"shape mismatch: {arr_a.shape} vs {arr_b.shape}")
    if peak_a != peak_b:
        raise ValueError("images declare different dynamic ranges")
    diff = arr_a - arr_b
    if exclude_mask is not None:
        keep = ~np.asarray(exclude_mask, dtype=bool)
        if not keep.any():
            raise ValueError("exclude_mask removes every pixel")
        diff = diff[keep]
    mse = float(np.mean(diff**2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak_a**2 / mse)


def _gaussian_kernel() -> np.ndarray:
    half = SSIM_WINDOW // 2
    coords = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(coords**2) / (2.0 * SSIM_SIGMA**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def ssim(a, b, exclude_mask: np.ndarray | None = None, peak: float | None = None) -> float:
    """Mean structural similarity over all fully-valid window positions."""
    arr_a, peak_a = _as_array_and_peak(a, peak)
    arr_b, peak_b = _as_array_and_peak(b, peak)
    if arr_a.shape != arr_b.shape:
        raise ValueError(f"shape mismatch: {arr_a.shape} vs {arr_b.shape}")
    if peak_a != peak_b:
        raise ValueError("images declare different dynamic ranges")
    if min(arr_a.shape) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")

    kernel = _gaussian_kernel()
    mu_a = fftconvolve(arr_a, kernel, mode="valid")
    mu_b = fftconvolve(arr_b, kernel, mode="valid")
    var_a = fftconvolve(arr_a * arr_a, kernel, mode="valid") - mu_a**2
    var_b = fftconvolve(arr_b * arr_b, kernel, mode="valid") - mu_b**2
    cov = fftconvolve(arr_a * arr_b, kernel, mode="valid") - mu_a * mu_b

    c1 = (SSIM_K1 * peak_a) ** 2
    c2 = (SSIM_K2 * peak_a) ** 2
    ssim_map = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )

    if exclude_mask is not None:
        mask = np.asarray(exclude_mask, dtype=np.float64)
        touched = fftconvolve(mask, np.ones_like(kernel), mode="valid")
        keep = touched < 0.5
        if not keep.any():
            raise ValueError("exclude_mask removes every SSIM window")
        return float(ssim_map[keep].mean())
    return float(ssim_map.mean())


@dataclass(frozen=True)
class EvalPair:
    """One test case: artifact input, clean ground truth, metal mask."""

    artifact: ImageRef
    clean: ImageRef
    mask: np.ndarray | None = None


@dataclass
class MetricsRow:
    method: str
    psnr_db: float
    ssim_percent: float
    n_images: int


def evaluate_pairs(
    correct_fn,
    pairs: list[EvalPair],
    exclude_metal: bool = True,
    window: HUWindow | None = None,
    method: str = "corrected",
) -> MetricsRow:
    """Average PSNR/SSIM of ``correct_fn`` outputs against clean ground truth.

    ``correct_fn`` maps a NormalizedImage to a NormalizedImage; pass the
    identity to score the uncorrected inputs. Identical-image PSNR is
    flagged and excluded from the average with a warning.
    """
    if not pairs:
        raise ValueError("no evaluation pairs given")
    psnrs: list[float] = []
    ssims: list[float] = []
    for pair in pairs:
        x_a = normalize_hu(pair.artifact.load(), window)
        y = normalize_hu(pair.clean.load(), window)
        out = correct_fn(x_a)
        mask = pair.mask if exclude_metal else None
        p = psnr(out, y, exclude_mask=mask)
        if math.isinf(p):
            warnings.warn(f"identical images for {pair.artifact.ref_id}; PSNR excluded from mean")
        else:
            psnrs.append(p)
        ssims.append(ssim(out, y, exclude_mask=mask))
    mean_psnr = float(np.mean(psnrs)) if psnrs else math.inf
    return MetricsRow(
        method=method,
        psnr_db=mean_psnr,
        ssim_percent=float(np.mean(ssims)) * 100.0,
        n_images=len(pairs),
    )


def evaluate_dataset(
    model: AdnModel,
    pairs: list[EvalPair],
    exclude_metal: bool = True,
    window: HUWindow | None = None,
) -> MetricsRow:
    """Score the model's correction path over a test set."""

    def correct(x_a: NormalizedImage) -> NormalizedImage:
        return infer_correction_image(model, x_a)

    return evaluate_pairs(correct, pairs, exclude_metal=exclude_metal, window=window, method="corrected")


def artifact_transfer(model: AdnModel, x_a: NormalizedImage, y: NormalizedImage) -> NormalizedImage:
    """Transplant the artifact of ``x_a`` onto the clean image ``y``."""
    import torch

    model.eval()
    with torch.no_grad():
        z_y = model.encode_content_clean(image_to_tensor(y))
        z_a = model.encode_artifact(image_to_tensor(x_a))
        out = model.decode_artifact(z_y, z_a)
    return tensor_to_image(out, y.window)


def _to_gray(panel, window: HUWindow) -> np.ndarray:
    if isinstance(panel, NormalizedImage):
        norm = panel.pixels
    elif isinstance(panel, CTImage):
        norm = normalize_hu(panel, window).pixels
    else:
        norm = np.clip(np.asarray(panel, dtype=np.float32), -1.0, 1.0)
    return np.round((norm.astype(np.float64) + 1.0) * 127.5).astype(np.uint8)


def render_montage(
    rows,
    metal_mask=None,
    window: HUWindow | None = None,
    gutter: int = 2,
    path=None,
) -> np.ndarray:
    """Grid montage as an RGB uint8 array; metal pixels are painted pure red.

    ``rows`` is a list of rows, each a list of same-shaped panels
    (CTImage, NormalizedImage or already-normalized arrays).
    ``metal_mask`` may be a single mask applied to every panel or a list
    with one mask (or None) per row. Returns the array and optionally
    writes an 8-bit PNG.
    """
    if window is None:
        window = HUWindow()
    if not rows or not rows[0]:
        raise ValueError("montage needs at least one panel")
    if isinstance(metal_mask, (list, tuple)):
        if len(metal_mask) != len(rows):
            raise ValueError("need one metal mask (or None) per row")
        row_masks = list(metal_mask)
    else:
        row_masks = [metal_mask] * len(rows)
    n_cols = max(len(r) for r in rows)
    panel0 = _to_gray(rows[0][0], window)
    ph, pw = panel0.shape
    height = len(rows) * ph + (len(rows) - 1) * gutter
    width = n_cols * pw + (n_cols - 1) * gutter
    canvas = np.zeros((height, width, 3), dtype=np.uint8)
    for i, row in enumerate(rows):
        mask = None if row_masks[i] is None else np.asarray(row_masks[i], dtype=bool)
        for j, panel in enumerate(row):
            gray = _to_gray(panel, window)
            if gray.shape != (ph, pw):
                raise ValueError("all montage panels must share one shape")
            rgb = np.stack([gray, gray, gray], axis=-1)
            if mask is not None:
                rgb[mask] = (255, 0, 0)
            top = i * (ph + gutter)
            left = j * (pw + gutter)
            canvas[top : top + ph, left : left + pw] = rgb
    if path is not None:
        Image.fromarray(canvas).save(Path(path))
    return canvas

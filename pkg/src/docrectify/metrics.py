"""Evaluation metrics: MS-SSIM, edit distance / CER and flow end-point error."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ContractError, GeometryError

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_C1 = 0.01 ** 2
_C2 = 0.03 ** 2


class ScaleReductionWarning(UserWarning):
    """The image is too small for the requested number of MS-SSIM scales."""


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    w = np.exp(-(x * x) / (2 * sigma * sigma))
    return w / w.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Separable correlation keeping only fully-covered positions."""
    half = len(win) // 2
    out = ndimage.correlate1d(img, win, axis=0, mode="constant")
    out = ndimage.correlate1d(out, win, axis=1, mode="constant")
    return out[half:-half or None, half:-half or None]


def _ssim_parts(a: np.ndarray, b: np.ndarray, win: np.ndarray) -> tuple[float, float]:
    mu_a = _filter_valid(a, win)
    mu_b = _filter_valid(b, win)
    aa = _filter_valid(a * a, win) - mu_a * mu_a
    bb = _filter_valid(b * b, win) - mu_b * mu_b
    ab = _filter_valid(a * b, win) - mu_a * mu_b
    cs = (2 * ab + _C2) / (aa + bb + _C2)
    lum = (2 * mu_a * mu_b + _C1) / (mu_a * mu_a + mu_b * mu_b + _C1)
    return float((lum * cs).mean()), float(cs.mean())


def to_gray(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return image.mean(axis=-1) if image.ndim == 3 else image


def ms_ssim_scales(a, b, scales: int = 5) -> tuple[float, int]:
    """MS-SSIM of two ``[0, 1]`` images plus the number of scales used.

    Colour images are converted to grayscale.  Scales whose side would be
    shorter than the 11-pixel window are dropped and the remaining weights
    renormalised.
    """
    a, b = to_gray(a), to_gray(b)
    if a.shape != b.shape:
        raise GeometryError(f"image extents differ: {a.shape} vs {b.shape}")
    win = _gaussian_window()
    usable = 0
    side = min(a.shape)
    while usable < scales and side >= len(win):
        usable += 1
        side //= 2
    if usable == 0:
        raise GeometryError(f"image {a.shape} smaller than the {len(win)}-pixel window")
    if usable < scales:
        warnings.warn(f"MS-SSIM reduced from {scales} to {usable} scales for {a.shape}",
                      ScaleReductionWarning, stacklevel=2)
    weights = np.asarray(MS_SSIM_WEIGHTS[:usable])
    weights = weights / weights.sum()
    values = []
    for level in range(usable):
        ssim, cs = _ssim_parts(a, b, win)
        values.append(ssim if level == usable - 1 else cs)
        if level < usable - 1:
            h, w = (a.shape[0] // 2) * 2, (a.shape[1] // 2) * 2
            a = a[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
            b = b[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
    values = np.maximum(np.asarray(values), 0.0)
    return float(np.prod(values ** weights)), usable


def ms_ssim(a, b, scales: int = 5) -> float:
    return ms_ssim_scales(a, b, scales)[0]


@dataclass(frozen=True)
class EditCounts:
    distance: int
    deletions: int
    insertions: int
    substitutions: int


def edit_distance(pred: str, target: str) -> EditCounts:
    """Unit-cost Levenshtein distance turning ``pred`` into ``target``.

    Also returns one optimal decomposition into deletions (characters of
    ``pred`` dropped), insertions (characters of ``target`` added) and
    substitutions.
    """
    n, m = len(pred), len(target)
    dp = np.zeros((n + 1, m + 1), dtype=np.int64)
    dp[:, 0] = np.arange(n + 1)
    dp[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        pi = pred[i - 1]
        for j in range(1, m + 1):
            cost = 0 if pi == target[j - 1] else 1
            dp[i, j] = min(dp[i - 1, j] + 1, dp[i, j - 1] + 1, dp[i - 1, j - 1] + cost)
    d = ins = sub = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dp[i, j] == dp[i - 1, j - 1] + (pred[i - 1] != target[j - 1]):
            sub += pred[i - 1] != target[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and dp[i, j] == dp[i - 1, j] + 1:
            d += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditCounts(int(dp[n, m]), d, ins, int(sub))


def cer(counts: EditCounts, target_len: int) -> float:
    """Character error rate ``(d + i + s) / N_s``."""
    if target_len < 1:
        raise ContractError("character error rate needs a non-empty target")
    return (counts.deletions + counts.insertions + counts.substitutions) / target_len


def ld_epe(pred, gt, mask=None) -> float:
    """Mean end-point error between two displacement fields over ``mask``."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 2:
        raise GeometryError(f"flow shapes differ: {pred.shape} vs {gt.shape}")
    epe = np.sqrt(((pred - gt) ** 2).sum(axis=-1))
    if mask is None:
        return float(epe.mean())
    mask = np.asarray(mask).astype(bool)
    if mask.shape != epe.shape:
        raise GeometryError(f"mask {mask.shape} does not match flow {epe.shape}")
    if not mask.any():
        raise ContractError("end-point error over an empty mask")
    return float(epe[mask].mean())


@dataclass
class MetricsReport:
    """Per-sample metrics; a field is None when its inputs were absent."""

    sample: str
    ms_ssim: float | None = None
    ld_epe: float | None = None
    ed: int | None = None
    cer: float | None = None

    FIELDS = ("sample", "ms_ssim", "ld_epe", "ed", "cer")

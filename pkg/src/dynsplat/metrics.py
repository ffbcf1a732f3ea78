"""Tracking and view-synthesis metrics.

3D track error is absolute (scene units); its delta thresholds default to
0.05 and 0.10 but scale with the caller's scene (pass thresholds scaled by
the bounding-box diagonal for relative targets).  2D tracking follows the
TAP-Vid convention: pixel coordinates are normalized to a 256x256 canvas,
position thresholds are {1, 2, 4, 8, 16} px, and Jaccard counts a
predicted-visible point as a false positive when the ground truth is
occluded or the position misses the threshold.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyMask, EmptyValidSet, ShapeMismatch

TAPVID_THRESHOLDS = (1.0, 2.0, 4.0, 8.0, 16.0)
PSNR_CAP = 99.0


@dataclass
class MetricReport:
    epe: float = float("nan")
    delta_5cm: float = float("nan")
    delta_10cm: float = float("nan")
    aj: float = float("nan")
    delta_avg: float = float("nan")
    oa: float = float("nan")
    psnr: float = float("nan")
    ssim: float = float("nan")
    per_threshold: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "epe": self.epe,
            "delta_5cm": self.delta_5cm,
            "delta_10cm": self.delta_10cm,
            "aj": self.aj,
            "delta_avg": self.delta_avg,
            "oa": self.oa,
            "psnr": self.psnr,
            "ssim": self.ssim,
            "per_threshold": self.per_threshold,
        }


def report_json(report: MetricReport) -> str:
    """Serialize a MetricReport to JSON.

    Non-finite values become null; per-threshold keys are stringified
    pixel thresholds.
    """
    def scrub(x):
        if isinstance(x, float) and not math.isfinite(x):
            return None
        return x

    d = {k: scrub(v) for k, v in report.as_dict().items()
         if k != "per_threshold"}
    d["per_threshold"] = {
        name: {f"{thr:g}": scrub(float(v)) for thr, v in sub.items()}
        for name, sub in report.per_threshold.items()
    }
    return json.dumps(d, indent=2, sort_keys=True, allow_nan=False)


# ---------------------------------------------------------------------
# 3D tracking
# ---------------------------------------------------------------------


def epe_3d(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray,
           thresholds: tuple = (0.05, 0.10)) -> tuple[float, float, float]:
    """Mean 3D end-point error plus within-threshold percentages.

    pred/gt are (P, T, 3), valid (P, T).  Scaling pred, gt and thresholds
    together by s scales the error by s and leaves the percentages alone.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if pred.shape != gt.shape or pred.shape[:2] != valid.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs gt {gt.shape} vs valid {valid.shape}")
    if not valid.any():
        raise EmptyValidSet("no valid track entries")
    err = np.linalg.norm(pred - gt, axis=-1)[valid]
    epe = float(err.mean())
    d5 = float(np.mean(err <= thresholds[0]) * 100.0)
    d10 = float(np.mean(err <= thresholds[1]) * 100.0)
    return epe, d5, d10


# ---------------------------------------------------------------------
# 2D tracking (TAP-Vid convention)
# ---------------------------------------------------------------------


def tapvid_metrics(pred_uv: np.ndarray, gt_uv: np.ndarray,
                   pred_occluded: np.ndarray, gt_occluded: np.ndarray,
                   width: int, height: int) -> dict:
    """AJ, delta_avg and OA as percentages, plus per-threshold values.

    Coordinates are rescaled to a 256x256 canvas before thresholding.
    Jaccard at a threshold: TP are predicted-visible, ground-truth-visible
    points within the threshold; FP are predicted-visible points that are
    ground-truth-occluded or outside it; denominator is gt-visible + FP.
    """
    pred_uv = np.asarray(pred_uv, dtype=np.float64)
    gt_uv = np.asarray(gt_uv, dtype=np.float64)
    pred_occ = np.asarray(pred_occluded, dtype=bool)
    gt_occ = np.asarray(gt_occluded, dtype=bool)
    if pred_uv.shape != gt_uv.shape or pred_occ.shape != gt_occ.shape:
        raise ShapeMismatch("prediction/ground-truth shapes differ")

    scale = np.array([256.0 / width, 256.0 / height])
    diff = (pred_uv - gt_uv) * scale
    dist = np.linalg.norm(diff, axis=-1)
    dist = np.where(np.isfinite(dist), dist, np.inf)
    pred_vis = ~pred_occ
    gt_vis = ~gt_occ

    oa = float(np.mean(pred_occ == gt_occ) * 100.0)
    deltas, jaccards = {}, {}
    n_gt_vis = gt_vis.sum()
    for thr in TAPVID_THRESHOLDS:
        within = dist < thr
        if n_gt_vis:
            deltas[thr] = float(np.mean(within[gt_vis]) * 100.0)
        else:
            deltas[thr] = 0.0
        tp = np.sum(within & pred_vis & gt_vis)
        fp = np.sum(pred_vis & ~(within & gt_vis))
        denom = n_gt_vis + fp
        jaccards[thr] = float(tp / denom * 100.0) if denom else 0.0
    return {
        "aj": float(np.mean(list(jaccards.values()))),
        "delta_avg": float(np.mean(list(deltas.values()))),
        "oa": oa,
        "delta_per_threshold": deltas,
        "jaccard_per_threshold": jaccards,
    }


# ---------------------------------------------------------------------
# image metrics
# ---------------------------------------------------------------------


def psnr(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None
         ) -> float:
    """10*log10(1/MSE) for [0, 1] images, capped at 99 dB."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    se = (pred - gt) ** 2
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise EmptyMask("psnr mask selects no pixels")
        se = se[mask]
    mse = float(se.mean())
    if mse <= 0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP))


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def _window_filter(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable valid-mode 2D correlation: (H, W) -> (H-10, W-10)."""
    size = kernel.size
    H, W = img.shape
    tmp = np.zeros((H, W - size + 1))
    for i in range(size):
        tmp += kernel[i] * img[:, i:W - size + 1 + i]
    out = np.zeros((H - size + 1, W - size + 1))
    for i in range(size):
        out += kernel[i] * tmp[i:H - size + 1 + i, :]
    return out


def ssim(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None,
         window: int = 11, sigma: float = 1.5) -> float:
    """Mean local SSIM over windows fully inside the image.

    Gaussian-weighted 11x11 windows, C1 = 0.01^2, C2 = 0.03^2 on [0, 1]
    images.  Multichannel inputs average the per-channel scores.  An
    optional (H, W) mask keeps windows whose center pixel is masked.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    if pred.ndim == 2:
        pred = pred[..., None]
        gt = gt[..., None]
    H, W = pred.shape[:2]
    if H < window or W < window:
        raise ShapeMismatch(f"image {H}x{W} smaller than the {window}x{window} window")
    kernel = _gaussian_kernel(window, sigma)
    c1, c2 = 0.01**2, 0.03**2
    half = window // 2
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        inner = mask[half:H - half, half:W - half]
        if not inner.any():
            raise EmptyMask("ssim mask selects no interior windows")
    else:
        inner = None

    scores = []
    for c in range(pred.shape[2]):
        a, b = pred[:, :, c], gt[:, :, c]
        mu_a = _window_filter(a, kernel)
        mu_b = _window_filter(b, kernel)
        var_a = _window_filter(a * a, kernel) - mu_a**2
        var_b = _window_filter(b * b, kernel) - mu_b**2
        cov = _window_filter(a * b, kernel) - mu_a * mu_b
        smap = (((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)))
        scores.append(smap[inner].mean() if inner is not None else smap.mean())
    return float(np.mean(scores))

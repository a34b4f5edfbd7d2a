"""Evaluation metrics: pixel accuracy, IoU, PSNR and the entropy-mean product.

The entropy uses natural log over amplitude-normalized pixels, so the
entropy-mean product scales linearly with a global amplitude factor;
magnitudes are therefore not comparable across normalization conventions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EvalReport:
    pa: float
    iou: float
    psnr_db: float   # math.inf when the images match exactly
    me: float

    def to_text(self) -> str:
        psnr = "inf" if math.isinf(self.psnr_db) else f"{self.psnr_db:.6f}"
        return (f"pa={self.pa:.6f}\niou={self.iou:.6f}\n"
                f"psnr_db={psnr}\nme={self.me:.6f}\n")


def _check_shapes(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def pixel_accuracy(pred: np.ndarray, truth: np.ndarray) -> float:
    """Fraction of cells where the binary masks agree."""
    _check_shapes(pred, truth, "pixel_accuracy")
    return float(np.mean(pred.astype(bool) == truth.astype(bool)))


def iou(pred: np.ndarray, truth: np.ndarray) -> float:
    """Intersection over union of binary masks; 1.0 when both are empty."""
    _check_shapes(pred, truth, "iou")
    p = pred.astype(bool)
    t = truth.astype(bool)
    union = np.count_nonzero(p | t)
    if union == 0:
        return 1.0
    return float(np.count_nonzero(p & t) / union)


def psnr(x: np.ndarray, ref: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB, peak taken from the reference."""
    _check_shapes(x, ref, "psnr")
    mse = float(np.mean((x.astype(np.float64) - ref.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    peak = float(np.max(np.abs(ref)))
    if peak == 0.0:
        raise ValueError("psnr: reference image is identically zero")
    return 10.0 * math.log10(peak * peak / mse)


def me(image: np.ndarray) -> float:
    """Entropy-times-mean of a nonnegative image; lower means cleaner."""
    img = np.asarray(image, dtype=np.float64)
    if (img < 0).any():
        raise ValueError("me: image must be nonnegative")
    total = img.sum()
    if total == 0.0:
        raise ValueError("me: image is identically zero")
    p = img.reshape(-1) / total
    nz = p[p > 0]
    ent = float(-(nz * np.log(nz)).sum())
    return ent * float(img.mean())


def evaluate_masks(pred: np.ndarray, truth: np.ndarray,
                   recovered: np.ndarray, reference: np.ndarray) -> EvalReport:
    """Bundle the four metrics for one (mask, image) evaluation."""
    return EvalReport(pa=pixel_accuracy(pred, truth),
                      iou=iou(pred, truth),
                      psnr_db=psnr(recovered, reference),
                      me=me(np.abs(recovered)))

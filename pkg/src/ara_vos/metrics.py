"""DAVIS-style region similarity (J), contour accuracy (F) and their mean."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BINARIZE_THRESHOLD = 0.5
DEFAULT_RADIUS = 1


def _binary(mask, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.dtype == bool:
        return arr
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} mask is not binary")
    return arr.astype(bool)


def binarize(prob, threshold: float = BINARIZE_THRESHOLD) -> np.ndarray:
    return np.asarray(prob) >= threshold


def region_similarity(pred, gt) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    p, g = _binary(pred, "pred"), _binary(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Inner 4-connected morphological gradient: mask minus its erosion (outside counts as background)."""
    m = np.pad(mask, 1)
    eroded = m[1:-1, 1:-1] & m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return mask & ~eroded


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Chebyshev (square) dilation."""
    if radius == 0:
        return mask.copy()
    h, w = mask.shape
    m = np.pad(mask, radius)
    out = np.zeros_like(mask)
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            out |= m[dy : dy + h, dx : dx + w]
    return out


def contour_accuracy(pred, gt, radius: int = DEFAULT_RADIUS) -> float:
    """Boundary F1 with a Chebyshev matching tolerance of ``radius`` pixels."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    p, g = _binary(pred, "pred"), _binary(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    bp, bg = boundary(p), boundary(g)
    np_, ng = bp.sum(), bg.sum()
    if np_ == 0 and ng == 0:
        return 1.0
    if np_ == 0 or ng == 0:
        return 0.0
    precision = (bp & _dilate(bg, radius)).sum() / np_
    recall = (bg & _dilate(bp, radius)).sum() / ng
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


@dataclass
class EvalResult:
    J_frames: list[float]
    F_frames: list[float]

    @property
    def J(self) -> float:
        return float(np.mean(self.J_frames)) if self.J_frames else 0.0

    @property
    def F(self) -> float:
        return float(np.mean(self.F_frames)) if self.F_frames else 0.0

    @property
    def JF(self) -> float:
        return (self.J + self.F) / 2


def evaluate_video(preds, gts, radius: int = DEFAULT_RADIUS) -> EvalResult:
    """Score binary predictions against ground truth frame by frame.

    ``preds`` and ``gts`` are sequences of equal length; each item is either an
    (H, W) mask or a (K, H, W) stack of per-object masks, in which case the
    frame score is the mean over objects.
    """
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground-truth frames")
    js, fs = [], []
    for p, g in zip(preds, gts):
        p, g = np.asarray(p), np.asarray(g)
        if p.ndim == 2:
            p, g = p[None], g[None]
        js.append(float(np.mean([region_similarity(pk, gk) for pk, gk in zip(p, g)])))
        fs.append(float(np.mean([contour_accuracy(pk, gk, radius) for pk, gk in zip(p, g)])))
    return EvalResult(js, fs)


def attack_drop(clean: EvalResult | float, attacked: EvalResult | float) -> float:
    c = clean.JF if isinstance(clean, EvalResult) else float(clean)
    a = attacked.JF if isinstance(attacked, EvalResult) else float(attacked)
    return c - a

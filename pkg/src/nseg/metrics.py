"""Segmentation metrics on probability maps thresholded against binary masks."""
from __future__ import annotations

import numpy as np

from .errors import ContractError


def _binarize(pred_prob, mask, threshold):
    pred_prob, mask = np.asarray(pred_prob), np.asarray(mask)
    if pred_prob.shape != mask.shape:
        raise ContractError(f"prediction shape {pred_prob.shape} != mask shape {mask.shape}")
    return pred_prob >= threshold, mask > 0.5


def pixel_accuracy(pred_prob, mask, threshold: float = 0.5) -> float:
    """Fraction of pixels where the thresholded prediction equals the mask."""
    a, b = _binarize(pred_prob, mask, threshold)
    return float(np.mean(a == b))


def dice_coefficient(pred_prob, mask, threshold: float = 0.5) -> float:
    """``2|A and B| / (|A| + |B|)`` over all pixels; two empty masks score 1."""
    a, b = _binarize(pred_prob, mask, threshold)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom

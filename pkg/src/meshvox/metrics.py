"""Segmentation metrics over binary masks (lesion = positive class)."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be >= 0")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def empty(self) -> bool:
        """True when neither mask has any lesion voxel."""
        return self.tp + self.fp + self.fn == 0


def _mask_array(m) -> np.ndarray:
    return np.asarray(getattr(m, "data", m))


def confusion(pred, gt) -> Confusion:
    """Voxel counts for a predicted and a reference mask (arrays or LabelMasks)."""
    p = _mask_array(pred).astype(bool)
    g = _mask_array(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    tp = int(np.count_nonzero(p & g))
    n_pred = int(np.count_nonzero(p))
    n_gt = int(np.count_nonzero(g))
    fp = n_pred - tp
    fn = n_gt - tp
    return Confusion(tp, fp, fn, p.size - tp - fp - fn)


def dice(c: Confusion) -> float:
    """2 TP / (2 TP + FP + FN). Two empty masks score 1.0 (see ``Confusion.empty``)."""
    if c.empty:
        return 1.0
    return 2 * c.tp / (2 * c.tp + c.fp + c.fn)


def avd(pred_vol: int, gt_vol: int) -> float:
    """Fractional absolute volume difference |V_pred - V_gt| / V_gt."""
    if gt_vol <= 0:
        raise ValueError("AVD is undefined for an empty reference volume")
    return abs(pred_vol - gt_vol) / gt_vol


def mcc(c: Confusion) -> float:
    """Matthews correlation; 0.0 when any marginal is empty.

    Python integers keep the numerator exact. The denominator is a product of
    two square roots of paired marginals; each pair stays below 2**53 at
    256^3-scale counts, so the products convert to float exactly.
    """
    num = c.tp * c.tn - c.fp * c.fn
    factors = (c.tp + c.fp, c.tp + c.fn, c.fp + c.tn, c.fn + c.tn)
    if 0 in factors:
        return 0.0
    den = math.sqrt(factors[0] * factors[1]) * math.sqrt(factors[2] * factors[3])
    return max(-1.0, min(1.0, num / den))


def evaluate(pred, gt) -> dict:
    """All metrics as a flat dict: dice, avd, mcc, tp, fp, fn, tn."""
    c = confusion(pred, gt)
    gt_vol = c.tp + c.fn
    return {
        "dice": dice(c),
        "avd": avd(c.tp + c.fp, gt_vol) if gt_vol > 0 else float("nan"),
        "mcc": mcc(c),
        **asdict(c),
    }

"""Segmentation losses, Dice evaluation and clinical indices."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor, clip_min, log

PROB_FLOOR = 1e-12
DICE_SMOOTH = 1e-6
MYOCARDIAL_DENSITY = 1.05  # g/mL

BACKGROUND, RV, MYO, LV = 0, 1, 2, 3
CLASS_NAMES = {RV: "rv", MYO: "myo", LV: "lv"}
FOREGROUND = (RV, MYO, LV)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.5

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError(f"loss weights must be non-negative with a positive sum, got {self}")


def _check_labels(target: np.ndarray, num_classes: int) -> np.ndarray:
    target = np.asarray(target)
    if target.size and (target.min() < 0 or target.max() >= num_classes):
        bad = target[(target < 0) | (target >= num_classes)][0]
        raise ValueError(f"label {bad} outside [0, {num_classes})")
    return target


def one_hot(target: np.ndarray, num_classes: int, dtype=np.float64) -> np.ndarray:
    """(N, H, W) integer labels -> (N, C, H, W) indicator array."""
    target = _check_labels(target, num_classes)
    out = np.zeros((target.shape[0], num_classes) + target.shape[1:], dtype=dtype)
    np.put_along_axis(out, target[:, None].astype(np.intp), 1.0, axis=1)
    return out


def cross_entropy(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean over pixels of -log p(true class); probabilities are floored at 1e-12."""
    onehot = one_hot(target, pred.shape[1], pred.dtype)
    n_pix = onehot.shape[0] * onehot.shape[2] * onehot.shape[3]
    picked = (pred * onehot).sum(axis=1)
    return -(log(clip_min(picked, PROB_FLOOR)).sum()) * (1.0 / n_pix)


def soft_dice(pred: Tensor, target: np.ndarray, classes: Sequence[int] = FOREGROUND) -> Tensor:
    """Mean over ``classes`` of (2 sum p g + eps) / (sum p + sum g + eps), pooled over the batch."""
    onehot = one_hot(target, pred.shape[1], pred.dtype)
    idx = list(classes)
    if idx == list(range(idx[0], idx[-1] + 1)):
        idx = slice(idx[0], idx[-1] + 1)
    p = pred[:, idx]
    g = onehot[:, idx]
    inter = (p * g).sum(axis=(0, 2, 3))
    denom = p.sum(axis=(0, 2, 3)) + g.sum(axis=(0, 2, 3))
    return ((inter * 2.0 + DICE_SMOOTH) / (denom + DICE_SMOOTH)).mean()


def soft_dice_loss(pred: Tensor, target: np.ndarray, classes: Sequence[int] = FOREGROUND) -> Tensor:
    return 1.0 - soft_dice(pred, target, classes)


def dual_loss(pred: Tensor, target: np.ndarray, weights: LossWeights = LossWeights()) -> Tensor:
    """alpha * cross-entropy + beta * (1 - soft Dice)."""
    loss = cross_entropy(pred, target) * weights.alpha
    if weights.beta:
        loss = loss + soft_dice_loss(pred, target) * weights.beta
    return loss


def dice_score(pred_labels: np.ndarray, target_labels: np.ndarray, cls: int) -> float:
    """Hard Dice 2|P & G| / (|P| + |G|) for one class; 1.0 when both are empty."""
    p = np.asarray(pred_labels) == cls
    g = np.asarray(target_labels) == cls
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def mean_foreground_dice(pred_labels: np.ndarray, target_labels: np.ndarray) -> float:
    return float(np.mean([dice_score(pred_labels, target_labels, c) for c in FOREGROUND]))


# -- clinical indices -------------------------------------------------------------
@dataclass
class ClassMasks:
    """A label volume (slices, H, W) with its voxel geometry in millimetres."""

    labels: np.ndarray
    spacing: tuple
    thickness: float

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if len(self.spacing) != 2 or min(self.spacing) <= 0 or self.thickness <= 0:
            raise ValueError(f"voxel geometry must be positive, got spacing={self.spacing}, "
                             f"thickness={self.thickness}")


def volume_ml(masks: ClassMasks, cls: int) -> float:
    voxels = int(np.count_nonzero(masks.labels == cls))
    sx, sy = masks.spacing
    return voxels * sx * sy * masks.thickness / 1000.0


def ejection_fraction(edv: float, esv: float) -> float:
    """(EDV - ESV) / EDV in percent."""
    if edv <= 0:
        raise ValueError(f"end-diastolic volume must be positive, got {edv}")
    if esv < 0:
        raise ValueError(f"end-systolic volume must be non-negative, got {esv}")
    return (edv - esv) / edv * 100.0


def myocardial_mass(myo_volume_ml: float) -> float:
    if myo_volume_ml < 0:
        raise ValueError("volume must be non-negative")
    return myo_volume_ml * MYOCARDIAL_DENSITY

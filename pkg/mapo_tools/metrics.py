"""Binary masks and evaluation metrics (Dice score, average surface distance)."""

from __future__ import annotations

from fractions import Fraction

import numpy as np
import numpy.typing as npt
from beartype import beartype
from scipy.ndimage import binary_erosion, distance_transform_edt, generate_binary_structure

from mapo_tools.autodiff import Tensor
from mapo_tools.constants import BINARIZE_AT
from mapo_tools.errors import ContractViolation

BinaryMask = npt.NDArray[np.uint8]

_FOUR_CONNECTED = generate_binary_structure(2, 1)


@beartype
def to_mask(values: np.ndarray) -> BinaryMask:
    """Validate that *values* are strictly 0/1 and return them as a uint8 mask."""
    arr = np.asarray(values)
    if arr.dtype == bool:
        return arr.astype(np.uint8)
    if not np.isin(arr, (0, 1)).all():
        raise ContractViolation("Mask values must be strictly 0 or 1")
    return arr.astype(np.uint8)


@beartype
def binarize(probs: Tensor | np.ndarray, threshold: float = BINARIZE_AT) -> BinaryMask:
    """Foreground where probability >= *threshold*."""
    values = probs.data if isinstance(probs, Tensor) else probs
    return (values >= threshold).astype(np.uint8)


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ContractViolation(f"Mask shape mismatch {a.shape} vs {b.shape}")


@beartype
def dice_ratio(pred: BinaryMask, gt: BinaryMask) -> Fraction:
    """Exact 2|A∩B| / (|A|+|B|); two empty masks agree perfectly (1)."""
    _check_shapes(pred, gt)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return Fraction(1)
    inter = int(np.logical_and(pred, gt).sum())
    return Fraction(2 * inter, total)


@beartype
def dice_score(pred: BinaryMask, gt: BinaryMask) -> float:
    """``dice_ratio`` rounded to the nearest float."""
    return float(dice_ratio(pred, gt))


@beartype
def surface(mask: BinaryMask) -> npt.NDArray[np.bool_]:
    """Foreground pixels with at least one background 4-neighbour; outside the image is background."""
    fg = mask.astype(bool)
    return fg & ~binary_erosion(fg, structure=_FOUR_CONNECTED, border_value=0)


@beartype
def asd(pred: BinaryMask, gt: BinaryMask) -> float | None:
    """Symmetric average surface distance in pixels.

    Returns ``None`` when exactly one mask is empty (undefined), ``0.0`` when both are.
    """
    _check_shapes(pred, gt)
    pred_empty, gt_empty = not pred.any(), not gt.any()
    if pred_empty and gt_empty:
        return 0.0
    if pred_empty or gt_empty:
        return None
    pred_surface, gt_surface = surface(pred), surface(gt)
    to_gt = distance_transform_edt(~gt_surface)
    to_pred = distance_transform_edt(~pred_surface)
    return 0.5 * (float(to_gt[pred_surface].mean()) + float(to_pred[gt_surface].mean()))

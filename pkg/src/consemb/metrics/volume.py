"""Overlap and boundary-distance metrics in physical units."""
from __future__ import annotations

import warnings

import numpy as np
from scipy import ndimage

from ..errors import DegenerateInputWarning, InvalidInputError

_FACE = ndimage.generate_binary_structure(3, 1)


def _arrays(pred, gt):
    p = np.asarray(getattr(pred, "data", pred)).astype(bool)
    g = np.asarray(getattr(gt, "data", gt)).astype(bool)
    if p.shape != g.shape:
        raise InvalidInputError(f"mask dims differ: {p.shape} vs {g.shape}")
    return p, g


def _spacing(pred, gt, spacing):
    if spacing is not None:
        return tuple(float(s) for s in spacing)
    sp = getattr(gt, "spacing_mm", None) or getattr(pred, "spacing_mm", None)
    if sp is None:
        raise InvalidInputError("voxel spacing unknown; pass spacing=")
    return tuple(float(s) for s in sp)


def dice_iou(pred, gt) -> dict:
    p, g = _arrays(pred, gt)
    inter = int((p & g).sum())
    total = int(p.sum() + g.sum())
    if total == 0:
        warnings.warn("both masks empty; dice and iou set to 1.0", DegenerateInputWarning, stacklevel=2)
        return {"dice": 1.0, "iou": 1.0}
    return {"dice": 2 * inter / total, "iou": inter / (total - inter)}


def surface(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a face neighbour outside the mask (or the volume)."""
    mask = mask.astype(bool)
    return mask & ~ndimage.binary_erosion(mask, _FACE, border_value=0)


def _distances_to(target: np.ndarray, spacing) -> np.ndarray:
    # distance from every voxel to the nearest target voxel, in mm
    return ndimage.distance_transform_edt(~target, sampling=spacing)


def directed_distances(pred, gt, spacing=None, points="surface"):
    """Distances from pred points to gt points and back, as two arrays."""
    p, g = _arrays(pred, gt)
    sp = _spacing(pred, gt, spacing)
    if points == "surface":
        p, g = surface(p), surface(g)
    elif points != "full":
        raise InvalidInputError(f"unknown point set {points!r}")
    return _distances_to(g, sp)[p], _distances_to(p, sp)[g]


def _empty_case(p, g, sp, what):
    if not p.any() and not g.any():
        warnings.warn(f"both masks empty; {what} uses the perfect-score convention",
                      DegenerateInputWarning, stacklevel=3)
        return "both"
    if not p.any() or not g.any():
        warnings.warn(f"one mask empty; {what} uses the worst-case convention",
                      DegenerateInputWarning, stacklevel=3)
        return "one"
    return None


def volume_diagonal(shape, spacing) -> float:
    return float(np.sqrt(sum((n * s) ** 2 for n, s in zip(shape, spacing))))


def hd95(pred, gt, spacing=None, pooling="pooled", points="surface", q=95.0) -> float:
    """Symmetric 95th percentile boundary distance in mm.

    ``pooling="pooled"`` takes the percentile of both directed distance sets
    together; ``"max"`` takes the larger of the two per-direction percentiles.
    Both empty gives 0.0; one empty gives the volume diagonal.
    """
    p, g = _arrays(pred, gt)
    sp = _spacing(pred, gt, spacing)
    empty = _empty_case(p, g, sp, "hd95")
    if empty == "both":
        return 0.0
    if empty == "one":
        return volume_diagonal(p.shape, sp)
    d_pg, d_gp = directed_distances(p, g, sp, points)
    if pooling == "pooled":
        return float(np.percentile(np.concatenate([d_pg, d_gp]), q))
    if pooling == "max":
        return float(max(np.percentile(d_pg, q), np.percentile(d_gp, q)))
    raise InvalidInputError(f"unknown hd95 pooling {pooling!r}")


def surface_dice(pred, gt, tolerance_mm: float, spacing=None) -> float:
    if not tolerance_mm > 0:
        raise InvalidInputError(f"tolerance must be positive, got {tolerance_mm}")
    p, g = _arrays(pred, gt)
    sp = _spacing(pred, gt, spacing)
    empty = _empty_case(p, g, sp, "surface_dice")
    if empty == "both":
        return 1.0
    if empty == "one":
        return 0.0
    d_pg, d_gp = directed_distances(p, g, sp, "surface")
    hits = int((d_pg <= tolerance_mm).sum() + (d_gp <= tolerance_mm).sum())
    return hits / (len(d_pg) + len(d_gp))

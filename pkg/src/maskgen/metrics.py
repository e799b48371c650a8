"""IoU-family metrics and boundary-distance scoring for binary masks.

The contour score is the average Hausdorff distance (AHD) between the boundary
point sets of a prediction and its ground truth: the symmetric mean of the two
directed average nearest-point distances. Dataset-level reporting groups pairs
by IoU threshold and reports the mean AHD within each group, with boundary
coordinates rescaled to a common 256-pixel resolution first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .validation import (
    UndefinedDistanceError,
    ValidationError,
    as_binary_mask,
    check_same_shape,
)

DEFAULT_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)
NORMALIZED_RESOLUTION = 256

# Keep each cdist block under ~8M doubles so dataset sweeps stay in cache-friendly memory.
_CDIST_BLOCK = 8_000_000


def intersection_union(pred, gt) -> tuple[int, int]:
    """Pixel counts (|pred ∩ gt|, |pred ∪ gt|) as exact integers."""
    p = as_binary_mask(pred, "pred").astype(bool)
    g = as_binary_mask(gt, "gt").astype(bool)
    check_same_shape(p, g)
    inter = int(np.count_nonzero(p & g))
    union = int(np.count_nonzero(p | g))
    return inter, union


def iou(pred, gt) -> float:
    """Intersection over union; two empty masks agree vacuously (1.0)."""
    inter, union = intersection_union(pred, gt)
    if union == 0:
        return 1.0
    return inter / union


class EvalPair:
    """A (prediction, ground truth) pair with its IoU cached and AHD memoized."""

    def __init__(self, pred, gt):
        self.pred = as_binary_mask(pred, "pred")
        self.gt = as_binary_mask(gt, "gt")
        check_same_shape(self.pred, self.gt)
        self.iou = iou(self.pred, self.gt)
        self._ahd_cache: dict[tuple, float] = {}

    def ahd(self, connectivity: int = 4, normalize: bool = True) -> float:
        key = (connectivity, normalize)
        if key not in self._ahd_cache:
            self._ahd_cache[key] = pair_ahd(
                self.pred, self.gt, connectivity=connectivity, normalize=normalize
            )
        return self._ahd_cache[key]


def c_iou(pairs) -> float:
    """Cumulative intersection over cumulative union across a dataset."""
    pairs = list(pairs)
    if not pairs:
        raise ValidationError("c_iou requires at least one pair")
    total_i = 0
    total_u = 0
    for pair in pairs:
        if isinstance(pair, EvalPair):
            inter, union = intersection_union(pair.pred, pair.gt)
        else:
            inter, union = intersection_union(*pair)
        total_i += inter
        total_u += union
    if total_u == 0:
        return 1.0
    return total_i / total_u


def m_iou(pairs, classes=None) -> float:
    """Mean IoU over classes, accumulating intersections/unions dataset-wide.

    Each pair is (pred_masks, gt_masks): dicts mapping a class id to a binary
    mask. A class absent on one side counts as an all-background mask. Classes
    with zero accumulated union are excluded from the mean; having none left
    is an error.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValidationError("m_iou requires at least one pair")
    inter_by_class: dict = {}
    union_by_class: dict = {}
    for pred_map, gt_map in pairs:
        seen = list(dict.fromkeys(list(pred_map) + list(gt_map)))
        for cls in seen:
            if classes is not None and cls not in classes:
                continue
            p = pred_map.get(cls)
            g = gt_map.get(cls)
            if p is None:
                p = np.zeros_like(np.asarray(g))
            if g is None:
                g = np.zeros_like(np.asarray(p))
            inter, union = intersection_union(p, g)
            inter_by_class[cls] = inter_by_class.get(cls, 0) + inter
            union_by_class[cls] = union_by_class.get(cls, 0) + union
    scored = [inter_by_class[c] / union_by_class[c] for c in union_by_class if union_by_class[c] > 0]
    if not scored:
        raise ValidationError("m_iou: no class has a nonzero union")
    return float(np.mean(scored))


@dataclass(frozen=True)
class BoundaryPoints:
    """Boundary coordinates (row, col) of a mask plus the dimensions they came from."""

    points: np.ndarray  # (n, 2) float64
    source_dims: tuple[float, float]

    def __len__(self) -> int:
        return len(self.points)


def boundary_points(mask, connectivity: int = 4) -> BoundaryPoints:
    """Extract the inner contour: foreground pixels with a background neighbor.

    Pixels outside the image count as background, so a full-frame mask has its
    border as the contour. `connectivity` selects 4- or 8-neighborhoods.
    """
    if connectivity not in (4, 8):
        raise ValidationError(f"connectivity must be 4 or 8, got {connectivity}")
    m = as_binary_mask(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    if connectivity == 8:
        interior &= (
            padded[:-2, :-2] & padded[:-2, 2:] & padded[2:, :-2] & padded[2:, 2:]
        )
    pts = np.argwhere(m & ~interior).astype(np.float64)
    return BoundaryPoints(points=pts, source_dims=(float(m.shape[0]), float(m.shape[1])))


def normalize_points(bp: BoundaryPoints, resolution: int = NORMALIZED_RESOLUTION) -> BoundaryPoints:
    """Scale coordinates by resolution / max(H, W) so masks of different sizes compare."""
    h, w = bp.source_dims
    scale = resolution / max(h, w)
    return BoundaryPoints(points=bp.points * scale, source_dims=(h * scale, w * scale))


def _min_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """For each point of `a`, its Euclidean distance to the nearest point of `b`."""
    block = max(1, _CDIST_BLOCK // max(1, len(b)))
    mins = np.empty(len(a), dtype=np.float64)
    for start in range(0, len(a), block):
        chunk = a[start : start + block]
        mins[start : start + len(chunk)] = cdist(chunk, b).min(axis=1)
    return mins


def _as_points(x) -> np.ndarray:
    if isinstance(x, BoundaryPoints):
        x = x.points
    arr = np.asarray(x, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValidationError(f"point set must have shape (n, 2), got {arr.shape}")
    return arr


def ahd(x, y) -> float:
    """Average Hausdorff distance between two nonempty point sets.

    0.5 * (mean over x of the distance to its nearest y
           + mean over y of the distance to its nearest x).

    Two empty sets agree vacuously (0.0); exactly one empty set has no
    defined distance and raises.
    """
    xp = _as_points(x)
    yp = _as_points(y)
    if len(xp) == 0 and len(yp) == 0:
        return 0.0
    if len(xp) == 0 or len(yp) == 0:
        raise UndefinedDistanceError(
            "average Hausdorff distance is undefined when exactly one boundary set is empty"
        )
    forward = _min_dists(xp, yp).mean()
    backward = _min_dists(yp, xp).mean()
    return 0.5 * (float(forward) + float(backward))


def pair_ahd(pred, gt, connectivity: int = 4, normalize: bool = True) -> float:
    """AHD between the boundaries of two masks, optionally resolution-normalized."""
    bp = boundary_points(pred, connectivity)
    bg = boundary_points(gt, connectivity)
    if normalize:
        bp = normalize_points(bp)
        bg = normalize_points(bg)
    return ahd(bp, bg)


@dataclass(frozen=True)
class MahdGroup:
    threshold: float
    count: int
    mean_ahd: float | None


@dataclass(frozen=True)
class MahdReport:
    thresholds: tuple[float, ...]
    groups: tuple[MahdGroup, ...]

    def as_dict(self) -> dict:
        return {
            f"{g.threshold:g}": {"count": g.count, "mean": g.mean_ahd} for g in self.groups
        }


def m_ahd(
    pairs,
    thresholds=DEFAULT_THRESHOLDS,
    strict: bool = False,
    connectivity: int = 4,
) -> MahdReport:
    """Group pairs by IoU threshold and report each group's mean AHD.

    Retention is inclusive (iou >= t) by default; `strict` switches to a
    strict comparison. AHD is computed on resolution-normalized boundaries,
    and only for pairs that clear at least one threshold. Empty groups report
    a count of 0 and no mean rather than a zero.
    """
    thresholds = tuple(float(t) for t in thresholds)
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValidationError(f"thresholds must be strictly increasing, got {thresholds}")
    pairs = [p if isinstance(p, EvalPair) else EvalPair(*p) for p in pairs]
    groups = []
    for t in thresholds:
        kept = [p for p in pairs if (p.iou > t if strict else p.iou >= t)]
        if kept:
            mean = float(np.mean([p.ahd(connectivity=connectivity) for p in kept]))
        else:
            mean = None
        groups.append(MahdGroup(threshold=t, count=len(kept), mean_ahd=mean))
    return MahdReport(thresholds=thresholds, groups=tuple(groups))

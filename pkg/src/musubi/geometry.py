"""Geometric kernels for axis-aligned 3D boxes and point sets.

Boxes travel as ``(..., 6)`` tensors ``[cx, cy, cz, sx, sy, sz]`` in meters.
Every tensor kernel broadcasts over leading dimensions and stays differentiable
with respect to box parameters away from degenerate overlap boundaries.
:class:`Box3D` is the host-side value type used by the synthetic world and by
evaluation code.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
import torch

logger = logging.getLogger(__name__)

# Additive attention-logit sentinel for "-inf": exp() underflows to exactly 0
# in float32 and float64 without producing NaN rows.
MASK_VALUE = -1.0e9

# Radius floor for the focused region; a single query proposal gives R_F = 0.
R_MIN = 0.5


class InvalidBoxError(ValueError):
    """A box has a non-positive size component."""


@dataclass(frozen=True)
class Box3D:
    """Axis-aligned box given by center and full size (meters)."""

    center: tuple[float, float, float]
    size: tuple[float, float, float]

    def __post_init__(self) -> None:
        center = tuple(float(v) for v in self.center)
        size = tuple(float(v) for v in self.size)
        if len(center) != 3 or len(size) != 3:
            raise ValueError("Box3D needs 3-vectors for center and size")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)

    @classmethod
    def from_array(cls, values: Sequence[float] | np.ndarray) -> "Box3D":
        arr = np.asarray(values, dtype=float).reshape(6)
        return cls(center=tuple(arr[:3]), size=tuple(arr[3:]))

    @classmethod
    def point(cls, center: Sequence[float], epsilon: float) -> "Box3D":
        """Point-as-box key of side ``epsilon``."""

        if epsilon <= 0:
            raise InvalidBoxError(f"epsilon must be > 0, got {epsilon}")
        return cls(center=tuple(center), size=(epsilon, epsilon, epsilon))

    def as_array(self) -> np.ndarray:
        return np.array([*self.center, *self.size], dtype=float)

    def validate(self) -> "Box3D":
        if min(self.size) <= 0:
            raise InvalidBoxError(f"box size must be positive, got {self.size}")
        return self

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    @property
    def min_corner(self) -> np.ndarray:
        return np.asarray(self.center) - 0.5 * np.asarray(self.size)

    @property
    def max_corner(self) -> np.ndarray:
        return np.asarray(self.center) + 0.5 * np.asarray(self.size)


BoxLike = Union[Box3D, np.ndarray, torch.Tensor, Sequence[float]]


@dataclass(frozen=True)
class FocusedRegion:
    """Centroid ``center`` (..., 3) and radius ``radius`` (...) of query proposals."""

    center: torch.Tensor
    radius: torch.Tensor


@dataclass
class MaskDiagnostics:
    """Caller-owned counter for focused-region rows that fell back to no mask."""

    fallbacks: int = 0


def as_box_tensor(box: BoxLike, *, dtype: torch.dtype | None = None) -> torch.Tensor:
    if isinstance(box, Box3D):
        return torch.as_tensor(box.as_array(), dtype=dtype or torch.float64)
    if isinstance(box, torch.Tensor):
        return box if dtype is None else box.to(dtype)
    return torch.as_tensor(np.asarray(box, dtype=float), dtype=dtype or torch.float64)


def _check_sizes(boxes: torch.Tensor) -> None:
    if boxes.shape[-1] != 6:
        raise ValueError(f"boxes must have 6 trailing parameters, got shape {tuple(boxes.shape)}")
    if bool(torch.any(boxes[..., 3:] <= 0)):
        raise InvalidBoxError("box sizes must be positive")


def box_corners(boxes: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    half = 0.5 * boxes[..., 3:]
    return boxes[..., :3] - half, boxes[..., :3] + half


def box_volume(boxes: torch.Tensor) -> torch.Tensor:
    return torch.prod(boxes[..., 3:], dim=-1)


def _overlap_volumes(a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Intersection, union and enclosing-hull volumes of two box tensors."""

    lo_a, hi_a = box_corners(a)
    lo_b, hi_b = box_corners(b)
    inter_ext = (torch.minimum(hi_a, hi_b) - torch.maximum(lo_a, lo_b)).clamp(min=0.0)
    inter = torch.prod(inter_ext, dim=-1)
    union = box_volume(a) + box_volume(b) - inter
    hull = torch.prod(torch.maximum(hi_a, hi_b) - torch.minimum(lo_a, lo_b), dim=-1)
    return inter, union, hull


def iou3d(a: BoxLike, b: BoxLike) -> torch.Tensor:
    """Volumetric intersection-over-union of axis-aligned boxes, in [0, 1]."""

    ta, tb = as_box_tensor(a), as_box_tensor(b)
    _check_sizes(ta)
    _check_sizes(tb)
    inter, union, _ = _overlap_volumes(ta, tb)
    return inter / union


def giou3d(a: BoxLike, b: BoxLike) -> torch.Tensor:
    """Generalized IoU: IoU minus the empty fraction of the enclosing hull."""

    ta, tb = as_box_tensor(a), as_box_tensor(b)
    _check_sizes(ta)
    _check_sizes(tb)
    inter, union, hull = _overlap_volumes(ta, tb)
    return inter / union - (hull - union) / hull


def _safe_sqrt(x: torch.Tensor) -> torch.Tensor:
    # sqrt(0) has an infinite derivative; route zeros around it.
    positive = x > 0
    root = torch.sqrt(torch.where(positive, x, torch.ones_like(x)))
    return torch.where(positive, root, torch.zeros_like(x))


def pairwise_explicit_features(centers_q: torch.Tensor, centers_k: torch.Tensor) -> torch.Tensor:
    """Explicit spatial feature from every query center to every key center.

    Returns ``(..., N_Q, N_K, 5)`` holding ``[d, sin θh, cos θh, sin θv, cos θv]``
    where θh is the azimuth of the connecting line in the z-up ground plane and
    θv its elevation. Coincident centers map to ``[0, 0, 1, 0, 1]``.
    """

    diff = centers_k.unsqueeze(-3) - centers_q.unsqueeze(-2)
    dx, dy, dz = diff.unbind(-1)
    horiz_sq = dx * dx + dy * dy
    dist_sq = horiz_sq + dz * dz
    horiz = _safe_sqrt(horiz_sq)
    dist = _safe_sqrt(dist_sq)

    has_h = horiz_sq > 0
    has_d = dist_sq > 0
    ones = torch.ones_like(dist)
    zeros = torch.zeros_like(dist)
    safe_h = torch.where(has_h, horiz, ones)
    safe_d = torch.where(has_d, dist, ones)

    sin_h = torch.where(has_h, dy / safe_h, zeros)
    cos_h = torch.where(has_h, dx / safe_h, ones)
    sin_v = torch.where(has_d, dz / safe_d, zeros)
    cos_v = torch.where(has_d, horiz / safe_d, ones)
    return torch.stack([dist, sin_h, cos_h, sin_v, cos_v], dim=-1)


def focused_region(
    centers_q: torch.Tensor | np.ndarray,
    *,
    valid: torch.Tensor | None = None,
    r_min: float = R_MIN,
) -> FocusedRegion:
    """Centroid of the query centers and the largest distance to it, floored at ``r_min``."""

    centers = torch.as_tensor(centers_q)
    if not centers.is_floating_point():
        centers = centers.to(torch.float64)
    if valid is None:
        valid = torch.ones(centers.shape[:-1], dtype=torch.bool, device=centers.device)
    counts = valid.sum(dim=-1)
    if centers.shape[-2] == 0 or bool(torch.any(counts == 0)):
        raise ValueError("focused region needs at least one query center")

    weights = valid.to(centers.dtype).unsqueeze(-1)
    center = (centers * weights).sum(dim=-2) / counts.unsqueeze(-1).to(centers.dtype)
    offsets = centers - center.unsqueeze(-2)
    dist = _safe_sqrt((offsets * offsets).sum(dim=-1))
    dist = torch.where(valid, dist, torch.zeros_like(dist))
    radius = dist.max(dim=-1).values.clamp(min=float(r_min))
    return FocusedRegion(center=center, radius=radius)


def focused_region_mask(
    region: FocusedRegion,
    tau: float,
    points_k: torch.Tensor,
    *,
    diagnostics: MaskDiagnostics | None = None,
) -> torch.Tensor:
    """Additive key bias: 0 where ``‖c_F − p_j‖ < τ R_F``, :data:`MASK_VALUE` otherwise.

    A row whose keys would all be masked falls back to all zeros.
    """

    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    center = region.center.detach().to(points_k.dtype)
    radius = region.radius.detach().to(points_k.dtype)
    offsets = points_k - center.unsqueeze(-2)
    dist = torch.sqrt((offsets * offsets).sum(dim=-1))
    inside = dist < float(tau) * radius.unsqueeze(-1)

    bias = torch.where(
        inside,
        torch.zeros_like(dist),
        torch.full_like(dist, MASK_VALUE),
    )
    empty = ~inside.any(dim=-1)
    if bool(empty.any()):
        bias = torch.where(empty.unsqueeze(-1), torch.zeros_like(bias), bias)
        n_empty = int(empty.sum())
        if diagnostics is not None:
            diagnostics.fallbacks += n_empty
        logger.debug("focused region masked every key in %d row(s); using no mask", n_empty)
    return bias


def points_in_box(
    points: np.ndarray,
    box: Box3D,
    max_points: int,
    *,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Sorted indices of points inside the closed box, subsampled to ``max_points``.

    An empty result is valid; callers substitute a learned empty code for it.
    """

    if max_points < 1:
        raise ValueError("max_points must be >= 1")
    rng = rng or np.random.default_rng()
    xyz = np.asarray(points, dtype=float)[:, :3]
    lo, hi = box.min_corner, box.max_corner
    inside = np.all((xyz >= lo) & (xyz <= hi), axis=1)
    idx = np.flatnonzero(inside)
    if len(idx) > max_points:
        idx = np.sort(rng.choice(idx, max_points, replace=False))
    return idx.astype(np.int64)


def crop_points(
    points: torch.Tensor,
    boxes: torch.Tensor,
    max_points: int,
    *,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched crop of raw points inside each box, in box-relative coordinates.

    Parameters
    ----------
    points:
        ``(B, N, 3)`` scene coordinates.
    boxes:
        ``(B, K, 6)`` boxes.

    Returns
    -------
    rel, occupied
        ``(B, K, max_points, 3)`` coordinates centered on the box and divided by
        its size, and the ``(B, K, max_points)`` occupancy mask. Boxes holding
        more points are subsampled uniformly at random.
    """

    bsz, n_points, _ = points.shape
    n_boxes = boxes.shape[1]
    lo, hi = box_corners(boxes.detach())
    xyz = points.unsqueeze(1)
    inside = torch.all((xyz >= lo.unsqueeze(2)) & (xyz <= hi.unsqueeze(2)), dim=-1)

    keys = torch.rand(inside.shape, generator=generator, dtype=torch.float32)
    keys = torch.where(inside, keys, torch.full_like(keys, 2.0))
    take = min(max_points, n_points)
    order = torch.topk(keys, take, dim=-1, largest=False).indices
    occupied = torch.gather(inside, 2, order)

    flat = order.reshape(bsz, n_boxes * take, 1).expand(-1, -1, 3)
    picked = torch.gather(points, 1, flat).reshape(bsz, n_boxes, take, 3)
    rel = (picked - boxes[..., None, :3]) / boxes[..., None, 3:]
    rel = torch.where(occupied.unsqueeze(-1), rel, torch.zeros_like(rel))
    if take < max_points:
        pad = max_points - take
        rel = torch.cat([rel, rel.new_zeros(bsz, n_boxes, pad, 3)], dim=2)
        occupied = torch.cat([occupied, occupied.new_zeros(bsz, n_boxes, pad)], dim=2)
    return rel, occupied


def k_nearest_objects(centers: np.ndarray, focus: int, k: int) -> list[int]:
    """Indices of the ``k`` objects nearest to ``centers[focus]``, ascending.

    Ties are broken by the lower object index.
    """

    xyz = np.asarray(centers, dtype=float).reshape(-1, 3)
    n_objects = len(xyz)
    if not 0 <= focus < n_objects:
        raise ValueError(f"focus index {focus} out of range for {n_objects} objects")
    if k < 0 or k > n_objects - 1:
        raise ValueError(f"k={k} must lie in [0, {n_objects - 1}]")
    dist = np.linalg.norm(xyz - xyz[focus], axis=1)
    order = np.lexsort((np.arange(n_objects), dist))
    order = order[order != focus]
    return [int(i) for i in order[:k]]

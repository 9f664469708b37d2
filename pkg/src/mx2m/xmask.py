"""Removal half of cross-modal removal/prediction: pick a modality and patches to mask."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .geom import PatchGrid, Projection, patch_index


class MaskMode(enum.IntEnum):
    NONE = 0
    MASK_2D = 1
    MASK_3D = 2


@dataclass(frozen=True)
class MaskParams:
    p: int = 16
    mr: float = 0.15
    m2d: float = 0.2
    m3d: float = 0.2

    def __post_init__(self):
        if not 0 <= self.mr < 1:
            raise ValueError(f"masking ratio {self.mr} outside [0, 1)")
        if self.m2d < 0 or self.m3d < 0 or self.m2d + self.m3d > 1:
            raise ValueError(f"modality probabilities ({self.m2d}, {self.m3d}) must be >= 0 and sum to <= 1")


# (p, mr, m2d, m3d) per adaptation scenario
PRESETS = {
    "usa_singapore": MaskParams(16, 0.15, 0.2, 0.2),
    "day_night": MaskParams(4, 0.3, 0.1, 0.3),
    "a2d2_semantickitti": MaskParams(4, 0.25, 0.3, 0.1),
}


@dataclass(frozen=True)
class MaskPlan:
    mode: MaskMode = MaskMode.NONE
    masked_patches: frozenset = frozenset()

    def __post_init__(self):
        if self.mode == MaskMode.NONE and self.masked_patches:
            raise ValueError("an unmasked plan cannot list masked patches")

    def patch_array(self):
        return np.fromiter(sorted(self.masked_patches), dtype=np.int64, count=len(self.masked_patches))


NO_MASK = MaskPlan()


def n_masked(params: MaskParams, grid: PatchGrid):
    return int(np.floor(params.mr * grid.n_patches))


def sample_plan(rng, params: MaskParams, grid: PatchGrid) -> MaskPlan:
    """Draw the mode with probabilities (m2d, m3d, rest), then the patches.

    Patches are only drawn for masked modes, so an unmasked draw consumes
    exactly one uniform from ``rng``.
    """
    if params.m2d + params.m3d > 1:
        raise ValueError("m2d + m3d must not exceed 1")
    u = rng.random()
    if u < params.m2d:
        mode = MaskMode.MASK_2D
    elif u < params.m2d + params.m3d:
        mode = MaskMode.MASK_3D
    else:
        return NO_MASK
    k = n_masked(params, grid)
    patches = rng.choice(grid.n_patches, size=k, replace=False)
    return MaskPlan(mode, frozenset(int(i) for i in patches))


def patch_pixel_mask(plan: MaskPlan, grid: PatchGrid):
    """(H, W) boolean mask of pixels covered by the plan's patches."""
    hit = np.zeros(grid.n_patches, dtype=bool)
    hit[plan.patch_array()] = True
    blocks = hit.reshape(grid.patches_y, grid.patches_x)
    return np.repeat(np.repeat(blocks, grid.p, axis=0), grid.p, axis=1)


def apply_mask_2d(image, plan: MaskPlan, grid: PatchGrid, fill=0.0):
    """Zero (in normalized space) every pixel of the masked patches."""
    if plan.mode != MaskMode.MASK_2D:
        return image
    out = np.array(image, dtype=np.float64, copy=True)
    out[patch_pixel_mask(plan, grid)] = fill
    return out


def masked_point_flags(projection: Projection, plan: MaskPlan, grid: PatchGrid):
    """True for points whose sampled pixel lies in a masked patch (mode ignored).

    Uses the same nearest-pixel rounding as feature sampling, so a point is
    flagged exactly when its pixel is blanked by the 2D mask.
    """
    if not projection.valid.all():
        raise ValueError("masked_point_flags: invalid projection present")
    col = np.clip(np.floor(projection.uv[:, 0] + 0.5), 0, grid.width - 1)
    row = np.clip(np.floor(projection.uv[:, 1] + 0.5), 0, grid.height - 1)
    ids = patch_index(col, row, grid)
    return np.isin(np.atleast_1d(ids), plan.patch_array())


def apply_mask_3d(points, point_features, projection: Projection, plan: MaskPlan, grid: PatchGrid):
    """Zero the input features of points falling in masked patches.

    Coordinates are untouched. Returns ``(features, flags)``; for any mode
    other than MASK_3D the features come back unchanged and ``flags`` is None.
    """
    if plan.mode != MaskMode.MASK_3D:
        return point_features, None
    if len(points) != len(point_features):
        raise ValueError("points and features disagree in length")
    flags = masked_point_flags(projection, plan, grid)
    out = np.array(point_features, dtype=np.float64, copy=True)
    out[flags] = 0.0
    return out, flags

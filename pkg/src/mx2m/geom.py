"""Pinhole projection, per-point feature sampling, patch indexing and voxelization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def as_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


@dataclass(frozen=True)
class Projection:
    uv: np.ndarray     # (N, 2) real pixel coordinates
    valid: np.ndarray  # (N,) bool

    def pixels(self, camera: Camera):
        """Nearest integer pixel (col, row) per point, clamped to the image."""
        col = np.clip(np.floor(self.uv[:, 0] + 0.5), 0, camera.width - 1).astype(np.int64)
        row = np.clip(np.floor(self.uv[:, 1] + 0.5), 0, camera.height - 1).astype(np.int64)
        return col, row

    def flat_index(self, camera: Camera):
        col, row = self.pixels(camera)
        return row * camera.width + col


@dataclass(frozen=True)
class PatchGrid:
    p: int
    width: int
    height: int

    def __post_init__(self):
        if self.p <= 0 or self.width % self.p or self.height % self.p:
            raise ValueError(f"patch size {self.p} must divide image size {self.width}x{self.height}")

    @property
    def patches_x(self):
        return self.width // self.p

    @property
    def patches_y(self):
        return self.height // self.p

    @property
    def n_patches(self):
        return self.patches_x * self.patches_y


def project_points(points, camera: Camera) -> Projection:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise ValueError(f"expected an (N, 3) point array with N >= 1, got {pts.shape}")
    z = pts[:, 2]
    front = z > 0
    safe_z = np.where(front, z, 1.0)
    u = camera.fx * pts[:, 0] / safe_z + camera.cx
    v = camera.fy * pts[:, 1] / safe_z + camera.cy
    valid = front & (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
    return Projection(np.stack([u, v], axis=1), valid)


def sample_features(feature_map: nc.Tensor, projection: Projection, camera: Camera) -> nc.Tensor:
    """Nearest-pixel lookup of an (H, W, F) map at each projected point.

    The map may also be passed pre-flattened as (H*W, F).
    """
    if not projection.valid.all():
        bad = np.flatnonzero(~projection.valid)
        raise ValueError(f"sample_features: {bad.size} invalid projections (first index {bad[0]})")
    if feature_map.data.ndim == 3:
        h, w, f = feature_map.shape
        if (h, w) != (camera.height, camera.width):
            raise nc.ShapeError(f"feature map {h}x{w} does not match camera {camera.height}x{camera.width}")
        feature_map = nc.reshape(feature_map, (h * w, f))
    return nc.gather_rows(feature_map, projection.flat_index(camera))


def patch_index(u, v, grid: PatchGrid):
    """Row-major patch id of pixel position(s) (u, v); accepts scalars or arrays."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if np.any((u < 0) | (u >= grid.width) | (v < 0) | (v >= grid.height)):
        raise ValueError("patch_index: position outside the image")
    pid = (np.floor(v / grid.p).astype(np.int64) * grid.patches_x
           + np.floor(u / grid.p).astype(np.int64))
    return int(pid) if pid.ndim == 0 else pid


def voxelize(points, voxel_size):
    """Integer voxel key per point plus a ``key -> [point indices]`` table."""
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    keys = np.floor(np.asarray(points, dtype=np.float64) / voxel_size).astype(np.int64)
    table: dict[tuple, list[int]] = {}
    for i, key in enumerate(map(tuple, keys)):
        table.setdefault(key, []).append(i)
    return keys, table


def voxel_segments(points, voxel_size, groups=None):
    """Dense segment id per point (voxels numbered in first-seen order).

    ``groups`` keeps points of different scenes in distinct voxels when a
    batch is concatenated.
    """
    keys = np.floor(np.asarray(points, dtype=np.float64) / voxel_size).astype(np.int64)
    if groups is not None:
        keys = np.concatenate([np.asarray(groups, dtype=np.int64)[:, None], keys], axis=1)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    # renumber by first occurrence so ids do not depend on key magnitudes
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    return rank[inverse.reshape(-1)], order.size

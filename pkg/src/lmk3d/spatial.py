"""Patient-side (spatial) transforms: affine, elastic deformation, anisotropy.

Images are resampled by inverse mapping with trilinear interpolation, and
anything that falls outside the field is filled with 0. Array-level
functions accept a single volume ``(d0, d1, d2)`` or a stack
``(C, d0, d1, d2)`` so landmark faux volumes can share one pass.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import Volume3
from .errors import SingularTransform
from .kernels import trilinear_sample


def _grid_coords(dims) -> np.ndarray:
    return np.indices(dims, dtype=np.float64).reshape(3, -1)


def _resample(arr: np.ndarray, coords: np.ndarray) -> np.ndarray:
    stack = arr if arr.ndim == 4 else arr[None]
    out = trilinear_sample(stack, coords).reshape(stack.shape)
    return out if arr.ndim == 4 else out[0]


def _plane_rotation(axis: int, deg: float) -> np.ndarray:
    t = np.deg2rad(deg)
    c, s = np.cos(t), np.sin(t)
    i, j = [(1, 2), (2, 0), (0, 1)][axis]
    r = np.eye(3)
    r[i, i], r[i, j], r[j, i], r[j, j] = c, -s, s, c
    return r


@dataclass
class AffineParams:
    rotation: Sequence[float] = (0.0, 0.0, 0.0)
    translation: Sequence[float] = (0.0, 0.0, 0.0)
    scale: Sequence[float] = (1.0, 1.0, 1.0)
    center: Optional[Sequence[float]] = None

    def __post_init__(self):
        self.rotation = tuple(float(x) for x in self.rotation)
        self.translation = tuple(float(x) for x in self.translation)
        self.scale = tuple(float(x) for x in self.scale)
        if self.center is not None:
            self.center = tuple(float(x) for x in self.center)
        if any(s == 0.0 for s in self.scale):
            raise SingularTransform(f"zero scale component in {self.scale}")

    def rotation_matrix(self) -> np.ndarray:
        r0, r1, r2 = self.rotation
        return _plane_rotation(2, r2) @ _plane_rotation(1, r1) @ _plane_rotation(0, r0)

    def matrix(self) -> np.ndarray:
        return self.rotation_matrix() @ np.diag(self.scale)

    def inverse_matrix(self) -> np.ndarray:
        return np.diag(1.0 / np.asarray(self.scale)) @ self.rotation_matrix().T

    def center_for(self, dims) -> np.ndarray:
        if self.center is not None:
            return np.asarray(self.center, dtype=np.float64)
        return (np.asarray(dims, dtype=np.float64) - 1.0) / 2.0

    def is_identity(self) -> bool:
        return (
            all(r == 0.0 for r in self.rotation)
            and all(t == 0.0 for t in self.translation)
            and all(s == 1.0 for s in self.scale)
        )

    def to_dict(self) -> dict:
        d = {"rotation": list(self.rotation), "translation": list(self.translation), "scale": list(self.scale)}
        if self.center is not None:
            d["center"] = list(self.center)
        return d


def transform_point_affine(p, a: AffineParams, dims=None) -> np.ndarray:
    """Forward image of point(s) ``p``: scale/rotate about the centre, then translate."""
    pts = np.asarray(p, dtype=np.float64)
    if a.center is None and dims is None:
        raise ValueError("dims are required when the affine centre is implicit")
    c = a.center_for(dims)
    m = a.matrix()
    return (pts - c) @ m.T + c + np.asarray(a.translation)


def affine_resample(arr: np.ndarray, a: AffineParams) -> np.ndarray:
    dims = arr.shape[-3:]
    if a.is_identity():
        return arr.copy()
    x = _grid_coords(dims)
    c = a.center_for(dims)[:, None]
    t = np.asarray(a.translation, dtype=np.float64)[:, None]
    src = a.inverse_matrix() @ (x - c - t) + c
    return _resample(arr, src)


def apply_affine(v: Volume3, a: AffineParams) -> Volume3:
    return v.with_data(affine_resample(v.data, a))


@dataclass
class ElasticParams:
    """Control-grid displacements, shape (3, g0, g1, g2), in voxels."""

    control_grid: Sequence[int] = (5, 5, 5)
    max_displacement: float = 0.0
    displacements: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.control_grid = tuple(int(g) for g in self.control_grid)
        if any(g < 2 for g in self.control_grid):
            raise ValueError(f"control grid needs >= 2 points per axis, got {self.control_grid}")
        if self.max_displacement < 0:
            raise ValueError("max_displacement must be >= 0")
        if self.displacements is None:
            self.displacements = np.zeros((3,) + self.control_grid)
        self.displacements = np.asarray(self.displacements, dtype=np.float64).reshape((3,) + self.control_grid)

    @classmethod
    def sample(cls, control_grid, max_displacement, rng) -> "ElasticParams":
        grid = tuple(int(g) for g in control_grid)
        disp = rng.uniform(-max_displacement, max_displacement, size=(3,) + grid)
        return cls(grid, float(max_displacement), disp)

    def to_dict(self) -> dict:
        return {
            "control_grid": list(self.control_grid),
            "max_displacement": self.max_displacement,
            "displacements": self.displacements.tolist(),
        }


def displacement_field(e: ElasticParams, dims) -> np.ndarray:
    """Dense (3, d0, d1, d2) field, trilinear between evenly spaced control points."""
    x = _grid_coords(dims)
    g = np.asarray(e.control_grid, dtype=np.float64)[:, None]
    d = np.asarray(dims, dtype=np.float64)[:, None]
    scale = np.where(d > 1, (g - 1.0) / np.maximum(d - 1.0, 1.0), 0.0)
    return trilinear_sample(e.displacements, x * scale).reshape((3,) + tuple(dims))


def elastic_resample(arr: np.ndarray, e: ElasticParams) -> np.ndarray:
    if not np.any(e.displacements):
        return arr.copy()
    dims = arr.shape[-3:]
    disp = displacement_field(e, dims).reshape(3, -1)
    return _resample(arr, _grid_coords(dims) + disp)


def apply_elastic(v: Volume3, e: ElasticParams) -> Volume3:
    return v.with_data(elastic_resample(v.data, e))


@dataclass
class AnisotropyParams:
    axis: int = 0
    downsample_factor: float = 2.0

    def __post_init__(self):
        self.axis = int(self.axis)
        self.downsample_factor = float(self.downsample_factor)
        if self.axis not in (0, 1, 2):
            raise ValueError(f"axis must be 0, 1 or 2, got {self.axis}")
        if not 1.0 <= self.downsample_factor <= 4.0:
            raise ValueError(f"downsample factor must lie in (1, 4], got {self.downsample_factor}")

    def to_dict(self) -> dict:
        return {"axis": self.axis, "downsample_factor": self.downsample_factor}


def _tent_antiderivative(x: np.ndarray, n: int) -> np.ndarray:
    """(len(x), n) antiderivatives of the linear-interpolation basis at sample positions x.

    Basis i is the unit tent centred on i; the end tents are held at 1
    outward so the basis sums to 1 everywhere.
    """
    t = x[:, None] - np.arange(n)[None, :]
    g = np.where(t < -1.0, 0.0, np.where(t < 0.0, 0.5 * (t + 1.0) ** 2, np.where(t < 1.0, 1.0 - 0.5 * (1.0 - t) ** 2, 1.0)))
    if n == 1:
        return x[:, None].astype(np.float64)
    # clamped ends: constant 1 beyond the first and last sample
    g[:, 0] = np.where(x < 0.0, x, np.where(x < 1.0, x - 0.5 * x**2, 0.5))
    t_last = x - (n - 1)
    g[:, -1] = np.where(t_last < -1.0, 0.0, np.where(t_last < 0.0, 0.5 * (t_last + 1.0) ** 2, 0.5 + t_last))
    return g


def anisotropy_matrix(n: int, factor: float) -> np.ndarray:
    """(n, n) operator: area-average down to round(n/factor) samples, linear back up.

    The average runs over the linear interpolant of the samples, so linear
    intensity profiles survive the round trip away from the borders.
    """
    m = max(1, int(round(n / factor)))
    if m == n:
        return np.eye(n)
    width = n / m
    # cell j covers [j*width - 0.5, (j+1)*width - 0.5] in voxel-centre coordinates
    edges = np.arange(m + 1) * width - 0.5
    g = _tent_antiderivative(edges, n)
    down = (g[1:] - g[:-1]) / width
    centers = (np.arange(m) + 0.5) * (n / m) - 0.5
    up = np.zeros((n, m))
    for x in range(n):
        if m == 1 or x <= centers[0]:
            up[x, 0] = 1.0
        elif x >= centers[-1]:
            up[x, -1] = 1.0
        else:
            j = int(np.searchsorted(centers, x, side="right")) - 1
            f = (x - centers[j]) / (centers[j + 1] - centers[j])
            up[x, j] = 1.0 - f
            up[x, j + 1] = f
    return up @ down


def anisotropy_resample(arr: np.ndarray, a: AnisotropyParams) -> np.ndarray:
    ax = arr.ndim - 3 + a.axis
    n = arr.shape[ax]
    op = anisotropy_matrix(n, a.downsample_factor)
    moved = np.moveaxis(arr.astype(np.float64), ax, -1)
    out = moved @ op.T
    return np.moveaxis(out, -1, ax).astype(arr.dtype)


def apply_anisotropy(v: Volume3, a: AnisotropyParams) -> Volume3:
    return v.with_data(anisotropy_resample(v.data, a))

"""Deterministic synthetic head phantoms with Gaussian landmark blobs.

Landmark anchors sit on the three orthogonal mid-planes of an ellipsoidal
head; each sample jitters them uniformly by up to ``jitter`` voxels per axis.
Everything is a pure function of ``(spec, index)``.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .core import LandmarkSet, Volume3, table1_subanatomy, write_landmarks, write_volume
from .errors import InfeasiblePlacement

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))
PLANE_NAMES = ("sagittal", "coronal", "axial")


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (32, 32, 32)
    K: int = 8
    blob_sigma: float = 1.5
    semi_axes: tuple[float, float, float] = (0.42, 0.42, 0.42)
    noise_floor: float = 0.02
    seed: int = 42
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    jitter: float = 1.5
    head_intensity: float = 0.3
    blob_amplitude: float = 0.7

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.blob_sigma <= 0:
            raise ValueError("blob_sigma must be > 0")
        if not all(0.0 < a <= 0.5 for a in self.semi_axes):
            raise ValueError("semi-axes must be fractions in (0, 0.5]")
        if min(self.dims) < 1:
            raise ValueError("dims must be positive")

    @property
    def center(self) -> np.ndarray:
        return (np.asarray(self.dims, dtype=np.float64) - 1.0) / 2.0

    @property
    def radii(self) -> np.ndarray:
        return np.asarray(self.semi_axes) * np.asarray(self.dims, dtype=np.float64)


def anchor_points(spec: PhantomSpec) -> np.ndarray:
    """(K, 3) anchors; landmark i lies on mid-plane ``i % 3`` on a sunflower spiral."""
    c, r = spec.center, spec.radii
    counts = [len(range(p, spec.K, 3)) for p in range(3)]
    pts = np.empty((spec.K, 3))
    for i in range(spec.K):
        plane, j = i % 3, i // 3
        u, w = [(1, 2), (2, 0), (0, 1)][plane]
        frac = 0.3 + 0.35 * np.sqrt((j + 0.5) / counts[plane])
        theta = j * GOLDEN_ANGLE + plane * 2.0 * np.pi / 3.0
        p = c.copy()
        p[u] += frac * r[u] * np.cos(theta)
        p[w] += frac * r[w] * np.sin(theta)
        pts[i] = p
    return pts


def check_placement(spec: PhantomSpec, anchors: np.ndarray) -> None:
    c, r = spec.center, spec.radii
    # worst-case corner of the jitter box must stay inside the head
    reach = (np.abs(anchors - c) + spec.jitter) / r
    worst = np.sum(reach**2, axis=1)
    if np.any(worst >= 1.0):
        bad = int(np.argmax(worst)) + 1
        raise InfeasiblePlacement(f"landmark {bad} cannot be jittered inside the head ellipsoid")
    if spec.K > 1:
        diff = anchors[:, None, :] - anchors[None, :, :]
        dist = np.sqrt(np.sum(diff**2, axis=-1))
        np.fill_diagonal(dist, np.inf)
        if dist.min() < 2.0 * spec.blob_sigma:
            raise InfeasiblePlacement(
                f"{spec.K} anchors do not fit at separation {2.0 * spec.blob_sigma} in dims {spec.dims}"
            )


def phantom_subanatomy(K: int) -> dict[int, str]:
    if K == 88:
        return table1_subanatomy(range(1, 89))
    return {i + 1: PLANE_NAMES[i % 3] for i in range(K)}


def _rng(spec: PhantomSpec, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([spec.seed, index]))


def gen_phantom(spec: PhantomSpec, index: int) -> tuple[Volume3, LandmarkSet]:
    anchors = anchor_points(spec)
    check_placement(spec, anchors)
    rng = _rng(spec, index)
    pts = anchors + rng.uniform(-spec.jitter, spec.jitter, size=anchors.shape)

    grid = np.indices(spec.dims, dtype=np.float64)
    c = spec.center.reshape(3, 1, 1, 1)
    r = spec.radii.reshape(3, 1, 1, 1)
    head = np.sum(((grid - c) / r) ** 2, axis=0) < 1.0
    vol = spec.head_intensity * head.astype(np.float64)
    two_s2 = 2.0 * spec.blob_sigma**2
    for p in pts:
        d2 = np.sum((grid - p.reshape(3, 1, 1, 1)) ** 2, axis=0)
        vol += spec.blob_amplitude * np.exp(-d2 / two_s2)
    if spec.noise_floor > 0:
        vol += rng.uniform(0.0, spec.noise_floor, size=spec.dims)
    vol = np.clip(vol, 0.0, 1.0)

    ids = tuple(range(1, spec.K + 1))
    lms = LandmarkSet(ids, pts, (False,) * spec.K, phantom_subanatomy(spec.K))
    return Volume3(vol, spec.spacing), lms


def gen_dataset(spec: PhantomSpec, indices: Sequence[int]) -> list[tuple[Volume3, LandmarkSet]]:
    return [gen_phantom(spec, i) for i in indices]


def write_phantoms(spec: PhantomSpec, count: int, out_dir, start: int = 0) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    names = []
    for i in range(start, start + count):
        v, lms = gen_phantom(spec, i)
        write_volume(v, os.path.join(out_dir, f"vol_{i:04d}.vlm"))
        write_landmarks(lms, os.path.join(out_dir, f"lmk_{i:04d}.json"), v.dims)
        names.append(f"{i:04d}")
    return names


def spec_to_dict(spec: PhantomSpec) -> dict:
    return asdict(spec)

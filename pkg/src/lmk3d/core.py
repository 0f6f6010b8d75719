"""Volume and landmark data model, binary/JSON I/O and coordinate helpers.

Coordinates are continuous voxel coordinates in storage axis order, with
voxel centres on integer positions. Physical positions put the origin at
voxel (0, 0, 0), so ``mm = index * spacing`` component-wise.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    BadMagic,
    DuplicateId,
    InvalidVolume,
    NonPositiveDims,
    OutOfBounds,
    ParseError,
    TruncatedFile,
)

VOLUME_MAGIC = b"VLM1"
VOLUME_VERSION = 1
_HEADER = struct.Struct("<4sI3I3f")

# Sub-anatomy grouping of the 88-landmark brain protocol (1-based, inclusive).
TABLE1_GROUPS: dict[str, tuple[int, int]] = {
    "Frontal Lobe": (1, 5),
    "Brain Stem": (6, 13),
    "Brain Boundary MSP": (14, 24),
    "Corpus Callosum": (25, 37),
    "Eye": (38, 45),
    "Brain Axial Boundary": (46, 55),
    "Temporal Lobe": (56, 88),
}


def table1_subanatomy(ids: Sequence[int]) -> dict[int, str]:
    """Map landmark ids to their sub-anatomy group; ids beyond 88 are left out."""
    out = {}
    for i in ids:
        for name, (lo, hi) in TABLE1_GROUPS.items():
            if lo <= i <= hi:
                out[int(i)] = name
                break
    return out


@dataclass(frozen=True)
class Volume3:
    """Immutable 3D scalar field; ``data`` has shape ``dims`` (axis 2 fastest)."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, order="C", copy=True)
        if data.ndim != 3:
            raise NonPositiveDims(f"volume must be 3D, got shape {data.shape}")
        if min(data.shape) <= 0:
            raise NonPositiveDims(f"dims must be positive, got {data.shape}")
        spacing = tuple(float(np.float32(s)) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
            raise InvalidVolume(f"spacing must be 3 positive reals, got {self.spacing}")
        if not np.all(np.isfinite(data)):
            raise InvalidVolume("volume contains non-finite intensities")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    def with_data(self, data: np.ndarray) -> "Volume3":
        return Volume3(data, self.spacing)

    def __eq__(self, other):
        if not isinstance(other, Volume3):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.data, other.data)

    __hash__ = None


def linear_index(idx: Sequence[int], dims: Sequence[int]) -> int:
    i0, i1, i2 = (int(i) for i in idx)
    _, d1, d2 = dims
    return i0 * d1 * d2 + i1 * d2 + i2


def voxel_to_mm(p, spacing) -> np.ndarray:
    return np.asarray(p, dtype=np.float64) * np.asarray(spacing, dtype=np.float64)


def mm_to_voxel(x, spacing) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) / np.asarray(spacing, dtype=np.float64)


def in_bounds(p, dims) -> bool:
    p = np.asarray(p, dtype=np.float64)
    hi = np.asarray(dims, dtype=np.float64) - 1.0
    return bool(np.all(np.isfinite(p)) and np.all(p >= 0.0) and np.all(p <= hi))


@dataclass(frozen=True)
class LandmarkSet:
    """K landmarks: sorted unique 1-based ids, (K, 3) voxel coordinates, oob flags."""

    ids: tuple[int, ...]
    points: np.ndarray
    oob: tuple[bool, ...] = ()
    subanatomy: Mapping[int, str] = field(default_factory=dict)

    def __post_init__(self):
        ids = tuple(int(i) for i in self.ids)
        pts = np.array(self.points, dtype=np.float64, copy=True).reshape(-1, 3)
        if len(ids) != len(pts):
            raise ParseError(f"{len(ids)} ids but {len(pts)} points")
        if len(set(ids)) != len(ids):
            seen = set()
            dup = next(i for i in ids if i in seen or seen.add(i))
            raise DuplicateId(f"duplicate landmark id {dup}")
        if any(i < 1 for i in ids):
            raise ParseError("landmark ids are 1-based")
        if list(ids) != sorted(ids):
            order = np.argsort(ids, kind="stable")
            ids = tuple(ids[k] for k in order)
            pts = pts[order]
            oob = tuple(bool(self.oob[k]) for k in order) if self.oob else ()
        else:
            oob = tuple(bool(f) for f in self.oob)
        if not oob:
            oob = (False,) * len(ids)
        if len(oob) != len(ids):
            raise ParseError("oob flags length does not match ids")
        pts.flags.writeable = False
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "oob", oob)
        object.__setattr__(self, "subanatomy", dict(self.subanatomy))

    def __len__(self):
        return len(self.ids)

    @property
    def mask(self) -> np.ndarray:
        """True for landmarks that take part in losses and metrics."""
        return ~np.asarray(self.oob, dtype=bool)

    def check_bounds(self, dims) -> None:
        for i, p, flagged in zip(self.ids, self.points, self.oob):
            if not flagged and not in_bounds(p, dims):
                raise OutOfBounds(f"landmark {i} at {p.tolist()} outside dims {tuple(dims)}")

    def replace(self, points=None, oob=None) -> "LandmarkSet":
        return LandmarkSet(
            self.ids,
            self.points if points is None else points,
            self.oob if oob is None else oob,
            self.subanatomy,
        )

    def __eq__(self, other):
        if not isinstance(other, LandmarkSet):
            return NotImplemented
        return (
            self.ids == other.ids
            and self.oob == other.oob
            and dict(self.subanatomy) == dict(other.subanatomy)
            and np.array_equal(self.points, other.points)
        )

    __hash__ = None


def encode_volume(v: Volume3) -> bytes:
    d0, d1, d2 = v.dims
    header = _HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, d0, d1, d2, *v.spacing)
    return header + v.data.astype("<f4", copy=False).tobytes(order="C")


def decode_volume(buf: bytes) -> Volume3:
    if len(buf) < 4 or buf[:4] != VOLUME_MAGIC:
        raise BadMagic(f"expected magic {VOLUME_MAGIC!r}, got {bytes(buf[:4])!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedFile("volume header truncated")
    _, version, d0, d1, d2, s0, s1, s2 = _HEADER.unpack_from(buf)
    if version != VOLUME_VERSION:
        raise ParseError(f"unsupported volume version {version}")
    if min(d0, d1, d2) <= 0:
        raise NonPositiveDims(f"dims must be positive, got {(d0, d1, d2)}")
    n = d0 * d1 * d2
    payload = buf[_HEADER.size:]
    if len(payload) < 4 * n:
        raise TruncatedFile(f"expected {4 * n} data bytes, got {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4", count=n).reshape(d0, d1, d2)
    return Volume3(data, (s0, s1, s2))


def write_volume(v: Volume3, path) -> None:
    # Volume3 validates finiteness on construction; re-check guards subclasses
    if not np.all(np.isfinite(v.data)):
        raise InvalidVolume("refusing to write non-finite volume")
    with open(path, "wb") as f:
        f.write(encode_volume(v))


def read_volume(path) -> Volume3:
    with open(path, "rb") as f:
        return decode_volume(f.read())


def landmarks_to_json(lms: LandmarkSet, dims=None) -> dict:
    doc: dict = {}
    if dims is not None:
        doc["dims"] = [int(d) for d in dims]
    entries = []
    for i, p, flagged in zip(lms.ids, lms.points, lms.oob):
        e = {"id": int(i), "p": [float(x) for x in p]}
        if flagged:
            e["oob"] = True
        entries.append(e)
    doc["landmarks"] = entries
    if lms.subanatomy:
        doc["subanatomy"] = {str(k): v for k, v in sorted(lms.subanatomy.items())}
    return doc


def landmarks_from_json(doc, dims=None) -> LandmarkSet:
    try:
        entries = doc["landmarks"]
        ids = [int(e["id"]) for e in entries]
        pts = [[float(x) for x in e["p"]] for e in entries]
        oob = [bool(e.get("oob", False)) for e in entries]
        sub = {int(k): str(v) for k, v in doc.get("subanatomy", {}).items()}
        if dims is None and "dims" in doc:
            dims = tuple(int(d) for d in doc["dims"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed landmark document: {exc}") from exc
    if any(len(p) != 3 for p in pts):
        raise ParseError("every landmark needs exactly 3 coordinates")
    lms = LandmarkSet(tuple(ids), np.array(pts, dtype=np.float64).reshape(-1, 3), tuple(oob), sub)
    if dims is not None:
        lms.check_bounds(dims)
    return lms


def write_landmarks(lms: LandmarkSet, path, dims=None) -> None:
    with open(path, "w") as f:
        json.dump(landmarks_to_json(lms, dims), f, indent=1)
        f.write("\n")


def read_landmarks(path, dims=None) -> LandmarkSet:
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{os.fspath(path)}: {exc}") from exc
    return landmarks_from_json(doc, dims)

"""Gradient-weighted class activation maps for individual landmark channels.

The network keeps full resolution, so maps taken at any internal layer are
already input-sized and no upsampling stage is applied.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from PIL import Image

from . import autodiff as ad
from .core import Volume3
from .errors import HookLayerMissing, ZeroMass
from .model import ModelGraph, default_hook_layer, forward_tensor, prepare_input

PLANE_AXIS = {"sagittal": 0, "coronal": 1, "axial": 2}
OVERLAY_ALPHA = 0.6
DEFAULT_RADIUS = 4.0


@dataclass(frozen=True)
class CamRequest:
    landmark: int  # 1-based
    layer: Optional[str] = None


@dataclass(frozen=True)
class CamMap:
    field: np.ndarray
    landmark: int
    peak: tuple

    @classmethod
    def from_field(cls, field, landmark: int) -> "CamMap":
        field = np.asarray(field, dtype=np.float64)
        peak = tuple(int(i) for i in np.unravel_index(np.argmax(field), field.shape))
        return cls(field, landmark, peak)


@dataclass(frozen=True)
class CamScore:
    score: float
    entropy: float


def hookable_layers(m: ModelGraph) -> list[str]:
    seen = []
    for layer in m.layers:
        if layer.kind != "block_start" and layer.id not in seen:
            seen.append(layer.id)
    return seen


def gradcam_from_activations(acts, grads) -> np.ndarray:
    """ReLU(sum_t alpha_t A_t) with alpha_t the spatial mean of dA_t.

    ``acts`` and ``grads`` are (T, d0, d1, d2); the mean runs over the hooked
    layer's own voxel count.
    """
    acts = np.asarray(acts, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if acts.shape != grads.shape:
        raise ValueError(f"activation shape {acts.shape} != gradient shape {grads.shape}")
    weights = grads.reshape(grads.shape[0], -1).mean(axis=1)
    cam = np.tensordot(weights, acts, axes=1)
    return np.maximum(cam, 0.0)


def gradcam(m: ModelGraph, v: Volume3, req: CamRequest) -> CamMap:
    layer = req.layer or default_hook_layer(m.cfg)
    if layer not in hookable_layers(m):
        raise HookLayerMissing(f"model has no layer {layer!r}")
    if not 1 <= req.landmark <= m.cfg.K:
        raise ValueError(f"landmark index must lie in [1, {m.cfg.K}], got {req.landmark}")
    captured = {}

    def hook(t):
        # fresh leaf: gradients stop here and never reach the model parameters
        leaf = ad.Tensor(t.data, requires_grad=True, name=layer)
        captured["A"] = leaf
        return leaf

    x = ad.Tensor(prepare_input(v, m.dtype)[None])
    with ad.Tape() as tape:
        h = forward_tensor(m, x, "eval", hooks={layer: hook})
        channel = h.data[0, req.landmark - 1]
        r = np.unravel_index(np.argmax(channel), channel.shape)
        y = ad.select(h, (0, req.landmark - 1) + tuple(r))
        acts = captured["A"]
        ad.backward(y, wrt=[acts])
        tape.clear()
    grad = acts.grad if acts.grad is not None else np.zeros_like(acts.data)
    return CamMap.from_field(gradcam_from_activations(acts.data[0], grad[0]), req.landmark)


def _field(cam) -> np.ndarray:
    return cam.field if isinstance(cam, CamMap) else np.asarray(cam, dtype=np.float64)


def render_overlay(v: Volume3, cam, plane: str, index: int) -> np.ndarray:
    """(rows, cols, 3) uint8 slice with the cam blended in as a red-yellow ramp."""
    if plane not in PLANE_AXIS:
        raise ValueError(f"plane must be one of {sorted(PLANE_AXIS)}, got {plane!r}")
    axis = PLANE_AXIS[plane]
    field = _field(cam)
    if field.shape != tuple(v.dims):
        raise ValueError(f"cam shape {field.shape} does not match volume dims {v.dims}")
    if not 0 <= index < v.dims[axis]:
        raise ValueError(f"slice {index} outside [0, {v.dims[axis]}) along {plane}")

    data = v.data.astype(np.float64)
    lo, hi = data.min(), data.max()
    gray = np.take((data - lo) / (hi - lo) if hi > lo else np.zeros_like(data), index, axis=axis)
    top = field.max()
    c = np.take(field / top if top > 0 else np.zeros_like(field), index, axis=axis)

    a = OVERLAY_ALPHA * c
    ramp = np.stack([np.ones_like(c), c, np.zeros_like(c)], axis=-1)
    rgb = (1.0 - a)[..., None] * gray[..., None] + a[..., None] * ramp
    return np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def export_cam_overlay(v: Volume3, cam, plane: str, index: int, path) -> None:
    Image.fromarray(render_overlay(v, cam, plane, index)).save(path, format="PNG")


def ball_mask(dims, center, radius: float = DEFAULT_RADIUS) -> np.ndarray:
    grid = np.indices(tuple(dims), dtype=np.float64)
    d2 = np.sum((grid - np.asarray(center, dtype=np.float64).reshape(3, 1, 1, 1)) ** 2, axis=0)
    return d2 <= radius * radius


def cam_localization_score(cam, p, radius: float = DEFAULT_RADIUS) -> CamScore:
    """Fraction of cam mass within ``radius`` voxels of ``p``, plus the map entropy (nats)."""
    field = _field(cam)
    total = field.sum(dtype=np.float64)
    if not total > 0:
        raise ZeroMass("cam map has no positive mass")
    q = field / total
    score = float(q[ball_mask(field.shape, p, radius)].sum())
    nz = q[q > 0]
    entropy = float(-np.sum(nz * np.log(nz)))
    return CamScore(min(max(score, 0.0), 1.0), entropy)

"""Target heatmaps, spatial softmax and the coordinate / heatmap / mixed losses.

Arrays are (K, d0, d1, d2) stacks. Reductions accumulate in float64 in a fixed
order; losses and gradients are returned in float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import LandmarkSet
from .errors import EmptyMask

LOG_FLOOR = 1e-30
DEFAULT_SIGMA = 2.0


@dataclass(frozen=True)
class LossValue:
    total: float
    coord: float
    heatmap: float
    alpha: float


def _grid(dims) -> np.ndarray:
    return np.indices(tuple(dims), dtype=np.float64)


def gen_gt_heatmap(lms: LandmarkSet, dims, sigma: float = DEFAULT_SIGMA) -> tuple[np.ndarray, np.ndarray]:
    """Normalised isotropic Gaussians, one channel per landmark.

    Returns ``(H, mask)``; out-of-bounds landmarks get a uniform channel and
    ``mask=False``.
    """
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    dims = tuple(int(d) for d in dims)
    grid = _grid(dims)
    out = np.empty((len(lms),) + dims, dtype=np.float64)
    for t, (p, flagged) in enumerate(zip(lms.points, lms.oob)):
        if flagged:
            out[t] = 1.0 / np.prod(dims)
            continue
        d2 = np.sum((grid - np.asarray(p).reshape(3, 1, 1, 1)) ** 2, axis=0)
        g = np.exp(-d2 / (2.0 * sigma * sigma))
        out[t] = g / g.sum()
    return out, lms.mask.copy()


def spatial_softmax(h_hat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel softmax over all voxels and the expected voxel coordinate.

    Returns ``(phi, p_hat)`` with phi of shape (K, d0, d1, d2) and p_hat (K, 3).
    """
    h = np.asarray(h_hat, dtype=np.float64)
    k = h.shape[0]
    flat = h.reshape(k, -1)
    e = np.exp(flat - flat.max(axis=1, keepdims=True))
    phi = (e / e.sum(axis=1, keepdims=True)).reshape(h.shape)
    grid = _grid(h.shape[1:]).reshape(3, -1)
    p_hat = phi.reshape(k, -1) @ grid.T
    return phi, p_hat


def _mask(mask, k) -> np.ndarray:
    m = np.ones(k, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not m.any():
        raise EmptyMask("every landmark is masked out")
    return m


def loss_coord(p_hat, p, mask=None) -> float:
    """Mean squared Euclidean distance over unmasked landmarks."""
    p_hat = np.asarray(p_hat, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    m = _mask(mask, len(p))
    d2 = np.sum((p[m] - p_hat[m]) ** 2, axis=1)
    return float(d2.sum() / m.sum())


def loss_heatmap(H, phi, mask=None) -> float:
    """Mean over unmasked channels of the cross-entropy -sum H log phi."""
    H = np.asarray(H, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    m = _mask(mask, H.shape[0])
    logp = np.log(np.maximum(phi[m], LOG_FLOOR))
    ce = -np.sum((H[m] * logp).reshape(int(m.sum()), -1), axis=1)
    return float(ce.sum() / m.sum())


def loss_mixed(H, h_hat, p, alpha: float, mask=None) -> LossValue:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    phi, p_hat = spatial_softmax(h_hat)
    lc = loss_coord(p_hat, p, mask)
    lh = loss_heatmap(H, phi, mask)
    return LossValue(alpha * lh + (1.0 - alpha) * lc, lc, lh, alpha)


def loss_mixed_backward(H, h_hat, p, alpha: float, mask=None) -> np.ndarray:
    """Exact gradient of the mixed loss with respect to the raw heatmaps."""
    H = np.asarray(H, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    k = H.shape[0]
    m = _mask(mask, k)
    kk = float(m.sum())
    phi, p_hat = spatial_softmax(h_hat)
    flat_phi = phi.reshape(k, -1)
    flat_h = H.reshape(k, -1)
    grid = _grid(H.shape[1:]).reshape(3, -1)

    # heatmap term through the floored log: dL/dphi = -H/phi where phi > floor
    live = flat_h * (flat_phi > LOG_FLOOR)
    g_h = (-live + flat_phi * live.sum(axis=1, keepdims=True)) / kk

    # coordinate term: dL/dp_hat = 2 (p_hat - p) / K', dp_hat/dh = phi (x - p_hat)
    coef = 2.0 * (p_hat - p) / kk
    centred = np.einsum("ka,an->kn", coef, grid) - np.sum(coef * p_hat, axis=1, keepdims=True)
    g_c = flat_phi * centred

    grad = alpha * g_h + (1.0 - alpha) * g_c
    grad[~m] = 0.0
    return grad.reshape(H.shape)


def predicted_points(h_hat: np.ndarray) -> np.ndarray:
    return spatial_softmax(h_hat)[1]

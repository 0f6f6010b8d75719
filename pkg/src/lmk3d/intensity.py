"""Machine-side (intensity) artifact simulators.

None of these move anatomy, so landmarks never pass through them. Every
operation is the identity at zero strength. Operations with random parts
are split into a sampler (draws parameters from an ``np.random.Generator``)
and a deterministic apply step, so a logged parameter set replays exactly.
"""
from __future__ import annotations

from itertools import product
from typing import Sequence

import numpy as np

from .core import Volume3
from .fft import fft, fftn, ifft, ifftn
from .spatial import AffineParams, affine_resample


def add_ghosting(v: Volume3, axis: int, num_ghosts: int, intensity: float) -> Volume3:
    """Attenuate every ``num_ghosts``-th non-DC k-space sample along ``axis`` by (1 - intensity)."""
    if num_ghosts < 1:
        raise ValueError("num_ghosts must be >= 1")
    if not 0.0 <= intensity <= 1.0:
        raise ValueError("ghost intensity must lie in [0, 1]")
    k = fft(v.data.astype(np.float64), axis)
    n = v.dims[axis]
    idx = np.arange(n)
    gain = np.where((idx % num_ghosts == 0) & (idx != 0), 1.0 - intensity, 1.0)
    shape = [1, 1, 1]
    shape[axis] = n
    out = ifft(k * gain.reshape(shape), axis).real
    return v.with_data(out)


def _self_conjugate(pos, dims) -> bool:
    return all((-p) % d == p for p, d in zip(pos, dims))


def sample_spike_positions(dims, count: int, rng) -> list[tuple[int, int, int]]:
    """Random non-DC frequencies that are not their own conjugate."""
    # every frequency is self-conjugate when no axis is longer than 2
    if count > 0 and max(dims) <= 2:
        raise ValueError(f"no spike-capable frequencies in dims {tuple(dims)}")
    out = []
    while len(out) < count:
        pos = tuple(int(rng.integers(0, d)) for d in dims)
        if not _self_conjugate(pos, dims):
            out.append(pos)
    return out


def spike_kspace(data: np.ndarray, positions, amplitude: float) -> np.ndarray:
    """Spectrum of ``data`` with a real impulse pair at each position and its conjugate."""
    spec = fftn(data.astype(np.float64))
    peak = amplitude * np.abs(spec).max()
    dims = data.shape
    for pos in positions:
        conj = tuple((-p) % d for p, d in zip(pos, dims))
        spec[pos] += peak
        spec[conj] += peak
    return spec


def add_spikes(v: Volume3, count: int, amplitude: float, rng=None, positions=None) -> Volume3:
    if count < 0:
        raise ValueError("spike count must be >= 0")
    if positions is None:
        positions = sample_spike_positions(v.dims, count, rng)
    return v.with_data(ifftn(spike_kspace(v.data, positions, amplitude)).real)


def _monomials(order: int):
    return [e for e in product(range(order + 1), repeat=3) if sum(e) <= order]


def sample_bias_coefficients(order: int, magnitude: float, rng) -> np.ndarray:
    return rng.uniform(-magnitude, magnitude, size=len(_monomials(order)))


def bias_field(dims, order: int, coefficients) -> np.ndarray:
    """exp(P(x)) over normalised coordinates in [-1, 1]^3."""
    coefficients = np.asarray(coefficients, dtype=np.float64)
    terms = _monomials(order)
    if len(coefficients) != len(terms):
        raise ValueError(f"order {order} needs {len(terms)} coefficients, got {len(coefficients)}")
    axes = [np.linspace(-1.0, 1.0, d) if d > 1 else np.zeros(1) for d in dims]
    g0, g1, g2 = np.meshgrid(*axes, indexing="ij")
    poly = np.zeros(tuple(dims))
    for c, (e0, e1, e2) in zip(coefficients, terms):
        poly += c * g0**e0 * g1**e1 * g2**e2
    return np.exp(poly)


def add_bias_field(v: Volume3, order: int, magnitude: float, rng=None, coefficients=None) -> Volume3:
    if order < 0:
        raise ValueError("bias order must be >= 0")
    if coefficients is None:
        if magnitude == 0.0:
            return v
        coefficients = sample_bias_coefficients(order, magnitude, rng)
    return v.with_data(v.data * bias_field(v.dims, order, coefficients))


def add_noise(v: Volume3, sigma: float, kind: str = "gaussian", rng=None) -> Volume3:
    """Additive gaussian or rician noise with std ``sigma * (max - min)``."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if kind not in ("gaussian", "rician"):
        raise ValueError(f"unknown noise kind {kind!r}")
    if sigma == 0.0 and kind == "gaussian":
        return v
    data = v.data.astype(np.float64)
    std = sigma * float(data.max() - data.min())
    e1 = rng.normal(0.0, std, size=data.shape) if std > 0 else np.zeros_like(data)
    if kind == "gaussian":
        return v.with_data(data + e1)
    e2 = rng.normal(0.0, std, size=data.shape) if std > 0 else np.zeros_like(data)
    return v.with_data(np.sqrt((data + e1) ** 2 + e2**2))


def simulate_motion(v: Volume3, movements: Sequence[AffineParams], weights: Sequence[float]) -> Volume3:
    """Convex mix of moved copies; the unmoved image takes weight 1 - sum(weights)."""
    weights = [float(w) for w in weights]
    if len(weights) != len(movements):
        raise ValueError("one weight per movement required")
    if any(w < 0 for w in weights) or sum(weights) > 1.0 + 1e-9:
        raise ValueError("motion weights must be >= 0 and sum to at most 1")
    rest = max(0.0, 1.0 - sum(weights))
    out = rest * v.data.astype(np.float64)
    for m, w in zip(movements, weights):
        if w > 0.0:
            out += w * affine_resample(v.data, m).astype(np.float64)
    return v.with_data(out)


def gaussian_kernel(std: float) -> np.ndarray:
    radius = int(np.ceil(4.0 * std))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / std) ** 2)
    return k / k.sum()


def _convolve_axis(data: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    r = len(kernel) // 2
    pad = [(0, 0)] * data.ndim
    pad[axis] = (r, r)
    padded = np.pad(data, pad, mode="edge")
    n = data.shape[axis]
    out = np.zeros_like(data)
    for t, w in enumerate(kernel):
        out += w * np.take(padded, np.arange(t, t + n), axis=axis)
    return out


def blur(v: Volume3, stds: Sequence[float]) -> Volume3:
    """Separable Gaussian blur, kernels truncated at 4 std, edge-replicated borders."""
    if any(s < 0 for s in stds):
        raise ValueError("blur stds must be >= 0")
    data = v.data.astype(np.float64)
    for axis, s in enumerate(stds):
        if s > 0:
            data = _convolve_axis(data, gaussian_kernel(s), axis)
    return v.with_data(data)

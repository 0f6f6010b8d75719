"""Hot numeric kernels: trilinear resampling and dilated 3x3x3 convolution.

Every kernel has a numba implementation and a pure-numpy implementation with
identical semantics. The numba path is used when numba imports and the
environment variable ``LMK3D_DISABLE_NUMBA`` is unset or ``0``. Each public
function also takes ``backend="numba"|"numpy"`` to force a path (tests and
the benchmark compare the two).

Parallel loops only partition independent output elements, so results do
not depend on the thread count.
"""
from __future__ import annotations

import os
import warnings

import numpy as np

from .errors import ShapeMismatch

_DISABLE = os.environ.get("LMK3D_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")

try:
    if _DISABLE:
        raise ImportError("numba disabled by LMK3D_DISABLE_NUMBA")
    import numba as nb

    # old system TBB: numba falls back to omp/workqueue on its own
    warnings.filterwarnings("ignore", message="The TBB threading layer")
    HAVE_NUMBA = True
except ImportError:
    nb = None
    HAVE_NUMBA = False

DEFAULT_BACKEND = "numba" if HAVE_NUMBA else "numpy"


def _pick(backend):
    backend = backend or DEFAULT_BACKEND
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but unavailable")
    return backend


# ---------------------------------------------------------------- trilinear


def _trilinear_numpy(stack, coords):
    c, d0, d1, d2 = stack.shape
    x = coords.astype(np.float64, copy=False)
    base = np.floor(x)
    frac = x - base
    base = base.astype(np.int64)
    flat = stack.reshape(c, -1)
    out = np.zeros((c, x.shape[1]), dtype=np.float64)
    for o0 in (0, 1):
        i0 = base[0] + o0
        w0 = frac[0] if o0 else 1.0 - frac[0]
        for o1 in (0, 1):
            i1 = base[1] + o1
            w1 = frac[1] if o1 else 1.0 - frac[1]
            for o2 in (0, 1):
                i2 = base[2] + o2
                w2 = frac[2] if o2 else 1.0 - frac[2]
                ok = (i0 >= 0) & (i0 < d0) & (i1 >= 0) & (i1 < d1) & (i2 >= 0) & (i2 < d2)
                w = np.where(ok, w0 * w1 * w2, 0.0)
                lin = (np.clip(i0, 0, d0 - 1) * d1 + np.clip(i1, 0, d1 - 1)) * d2 + np.clip(i2, 0, d2 - 1)
                out += w * flat[:, lin]
    return out.astype(stack.dtype)


if HAVE_NUMBA:

    @nb.njit(cache=True, nogil=True, parallel=True)
    def _trilinear_nb(stack, coords, out):
        c, d0, d1, d2 = stack.shape
        m = coords.shape[1]
        for q in nb.prange(m):
            x0 = coords[0, q]
            x1 = coords[1, q]
            x2 = coords[2, q]
            b0 = int(np.floor(x0))
            b1 = int(np.floor(x1))
            b2 = int(np.floor(x2))
            f0 = x0 - b0
            f1 = x1 - b1
            f2 = x2 - b2
            for ch in range(c):
                acc = 0.0
                for o0 in range(2):
                    i0 = b0 + o0
                    if i0 < 0 or i0 >= d0:
                        continue
                    w0 = f0 if o0 == 1 else 1.0 - f0
                    for o1 in range(2):
                        i1 = b1 + o1
                        if i1 < 0 or i1 >= d1:
                            continue
                        w1 = f1 if o1 == 1 else 1.0 - f1
                        for o2 in range(2):
                            i2 = b2 + o2
                            if i2 < 0 or i2 >= d2:
                                continue
                            w2 = f2 if o2 == 1 else 1.0 - f2
                            acc += w0 * w1 * w2 * stack[ch, i0, i1, i2]
                out[ch, q] = acc


def trilinear_sample(stack: np.ndarray, coords: np.ndarray, backend=None) -> np.ndarray:
    """Sample a (C, d0, d1, d2) stack at (3, M) continuous voxel coordinates.

    Neighbours outside the grid contribute zero. Returns (C, M) in the
    stack's dtype; weights are accumulated in float64.
    """
    stack = np.ascontiguousarray(stack)
    if stack.ndim == 3:
        return trilinear_sample(stack[None], coords, backend)[0]
    coords = np.ascontiguousarray(coords, dtype=np.float64).reshape(3, -1)
    if _pick(backend) == "numpy":
        return _trilinear_numpy(stack, coords)
    out = np.empty((stack.shape[0], coords.shape[1]), dtype=np.float64)
    _trilinear_nb(stack, coords, out)
    return out.astype(stack.dtype)


# -------------------------------------------------------------------- conv3d


def _pad(x, d):
    return np.pad(x, ((0, 0), (0, 0), (d, d), (d, d), (d, d)))


def _im2col(x, d):
    n, ci, s0, s1, s2 = x.shape
    xp = _pad(x, d)
    col = np.empty((n, ci, 27, s0, s1, s2), dtype=x.dtype)
    t = 0
    for a in range(3):
        for b in range(3):
            for c in range(3):
                col[:, :, t] = xp[:, :, a * d:a * d + s0, b * d:b * d + s1, c * d:c * d + s2]
                t += 1
    return col.reshape(n, ci * 27, s0 * s1 * s2)


def _conv_fwd_numpy(x, w, d):
    n, _, s0, s1, s2 = x.shape
    co = w.shape[0]
    y = np.matmul(w.reshape(co, -1), _im2col(x, d))
    return y.reshape(n, co, s0, s1, s2)


def _conv_wgrad_numpy(x, gy, d):
    n, ci = x.shape[:2]
    co = gy.shape[1]
    col = _im2col(x, d)
    g = gy.reshape(n, co, -1)
    gw = np.zeros((co, ci * 27), dtype=np.float64)
    for k in range(n):
        gw += g[k].astype(np.float64) @ col[k].T.astype(np.float64)
    return gw.reshape(co, ci, 3, 3, 3).astype(x.dtype)


# The numba kernels work on the flattened padded volume. For output plane i,
# the voxels (i, j, k) sit on one contiguous span of the padded plane with
# stride P2 between rows; a tap is a constant offset into that span. Columns
# k >= s2 inside the span are padding and are computed but discarded.


def _span(dims, d):
    s0, s1, s2 = dims
    p1, p2 = s1 + 2 * d, s2 + 2 * d
    length = (s1 - 1) * p2 + s2
    offs = np.array(
        [((a - 1) * d * p1 + (b - 1) * d) * p2 + (c - 1) * d for a in range(3) for b in range(3) for c in range(3)],
        dtype=np.int64,
    )
    return p1, p2, length, offs


if HAVE_NUMBA:

    @nb.njit(cache=True, nogil=True, parallel=True, fastmath=True)
    def _conv_fwd_nb(xf, w, d, p1, p2, length, offs, y):
        n_b, co_n, s0, s1, s2 = y.shape
        ci_n = xf.shape[1]
        plane = p1 * p2
        blocked = co_n - co_n % 4
        for task in nb.prange(n_b * s0):
            n = task // s0
            i = task % s0
            base = (i + d) * plane + d * p2 + d
            acc = np.zeros((co_n, length), dtype=y.dtype)
            for ci in range(ci_n):
                src_all = xf[n, ci]
                for t in range(27):
                    a = t // 9
                    b = (t // 3) % 3
                    c = t % 3
                    src = src_all[base + offs[t]:base + offs[t] + length]
                    # four output channels per pass share each source load
                    for co in range(0, blocked, 4):
                        w0 = w[co, ci, a, b, c]
                        w1 = w[co + 1, ci, a, b, c]
                        w2 = w[co + 2, ci, a, b, c]
                        w3 = w[co + 3, ci, a, b, c]
                        a0 = acc[co]
                        a1 = acc[co + 1]
                        a2 = acc[co + 2]
                        a3 = acc[co + 3]
                        for q in range(length):
                            sv = src[q]
                            a0[q] += w0 * sv
                            a1[q] += w1 * sv
                            a2[q] += w2 * sv
                            a3[q] += w3 * sv
                    for co in range(blocked, co_n):
                        wv = w[co, ci, a, b, c]
                        ac = acc[co]
                        for q in range(length):
                            ac[q] += wv * src[q]
            for co in range(co_n):
                for j in range(s1):
                    for k in range(s2):
                        y[n, co, i, j, k] = acc[co, j * p2 + k]

    @nb.njit(cache=True, nogil=True, parallel=True, fastmath=True)
    def _conv_wgrad_nb(xf, gs, d, p1, p2, length, offs, gw):
        # gs: (N, Co, s0, length) output gradient laid out on the span, zero in the gaps
        n_b, co_n, s0, _ = gs.shape
        ci_n = xf.shape[1]
        plane = p1 * p2
        for task in nb.prange(co_n * ci_n):
            co = task // ci_n
            ci = task % ci_n
            for t in range(27):
                total = 0.0
                for n in range(n_b):
                    src_all = xf[n, ci]
                    for i in range(s0):
                        start = (i + d) * plane + d * p2 + d + offs[t]
                        src = src_all[start:start + length]
                        g = gs[n, co, i]
                        # span partials in the input dtype, totals in float64
                        r = g[0] - g[0]
                        for q in range(length):
                            r += g[q] * src[q]
                        total += r
                gw[co, ci, t // 9, (t // 3) % 3, t % 3] = total


def _flat_padded(x, d):
    xp = _pad(x, d)
    return np.ascontiguousarray(xp.reshape(xp.shape[0], xp.shape[1], -1))


def _to_span(gy, p2, length):
    n, co, s0, s1, s2 = gy.shape
    out = np.zeros((n, co, s0, s1, p2), dtype=gy.dtype)
    out[..., :s2] = gy
    return np.ascontiguousarray(out.reshape(n, co, s0, s1 * p2)[..., :length])


def _check_conv(x, w):
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeMismatch(f"conv3d expects 5D input and weight, got {x.shape} and {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeMismatch(f"weight expects {w.shape[1]} input channels, input has {x.shape[1]}")
    if w.shape[2:] not in ((3, 3, 3), (1, 1, 1)):
        raise ShapeMismatch(f"unsupported kernel shape {w.shape[2:]}")


def conv3d_forward(x, w, dilation=1, backend=None):
    """'Same'-padded dilated convolution without bias. x: (N,Ci,...), w: (Co,Ci,k,k,k)."""
    _check_conv(x, w)
    w = w.astype(x.dtype, copy=False)
    if w.shape[2] == 1:
        return np.einsum("oi,nixyz->noxyz", w[:, :, 0, 0, 0], x, optimize=True).astype(x.dtype)
    if _pick(backend) == "numpy":
        return _conv_fwd_numpy(x, w, dilation)
    y = np.empty((x.shape[0], w.shape[0]) + x.shape[2:], dtype=x.dtype)
    p1, p2, length, offs = _span(x.shape[2:], dilation)
    _conv_fwd_nb(_flat_padded(x, dilation), np.ascontiguousarray(w), dilation, p1, p2, length, offs, y)
    return y


def conv3d_backward_input(gy, w, dilation=1, backend=None):
    """Gradient w.r.t. the input: correlation with the flipped, transposed kernel."""
    w = w.astype(gy.dtype, copy=False)
    if w.shape[2] == 1:
        return np.einsum("oi,noxyz->nixyz", w[:, :, 0, 0, 0], gy, optimize=True).astype(gy.dtype)
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    return conv3d_forward(gy, wt, dilation, backend)


def conv3d_backward_weight(x, gy, kernel=3, dilation=1, backend=None):
    """Gradient w.r.t. the weight, reduced over batch and space in float64."""
    if kernel == 1:
        gw = np.einsum("noxyz,nixyz->oi", gy.astype(np.float64), x.astype(np.float64), optimize=True)
        return gw[:, :, None, None, None].astype(x.dtype)
    if _pick(backend) == "numpy":
        return _conv_wgrad_numpy(x, gy, dilation)
    gw = np.empty((gy.shape[1], x.shape[1], 3, 3, 3), dtype=np.float64)
    p1, p2, length, offs = _span(x.shape[2:], dilation)
    gy = gy.astype(x.dtype, copy=False)
    _conv_wgrad_nb(_flat_padded(x, dilation), _to_span(gy, p2, length), dilation, p1, p2, length, offs, gw)
    return gw.astype(x.dtype)

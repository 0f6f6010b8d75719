"""Minimal define-by-run reverse-mode differentiation over dense tensors.

Only the operations the landmark network needs are provided: dilated 3D
convolution, batch normalisation, ReLU, dropout, residual addition, scalar
selection and the mixed heatmap loss. Operations executed inside an active
:class:`Tape` are recorded in execution order, which is already a
topological order; :func:`backward` walks that list once in reverse.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import heatmap as hm
from .errors import DegenerateBatch, NonScalarLoss, ShapeMismatch
from .kernels import conv3d_backward_input, conv3d_backward_weight, conv3d_forward

_active = threading.local()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype})"


@dataclass
class Record:
    kind: str
    inputs: tuple
    output: Tensor
    backward_fn: Callable


@dataclass
class Tape:
    records: list = field(default_factory=list)

    def __enter__(self):
        self._prev = getattr(_active, "tape", None)
        _active.tape = self
        return self

    def __exit__(self, *exc):
        _active.tape = self._prev
        return False

    def clear(self):
        """Drop recorded nodes; outputs point back at the tape, so this breaks the cycle."""
        for rec in self.records:
            rec.output.node = None
        self.records.clear()

    def record(self, kind, inputs, output, fn):
        output.node = (self, len(self.records))
        output.requires_grad = True
        self.records.append(Record(kind, tuple(inputs), output, fn))


def current_tape() -> Optional[Tape]:
    return getattr(_active, "tape", None)


def _maybe_record(kind, inputs, out_data, fn) -> Tensor:
    out = Tensor(out_data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(kind, inputs, out, fn)
    return out


def backward(loss: Tensor, wrt: Optional[Sequence[Tensor]] = None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor reachable from ``loss``.

    With ``wrt`` given, only those leaves accumulate and the sweep is pruned to
    records that depend on them; other tensors are left untouched.
    """
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    if loss.node is None:
        return
    tape, last = loss.node
    records = tape.records[: last + 1]
    reach = None
    if wrt is not None:
        reach = {id(t) for t in wrt}
        for rec in records:
            if any(id(i) in reach for i in rec.inputs):
                reach.add(id(rec.output))
    grads = {id(loss): np.ones_like(loss.data, dtype=np.float64).astype(loss.data.dtype)}
    for rec in reversed(records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        rec.output.grad = g if rec.output.grad is None else rec.output.grad + g
        for inp, gi in zip(rec.inputs, rec.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if reach is not None and id(inp) not in reach:
                continue
            if inp.node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi


# ------------------------------------------------------------------ ops


def conv3d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, dilation: int = 1) -> Tensor:
    """Zero-padded 'same' convolution; kernel 3x3x3 (dilated) or 1x1x1."""
    if x.data.ndim != 5:
        raise ShapeMismatch(f"conv3d input must be (N, C, d0, d1, d2), got {x.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeMismatch(f"bias shape {b.shape} does not match {w.shape[0]} output channels")
    ksize = w.shape[2]
    y = conv3d_forward(x.data, w.data, dilation)
    if b is not None:
        y = y + b.data.astype(y.dtype).reshape(1, -1, 1, 1, 1)

    def fn(g):
        g = g.astype(x.data.dtype, copy=False)
        gx = conv3d_backward_input(g, w.data, dilation) if x.requires_grad else None
        gw = conv3d_backward_weight(x.data, g, ksize, dilation) if w.requires_grad else None
        gb = None
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(b.data.dtype)
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _maybe_record("conv3d", inputs, y, fn)


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: str = "train",
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation over batch and space.

    Train mode uses batch statistics and updates
    ``running = momentum * running + (1 - momentum) * batch`` (population
    variance); eval mode uses the running statistics.
    """
    axes = (0, 2, 3, 4)
    shape = (1, -1, 1, 1, 1)
    dt = x.data.dtype
    if mode == "train":
        count = x.data.size // x.shape[1]
        if count < 2:
            raise DegenerateBatch("batch norm needs at least 2 values per channel in train mode")
        mean = x.data.mean(axis=axes, dtype=np.float64)
        var = x.data.astype(np.float64).var(axis=axes)
        state.running_mean[...] = momentum * state.running_mean + (1.0 - momentum) * mean
        state.running_var[...] = momentum * state.running_var + (1.0 - momentum) * var
    elif mode == "eval":
        mean = state.running_mean.astype(np.float64)
        var = state.running_var.astype(np.float64)
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((x.data - mean.reshape(shape)) * inv.reshape(shape)).astype(dt)
    y = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def fn(g):
        g64 = g.astype(np.float64)
        xh64 = xhat.astype(np.float64)
        gg = (g64 * xh64).sum(axis=axes)
        gb = g64.sum(axis=axes)
        gscale = (gamma.data.astype(np.float64) * inv).reshape(shape)
        if mode == "train":
            m = x.data.size // x.shape[1]
            gx = gscale * (g64 - (gb / m).reshape(shape) - xh64 * (gg / m).reshape(shape))
        else:
            gx = gscale * g64
        return gx.astype(dt), gg.astype(gamma.data.dtype), gb.astype(beta.data.dtype)

    return _maybe_record("batchnorm", (x, gamma, beta), y.astype(dt), fn)


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return _maybe_record("relu", (x,), np.where(keep, x.data, 0).astype(x.data.dtype), lambda g: (g * keep,))


def dropout(x: Tensor, rate: float, mode: str = "train", rng=None) -> Tensor:
    """Inverted dropout; eval mode (or rate 0) returns ``x`` itself."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    scale = (rng.random(x.shape) >= rate).astype(x.data.dtype) / x.data.dtype.type(1.0 - rate)
    return _maybe_record("dropout", (x,), x.data * scale, lambda g: (g * scale,))


def add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeMismatch(f"cannot add {x.shape} and {y.shape}")
    return _maybe_record("add", (x, y), x.data + y.data, lambda g: (g, g))


def select(x: Tensor, index: Sequence[int]) -> Tensor:
    """Scalar element ``x[index]``."""
    index = tuple(int(i) for i in index)

    def fn(g):
        gx = np.zeros_like(x.data)
        gx[index] = g.reshape(())
        return (gx,)

    return _maybe_record("select", (x,), np.asarray(x.data[index]).reshape(()), fn)


def sum_all(x: Tensor) -> Tensor:
    return _maybe_record(
        "sum", (x,), np.asarray(x.data.sum(dtype=np.float64)).astype(x.data.dtype), lambda g: (np.broadcast_to(g, x.shape).copy(),)
    )


def mixed_loss(h_hat: Tensor, targets, points, alpha: float, masks=None) -> tuple[Tensor, list]:
    """Batch-mean mixed loss on raw heatmaps (N, K, d0, d1, d2).

    Returns the scalar loss tensor and the per-sample :class:`LossValue` list.
    """
    n = h_hat.shape[0]
    masks = [None] * n if masks is None else masks
    values = [hm.loss_mixed(targets[i], h_hat.data[i], points[i], alpha, masks[i]) for i in range(n)]
    total = np.asarray(sum(v.total for v in values) / n, dtype=np.float64)

    def fn(g):
        grads = np.stack(
            [hm.loss_mixed_backward(targets[i], h_hat.data[i], points[i], alpha, masks[i]) for i in range(n)]
        )
        return ((grads * (float(g) / n)).astype(h_hat.data.dtype),)

    return _maybe_record("mixed_loss", (h_hat,), total.astype(h_hat.data.dtype), fn), values

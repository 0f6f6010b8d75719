"""HighRes3DNet-lite: full-resolution dilated residual network for heatmap regression.

Layout: stem conv (1 -> C), three groups of B pre-activation residual blocks
at dilations 1, 2, 4 (BN -> ReLU -> conv -> BN -> ReLU -> conv, plus skip),
dropout, and a 1x1x1 head (C -> K) producing one raw heatmap per landmark.
Parameter count: 28C + 3B(54C^2 + 6C) + CK + K.
"""
from __future__ import annotations

import csv
import json
import os
import struct
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .core import LandmarkSet, Volume3
from .errors import InvalidConfig, NumericError, ParseError, ShapeMismatch
from .heatmap import LossValue, gen_gt_heatmap, spatial_softmax

CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1


@dataclass
class ModelConfig:
    dims: tuple[int, int, int] = (32, 32, 32)
    K: int = 8
    channels: int = 8
    blocks: int = 1
    dilations: tuple[int, int, int] = (1, 2, 4)
    dropout: float = 0.1
    sigma: float = 2.0
    alpha: float = 0.4
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 2
    seed: int = 42
    momentum: float = 0.9
    eps: float = 1e-5
    dtype: str = "float32"

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.dilations = tuple(int(d) for d in self.dilations)
        problems = []
        if len(self.dims) != 3 or min(self.dims) < 1:
            problems.append(f"dims must be 3 positive ints, got {self.dims}")
        if self.K < 1:
            problems.append("K must be >= 1")
        if self.channels < 1 or self.blocks < 1:
            problems.append("channels and blocks must be >= 1")
        if self.dilations != (1, 2, 4):
            problems.append(f"dilations must be (1, 2, 4), got {self.dilations}")
        if not 0.0 <= self.dropout < 1.0:
            problems.append("dropout must lie in [0, 1)")
        if not 0.0 <= self.alpha <= 1.0:
            problems.append("alpha must lie in [0, 1]")
        if self.sigma <= 0 or self.lr < 0 or self.epochs < 0 or self.batch_size < 1:
            problems.append("sigma > 0, lr >= 0, epochs >= 0 and batch_size >= 1 are required")
        if self.dtype not in ("float32", "float64"):
            problems.append(f"dtype must be float32 or float64, got {self.dtype}")
        if problems:
            raise InvalidConfig("; ".join(problems))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def param_count_formula(C: int, B: int, K: int) -> int:
    return 28 * C + 3 * B * (54 * C * C + 6 * C) + C * K + K


@dataclass
class Layer:
    id: str
    kind: str  # conv | bn | relu | dropout | block_start | block_end
    dilation: int = 1


@dataclass
class ModelGraph:
    cfg: ModelConfig
    layers: list
    params: dict
    bn_states: dict

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    def num_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def layer_ids(self) -> list[str]:
        return [l.id for l in self.layers]

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def default_hook_layer(cfg: ModelConfig) -> str:
    """Second convolution of the last block in the third (dilation 4) group."""
    return f"g3.b{cfg.blocks}.conv2"


def build_model(cfg: ModelConfig) -> ModelGraph:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    dt = np.dtype(cfg.dtype)
    C, K = cfg.channels, cfg.K
    params: dict = {}
    bn: dict = {}
    layers: list = []

    def conv(name, cin, cout, k, dilation):
        std = np.sqrt(2.0 / (cin * k**3))
        params[f"{name}.w"] = ad.Tensor(rng.normal(0.0, std, (cout, cin, k, k, k)).astype(dt), True, f"{name}.w")
        params[f"{name}.b"] = ad.Tensor(np.zeros(cout, dtype=dt), True, f"{name}.b")
        layers.append(Layer(name, "conv", dilation))

    def norm(name):
        params[f"{name}.gamma"] = ad.Tensor(np.ones(C, dtype=dt), True, f"{name}.gamma")
        params[f"{name}.beta"] = ad.Tensor(np.zeros(C, dtype=dt), True, f"{name}.beta")
        bn[name] = ad.BatchNormState(np.zeros(C), np.ones(C))
        layers.append(Layer(name, "bn"))

    conv("stem", 1, C, 3, 1)
    for g, dil in enumerate(cfg.dilations, start=1):
        for b in range(1, cfg.blocks + 1):
            pre = f"g{g}.b{b}"
            layers.append(Layer(pre, "block_start"))
            norm(f"{pre}.bn1")
            layers.append(Layer(f"{pre}.relu1", "relu"))
            conv(f"{pre}.conv1", C, C, 3, dil)
            norm(f"{pre}.bn2")
            layers.append(Layer(f"{pre}.relu2", "relu"))
            conv(f"{pre}.conv2", C, C, 3, dil)
            layers.append(Layer(pre, "block_end"))
    layers.append(Layer("dropout", "dropout"))
    conv("head", C, K, 1, 1)
    return ModelGraph(cfg, layers, params, bn)


def prepare_input(v: Volume3 | np.ndarray, dtype) -> np.ndarray:
    """Zero-mean, unit-std copy of the volume as (1, d0, d1, d2)."""
    data = (v.data if isinstance(v, Volume3) else np.asarray(v)).astype(np.float64)
    std = data.std()
    data = (data - data.mean()) / (std if std > 1e-12 else 1.0)
    return data[None].astype(dtype)


def forward_tensor(
    m: ModelGraph,
    x: ad.Tensor,
    mode: str = "eval",
    rng=None,
    hooks: Optional[dict] = None,
    momentum: Optional[float] = None,
) -> ad.Tensor:
    """Run the layer list on a (N, 1, d0, d1, d2) tensor.

    ``hooks`` maps a layer id to ``fn(tensor) -> tensor`` applied to that
    layer's output; it may record, replace or perturb the activation.
    """
    if x.shape[1:] != (1,) + m.cfg.dims:
        raise ShapeMismatch(f"model expects (N, 1, {m.cfg.dims}), got {x.shape}")
    hooks = hooks or {}
    mom = m.cfg.momentum if momentum is None else momentum
    p = m.params
    h = x
    skip = []
    for layer in m.layers:
        if layer.kind == "conv":
            h = ad.conv3d(h, p[f"{layer.id}.w"], p[f"{layer.id}.b"], layer.dilation)
        elif layer.kind == "bn":
            h = ad.batchnorm(h, p[f"{layer.id}.gamma"], p[f"{layer.id}.beta"], m.bn_states[layer.id], mode, mom, m.cfg.eps)
        elif layer.kind == "relu":
            h = ad.relu(h)
        elif layer.kind == "dropout":
            h = ad.dropout(h, m.cfg.dropout, mode, rng)
        elif layer.kind == "block_start":
            skip.append(h)
        elif layer.kind == "block_end":
            h = ad.add(h, skip.pop())
        if layer.id in hooks and layer.kind not in ("block_start",):
            h = hooks[layer.id](h)
    return h


def forward(m: ModelGraph, v: Volume3, mode: str = "eval", rng=None) -> np.ndarray:
    """Raw heatmap stack (K, d0, d1, d2) for one volume."""
    if tuple(v.dims) != m.cfg.dims:
        raise ShapeMismatch(f"volume dims {v.dims} do not match model dims {m.cfg.dims}")
    x = ad.Tensor(prepare_input(v, m.dtype)[None])
    return forward_tensor(m, x, mode, rng).data[0]


def predict(m: ModelGraph, v: Volume3) -> tuple[np.ndarray, np.ndarray]:
    h = forward(m, v, "eval")
    _, pts = spatial_softmax(h)
    return h, pts


# ------------------------------------------------------------------ training


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.lr == 0.0:
                continue
            upd = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - upd).astype(p.data.dtype)


@dataclass
class Sample:
    """A training/evaluation item with precomputed network input and targets."""

    x: np.ndarray
    points: np.ndarray
    target: np.ndarray
    mask: np.ndarray


def make_samples(pairs: Sequence[tuple[Volume3, LandmarkSet]], cfg: ModelConfig) -> list[Sample]:
    out = []
    dt = np.dtype(cfg.dtype)
    for v, lms in pairs:
        if tuple(v.dims) != cfg.dims:
            raise ShapeMismatch(f"sample dims {v.dims} do not match config dims {cfg.dims}")
        if len(lms) != cfg.K:
            raise ShapeMismatch(f"sample has {len(lms)} landmarks, config expects {cfg.K}")
        H, mask = gen_gt_heatmap(lms, v.dims, cfg.sigma)
        out.append(Sample(prepare_input(v, dt), lms.points.copy(), H, mask))
    return out


def _mean_loss(values: Sequence[LossValue], alpha) -> LossValue:
    n = len(values)
    return LossValue(
        sum(v.total for v in values) / n, sum(v.coord for v in values) / n, sum(v.heatmap for v in values) / n, alpha
    )


def train_step(m: ModelGraph, batch: Sequence[Sample], opt: Adam, cfg: ModelConfig | None = None, rng=None) -> LossValue:
    """One Adam update on a batch; returns the loss before the update."""
    cfg = cfg or m.cfg
    x = ad.Tensor(np.stack([s.x for s in batch]))
    m.zero_grad()
    with ad.Tape() as tape:
        h = forward_tensor(m, x, "train", rng)
        loss, values = ad.mixed_loss(h, [s.target for s in batch], [s.points for s in batch], cfg.alpha, [s.mask for s in batch])
        ad.backward(loss)
    tape.clear()
    gnorm = np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in m.params.values() if p.grad is not None))
    if not np.isfinite(gnorm) or not np.isfinite(float(loss.data)):
        raise NumericError(f"non-finite loss or gradient (loss={float(loss.data)}, |g|={gnorm})")
    opt.step(m.params)
    return _mean_loss(values, cfg.alpha)


def mean_radial_error(m: ModelGraph, samples: Sequence[Sample]) -> float:
    """Mean Euclidean error in voxels over unmasked landmarks."""
    errs = []
    for s in samples:
        h = forward_tensor(m, ad.Tensor(s.x[None]), "eval").data[0]
        _, pts = spatial_softmax(h)
        errs.append(np.linalg.norm(pts - s.points, axis=1)[s.mask])
    return float(np.mean(np.concatenate(errs))) if errs else float("nan")


@dataclass
class TrainingReport:
    train_loss: list = field(default_factory=list)
    val_mae: list = field(default_factory=list)
    epochs_run: int = 0
    resumed_from: Optional[int] = None


def _epoch_rngs(seed: int, epoch: int):
    order = np.random.default_rng(np.random.SeedSequence([seed, 1, epoch]))
    drop = np.random.default_rng(np.random.SeedSequence([seed, 2, epoch]))
    return order, drop


LOG_NAME = "loss_log.csv"
LATEST = "latest.ckpt"


def train(
    m: ModelGraph,
    dataset: Sequence[Sample],
    cfg: ModelConfig | None = None,
    checkpoint_dir=None,
    val: Sequence[Sample] = (),
    opt: Optional[Adam] = None,
    resume: bool = True,
    stop_after: Optional[int] = None,
    progress: Optional[Callable[[int, float, float], None]] = None,
) -> TrainingReport:
    """Epoch loop with per-epoch CSV logging and checkpoints.

    With ``resume`` and an existing ``latest.ckpt`` in ``checkpoint_dir``,
    parameters, batch-norm statistics and optimiser state are restored and
    training continues from the next epoch. Epoch order and dropout masks
    are seeded by (seed, epoch), so a resumed run follows the same
    trajectory as an uninterrupted one. ``stop_after`` ends the run early
    after that epoch (used to simulate interruption).
    """
    cfg = cfg or m.cfg
    if not dataset:
        raise ValueError("training dataset is empty")
    opt = opt or Adam(cfg.lr)
    report = TrainingReport()
    start = 1
    rows: list = []
    if checkpoint_dir is not None:
        os.makedirs(checkpoint_dir, exist_ok=True)
        latest = os.path.join(checkpoint_dir, LATEST)
        if resume and os.path.exists(latest):
            state = load_checkpoint(latest)
            _restore(m, opt, state)
            start = state["epoch"] + 1
            report.resumed_from = state["epoch"]
            rows = _read_log(os.path.join(checkpoint_dir, LOG_NAME))[: state["epoch"]]
    for r in rows:
        report.train_loss.append(r[1])
        report.val_mae.append(r[2])

    for epoch in range(start, cfg.epochs + 1):
        order_rng, drop_rng = _epoch_rngs(cfg.seed, epoch)
        order = order_rng.permutation(len(dataset))
        losses = []
        for b0 in range(0, len(order), cfg.batch_size):
            batch = [dataset[i] for i in order[b0:b0 + cfg.batch_size]]
            losses.append(train_step(m, batch, opt, cfg, drop_rng).total)
        tl = float(np.mean(losses))
        vm = mean_radial_error(m, val) if val else float("nan")
        report.train_loss.append(tl)
        report.val_mae.append(vm)
        rows.append((epoch, tl, vm))
        if checkpoint_dir is not None:
            _write_log(os.path.join(checkpoint_dir, LOG_NAME), rows)
            save_checkpoint(m, opt, epoch, os.path.join(checkpoint_dir, LATEST), rng_state={"seed": cfg.seed, "next_epoch": epoch + 1})
        if progress:
            progress(epoch, tl, vm)
        report.epochs_run = epoch
        if stop_after is not None and epoch >= stop_after:
            break
    return report


def _write_log(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_mae_voxels"])
        for e, tl, vm in rows:
            w.writerow([e, repr(float(tl)), repr(float(vm))])


def _read_log(path) -> list:
    if not os.path.exists(path):
        return []
    with open(path) as f:
        return [(int(r["epoch"]), float(r["train_loss"]), float(r["val_mae_voxels"])) for r in csv.DictReader(f)]


# --------------------------------------------------------------- checkpoints


def _blobs(m: ModelGraph, opt: Optional[Adam]):
    for name, p in m.params.items():
        yield f"param/{name}", p.data
    for name, st in m.bn_states.items():
        yield f"bn/{name}/mean", st.running_mean
        yield f"bn/{name}/var", st.running_var
    if opt is not None:
        for name in m.params:
            if name in opt.m:
                yield f"adam_m/{name}", opt.m[name]
                yield f"adam_v/{name}", opt.v[name]


def save_checkpoint(m: ModelGraph, opt: Optional[Adam], epoch: int, path, rng_state=None) -> None:
    """Binary checkpoint: magic, version, header length, JSON header, raw blobs."""
    entries = []
    payload = []
    offset = 0
    for name, arr in _blobs(m, opt):
        arr = np.ascontiguousarray(arr)
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    header = {
        "config": m.cfg.to_dict(),
        "epoch": int(epoch),
        "rng": rng_state or {"seed": m.cfg.seed},
        "optimizer": None if opt is None else {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "t": opt.t},
        "entries": entries,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hb)) + hb)
        for raw in payload:
            f.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != CKPT_MAGIC:
        raise ParseError(f"{path}: not a checkpoint (bad magic {buf[:4]!r})")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(buf[12:12 + hlen].decode())
    base = 12 + hlen
    arrays = {}
    for e in header["entries"]:
        start = base + e["offset"]
        raw = buf[start:start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise ParseError(f"{path}: truncated blob {e['name']}")
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"]).newbyteorder("<")).reshape(e["shape"]).copy()
    header["arrays"] = arrays
    return header


def _restore(m: ModelGraph, opt: Optional[Adam], state: dict) -> None:
    arrays = state["arrays"]
    for name, p in m.params.items():
        p.data = arrays[f"param/{name}"].astype(p.data.dtype)
    for name, st in m.bn_states.items():
        st.running_mean[...] = arrays[f"bn/{name}/mean"]
        st.running_var[...] = arrays[f"bn/{name}/var"]
    if opt is not None and state.get("optimizer"):
        o = state["optimizer"]
        opt.lr, opt.beta1, opt.beta2, opt.eps, opt.t = o["lr"], o["beta1"], o["beta2"], o["eps"], o["t"]
        opt.m = {n: arrays[f"adam_m/{n}"] for n in m.params if f"adam_m/{n}" in arrays}
        opt.v = {n: arrays[f"adam_v/{n}"] for n in m.params if f"adam_v/{n}" in arrays}


def model_from_checkpoint(path) -> tuple[ModelGraph, dict]:
    state = load_checkpoint(path)
    m = build_model(ModelConfig.from_dict(state["config"]))
    _restore(m, None, state)
    return m, state

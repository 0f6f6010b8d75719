"""Landmark error metrics: per-landmark distances in mm, MAE/RMSE per sub-anatomy."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import LandmarkSet, table1_subanatomy
from .errors import EmptySet, IdMismatch, ParseError

OVERALL = "Overall"


@dataclass(frozen=True)
class GroupStats:
    n: int
    mae: float
    mae_std: float
    rmse: float
    rmse_std: float


@dataclass
class EvalReport:
    # one row per evaluated (sample, landmark) pair
    sample: np.ndarray
    ids: np.ndarray
    distances: np.ndarray
    excluded: int
    num_samples: int
    groups: dict = field(default_factory=dict)  # name -> GroupStats, in table order
    overall: Optional[GroupStats] = None
    membership: dict = field(default_factory=dict)  # landmark id -> group name


def _stats(dist: np.ndarray, sample: np.ndarray) -> GroupStats:
    # std of MAE is over the pooled distances; std of RMSE is over per-sample RMSE
    per_sample = np.array([np.sqrt(np.mean(dist[sample == s] ** 2)) for s in np.unique(sample)])
    return GroupStats(
        n=int(dist.size),
        mae=float(np.mean(dist)),
        mae_std=float(np.std(dist)),
        rmse=float(np.sqrt(np.mean(dist**2))),
        rmse_std=float(np.std(per_sample)),
    )


def resolve_groups(groups, ids: Sequence[int]) -> dict[int, str]:
    """Accepts None, ``"table1"``, a path to a JSON ``{name: [ids]}`` file, or an id -> name mapping."""
    if groups is None:
        return {}
    if isinstance(groups, str):
        if groups == "table1":
            return table1_subanatomy(ids)
        try:
            with open(groups, encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ParseError(f"{groups}: {e}") from e
        if not isinstance(doc, dict):
            raise ParseError(f"{groups}: expected an object mapping group names to id lists")
        out = {}
        for name, members in doc.items():
            for i in members:
                out[int(i)] = str(name)
        return out
    return {int(k): str(v) for k, v in dict(groups).items()}


def evaluate(
    pred: Sequence[LandmarkSet],
    gt: Sequence[LandmarkSet],
    spacing=(1.0, 1.0, 1.0),
    groups=None,
) -> EvalReport:
    if len(pred) != len(gt):
        raise IdMismatch(f"{len(pred)} predictions for {len(gt)} ground-truth samples")
    if not gt:
        raise EmptySet("no samples to evaluate")
    spacing = np.asarray(spacing, dtype=np.float64)
    rows_s, rows_id, rows_d = [], [], []
    excluded = 0
    for s, (p, g) in enumerate(zip(pred, gt)):
        if tuple(p.ids) != tuple(g.ids):
            raise IdMismatch(f"sample {s}: landmark ids differ")
        keep = ~(np.asarray(p.oob) | np.asarray(g.oob))
        excluded += int((~keep).sum())
        diff = (np.asarray(p.points, dtype=np.float64) - np.asarray(g.points, dtype=np.float64)) * spacing
        d = np.sqrt(np.sum(diff**2, axis=1))
        rows_s.extend([s] * int(keep.sum()))
        rows_id.extend(np.asarray(g.ids)[keep].tolist())
        rows_d.extend(d[keep].tolist())
    if not rows_d:
        raise EmptySet("every landmark pair is out of bounds")
    sample = np.asarray(rows_s, dtype=np.int64)
    ids = np.asarray(rows_id, dtype=np.int64)
    dist = np.asarray(rows_d, dtype=np.float64)

    membership = resolve_groups(groups, sorted(set(gt[0].ids)))
    report = EvalReport(sample, ids, dist, excluded, len(gt), membership=membership)
    names = []
    for i in sorted(set(ids.tolist())):
        name = membership.get(i)
        if name is not None and name not in names:
            names.append(name)
    for name in names:
        sel = np.array([membership.get(i) == name for i in ids.tolist()])
        report.groups[name] = _stats(dist[sel], sample[sel])
    report.overall = _stats(dist, sample)
    return report


def report_to_table(r: EvalReport, fmt: str = "markdown", digits: int = 4) -> str:
    rows = list(r.groups.items()) + [(OVERALL, r.overall)]
    f = f"{{:.{digits}f}}"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["subanatomy", "n", "mae", "mae_std", "rmse", "rmse_std"])
        for name, st in rows:
            w.writerow([name, st.n, f.format(st.mae), f.format(st.mae_std), f.format(st.rmse), f.format(st.rmse_std)])
        return buf.getvalue()
    if fmt == "markdown":
        lines = ["| Subanatomy | MAE | RMSE |", "|---|---|---|"]
        for name, st in rows:
            lines.append(
                f"| {name} | {f.format(st.mae)} ± {f.format(st.mae_std)} | {f.format(st.rmse)} ± {f.format(st.rmse_std)} |"
            )
        return "\n".join(lines) + "\n"
    raise ValueError(f"format must be 'csv' or 'markdown', got {fmt!r}")

"""Command-line entry point: synth, augment, train, predict, gradcam, eval.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import augment as aug
from .core import LandmarkSet, read_landmarks, read_volume, write_landmarks, write_volume
from .errors import DataError, IdMismatch, NumericError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text: str, n: int | None = None) -> tuple[float, ...]:
    try:
        vals = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if n is not None and len(vals) != n:
        raise argparse.ArgumentTypeError(f"expected {n} values, got {len(vals)}")
    return vals


def _ints3(text: str) -> tuple[int, int, int]:
    try:
        vals = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 3 comma-separated integers, got {text!r}")
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected 3 integers, got {len(vals)}")
    return vals


def _load_pairs(directory):
    pairs = aug.list_pairs(directory)
    if not pairs:
        raise DataError(f"no vol_XXXX.vlm / lmk_XXXX.json pairs in {directory}")
    out = []
    for stem, vpath, lpath in pairs:
        v = read_volume(vpath)
        out.append((stem, v, read_landmarks(lpath, v.dims)))
    return out


# ---------------------------------------------------------------- commands


def cmd_synth(a) -> int:
    from .synth import PhantomSpec, write_phantoms

    spec = PhantomSpec(dims=a.dims, K=a.K, seed=a.seed, spacing=a.spacing)
    names = write_phantoms(spec, a.count, a.out, start=a.start)
    print(f"wrote {len(names)} phantoms to {a.out}")
    return EXIT_OK


def cmd_augment(a) -> int:
    probs = aug.check_probabilities(a.p)
    items = _load_pairs(a.inp)
    cfg = aug.AugmentConfig(probabilities=probs)
    results = aug.augment_dataset([(v, l) for _, v, l in items], probs, a.seed, cfg, a.workers)
    os.makedirs(a.out, exist_ok=True)
    for (stem, v, _), r in zip(items, results):
        write_volume(r.volume, os.path.join(a.out, f"vol_{stem}.vlm"))
        write_landmarks(r.landmarks, os.path.join(a.out, f"lmk_{stem}.json"), v.dims)
        aug.write_chain(r.chain, os.path.join(a.out, f"chain_{stem}.json"))
    print(f"augmented {len(results)} pairs into {a.out}")
    return EXIT_OK


def build_training_set(pairs, tc):
    """Split off trailing validation pairs and add augmented copies of the rest."""
    n_val = tc.run.val_count
    if n_val >= len(pairs):
        raise DataError(f"val_count={n_val} leaves no training pairs out of {len(pairs)}")
    train_pairs = list(pairs[: len(pairs) - n_val])
    val_pairs = list(pairs[len(pairs) - n_val:])
    extra = []
    if tc.run.augment:
        for k in range(tc.run.augment_copies):
            done = aug.augment_dataset(train_pairs, tc.augment.probabilities, tc.run.augment_seed + k, tc.augment)
            extra.extend((s.volume, s.landmarks) for s in done)
    return train_pairs + extra, val_pairs


def cmd_train(a) -> int:
    from .config import format_config, read_config
    from .model import build_model, make_samples, train

    tc = read_config(a.config)
    pairs = [(v, l) for _, v, l in _load_pairs(a.data)]
    train_pairs, val_pairs = build_training_set(pairs, tc)
    m = build_model(tc.model)
    os.makedirs(a.out, exist_ok=True)
    with open(os.path.join(a.out, "config.txt"), "w") as f:
        f.write(format_config(tc))

    def progress(epoch, loss, mae):
        print(f"epoch {epoch:3d}  loss {loss:.5f}  val_mae {mae:.4f}", file=sys.stderr, flush=True)

    report = train(
        m,
        make_samples(train_pairs, tc.model),
        tc.model,
        checkpoint_dir=a.out,
        val=make_samples(val_pairs, tc.model),
        resume=not a.fresh,
        progress=progress,
    )
    print(f"trained {report.epochs_run} epochs; checkpoint {os.path.join(a.out, 'latest.ckpt')}")
    return EXIT_OK


def cmd_predict(a) -> int:
    from .model import model_from_checkpoint, predict
    from .synth import phantom_subanatomy

    m, _ = model_from_checkpoint(a.model)
    v = read_volume(a.volume)
    _, pts = predict(m, v)
    if not np.all(np.isfinite(pts)):
        raise NumericError("prediction produced non-finite coordinates")
    ids = tuple(range(1, m.cfg.K + 1))
    lms = LandmarkSet(ids, pts, (False,) * m.cfg.K, phantom_subanatomy(m.cfg.K))
    write_landmarks(lms, a.out, v.dims)
    return EXIT_OK


def cmd_gradcam(a) -> int:
    from .gradcam import CamRequest, export_cam_overlay, gradcam
    from .model import model_from_checkpoint

    m, _ = model_from_checkpoint(a.model)
    v = read_volume(a.volume)
    cam = gradcam(m, v, CamRequest(a.landmark, a.layer))
    export_cam_overlay(v, cam, a.plane, a.slice, a.out)
    print(f"cam peak {cam.peak}; overlay written to {a.out}")
    return EXIT_OK


def cmd_eval(a) -> int:
    from .evaluation import evaluate, report_to_table

    def lmk_files(d):
        return {n[4:-5]: os.path.join(d, n) for n in os.listdir(d) if n.startswith("lmk_") and n.endswith(".json")}

    pred, gt = lmk_files(a.pred), lmk_files(a.gt)
    if set(pred) != set(gt):
        raise IdMismatch(f"prediction stems {sorted(set(pred) ^ set(gt))} have no counterpart")
    stems = sorted(gt)
    report = evaluate(
        [read_landmarks(pred[s]) for s in stems],
        [read_landmarks(gt[s]) for s in stems],
        a.spacing,
        a.groups,
    )
    text = report_to_table(report, a.format)
    if a.out:
        with open(a.out, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    if report.excluded:
        print(f"excluded {report.excluded} out-of-bounds landmark pairs", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lmk3d", description="3D landmark detection with augmentation, heatmap training and Grad-CAM.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write synthetic phantom volumes and landmarks")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--K", type=int, default=8)
    s.add_argument("--dims", type=_ints3, default=(32, 32, 32))
    s.add_argument("--spacing", type=lambda t: _floats(t, 3), default=(1.0, 1.0, 1.0))
    s.add_argument("--start", type=int, default=0, help="first phantom index")
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("augment", help="augment every pair in a directory")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--p", type=lambda t: _floats(t, 4), default=aug.DEFAULT_PROBABILITIES)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(fn=cmd_augment)

    s = sub.add_parser("train", help="train a model from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--fresh", action="store_true", help="ignore an existing checkpoint in --out")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("predict", help="predict landmarks for one volume")
    s.add_argument("--model", required=True)
    s.add_argument("--volume", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_predict)

    s = sub.add_parser("gradcam", help="Grad-CAM overlay for one landmark")
    s.add_argument("--model", required=True)
    s.add_argument("--volume", required=True)
    s.add_argument("--landmark", type=int, required=True)
    s.add_argument("--plane", choices=("axial", "coronal", "sagittal"), default="axial")
    s.add_argument("--slice", type=int, required=True)
    s.add_argument("--layer", default=None, help="hook layer id (default: last conv of group 3)")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gradcam)

    s = sub.add_parser("eval", help="MAE / RMSE of predictions against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--spacing", type=lambda t: _floats(t, 3), default=(1.0, 1.0, 1.0))
    s.add_argument("--groups", default=None, help="'table1' or a JSON file {group: [ids]}")
    s.add_argument("--format", choices=("csv", "markdown"), default="markdown")
    s.add_argument("--out", default=None)
    s.set_defaults(fn=cmd_eval)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return int(e.code or 0)
    try:
        return args.fn(args)
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"invalid argument: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

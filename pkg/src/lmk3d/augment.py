"""Landmark-preserving augmentation policies DA1-DA4.

A policy is drawn from cumulative half-open intervals over the policy
probabilities, expanded into a :class:`TransformChain` with fully sampled
parameters, and applied to an image/landmark pair. Landmarks follow the
spatial members of the chain through one-hot "faux" volumes whose
transformed mass is turned back into a point by a thresholded centroid;
intensity members never touch landmarks.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

from .core import LandmarkSet, Volume3, in_bounds
from .errors import OutOfBounds
from .intensity import (
    add_bias_field,
    add_ghosting,
    add_noise,
    add_spikes,
    blur,
    sample_bias_coefficients,
    sample_spike_positions,
    simulate_motion,
)
from .spatial import (
    AffineParams,
    AnisotropyParams,
    ElasticParams,
    affine_resample,
    anisotropy_resample,
    elastic_resample,
)

POLICY_TAGS = ("DA1", "DA2", "DA3", "DA4")
DEFAULT_PROBABILITIES = (0.2, 0.25, 0.25, 0.3)
SPATIAL = ("affine", "elastic", "anisotropy")
INTENSITY = ("ghost", "spike", "bias", "noise", "motion", "blur")

PEAK_FRACTION = 0.5
LOST_CUTOFF = 0.05
_FAUX_CHUNK = 16


class _Lost:
    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "LOST"

    def __bool__(self):
        return False


LOST = _Lost()


@dataclass(frozen=True)
class AugPolicy:
    tag: str
    probability: float


@dataclass
class AugmentConfig:
    """Sampling ranges for every transform. These are desk-scale defaults."""

    probabilities: tuple[float, float, float, float] = DEFAULT_PROBABILITIES
    rotation_deg: float = 10.0
    translation: float = 2.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    elastic_grid: tuple[int, int, int] = (5, 5, 5)
    elastic_max_displacement: float = 2.0
    anisotropy_range: tuple[float, float] = (1.5, 3.0)
    ghost_num_range: tuple[int, int] = (2, 4)
    ghost_intensity_range: tuple[float, float] = (0.2, 0.6)
    spike_count: int = 1
    spike_amplitude_range: tuple[float, float] = (0.02, 0.08)
    bias_order: int = 3
    bias_magnitude: float = 0.3
    noise_sigma_range: tuple[float, float] = (0.01, 0.05)
    motion_movements: int = 2
    motion_rotation_deg: float = 3.0
    motion_translation: float = 1.5
    motion_weight_range: tuple[float, float] = (0.1, 0.4)
    blur_std_range: tuple[float, float] = (0.25, 1.0)

    def __post_init__(self):
        check_probabilities(self.probabilities)


def check_probabilities(probabilities) -> tuple[float, ...]:
    p = tuple(float(x) for x in probabilities)
    if len(p) != 4 or any(x < 0 for x in p) or abs(sum(p) - 1.0) > 1e-9:
        raise ValueError(f"policy probabilities must be 4 non-negative values summing to 1, got {p}")
    return p


def sample_policy(u: float, probabilities=DEFAULT_PROBABILITIES) -> AugPolicy:
    """Map u in [0, 1) to a policy through cumulative half-open intervals."""
    if not 0.0 <= u < 1.0:
        raise ValueError(f"u must lie in [0, 1), got {u}")
    p = check_probabilities(probabilities)
    acc = 0.0
    for tag, prob in zip(POLICY_TAGS[:-1], p[:-1]):
        acc += prob
        if u < acc:
            return AugPolicy(tag, prob)
    return AugPolicy(POLICY_TAGS[-1], p[-1])


@dataclass
class TransformSpec:
    name: str
    params: dict

    @property
    def spatial(self) -> bool:
        return self.name in SPATIAL


@dataclass
class TransformChain:
    steps: list[TransformSpec]
    policy: Optional[str] = None
    seed: Any = None

    @property
    def spatial_steps(self) -> list[TransformSpec]:
        return [s for s in self.steps if s.spatial]

    def names(self) -> list[str]:
        return [s.name for s in self.steps]

    def to_dict(self) -> dict:
        return {"policy": self.policy, "seed": self.seed, "steps": [asdict(s) for s in self.steps]}

    @classmethod
    def from_dict(cls, d: dict) -> "TransformChain":
        return cls([TransformSpec(s["name"], s["params"]) for s in d["steps"]], d.get("policy"), d.get("seed"))


# ------------------------------------------------------------ parameter draws


def _u(rng, lo_hi):
    lo, hi = lo_hi
    return float(rng.uniform(lo, hi))


def sample_affine(rng, cfg: AugmentConfig) -> AffineParams:
    return AffineParams(
        rotation=rng.uniform(-cfg.rotation_deg, cfg.rotation_deg, 3),
        translation=rng.uniform(-cfg.translation, cfg.translation, 3),
        scale=rng.uniform(cfg.scale_range[0], cfg.scale_range[1], 3),
    )


def sample_spatial(name: str, rng, cfg: AugmentConfig, dims) -> TransformSpec:
    if name == "affine":
        return TransformSpec("affine", sample_affine(rng, cfg).to_dict())
    if name == "elastic":
        e = ElasticParams.sample(cfg.elastic_grid, cfg.elastic_max_displacement, rng)
        return TransformSpec("elastic", e.to_dict())
    if name == "anisotropy":
        a = AnisotropyParams(int(rng.integers(0, 3)), _u(rng, cfg.anisotropy_range))
        return TransformSpec("anisotropy", a.to_dict())
    raise ValueError(f"unknown spatial transform {name!r}")


def sample_intensity(name: str, rng, cfg: AugmentConfig, dims) -> TransformSpec:
    if name == "ghost":
        lo, hi = cfg.ghost_num_range
        params = {
            "axis": int(rng.integers(0, 3)),
            "num_ghosts": int(rng.integers(lo, hi + 1)),
            "intensity": _u(rng, cfg.ghost_intensity_range),
        }
    elif name == "spike":
        pos = sample_spike_positions(dims, cfg.spike_count, rng)
        params = {"positions": [list(p) for p in pos], "amplitude": _u(rng, cfg.spike_amplitude_range)}
    elif name == "bias":
        coeffs = sample_bias_coefficients(cfg.bias_order, cfg.bias_magnitude, rng)
        params = {"order": cfg.bias_order, "coefficients": coeffs.tolist()}
    elif name == "noise":
        params = {
            "sigma": _u(rng, cfg.noise_sigma_range),
            "kind": "rician" if rng.random() < 0.5 else "gaussian",
            "seed": int(rng.integers(0, 2**63 - 1)),
        }
    elif name == "motion":
        moves = [
            AffineParams(
                rotation=rng.uniform(-cfg.motion_rotation_deg, cfg.motion_rotation_deg, 3),
                translation=rng.uniform(-cfg.motion_translation, cfg.motion_translation, 3),
            ).to_dict()
            for _ in range(cfg.motion_movements)
        ]
        total = _u(rng, cfg.motion_weight_range)
        split = rng.dirichlet(np.ones(cfg.motion_movements)) * total
        params = {"movements": moves, "weights": split.tolist()}
    elif name == "blur":
        params = {"stds": rng.uniform(cfg.blur_std_range[0], cfg.blur_std_range[1], 3).tolist()}
    else:
        raise ValueError(f"unknown intensity transform {name!r}")
    return TransformSpec(name, params)


def get_transform(policy: AugPolicy | str, rng, cfg: AugmentConfig | None = None, dims=(32, 32, 32)) -> TransformChain:
    """Expand a policy into a chain with sampled parameters.

    DA1: one spatial then one intensity transform. DA2: one intensity
    transform. DA3: one spatial transform. DA4: elastic deformation only.
    """
    cfg = cfg or AugmentConfig()
    tag = policy.tag if isinstance(policy, AugPolicy) else str(policy)
    steps = []
    if tag in ("DA1", "DA3"):
        steps.append(sample_spatial(SPATIAL[int(rng.integers(0, len(SPATIAL)))], rng, cfg, dims))
    if tag in ("DA1", "DA2"):
        steps.append(sample_intensity(INTENSITY[int(rng.integers(0, len(INTENSITY)))], rng, cfg, dims))
    if tag == "DA4":
        steps.append(sample_spatial("elastic", rng, cfg, dims))
    if tag not in POLICY_TAGS:
        raise ValueError(f"unknown policy {tag!r}")
    return TransformChain(steps, tag)


# ------------------------------------------------------------------ applying


def _affine(params) -> AffineParams:
    return AffineParams(**params)


def _spatial_array(step: TransformSpec, arr: np.ndarray) -> np.ndarray:
    p = step.params
    if step.name == "affine":
        return affine_resample(arr, _affine(p))
    if step.name == "elastic":
        return elastic_resample(arr, ElasticParams(**p))
    if step.name == "anisotropy":
        return anisotropy_resample(arr, AnisotropyParams(**p))
    raise ValueError(f"unknown spatial transform {step.name!r}")


def apply_step(step: TransformSpec, v: Volume3) -> Volume3:
    p = step.params
    if step.spatial:
        return v.with_data(_spatial_array(step, v.data))
    if step.name == "ghost":
        return add_ghosting(v, p["axis"], p["num_ghosts"], p["intensity"])
    if step.name == "spike":
        pos = [tuple(x) for x in p["positions"]]
        return add_spikes(v, len(pos), p["amplitude"], positions=pos)
    if step.name == "bias":
        return add_bias_field(v, p["order"], 0.0, coefficients=p["coefficients"])
    if step.name == "noise":
        return add_noise(v, p["sigma"], p["kind"], np.random.default_rng(p["seed"]))
    if step.name == "motion":
        return simulate_motion(v, [_affine(m) for m in p["movements"]], p["weights"])
    if step.name == "blur":
        return blur(v, p["stds"])
    raise ValueError(f"unknown transform {step.name!r}")


def apply_chain(v: Volume3, chain: TransformChain) -> Volume3:
    for step in chain.steps:
        v = apply_step(step, v)
    return v


def faux_index(p, dims) -> tuple[int, int, int]:
    if not in_bounds(p, dims):
        raise OutOfBounds(f"point {np.asarray(p).tolist()} outside dims {tuple(dims)}")
    # round half up per axis
    return tuple(int(np.floor(x + 0.5)) for x in p)


def create_faux_volume(p, dims, spacing=(1.0, 1.0, 1.0)) -> Volume3:
    data = np.zeros(tuple(dims), dtype=np.float32)
    data[faux_index(p, dims)] = 1.0
    return Volume3(data, spacing)


def extract_keypoint(fv):
    """Intensity-weighted centroid of voxels above half the peak, or LOST."""
    data = fv.data if isinstance(fv, Volume3) else np.asarray(fv)
    peak = float(data.max())
    if peak < LOST_CUTOFF:
        return LOST
    sel = np.nonzero(data > PEAK_FRACTION * peak)
    w = data[sel].astype(np.float64)
    coords = np.stack(sel, axis=1).astype(np.float64)
    return (w[:, None] * coords).sum(axis=0) / w.sum()


def transform_landmarks(lms: LandmarkSet, dims, spatial_steps: Sequence[TransformSpec]) -> LandmarkSet:
    if not spatial_steps:
        return lms
    pts = lms.points.copy()
    oob = list(lms.oob)
    live = [k for k in range(len(lms)) if not oob[k]]
    for start in range(0, len(live), _FAUX_CHUNK):
        chunk = live[start:start + _FAUX_CHUNK]
        stack = np.zeros((len(chunk),) + tuple(dims), dtype=np.float32)
        for row, k in enumerate(chunk):
            stack[(row,) + faux_index(pts[k], dims)] = 1.0
        for step in spatial_steps:
            stack = _spatial_array(step, stack)
        for row, k in enumerate(chunk):
            q = extract_keypoint(stack[row])
            if q is LOST:
                oob[k] = True
            else:
                pts[k] = q
    return lms.replace(points=pts, oob=tuple(oob))


def augment_pair(v: Volume3, lms: LandmarkSet, chain: TransformChain) -> tuple[Volume3, LandmarkSet]:
    out = apply_chain(v, chain)
    return out, transform_landmarks(lms, v.dims, chain.spatial_steps)


@dataclass
class AugmentedSample:
    volume: Volume3
    landmarks: LandmarkSet
    chain: TransformChain = field(repr=False)


def sample_rng(master_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(index)]))


def augment_one(sample, index: int, probabilities, master_seed: int, cfg: AugmentConfig) -> AugmentedSample:
    v, lms = sample
    rng = sample_rng(master_seed, index)
    policy = sample_policy(float(rng.random()), probabilities)
    chain = get_transform(policy, rng, cfg, v.dims)
    chain.seed = [int(master_seed), int(index)]
    out_v, out_l = augment_pair(v, lms, chain)
    return AugmentedSample(out_v, out_l, chain)


def augment_dataset(
    samples: Sequence[tuple[Volume3, LandmarkSet]],
    probabilities=DEFAULT_PROBABILITIES,
    master_seed: int = 0,
    cfg: AugmentConfig | None = None,
    workers: int = 1,
) -> list[AugmentedSample]:
    """One augmented pair per input; sample i uses an rng seeded by (master_seed, i)."""
    cfg = cfg or AugmentConfig()
    check_probabilities(probabilities)

    def job(i):
        return augment_one(samples[i], i, probabilities, master_seed, cfg)

    if workers <= 1:
        return [job(i) for i in range(len(samples))]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(job, range(len(samples))))


def write_chain(chain: TransformChain, path) -> None:
    with open(path, "w") as f:
        json.dump(chain.to_dict(), f, indent=1, sort_keys=True)
        f.write("\n")


def read_chain(path) -> TransformChain:
    with open(path) as f:
        return TransformChain.from_dict(json.load(f))


def list_pairs(directory) -> list[tuple[str, str, str]]:
    """(stem, volume path, landmark path) for every vol_XXXX.vlm with a matching lmk_XXXX.json."""
    out = []
    for name in sorted(os.listdir(directory)):
        if name.startswith("vol_") and name.endswith(".vlm"):
            stem = name[4:-4]
            lmk = os.path.join(directory, f"lmk_{stem}.json")
            if os.path.exists(lmk):
                out.append((stem, os.path.join(directory, name), lmk))
    return out

"""Synthetic multi-species video datasets and their on-disk layout.

Layout::

    <dir>/manifest.json
    <dir>/videos/<id>/frame_<t>.png

Bona fide videos are a smooth base pattern with per-video gain/offset
jitter and per-frame pixel noise. Each attack species applies one
localised perturbation (smoothing, noise injection or texture swap) on top
of the same bona fide process.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image

MANIFEST_VERSION = 1
BF = "bf"
KINDS = ("smoothing", "noise", "texture")
SPLITS = ("train", "dev", "test")


@dataclass
class SpeciesSpec:
    name: str
    kind: str
    region: list  # [row0, row1, col0, col1], half-open
    strength: float
    difficulty: float = 0.0

    def validate(self, h, w):
        if self.kind not in KINDS:
            raise ValueError(f"species {self.name!r}: unknown perturbation {self.kind!r}")
        r0, r1, c0, c1 = self.region
        if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
            raise ValueError(f"species {self.name!r}: region {self.region} outside {h}x{w} frame")
        if self.strength < 0:
            raise ValueError(f"species {self.name!r}: strength must be >= 0")


def default_species():
    return [
        SpeciesSpec("print", "noise", [2, 14, 2, 14], 1.5, 0.2),
        SpeciesSpec("replay", "noise", [0, 6, 2, 14], 2.5, 0.2),
        SpeciesSpec("mask", "texture", [6, 14, 3, 13], 0.8, 0.2),
        SpeciesSpec("makeup", "texture", [9, 15, 0, 16], 0.6, 0.3),
        SpeciesSpec("glasses", "texture", [3, 7, 1, 15], 0.9, 0.3),
    ]


@dataclass
class SynthConfig:
    height: int = 16
    width: int = 16
    frames: int = 8
    n_bf: int = 40
    n_per_species: int = 20
    species: list = field(default_factory=default_species)
    noise: float = 6.0
    seed: int = 0
    split_ratio: tuple = (0.8, 0.1, 0.1)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "species" in d:
            d["species"] = [s if isinstance(s, SpeciesSpec) else SpeciesSpec(**s)
                            for s in d["species"]]
        if "split_ratio" in d:
            d["split_ratio"] = tuple(d["split_ratio"])
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def to_dict(self):
        d = asdict(self)
        d["split_ratio"] = list(self.split_ratio)
        return d


def base_pattern(h, w, seed):
    """Smooth, left-right symmetric, face-like RGB intensity field."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    field_ = np.full((h, w, 3), 110.0) + np.array([25.0, 0.0, -20.0])
    for _ in range(6):
        cy, cx = rng.uniform(0.1, 0.9, 2)
        sig = rng.uniform(0.12, 0.3)
        amp = rng.uniform(-45, 45, 3)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig ** 2))
        field_ += blob[..., None] * amp
    return 0.5 * (field_ + field_[:, ::-1])


def _box_blur(x, r0, r1, c0, c1):
    pad = np.pad(x, ((1, 1), (1, 1), (0, 0)), mode="edge")
    acc = sum(pad[1 + di:1 + di + x.shape[0], 1 + dj:1 + dj + x.shape[1]]
              for di in (-1, 0, 1) for dj in (-1, 0, 1)) / 9.0
    out = x.copy()
    out[r0:r1, c0:c1] = acc[r0:r1, c0:c1]
    return out


def _texture(h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    stripes = 60.0 * np.sign(np.sin((xx + yy) * 1.3))
    return np.stack([stripes, -stripes, 0.5 * stripes], axis=-1)


def perturb(frame, spec, rng):
    """Apply one species' perturbation to a float frame."""
    r0, r1, c0, c1 = spec.region
    out = frame.copy()
    if spec.kind == "smoothing":
        alpha = min(spec.strength, 1.0)
        blurred = _box_blur(frame, r0, r1, c0, c1)
        out[r0:r1, c0:c1] = (1 - alpha) * frame[r0:r1, c0:c1] + alpha * blurred[r0:r1, c0:c1]
    elif spec.kind == "noise":
        out[r0:r1, c0:c1] += spec.strength * 10.0 * rng.normal(size=out[r0:r1, c0:c1].shape)
    else:
        alpha = min(spec.strength, 1.0)
        tex = _texture(*frame.shape[:2])
        out[r0:r1, c0:c1] = (1 - alpha) * frame[r0:r1, c0:c1] + alpha * (
            frame[r0:r1, c0:c1].mean() + tex[r0:r1, c0:c1])
    return out


def _video(base, cfg, rng, spec=None):
    gain = rng.uniform(0.9, 1.1)
    offset = rng.normal(0.0, 6.0, 3)
    frames = []
    for _ in range(cfg.frames):
        f = base * gain + offset + rng.normal(0.0, cfg.noise, base.shape)
        if spec is not None:
            f = perturb(f, spec, rng)
        frames.append(np.clip(np.rint(f), 0, 255).astype(np.uint8))
    return np.stack(frames)


def _bf_splits(n, ratio, rng):
    n_dev = max(1, int(round(n * ratio[1])))
    n_test = max(1, int(round(n * ratio[2])))
    n_train = n - n_dev - n_test
    if n_train < 2:
        raise ValueError("too few bona fide videos for train/dev/test splits")
    labels = np.array(["train"] * n_train + ["dev"] * n_dev + ["test"] * n_test)
    return labels[rng.permutation(n)]


def generate_arrays(cfg):
    """In-memory dataset: list of ``(record, frames)`` pairs."""
    if cfg.n_bf < 4 or cfg.n_per_species < 1:
        raise ValueError("counts must be >= 1 (and bona fide >= 4 for splits)")
    if cfg.height < 4 or cfg.width < 4:
        raise ValueError("frames must be at least 4x4")
    names = [s.name for s in cfg.species]
    if len(set(names)) != len(names) or BF in names:
        raise ValueError("species names must be unique and not 'bf'")
    for s in cfg.species:
        s.validate(cfg.height, cfg.width)
    root = np.random.SeedSequence(cfg.seed)
    pattern_seed, split_seed, *video_seeds = root.spawn(2 + cfg.n_bf
                                                        + cfg.n_per_species * len(cfg.species))
    base = base_pattern(cfg.height, cfg.width, pattern_seed)
    splits = _bf_splits(cfg.n_bf, cfg.split_ratio, np.random.default_rng(split_seed))
    out = []
    seeds = iter(video_seeds)
    for i in range(cfg.n_bf):
        rec = {"id": f"bf_{i:04d}", "species": BF, "split": str(splits[i])}
        out.append((rec, _video(base, cfg, np.random.default_rng(next(seeds)))))
    for spec in cfg.species:
        for i in range(cfg.n_per_species):
            rec = {"id": f"{spec.name}_{i:04d}", "species": spec.name, "split": "attack"}
            out.append((rec, _video(base, cfg, np.random.default_rng(next(seeds)), spec)))
    return out


def generate(cfg, out_dir):
    """Write a synthetic dataset to ``out_dir``; returns the manifest."""
    os.makedirs(os.path.join(out_dir, "videos"), exist_ok=True)
    records = []
    for rec, frames in generate_arrays(cfg):
        rel = os.path.join("videos", rec["id"])
        os.makedirs(os.path.join(out_dir, rel), exist_ok=True)
        for t, frame in enumerate(frames):
            Image.fromarray(frame, "RGB").save(os.path.join(out_dir, rel, f"frame_{t:03d}.png"))
        records.append(dict(rec, path=rel, frames=len(frames)))
    manifest = {
        "version": MANIFEST_VERSION, "height": cfg.height, "width": cfg.width,
        "frames": cfg.frames, "seed": cfg.seed,
        "species": [asdict(s) for s in cfg.species], "videos": records,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


class ManifestError(ValueError):
    pass


@dataclass
class Dataset:
    root: str
    manifest: dict
    videos: dict  # id -> (T, H, W, 3) uint8

    @property
    def records(self):
        return self.manifest["videos"]

    def ids(self, species=None, split=None):
        return [r["id"] for r in self.records
                if (species is None or r["species"] == species)
                and (split is None or r["split"] == split)]

    def species_names(self):
        return [s["name"] for s in self.manifest["species"]
                if any(r["species"] == s["name"] for r in self.records)]

    def record(self, vid):
        return self._index[vid]

    def __post_init__(self):
        self._index = {r["id"]: r for r in self.records}


def load(root):
    """Read and validate a dataset directory."""
    path = os.path.join(root, "manifest.json")
    if not os.path.exists(path):
        raise ManifestError(f"missing manifest: {path}")
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"malformed manifest {path}: {exc}") from exc
    for key in ("version", "height", "width", "videos", "species"):
        if key not in manifest:
            raise ManifestError(f"manifest {path} lacks {key!r}")
    ids = [r["id"] for r in manifest["videos"]]
    if len(set(ids)) != len(ids):
        raise ManifestError(f"manifest {path} has duplicate video ids")
    known = {s["name"] for s in manifest["species"]} | {BF}
    h, w = manifest["height"], manifest["width"]
    videos = {}
    for rec in manifest["videos"]:
        if rec["species"] not in known:
            raise ManifestError(f"video {rec['id']}: unknown species {rec['species']!r}")
        if rec["species"] == BF and rec["split"] not in SPLITS:
            raise ManifestError(f"video {rec['id']}: bona fide split must be one of {SPLITS}")
        vdir = os.path.join(root, rec["path"])
        files = sorted(f for f in os.listdir(vdir) if f.endswith(".png")) \
            if os.path.isdir(vdir) else []
        if not files:
            raise ManifestError(f"video {rec['id']}: no frames under {vdir}")
        frames = []
        for f in files:
            fp = os.path.join(vdir, f)
            try:
                arr = np.asarray(Image.open(fp).convert("RGB"))
            except OSError as exc:
                raise ManifestError(f"unreadable frame {fp}: {exc}") from exc
            if arr.shape[:2] != (h, w):
                raise ManifestError(f"frame {fp} is {arr.shape[:2]}, manifest says {(h, w)}")
            frames.append(arr)
        videos[rec["id"]] = np.stack(frames)
    return Dataset(root, manifest, videos)


def from_arrays(pairs, cfg):
    """Build an in-memory :class:`Dataset` from :func:`generate_arrays` output."""
    manifest = {
        "version": MANIFEST_VERSION, "height": cfg.height, "width": cfg.width,
        "frames": cfg.frames, "seed": cfg.seed,
        "species": [asdict(s) for s in cfg.species],
        "videos": [dict(rec, path=os.path.join("videos", rec["id"]), frames=len(v))
                   for rec, v in pairs],
    }
    return Dataset("<memory>", manifest, {rec["id"]: v for rec, v in pairs})


# augmentation -------------------------------------------------------------

@dataclass(frozen=True)
class AugmentPlan:
    start: int
    stop: int
    flip: bool


def augment_plan(n_frames, rng, min_fraction=0.5):
    """Random temporal segment ``[start, stop)`` and a horizontal-flip coin."""
    min_len = max(1, math.ceil(min_fraction * n_frames))
    length = int(rng.integers(min_len, n_frames + 1))
    start = int(rng.integers(0, n_frames - length + 1))
    return AugmentPlan(start, start + length, bool(rng.integers(2)))


def hflip(frames):
    return np.asarray(frames)[..., ::-1, :]


def apply_plan(video, plan):
    seg = np.asarray(video)[plan.start:plan.stop]
    return hflip(seg) if plan.flip else seg


def augment(video, seed):
    """A randomly segmented, possibly mirrored copy of a training video."""
    rng = np.random.default_rng(seed)
    plan = augment_plan(len(video), rng)
    return apply_plan(video, plan), plan

"""Synthetic moving-shape clips standing in for real action-recognition video.

Each class is a motion direction of a textured square on a torus.  Two
per-sample knobs control complexity: ``texture`` (object texture contrast and
static background clutter, raising spatial high-frequency energy) and
``speed`` (pixels per frame, raising temporal high-frequency energy).
Generation is a pure function of the spec and its seed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, UsageError
from .tensor import read_array, write_array

__all__ = ["SyntheticDatasetSpec", "Dataset", "render_clip", "generate_split", "write_dataset",
           "load_dataset", "DIRECTIONS"]

DATASET_VERSION = 1

# (dy, dx) unit motion per class: right, left, down, up, diagonal
DIRECTIONS = ((0.0, 1.0), (0.0, -1.0), (1.0, 0.0), (-1.0, 0.0), (0.7071, 0.7071))


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    classes: int = 5
    frames: int = 8
    height: int = 16
    width: int = 16
    channels: int = 1
    n_train: int = 250
    n_test: int = 150
    object_size: int = 5
    speed_range: tuple = (0.5, 2.0)
    clutter_density: float = 0.15
    seed: int = 1

    def __post_init__(self):
        if not 2 <= self.classes <= len(DIRECTIONS):
            raise ConfigurationError(f"classes must be in [2, {len(DIRECTIONS)}]")
        if self.n_train % self.classes or self.n_test % self.classes:
            raise ConfigurationError("split sizes must be multiples of the class count")
        if self.channels != 1:
            raise ConfigurationError("synthetic clips are single-channel")
        object.__setattr__(self, "speed_range", tuple(self.speed_range))


def render_clip(spec: SyntheticDatasetSpec, label: int, texture: float, speed: float, rng) -> np.ndarray:
    """One (T, 1, H, W) float32 clip; ``texture`` in [0, 1], ``speed`` in px/frame."""
    t, h, w, size = spec.frames, spec.height, spec.width, spec.object_size
    dy, dx = DIRECTIONS[label]
    y0, x0 = rng.uniform(0, h), rng.uniform(0, w)
    pattern = rng.random((size, size)) < 0.5
    obj = np.where(pattern, 1.0, 1.0 - texture)
    clutter = (rng.random((h, w)) < spec.clutter_density * texture) * 0.5
    ys, xs = np.arange(h)[:, None], np.arange(w)[None, :]
    clip = np.empty((t, 1, h, w), np.float32)
    for f in range(t):
        py = int(np.floor(y0 + dy * speed * f))
        px = int(np.floor(x0 + dx * speed * f))
        ry, rx = (ys - py) % h, (xs - px) % w
        inside = (ry < size) & (rx < size)
        clip[f, 0] = np.where(inside, obj[np.minimum(ry, size - 1), np.minimum(rx, size - 1)], clutter)
    return clip


def generate_split(spec: SyntheticDatasetSpec, split: str):
    """Return ``(clips, labels, knobs)``; knobs is (N, 2) of (texture, speed knob in [0, 1])."""
    sizes = {"train": spec.n_train, "test": spec.n_test}
    if split not in sizes:
        raise UsageError(f"unknown split {split!r}")
    n = sizes[split]
    ss = np.random.SeedSequence([spec.seed, 0 if split == "train" else 1])
    rng = np.random.default_rng(ss)
    labels = np.repeat(np.arange(spec.classes), n // spec.classes)
    rng.shuffle(labels)
    knobs = rng.random((n, 2))
    lo, hi = spec.speed_range
    clips = np.stack([
        render_clip(spec, int(labels[i]), knobs[i, 0], lo + (hi - lo) * knobs[i, 1], rng)
        for i in range(n)
    ])
    return clips, labels.astype(np.int64), knobs


@dataclass
class Dataset:
    spec: SyntheticDatasetSpec
    train_x: np.ndarray
    train_y: np.ndarray
    train_knobs: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    test_knobs: np.ndarray

    @classmethod
    def generate(cls, spec: SyntheticDatasetSpec) -> "Dataset":
        return cls(spec, *generate_split(spec, "train"), *generate_split(spec, "test"))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_dataset(spec: SyntheticDatasetSpec, out_dir) -> Path:
    """Write ``{train,test}.bin`` (ntchw f32 tensors) and ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"format_version": DATASET_VERSION, "spec": asdict(spec), "splits": {}}
    for split in ("train", "test"):
        clips, labels, knobs = generate_split(spec, split)
        fname = f"{split}.bin"
        write_array(out / fname, clips, layout="ntchw")
        manifest["splits"][split] = {
            "file": fname,
            "sha256": _sha256(out / fname),
            "labels": labels.tolist(),
            "knobs": np.round(knobs, 12).tolist(),
        }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    manifest_path = path / "manifest.json" if path.is_dir() else path
    if not manifest_path.exists():
        raise UsageError(f"no dataset manifest at {manifest_path}; run `gen-dataset` first")
    manifest = json.loads(manifest_path.read_text())
    spec = SyntheticDatasetSpec(**manifest["spec"])
    parts = []
    for split in ("train", "test"):
        entry = manifest["splits"][split]
        arr, _ = read_array(manifest_path.parent / entry["file"])
        parts += [arr, np.asarray(entry["labels"], dtype=np.int64), np.asarray(entry["knobs"])]
    return Dataset(spec, *parts)

"""MovingShapes: a synthetic action-recognition dataset.

Each clip shows one or two bright shapes on a dark background.  The class is
the motion they share: translation in one of four directions, rotation in
either sense, or zoom in/out.  The scene lives on a torus (positions wrap at
the frame border) and zoom scales wrap in log-space, so a single frame has
the same distribution for every class: uniform position, uniform angle,
log-uniform size.  Only motion separates the classes.

Clips are rendered deterministically from ``(seed, split, sample_id)`` and
stored as uint8 frames in tensor containers, with a CSV manifest::

    sample_id,label,file,entry
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import container, kvconfig

CLASSES = (
    "translate-left", "translate-right", "translate-up", "translate-down",
    "rotate-cw", "rotate-ccw", "zoom-in", "zoom-out",
)
# label remap under a horizontal flip
FLIP_LABEL = (1, 0, 2, 3, 5, 4, 6, 7)

PALETTES = {
    "default": ("bar", "tri", "ell", "tee"),
    "alt": ("chevron", "halfdisk", "plus"),
}
SPLITS = {"train": 0, "val": 1}
_SUPERSAMPLE = 2
_SHARD = 500


class DatasetConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MovingShapesConfig:
    num_classes: int = 8
    max_shapes: int = 2
    train_size: int = 800
    val_size: int = 4000
    size: int = 32
    frames: int = 48
    channels: int = 1
    seed: int = 0
    palette: str = "default"
    min_radius: float = 3.0
    max_radius: float = 7.0
    speed: tuple = (0.4, 0.8)        # px per raw frame
    spin: tuple = (3.0, 6.0)         # degrees per raw frame
    zoom_rate: tuple = (0.015, 0.025)  # fraction of the log-size range per raw frame
    brightness_jitter: float = 0.1
    pixel_noise: float = 0.01

    def validate(self) -> None:
        if not 1 <= self.num_classes <= len(CLASSES):
            raise DatasetConfigError(f"num_classes must be in 1..{len(CLASSES)}")
        if self.palette not in PALETTES:
            raise DatasetConfigError(f"unknown palette {self.palette!r}; choose from {sorted(PALETTES)}")
        if self.channels not in (1, 3):
            raise DatasetConfigError("channels must be 1 or 3")
        if self.frames < 4:
            raise DatasetConfigError(f"frames={self.frames} too few to show motion")
        if self.size < 4 * self.max_radius or self.size < 16:
            raise DatasetConfigError(
                f"size={self.size} too small for shapes of radius {self.max_radius}")
        travel = max(self.speed) * (self.frames - 1)
        if max(self.speed) >= self.size / 4 or travel < 1.0:
            raise DatasetConfigError(f"motion amplitude {max(self.speed)} px/frame does not fit size {self.size}")
        if not 0 < self.min_radius < self.max_radius:
            raise DatasetConfigError("need 0 < min_radius < max_radius")


def load_config(path: str | Path, **overrides) -> MovingShapesConfig:
    values = kvconfig.read_file(path)
    values.update({k: v for k, v in overrides.items()})
    return kvconfig.from_mapping(MovingShapesConfig, values)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _shape_mask(kind: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Inside-test in canonical coordinates (shape spans roughly [-1, 1])."""
    if kind == "bar":
        return (np.abs(u) <= 1.0) & (np.abs(v) <= 0.35)
    if kind == "tri":
        # equilateral triangle pointing along +u
        return (u >= -0.5) & (u <= 1.0 - np.abs(v) * math.sqrt(3)) & (np.abs(v) <= 0.87)
    if kind == "ell":
        return (((np.abs(u + 0.4) <= 0.3) & (np.abs(v) <= 1.0))
                | ((np.abs(v - 0.7) <= 0.3) & (u >= -0.7) & (u <= 0.9)))
    if kind == "tee":
        return (((np.abs(v) <= 0.28) & (u >= -0.9) & (u <= 0.8))
                | ((u >= 0.45) & (u <= 1.0) & (np.abs(v) <= 0.9)))
    if kind == "chevron":
        return (np.abs(u - 0.6 * np.abs(v)) <= 0.3) & (np.abs(v) <= 1.0)
    if kind == "halfdisk":
        return (u * u + v * v <= 1.0) & (u >= -0.1)
    if kind == "plus":
        return (((np.abs(u) <= 1.0) & (np.abs(v) <= 0.25))
                | ((np.abs(v) <= 0.6) & (np.abs(u + 0.3) <= 0.25)))
    raise KeyError(kind)


@dataclass
class _Shape:
    kind: str
    x: float
    y: float
    angle: float      # radians
    logsize: float    # position in [0, 1) on the log-radius range
    intensity: float


def _motion(label: int, rng: np.random.Generator, cfg: MovingShapesConfig) -> dict:
    name = CLASSES[label]
    if name.startswith("translate"):
        s = rng.uniform(*cfg.speed)
        d = {"left": (-s, 0.0), "right": (s, 0.0), "up": (0.0, -s), "down": (0.0, s)}[name.split("-")[1]]
        return {"vx": d[0], "vy": d[1], "w": 0.0, "z": 0.0}
    if name.startswith("rotate"):
        w = math.radians(rng.uniform(*cfg.spin))
        # image y grows downwards, so a positive angle step turns clockwise on screen
        return {"vx": 0.0, "vy": 0.0, "w": w if name == "rotate-cw" else -w, "z": 0.0}
    z = rng.uniform(*cfg.zoom_rate)
    return {"vx": 0.0, "vy": 0.0, "w": 0.0, "z": z if name == "zoom-in" else -z}


def render_clip(cfg: MovingShapesConfig, split: str, sample_id: int, label: int | None = None) -> tuple[np.ndarray, int]:
    """Render one clip ``[C, T, H, W]`` with values in [0, 1] and return ``(clip, label)``."""
    if label is None:
        label = sample_id % cfg.num_classes
    rng = np.random.default_rng([cfg.seed, SPLITS[split], sample_id])
    S, T = cfg.size, cfg.frames
    palette = PALETTES[cfg.palette]
    n_shapes = int(rng.integers(1, cfg.max_shapes + 1))
    background = rng.uniform(0.05, 0.3)
    shapes = [
        _Shape(kind=palette[int(rng.integers(len(palette)))],
               x=rng.uniform(0, S), y=rng.uniform(0, S),
               angle=rng.uniform(0, 2 * math.pi), logsize=rng.uniform(0, 1),
               intensity=background + rng.uniform(0.35, 0.65))
        for _ in range(n_shapes)
    ]
    motions = [_motion(label, rng, cfg) for _ in shapes]
    colour = rng.uniform(0.7, 1.0, size=cfg.channels) if cfg.channels == 3 else np.ones(1)
    gain = 1.0 + rng.uniform(-cfg.brightness_jitter, cfg.brightness_jitter)
    offset = rng.uniform(-cfg.brightness_jitter, cfg.brightness_jitter) * 0.5

    ss = _SUPERSAMPLE
    grid = (np.arange(S * ss) + 0.5) / ss
    gy, gx = np.meshgrid(grid, grid, indexing="ij")
    lo, hi = math.log(cfg.min_radius), math.log(cfg.max_radius)
    frames = np.empty((T, S, S), dtype=np.float64)
    for t in range(T):
        canvas = np.full((S * ss, S * ss), background)
        for sh, mo in zip(shapes, motions):
            cx = (sh.x + mo["vx"] * t) % S
            cy = (sh.y + mo["vy"] * t) % S
            ang = sh.angle + mo["w"] * t
            radius = math.exp(lo + ((sh.logsize + mo["z"] * t) % 1.0) * (hi - lo))
            dx = (gx - cx + S / 2) % S - S / 2
            dy = (gy - cy + S / 2) % S - S / 2
            c, s = math.cos(ang), math.sin(ang)
            u = (c * dx + s * dy) / radius
            v = (-s * dx + c * dy) / radius
            canvas[_shape_mask(sh.kind, u, v)] = sh.intensity
        frames[t] = canvas.reshape(S, ss, S, ss).mean(axis=(1, 3))
    frames = frames * gain + offset
    frames = frames + rng.normal(0.0, cfg.pixel_noise, size=frames.shape)
    clip = np.clip(colour[:, None, None, None] * frames[None], 0.0, 1.0)
    return clip.astype(np.float32), int(label)


# ---------------------------------------------------------------------------
# storage
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VideoSample:
    clip: np.ndarray          # [C, T, H, W] float32 in [0, 1]
    label: int
    sample_id: int
    corruption: str = "none"
    severity: int = 0


class ClipSet:
    """In-memory split: uint8 clips plus labels, indexed by position."""

    def __init__(self, clips: np.ndarray, labels: np.ndarray, sample_ids: np.ndarray, name: str = ""):
        if not (len(clips) == len(labels) == len(sample_ids)):
            raise ValueError("clips, labels and sample_ids differ in length")
        self.clips = clips
        self.labels = np.asarray(labels, dtype=np.int64)
        self.sample_ids = np.asarray(sample_ids, dtype=np.int64)
        self.name = name

    def __len__(self) -> int:
        return len(self.labels)

    def clip(self, i: int) -> np.ndarray:
        return container.as_unit_float(self.clips[i])

    def __getitem__(self, i: int) -> VideoSample:
        return VideoSample(self.clip(i), int(self.labels[i]), int(self.sample_ids[i]))

    def __iter__(self) -> Iterator[VideoSample]:
        for i in range(len(self)):
            yield self[i]

    def subset(self, idx) -> "ClipSet":
        idx = np.asarray(idx, dtype=np.int64)
        return ClipSet(self.clips[idx], self.labels[idx], self.sample_ids[idx], self.name)

    @property
    def clip_shape(self) -> tuple[int, ...]:
        return tuple(self.clips.shape[1:])

    @classmethod
    def from_config(cls, cfg: MovingShapesConfig, split: str, n: int | None = None) -> "ClipSet":
        """Render a split in memory without touching disk."""
        cfg.validate()
        n = (cfg.train_size if split == "train" else cfg.val_size) if n is None else n
        clips, labels = [], []
        for sid in range(n):
            c, lab = render_clip(cfg, split, sid)
            clips.append(container.to_uint8(c))
            labels.append(lab)
        return cls(np.stack(clips), np.array(labels), np.arange(n), split)


def generate_dataset(cfg: MovingShapesConfig, out_dir: str | Path) -> tuple[Path, Path]:
    """Render both splits to ``out_dir``; returns the two manifest paths."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "dataset.cfg").write_text(kvconfig.to_text(cfg), encoding="utf-8")
    manifests = []
    for split, n in (("train", cfg.train_size), ("val", cfg.val_size)):
        rows = []
        for shard_start in range(0, n, _SHARD):
            fname = f"{split}-{shard_start // _SHARD:03d}.vtt"
            entries = {}
            for sid in range(shard_start, min(n, shard_start + _SHARD)):
                clip, label = render_clip(cfg, split, sid)
                entry = f"clip{sid:06d}"
                entries[entry] = container.to_uint8(clip)
                rows.append((sid, label, fname, entry))
            container.save(out / fname, entries)
        manifest = out / f"{split}.csv"
        with open(manifest, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "label", "file", "entry"])
            w.writerows(rows)
        manifests.append(manifest)
    return manifests[0], manifests[1]


def load_split(data_dir: str | Path, split: str) -> ClipSet:
    data_dir = Path(data_dir)
    manifest = data_dir / f"{split}.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"missing manifest {manifest}")
    with open(manifest, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    cache: dict[str, dict[str, np.ndarray]] = {}
    clips, labels, ids = [], [], []
    for row in rows:
        f = row["file"]
        if f not in cache:
            cache[f] = container.load(data_dir / f)
        clips.append(cache[f][row["entry"]])
        labels.append(int(row["label"]))
        ids.append(int(row["sample_id"]))
    return ClipSet(np.stack(clips), np.array(labels), np.array(ids), split)


def dataset_config(data_dir: str | Path) -> MovingShapesConfig:
    return kvconfig.from_mapping(MovingShapesConfig, kvconfig.read_file(Path(data_dir) / "dataset.cfg"))


def with_overrides(cfg: MovingShapesConfig, **kw) -> MovingShapesConfig:
    return dataclasses.replace(cfg, **kw)

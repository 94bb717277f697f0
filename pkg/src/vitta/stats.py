"""Per-channel feature statistics: capture, storage and online EMA estimates."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import container
from . import tensor as tn
from .data import ClipSet
from .net import ArchitectureError, ToyVideoNet, batch_inputs, check_taps
from .tensor import Tensor

PROVENANCE = ("train-computed", "norm-stored", "foreign")


class StatsError(ValueError):
    pass


@dataclass(frozen=True)
class LayerStats:
    block: int
    mean: np.ndarray
    var: np.ndarray
    provenance: str = "train-computed"
    sample_count: int = 0
    # "tap" = statistics of the block tap; "norm-input" = raw norm running buffers
    space: str = "tap"

    def __post_init__(self):
        if self.provenance not in PROVENANCE:
            raise StatsError(f"unknown provenance {self.provenance!r}")
        if self.mean.shape != self.var.shape or self.mean.ndim != 1:
            raise StatsError(f"block {self.block}: mean {self.mean.shape} and var {self.var.shape} mismatch")
        if np.any(self.var < 0):
            raise StatsError(f"block {self.block}: negative variance")


def compute_stats(feature: Tensor) -> tuple[Tensor, Tensor]:
    """Per-channel mean and population variance over ``N, t, h, w`` (differentiable)."""
    return tn.channel_stats(feature)


class _Running:
    """Exact streaming mean / sum-of-squares merge (pairwise update, float64)."""

    def __init__(self, channels: int):
        self.n = 0
        self.mean = np.zeros(channels)
        self.m2 = np.zeros(channels)

    def add(self, x: np.ndarray) -> None:
        C = x.shape[1]
        vals = np.moveaxis(x, 1, 0).reshape(C, -1).astype(np.float64)
        nb = vals.shape[1]
        mb = vals.mean(axis=1)
        m2b = ((vals - mb[:, None]) ** 2).sum(axis=1)
        n = self.n + nb
        delta = mb - self.mean
        self.mean = self.mean + delta * (nb / n)
        self.m2 = self.m2 + m2b + delta ** 2 * (self.n * nb / n)
        self.n = n

    @property
    def var(self) -> np.ndarray:
        return self.m2 / self.n


def capture_train_stats(net: ToyVideoNet, train_set: ClipSet, taps: Iterable[int] = (3, 4),
                        batch: int = 16, provenance: str = "train-computed") -> list[LayerStats]:
    """One pass over ``train_set`` (centre views, frozen net) with exact whole-set moments."""
    taps = check_taps(taps)
    if not taps:
        raise StatsError("no taps requested")
    if len(train_set) == 0:
        raise StatsError("cannot capture statistics of an empty set")
    acc = {l: _Running(net.cfg.widths[l - 1]) for l in taps}
    for s in range(0, len(train_set), batch):
        x, _ = batch_inputs(train_set, range(s, min(len(train_set), s + batch)), net.cfg.frames)
        _, feats = net.forward(x, taps)
        for l in taps:
            acc[l].add(feats[l].data)
    return [LayerStats(l, acc[l].mean, acc[l].var, provenance, acc[l].n * 1) for l in taps]


def extract_norm_stats(net: ToyVideoNet, taps: Iterable[int] = (3, 4)) -> list[LayerStats]:
    """Copy the batch-norm running buffers of the tapped blocks."""
    taps = check_taps(taps)
    if net.cfg.norm != "batch":
        raise ArchitectureError(f"{net.cfg.arch} has no stored normalisation statistics")
    return [LayerStats(l,
                       net.buffers[f"block{l}.norm.running_mean"].astype(np.float64),
                       net.buffers[f"block{l}.norm.running_var"].astype(np.float64),
                       "norm-stored", 0, space="norm-input")
            for l in taps]


def to_tap_space(stats: LayerStats, net: ToyVideoNet) -> LayerStats:
    """Map norm-input statistics through the block's eval-mode affine normalisation.

    A norm input with mean ``m`` and variance ``v`` leaves an eval-mode norm
    layer with mean ``beta + gamma (m - rm) / s`` and variance ``gamma^2 v / s^2``,
    ``s^2 = rv + eps``.  For the stored buffers themselves that is ``beta`` and
    ``gamma^2 rv / (rv + eps)``.
    """
    if stats.space == "tap":
        return stats
    l = stats.block
    g = net.params[f"block{l}.norm.weight"].data.astype(np.float64)
    b = net.params[f"block{l}.norm.bias"].data.astype(np.float64)
    rm = net.buffers[f"block{l}.norm.running_mean"].astype(np.float64)
    s2 = net.buffers[f"block{l}.norm.running_var"].astype(np.float64) + net.cfg.eps
    mean = b + g * (stats.mean - rm) / np.sqrt(s2)
    var = g * g * stats.var / s2
    return LayerStats(l, mean, var, stats.provenance, stats.sample_count, space="tap")


# ---------------------------------------------------------------------------
# statistics files: container + JSON sidecar
# ---------------------------------------------------------------------------

def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_stats(path: str | Path, stats: Iterable[LayerStats], extra: Mapping | None = None) -> None:
    stats = list(stats)
    entries = {}
    meta = {"layers": [], **(dict(extra) if extra else {})}
    for s in stats:
        entries[f"block{s.block}.mean"] = s.mean.astype(np.float32)
        entries[f"block{s.block}.var"] = s.var.astype(np.float32)
        meta["layers"].append({"block": s.block, "provenance": s.provenance,
                               "sample_count": int(s.sample_count), "space": s.space})
    container.save(path, entries)
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_stats(path: str | Path, provenance: str | None = None) -> list[LayerStats]:
    """Load a statistics file; ``provenance`` overrides the recorded tag (e.g. ``foreign``)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"statistics file not found: {path}")
    entries = container.load(path)
    side = sidecar_path(path)
    meta = json.loads(side.read_text(encoding="utf-8")) if side.exists() else None
    blocks = sorted({int(k.split(".")[0][5:]) for k in entries})
    layers = {d["block"]: d for d in meta["layers"]} if meta else {}
    out = []
    for l in blocks:
        info = layers.get(l, {})
        out.append(LayerStats(l, entries[f"block{l}.mean"].astype(np.float64),
                              entries[f"block{l}.var"].astype(np.float64),
                              provenance or info.get("provenance", "train-computed"),
                              int(info.get("sample_count", 0)), info.get("space", "tap")))
    return out


# ---------------------------------------------------------------------------
# online estimates
# ---------------------------------------------------------------------------

@dataclass
class EmaEstimator:
    """Exponential moving averages ``s_i = alpha x_i + (1 - alpha) s_{i-1}`` per layer.

    History is kept in float64 and enters the returned estimate as a constant,
    so gradients reach only the current sample's term.
    """

    alpha: float
    mean: dict[int, np.ndarray] = field(default_factory=dict)
    var: dict[int, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise StatsError(f"EMA alpha must lie in (0, 1], got {self.alpha}")

    @classmethod
    def from_stats(cls, alpha: float, init: Iterable[LayerStats]) -> "EmaEstimator":
        est = cls(alpha)
        for s in init:
            est.mean[s.block] = np.array(s.mean, dtype=np.float64)
            est.var[s.block] = np.array(s.var, dtype=np.float64)
        return est

    @property
    def blocks(self) -> tuple[int, ...]:
        return tuple(sorted(self.mean))

    def update(self, sample: Mapping[int, tuple]) -> dict[int, tuple[Tensor, Tensor]]:
        """Fold in one sample's ``{block: (mean, var)}``; return the new estimates as tensors."""
        if tuple(sorted(sample)) != self.blocks:
            raise StatsError(f"layer mismatch: estimator has {self.blocks}, sample has {tuple(sorted(sample))}")
        a = self.alpha
        out = {}
        for l, (m, v) in sample.items():
            pair = []
            for cur, store in ((m, self.mean), (v, self.var)):
                cur_t = cur if isinstance(cur, Tensor) else Tensor(cur)
                cur64 = np.asarray(cur.data if isinstance(cur, Tensor) else cur, dtype=np.float64)
                if cur64.shape != store[l].shape:
                    raise StatsError(f"block {l}: sample has {cur64.shape[0]} channels, estimator {store[l].shape[0]}")
                hist = store[l]
                if a == 1.0:
                    est = cur_t
                else:
                    est = tn.add(tn.scale(cur_t, a), Tensor((1.0 - a) * hist))
                store[l] = a * cur64 + (1.0 - a) * hist
                pair.append(est)
            out[l] = (pair[0], pair[1])
        self.step += 1
        return out

    def copy(self) -> "EmaEstimator":
        return EmaEstimator(self.alpha, {l: m.copy() for l, m in self.mean.items()},
                            {l: v.copy() for l, v in self.var.items()}, self.step)

    def snapshot(self) -> list[LayerStats]:
        return [LayerStats(l, self.mean[l].copy(), self.var[l].copy(), "train-computed", self.step)
                for l in self.blocks]

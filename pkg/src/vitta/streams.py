"""Ordered test streams built from a clean split plus on-the-fly corruption."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .corruptions import ALL_KINDS, KINDS, CorruptionSpec, corrupt
from .data import ClipSet, VideoSample

PROTOCOLS = ("single", "random13", "onoff", "ordered-by-class")


class StreamError(ValueError):
    pass


@dataclass(frozen=True)
class StreamSpec:
    protocol: str = "single"
    kind: str = "none"
    severity: int = 5
    period: int = 500
    seed: int = 0
    limit: int = 0  # 0 = whole split

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise StreamError(f"unknown stream protocol {self.protocol!r}; choose from {PROTOCOLS}")
        if self.kind not in ALL_KINDS:
            raise StreamError(f"unknown corruption kind {self.kind!r}")
        if self.period < 1:
            raise StreamError("period must be positive")


class Stream:
    """A fixed plan of ``(split position, corruption kind)`` pairs, corrupted lazily."""

    def __init__(self, clips: ClipSet, order: Sequence[int], kinds: Sequence[str], severity: int, seed: int):
        if len(order) != len(kinds):
            raise StreamError("order and kinds differ in length")
        self.clips = clips
        self.order = np.asarray(order, dtype=np.int64)
        self.kinds = list(kinds)
        self.severity = severity
        self.seed = seed

    def __len__(self) -> int:
        return len(self.order)

    def sample(self, i: int) -> VideoSample:
        pos = int(self.order[i])
        kind = self.kinds[i]
        sid = int(self.clips.sample_ids[pos])
        spec = CorruptionSpec(kind, self.severity, self.seed)
        clip = corrupt(self.clips.clip(pos), spec, sid)
        return VideoSample(clip, int(self.clips.labels[pos]), sid, kind, 0 if kind == "none" else self.severity)

    def __iter__(self) -> Iterator[VideoSample]:
        for i in range(len(self)):
            yield self.sample(i)

    def counts(self) -> dict[str, int]:
        out = {k: 0 for k in ALL_KINDS}
        for k in self.kinds:
            out[k] += 1
        return out


def onoff_active(i: int, period: int) -> bool:
    """Whether sample ``i`` of an on/off stream is corrupted (the stream starts 'on')."""
    return (i // period) % 2 == 0


def build(clips: ClipSet, spec: StreamSpec) -> Stream:
    rng = np.random.default_rng([spec.seed, PROTOCOLS.index(spec.protocol)])
    n = len(clips)
    order = rng.permutation(n)
    if spec.limit:
        order = order[: spec.limit]
    n = len(order)
    if spec.protocol == "single":
        kinds = [spec.kind] * n
    elif spec.protocol == "random13":
        draws = rng.integers(0, len(ALL_KINDS), size=n)
        kinds = [ALL_KINDS[d] for d in draws]
    elif spec.protocol == "onoff":
        kinds = [spec.kind if onoff_active(i, spec.period) else "none" for i in range(n)]
    else:  # ordered-by-class: videos of one class arrive together
        order = order[np.argsort(clips.labels[order], kind="stable")]
        kinds = [spec.kind] * n
    return Stream(clips, order, kinds, spec.severity, spec.seed)


def single(clips: ClipSet, kind: str, severity: int = 5, seed: int = 0, limit: int = 0) -> Stream:
    return build(clips, StreamSpec("single", kind, severity, seed=seed, limit=limit))


def random13(clips: ClipSet, severity: int = 5, seed: int = 0, limit: int = 0) -> Stream:
    return build(clips, StreamSpec("random13", "none", severity, seed=seed, limit=limit))


def onoff(clips: ClipSet, kind: str, period: int = 500, severity: int = 5, seed: int = 0, limit: int = 0) -> Stream:
    return build(clips, StreamSpec("onoff", kind, severity, period, seed, limit))


def ordered_by_class(clips: ClipSet, kind: str, severity: int = 5, seed: int = 0, limit: int = 0) -> Stream:
    return build(clips, StreamSpec("ordered-by-class", kind, severity, seed=seed, limit=limit))


__all__ = ["KINDS", "ALL_KINDS", "PROTOCOLS", "Stream", "StreamSpec", "StreamError", "build",
           "single", "random13", "onoff", "ordered_by_class", "onoff_active"]

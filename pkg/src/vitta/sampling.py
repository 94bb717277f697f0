"""Temporal frame selection and spatial cropping for building network inputs."""

from __future__ import annotations

import numpy as np

STRATEGIES = ("uniform-equidistant", "uniform-random", "dense-equidistant", "dense-random", "total-random")
DENSE_STRIDE = 2
CROP_PAD = 4


class SamplingError(ValueError):
    pass


def frame_indices(strategy: str, t_raw: int, net_t: int, rng: np.random.Generator | None = None,
                  dense_stride: int = DENSE_STRIDE) -> np.ndarray:
    """Pick ``net_t`` increasing frame indices out of ``t_raw``.

    uniform-*: split the clip into ``net_t`` equal segments and take each
    segment's centre (ties go to the later frame) or a random frame in it.
    dense-*: a window of ``net_t * stride`` frames at a random start, read at
    a fixed stride or at a random offset inside each stride slot.
    total-random: ``net_t`` distinct frames anywhere, sorted.
    """
    if strategy not in STRATEGIES:
        raise SamplingError(f"unknown sampling strategy {strategy!r}; choose from {STRATEGIES}")
    if t_raw < net_t:
        raise SamplingError(f"clip has {t_raw} frames, network needs {net_t}")
    k = np.arange(net_t)
    if strategy == "uniform-equidistant":
        return ((2 * k + 1) * t_raw) // (2 * net_t)
    if rng is None:
        raise SamplingError(f"{strategy} sampling needs a random generator")
    if strategy == "uniform-random":
        lo = (k * t_raw) // net_t
        hi = ((k + 1) * t_raw) // net_t
        return lo + (rng.random(net_t) * (hi - lo)).astype(np.int64)
    if strategy == "total-random":
        return np.sort(rng.choice(t_raw, size=net_t, replace=False))
    stride = max(1, min(dense_stride, t_raw // net_t))
    start = int(rng.integers(0, t_raw - net_t * stride + 1))
    if strategy == "dense-equidistant":
        return start + k * stride
    return start + k * stride + rng.integers(0, stride, size=net_t)


def random_crop(clip: np.ndarray, rng: np.random.Generator, pad: int = CROP_PAD) -> np.ndarray:
    """Reflect-pad the spatial axes of ``[C, T, H, W]`` by ``pad`` and crop back to ``H x W``."""
    if pad == 0:
        return clip
    H, W = clip.shape[-2:]
    padded = np.pad(clip, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
    dy, dx = rng.integers(0, 2 * pad + 1, size=2)
    return padded[..., dy:dy + H, dx:dx + W]


def center_view(clip: np.ndarray, net_t: int) -> np.ndarray:
    """The deterministic single view used for plain inference and source training."""
    return clip[:, frame_indices("uniform-equidistant", clip.shape[1], net_t)]

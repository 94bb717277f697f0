"""Clip corruptions: noise, blur, digital and weather artefacts at five severities.

Every corruption is a pure function of ``(clip, kind, severity, seed,
sample_id)``.  Clips are ``[C, T, H, W]`` float arrays in [0, 1]; outputs are
clamped back into that range.  ``apply`` exposes the raw parameterised form so
boundary behaviour (zero noise, unit contrast, ...) can be exercised directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.fft import dctn, idctn

KINDS = (
    "gauss", "pepper", "salt", "shot", "zoom_blur", "impulse",
    "defocus_blur", "motion_blur", "jpeg_proxy", "contrast", "rain", "codec_proxy",
)
ALL_KINDS = KINDS + ("none",)

# severity 1..5 -> parameter
SEVERITY = {
    "gauss": (0.05, 0.08, 0.12, 0.18, 0.25),          # noise std
    "pepper": (0.02, 0.04, 0.08, 0.12, 0.18),         # pixel probability
    "salt": (0.02, 0.04, 0.08, 0.12, 0.18),
    "shot": (60.0, 25.0, 12.0, 5.0, 3.0),              # photons per unit intensity
    "zoom_blur": (1.06, 1.11, 1.16, 1.21, 1.26),      # largest rescale factor
    "impulse": (0.03, 0.06, 0.09, 0.17, 0.27),
    "defocus_blur": (1.0, 1.5, 2.0, 2.5, 3.0),        # disk radius, px
    "motion_blur": (3, 5, 7, 9, 11),                   # line length, px
    "jpeg_proxy": (25, 18, 15, 10, 7),                 # quality
    "contrast": (0.4, 0.3, 0.2, 0.1, 0.05),            # contrast factor
    "rain": (8, 14, 20, 28, 36),                       # streak count
    "codec_proxy": (0.04, 0.07, 0.10, 0.14, 0.20),     # residual quantiser step
}
# the parameter value at which each corruption is the identity
NULL_PARAM = {
    "gauss": 0.0, "pepper": 0.0, "salt": 0.0, "shot": math.inf, "zoom_blur": 1.0,
    "impulse": 0.0, "defocus_blur": 0.0, "motion_blur": 1, "jpeg_proxy": 100,
    "contrast": 1.0, "rain": 0, "codec_proxy": 0.0,
}

_JPEG_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


class CorruptionError(ValueError):
    pass


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str = "none"
    severity: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise CorruptionError(f"unknown corruption kind {self.kind!r}")
        if self.kind != "none" and not 1 <= self.severity <= 5:
            raise CorruptionError(f"severity must be in 1..5, got {self.severity}")

    @property
    def param(self):
        return None if self.kind == "none" else SEVERITY[self.kind][self.severity - 1]

    @property
    def tag(self) -> str:
        return "none" if self.kind == "none" else f"{self.kind}-{self.severity}"


def corruption_rng(spec: CorruptionSpec, sample_id: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, ALL_KINDS.index(spec.kind), spec.severity, sample_id])


def corrupt(clip: np.ndarray, spec: CorruptionSpec, sample_id: int) -> np.ndarray:
    """Corrupt ``clip`` according to ``spec``; deterministic in ``(spec, sample_id)``."""
    if spec.kind == "none":
        return clip
    return apply(clip, spec.kind, spec.param, corruption_rng(spec, sample_id))


def apply(clip: np.ndarray, kind: str, param, rng: np.random.Generator) -> np.ndarray:
    if kind not in _FUNCS:
        raise CorruptionError(f"unknown corruption kind {kind!r}")
    clip = np.asarray(clip)
    if clip.ndim != 4:
        raise CorruptionError(f"expected a [C, T, H, W] clip, got shape {clip.shape}")
    if param == NULL_PARAM[kind]:
        return clip
    out = _FUNCS[kind](clip.astype(np.float64), param, rng)
    return np.clip(out, 0.0, 1.0).astype(clip.dtype)


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------

def _gauss(x, sigma, rng):
    return x + rng.normal(0.0, sigma, size=x.shape)


def _pepper(x, p, rng):
    return np.where(rng.random(x.shape) < p, 0.0, x)


def _salt(x, p, rng):
    return np.where(rng.random(x.shape) < p, 1.0, x)


def _shot(x, s, rng):
    return rng.poisson(np.clip(x, 0.0, None) * s) / s


def _impulse(x, p, rng):
    u = rng.random(x.shape)
    out = np.where(u < p / 2, 0.0, x)
    return np.where((u >= p / 2) & (u < p), 1.0, out)


# ---------------------------------------------------------------------------
# blur
# ---------------------------------------------------------------------------

def _bilinear(frames, ys, xs):
    """Sample ``frames[..., H, W]`` at float coordinates with edge clamping."""
    H, W = frames.shape[-2:]
    ys = np.clip(ys, 0, H - 1)
    xs = np.clip(xs, 0, W - 1)
    y0 = np.minimum(np.floor(ys).astype(int), H - 2)
    x0 = np.minimum(np.floor(xs).astype(int), W - 2)
    wy = ys - y0
    wx = xs - x0
    f00 = frames[..., y0, x0]
    f01 = frames[..., y0, x0 + 1]
    f10 = frames[..., y0 + 1, x0]
    f11 = frames[..., y0 + 1, x0 + 1]
    return (f00 * (1 - wy) * (1 - wx) + f01 * (1 - wy) * wx
            + f10 * wy * (1 - wx) + f11 * wy * wx)


def _zoom_blur(x, zmax, rng, steps: int = 8):
    H, W = x.shape[-2:]
    cy, cx = (H - 1) / 2, (W - 1) / 2
    gy, gx = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    acc = np.zeros_like(x)
    for z in np.linspace(1.0, zmax, steps):
        acc += _bilinear(x, cy + (gy - cy) / z, cx + (gx - cx) / z)
    return acc / steps


def _disk(radius: float) -> np.ndarray:
    r = int(math.ceil(radius))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    # 4x supersampled coverage for a smooth rim
    sub = (np.arange(4) + 0.5) / 4 - 0.5
    cov = np.zeros(yy.shape)
    for dy in sub:
        for dx in sub:
            cov += (yy + dy) ** 2 + (xx + dx) ** 2 <= radius ** 2
    return cov / cov.sum()


def _defocus_blur(x, radius, rng):
    k = _disk(radius)
    return ndimage.convolve(x, k[None, None], mode="reflect")


def _line_kernel(length: int, angle: float) -> np.ndarray:
    r = length // 2
    k = np.zeros((2 * r + 1, 2 * r + 1))
    for s in np.linspace(-r, r, 4 * length):
        y, x = r + s * math.sin(angle), r + s * math.cos(angle)
        y0, x0 = int(math.floor(y)), int(math.floor(x))
        fy, fx = y - y0, x - x0
        for yy, wy in ((y0, 1 - fy), (y0 + 1, fy)):
            for xx, wx in ((x0, 1 - fx), (x0 + 1, fx)):
                if 0 <= yy <= 2 * r and 0 <= xx <= 2 * r:
                    k[yy, xx] += wy * wx
    return k / k.sum()


def _motion_blur(x, length, rng):
    out = np.empty_like(x)
    for t in range(x.shape[1]):
        k = _line_kernel(int(length), rng.uniform(0, math.pi))
        out[:, t] = ndimage.convolve(x[:, t], k[None], mode="reflect")
    return out


# ---------------------------------------------------------------------------
# digital
# ---------------------------------------------------------------------------

def _blocks(frames):
    """``[..., H, W]`` -> ``[..., H/8, W/8, 8, 8]`` (view-free reshape)."""
    *lead, H, W = frames.shape
    b = frames.reshape(*lead, H // 8, 8, W // 8, 8)
    return np.moveaxis(b, -3, -2)


def _unblocks(b):
    *lead, nh, nw, _, _ = b.shape
    return np.moveaxis(b, -2, -3).reshape(*lead, nh * 8, nw * 8)


def _pad8(x):
    H, W = x.shape[-2:]
    ph, pw = (-H) % 8, (-W) % 8
    if ph or pw:
        x = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)], mode="edge")
    return x, H, W


def _jpeg_table(quality: int) -> np.ndarray:
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.maximum(np.floor((_JPEG_LUMA * scale + 50.0) / 100.0), 1.0)


def _dct_quantise(frames, table):
    b = _blocks(frames)
    coef = dctn(b, axes=(-2, -1), norm="ortho")
    coef = np.round(coef / table) * table
    return _unblocks(idctn(coef, axes=(-2, -1), norm="ortho"))


def _jpeg_proxy(x, quality, rng):
    xp, H, W = _pad8(x)
    y = _dct_quantise(xp * 255.0 - 128.0, _jpeg_table(int(quality)))
    return ((y + 128.0) / 255.0)[..., :H, :W]


def _contrast(x, f, rng):
    mean = x.mean(axis=(0, 2, 3), keepdims=True)
    return (x - mean) * f + mean


def _codec_proxy(x, step, rng):
    """Closed-loop predictive coder: each frame is the previous reconstruction plus a
    block-DCT-quantised residual, so quantisation error drifts forward in time."""
    xp, H, W = _pad8(x)
    # coarser steps for higher frequencies
    freq = np.add.outer(np.arange(8), np.arange(8))
    table = step * 8.0 * (1.0 + freq / 4.0)
    intra = _jpeg_table(int(round(40 - 150 * step)))
    recon = np.empty_like(xp)
    recon[:, 0] = (_dct_quantise(xp[:, 0] * 255.0 - 128.0, intra) + 128.0) / 255.0
    for t in range(1, xp.shape[1]):
        resid = xp[:, t] - recon[:, t - 1]
        recon[:, t] = np.clip(recon[:, t - 1] + _dct_quantise(resid, table), 0.0, 1.0)
    return recon[..., :H, :W]


# ---------------------------------------------------------------------------
# weather
# ---------------------------------------------------------------------------

def _rain(x, count, rng):
    C, T, H, W = x.shape
    count = int(count)
    slant = rng.uniform(-0.3, 0.3)
    ys0 = rng.uniform(0, H, count)
    xs0 = rng.uniform(0, W, count)
    lengths = rng.uniform(4, 8, count)
    speeds = rng.uniform(2.0, 3.5, count)
    alpha = 0.35 + 0.05 * count / 10
    out = x * (1 - 0.01 * count / 4)  # overcast dimming
    for t in range(T):
        layer = np.zeros((H, W))
        for k in range(count):
            y = ys0[k] + speeds[k] * t
            for s in np.arange(0.0, lengths[k], 0.5):
                yy = int((y + s) % H)
                xx = int((xs0[k] + slant * (y + s)) % W)
                layer[yy, xx] = 1.0
        out[:, t] = out[:, t] * (1 - alpha * layer) + alpha * layer * 0.9
    return out


_FUNCS = {
    "gauss": _gauss, "pepper": _pepper, "salt": _salt, "shot": _shot,
    "zoom_blur": _zoom_blur, "impulse": _impulse, "defocus_blur": _defocus_blur,
    "motion_blur": _motion_blur, "jpeg_proxy": _jpeg_proxy, "contrast": _contrast,
    "rain": _rain, "codec_proxy": _codec_proxy,
}


def write_pgm(path: str | Path, frame: np.ndarray) -> None:
    """Write a 2-D [0, 1] frame as a binary 8-bit PGM."""
    frame = np.asarray(frame)
    if frame.ndim != 2:
        raise ValueError(f"PGM needs a 2-D frame, got shape {frame.shape}")
    pix = np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = f"P5\n{pix.shape[1]} {pix.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pix.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    lines = raw.split(b"\n", 3)
    if len(lines) < 4 or lines[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in lines[1].split())
    return np.frombuffer(lines[3][: w * h], dtype=np.uint8).reshape(h, w)

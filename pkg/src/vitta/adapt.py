"""Online test-time adaptation: the multi-view statistic-alignment step and baselines.

Every adapter consumes one clip at a time through :meth:`Adapter.step`,
updates itself at most once, and returns the prediction for that clip.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as tn
from .data import VideoSample
from .net import ArchitectureError, SGD, ToyVideoNet, check_taps
from .sampling import STRATEGIES, center_view, frame_indices, random_crop
from .stats import EmaEstimator, LayerStats, StatsError, to_tap_space
from .tensor import Tensor

METHODS = ("vitta", "source", "norm", "dua", "tent")


class AdaptationDiverged(FloatingPointError):
    def __init__(self, sample_id: int, value: float):
        super().__init__(f"adaptation loss became {value} on sample {sample_id}")
        self.sample_id = sample_id


@dataclass(frozen=True)
class VittaConfig:
    alpha: float = 0.1
    lam: float = 0.1
    views: int = 2
    taps: tuple = (3, 4)
    lr: float = 1e-5
    momentum: float = 0.9
    strategy: str = "uniform-equidistant"
    crop_pad: int = 4
    stats: str = "train"
    # baselines
    tent_lr: float = 1e-4
    dua_momentum: float = 0.1
    dua_floor: float = 0.005
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        if self.views < 1:
            raise ValueError(f"need at least one view, got {self.views}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown sampling strategy {self.strategy!r}")
        if not self.taps:
            raise ValueError("at least one tap is required")
        check_taps(self.taps)
        if self.lr < 0 or self.tent_lr < 0:
            raise ValueError("learning rates must be non-negative")


# ---------------------------------------------------------------------------
# views and losses
# ---------------------------------------------------------------------------

@dataclass
class ViewSet:
    frames: list[np.ndarray]
    crops: list[tuple[int, int]]
    data: np.ndarray  # [M, C, net_T, H, W]


def sample_views(clip: np.ndarray, strategy: str, m: int, net_t: int, rng: np.random.Generator,
                 crop_pad: int = 4) -> ViewSet:
    """Draw ``m`` independently resampled, randomly cropped views of ``clip`` ``[C, T_raw, H, W]``."""
    if m < 1:
        raise ValueError("need at least one view")
    frames, crops, data = [], [], []
    H, W = clip.shape[-2:]
    for _ in range(m):
        idx = frame_indices(strategy, clip.shape[1], net_t, rng)
        v = clip[:, idx]
        if crop_pad:
            padded = np.pad(v, ((0, 0), (0, 0), (crop_pad, crop_pad), (crop_pad, crop_pad)), mode="reflect")
            dy, dx = (int(d) for d in rng.integers(0, 2 * crop_pad + 1, size=2))
            v = padded[..., dy:dy + H, dx:dx + W]
        else:
            dy = dx = 0
        frames.append(idx)
        crops.append((dy, dx))
        data.append(v)
    return ViewSet(frames, crops, np.ascontiguousarray(np.stack(data)))


def view_stats(net: ToyVideoNet, views: ViewSet | np.ndarray, taps: Iterable[int]):
    """Forward all views as one batch; return ``(probs [M, K], {block: (mean, var)})``.

    Statistics pool views and voxels into a single population.
    """
    x = views.data if isinstance(views, ViewSet) else views
    probs, feats = net.forward(x, taps)
    return probs, {l: tn.channel_stats(f) for l, f in feats.items()}


def alignment_loss(estimates: Mapping[int, tuple[Tensor, Tensor]], targets: Mapping[int, LayerStats]) -> Tensor:
    """``sum_l |mu_l - mu_hat_l|_1 + |var_l - var_hat_l|_1``."""
    if set(estimates) != set(targets):
        raise StatsError(f"layer mismatch: estimates {sorted(estimates)} vs targets {sorted(targets)}")
    total = None
    for l in sorted(estimates):
        m, v = estimates[l]
        t = targets[l]
        term = tn.add(tn.l1_loss(m, Tensor(t.mean)), tn.l1_loss(v, Tensor(t.var)))
        total = term if total is None else tn.add(total, term)
    return total


def consistency_loss(view_probs: Tensor) -> Tensor:
    """``sum_m |p_m - mean_m p_m|_1``; the mean is not detached."""
    if view_probs.ndim != 2 or view_probs.shape[0] == 0:
        raise tn.ShapeError(f"consistency_loss expects [M, K] with M >= 1, got {view_probs.shape}")
    pseudo = tn.mean(view_probs, axis=0, keepdims=True)
    return tn.sum(tn.abs(tn.sub(view_probs, pseudo)))


# ---------------------------------------------------------------------------
# adapters
# ---------------------------------------------------------------------------

@dataclass
class StepResult:
    prediction: int
    probs: np.ndarray
    l_align: float = float("nan")
    l_cons: float = float("nan")
    ms: float = 0.0


class Adapter:
    """Base class: frozen source model with centre-view inference."""

    method = "source"

    def __init__(self, net: ToyVideoNet, cfg: VittaConfig = VittaConfig()):
        cfg.validate()
        self.net = net.copy()
        self.cfg = cfg
        self.step_count = 0

    def _center(self, sample: VideoSample) -> np.ndarray:
        return center_view(sample.clip, self.net.cfg.frames)[None]

    def infer(self, sample: VideoSample) -> StepResult:
        """Prediction with the current parameters and no update."""
        t0 = time.perf_counter()
        probs, _ = self.net.forward(self._center(sample))
        p = probs.data[0]
        return StepResult(int(p.argmax()), p, ms=(time.perf_counter() - t0) * 1e3)

    def _adapt(self, sample: VideoSample) -> StepResult:
        return self.infer(sample)

    def step(self, sample: VideoSample) -> StepResult:
        t0 = time.perf_counter()
        res = self._adapt(sample)
        self.step_count += 1
        res.ms = (time.perf_counter() - t0) * 1e3
        return res


class SourceOnly(Adapter):
    method = "source"


class NormAdapter(Adapter):
    """Normalise with the test clip's own statistics; no stored state changes."""

    method = "norm"

    def __init__(self, net, cfg=VittaConfig()):
        if net.cfg.norm != "batch":
            raise ArchitectureError(f"norm baseline needs batch-norm layers; {net.cfg.arch} has none")
        super().__init__(net, cfg)

    def _adapt(self, sample):
        probs, _ = self.net.forward(self._center(sample), norm_mode="use_batch_stats")
        p = probs.data[0]
        return StepResult(int(p.argmax()), p)


class DuaAdapter(Adapter):
    """Fold each clip's statistics into the running norm buffers with a decaying momentum."""

    method = "dua"

    def __init__(self, net, cfg=VittaConfig()):
        if net.cfg.norm != "batch":
            raise ArchitectureError(f"dua baseline needs batch-norm layers; {net.cfg.arch} has none")
        super().__init__(net, cfg)
        self.rng = np.random.default_rng([cfg.seed, 2])

    def momentum_at(self, i: int) -> float:
        return max(self.cfg.dua_momentum * 0.5 ** i, self.cfg.dua_floor)

    def _adapt(self, sample):
        views = sample_views(sample.clip, self.cfg.strategy, self.cfg.views, self.net.cfg.frames,
                             self.rng, self.cfg.crop_pad)
        self.net.forward(views.data, norm_mode="train", momentum=self.momentum_at(self.step_count))
        return self.infer(sample)


class TentAdapter(Adapter):
    """One entropy-minimisation step on the norm affine parameters per clip."""

    method = "tent"

    def __init__(self, net, cfg=VittaConfig()):
        super().__init__(net, cfg)
        self.opt = SGD(self.net.norm_affine(), cfg.tent_lr, cfg.momentum)

    def _adapt(self, sample):
        with tn.Tape() as tape:
            probs, _ = self.net.forward(self._center(sample))
            loss = tn.entropy_loss(probs)
        value = loss.item()
        if not math.isfinite(value):
            raise AdaptationDiverged(sample.sample_id, value)
        self.net.zero_grad()
        try:
            tape.backward(loss)
        except tn.NonFiniteError:
            raise AdaptationDiverged(sample.sample_id, float("nan")) from None
        self.opt.step()
        p = probs.data[0]
        return StepResult(int(p.argmax()), p)


class VittaAdapter(Adapter):
    """Multi-view statistic alignment with EMA targets plus view consistency."""

    method = "vitta"

    def __init__(self, net: ToyVideoNet, targets: Sequence[LayerStats], cfg: VittaConfig = VittaConfig()):
        super().__init__(net, cfg)
        taps = check_taps(cfg.taps)
        tmap = {s.block: to_tap_space(s, net) for s in targets}
        missing = [l for l in taps if l not in tmap]
        if missing:
            raise StatsError(f"no target statistics for blocks {missing}")
        self.targets = {l: tmap[l] for l in taps}
        self.ema = EmaEstimator.from_stats(cfg.alpha, self.targets.values())
        self.opt = SGD(self.net.parameters(), cfg.lr, cfg.momentum)
        self.rng = np.random.default_rng([cfg.seed, 1])

    def losses(self, views: ViewSet | np.ndarray, ema: EmaEstimator | None = None):
        """Forward the views and build ``(total, l_align, l_cons, probs)`` on the active tape."""
        ema = self.ema if ema is None else ema
        probs, sample_stats = view_stats(self.net, views, self.cfg.taps)
        est = ema.update(sample_stats)
        l_align = alignment_loss(est, self.targets)
        l_cons = consistency_loss(probs)
        total = l_align if self.cfg.lam == 0 else tn.add(l_align, tn.scale(l_cons, self.cfg.lam))
        return total, l_align, l_cons, probs

    def _adapt(self, sample: VideoSample) -> StepResult:
        views = sample_views(sample.clip, self.cfg.strategy, self.cfg.views, self.net.cfg.frames,
                             self.rng, self.cfg.crop_pad)
        with tn.Tape() as tape:
            total, l_align, l_cons, probs = self.losses(views)
        value = total.item()
        if not math.isfinite(value):
            raise AdaptationDiverged(sample.sample_id, value)
        self.net.zero_grad()
        try:
            tape.backward(total)
        except tn.NonFiniteError:
            raise AdaptationDiverged(sample.sample_id, float("nan")) from None
        self.opt.step()
        p = probs.data.astype(np.float64).mean(axis=0)
        return StepResult(int(p.argmax()), p, l_align.item(), l_cons.item())


def make_adapter(method: str, net: ToyVideoNet, cfg: VittaConfig = VittaConfig(),
                 targets: Sequence[LayerStats] | None = None) -> Adapter:
    if method == "vitta":
        if targets is None:
            raise StatsError("vitta needs target statistics")
        return VittaAdapter(net, targets, cfg)
    table = {"source": SourceOnly, "norm": NormAdapter, "dua": DuaAdapter, "tent": TentAdapter}
    if method not in table:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    return table[method](net, cfg)

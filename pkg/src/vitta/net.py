"""A small 4-block 3-D convolutional video classifier with feature taps.

Each block is ``conv3d(3x3x3, pad 1) -> norm -> relu -> 2x2 spatial avg-pool``;
time is never pooled.  The tap of block ``l`` is the norm output (before the
ReLU), shape ``[N, c_l, T, h_l, w_l]``.
"""

from __future__ import annotations

import dataclasses
import io
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import container, kvconfig
from . import tensor as tn
from .data import FLIP_LABEL, ClipSet
from .sampling import center_view
from .tensor import Tensor

NUM_BLOCKS = 4
_CONFIG_ENTRY = "meta.config"


class ArchitectureError(ValueError):
    """The requested operation does not apply to this architecture."""


class CheckpointError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class NetConfig:
    arch: str = "bn-net"
    in_channels: int = 1
    frames: int = 16
    size: int = 32
    widths: tuple = (16, 32, 64, 64)
    num_classes: int = 8
    groups: int = 4
    eps: float = 1e-5
    bn_momentum: float = 0.1
    init_seed: int = 0

    @property
    def norm(self) -> str:
        return "group" if self.arch == "gn-net" else "batch"

    def validate(self) -> None:
        if self.arch not in ("bn-net", "gn-net"):
            raise ArchitectureError(f"unknown architecture {self.arch!r}; use bn-net or gn-net")
        if len(self.widths) != NUM_BLOCKS:
            raise ArchitectureError(f"need {NUM_BLOCKS} block widths, got {self.widths}")
        if self.norm == "group" and any(w % self.groups for w in self.widths):
            raise ArchitectureError(f"widths {self.widths} not divisible into {self.groups} groups")

    def block_dims(self) -> list[tuple[int, int, int, int]]:
        """``(c, t, h, w)`` of each block's tap."""
        dims, s = [], self.size
        for w in self.widths:
            dims.append((w, self.frames, s, s))
            if s > 1:
                s //= 2
        return dims


def check_taps(taps: Iterable[int]) -> tuple[int, ...]:
    taps = tuple(sorted(set(int(t) for t in taps)))
    for t in taps:
        if not 1 <= t <= NUM_BLOCKS:
            raise ValueError(f"tap index {t} outside 1..{NUM_BLOCKS}")
    return taps


class ToyVideoNet:
    def __init__(self, cfg: NetConfig = NetConfig()):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.init_seed)
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        c_in = cfg.in_channels
        for i, w in enumerate(cfg.widths, start=1):
            fan_in = c_in * 27
            self.params[f"block{i}.conv.weight"] = Tensor(
                rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(w, c_in, 3, 3, 3)), requires_grad=True)
            self.params[f"block{i}.conv.bias"] = Tensor(np.zeros(w), requires_grad=True)
            self.params[f"block{i}.norm.weight"] = Tensor(np.ones(w), requires_grad=True)
            self.params[f"block{i}.norm.bias"] = Tensor(np.zeros(w), requires_grad=True)
            if cfg.norm == "batch":
                self.buffers[f"block{i}.norm.running_mean"] = np.zeros(w, dtype=np.float32)
                self.buffers[f"block{i}.norm.running_var"] = np.ones(w, dtype=np.float32)
            c_in = w
        self.params["head.weight"] = Tensor(
            rng.normal(0.0, 1.0 / math.sqrt(c_in), size=(cfg.num_classes, c_in)), requires_grad=True)
        self.params["head.bias"] = Tensor(np.zeros(cfg.num_classes), requires_grad=True)

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def norm_affine(self) -> list[Tensor]:
        return [p for k, p in self.params.items() if ".norm." in k]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: p.data for k, p in self.params.items()}
        out.update(self.buffers)
        return out

    def copy(self) -> "ToyVideoNet":
        other = ToyVideoNet.__new__(ToyVideoNet)
        other.cfg = self.cfg
        other.params = {k: Tensor(p.data.copy(), requires_grad=True) for k, p in self.params.items()}
        other.buffers = {k: b.copy() for k, b in self.buffers.items()}
        return other

    # -- forward ------------------------------------------------------------

    def forward_logits(self, x, taps: Iterable[int] = (), norm_mode: str = "eval",
                       momentum: float | None = None):
        """Return ``(logits, {block: tap})`` for input ``[N, C, T, H, W]``.

        ``momentum`` overrides the running-buffer momentum in ``train`` mode.
        """
        taps = check_taps(taps)
        x = x if isinstance(x, Tensor) else Tensor(x)
        cfg = self.cfg
        want = (cfg.in_channels, cfg.frames, cfg.size, cfg.size)
        if x.ndim != 5 or tuple(x.shape[1:]) != want:
            raise tn.ShapeError(f"net expects input [N, {', '.join(map(str, want))}], got {x.shape}")
        captured: dict[int, Tensor] = {}
        h = x
        for i in range(1, NUM_BLOCKS + 1):
            p = self.params
            h = tn.conv3d(h, p[f"block{i}.conv.weight"], p[f"block{i}.conv.bias"], padding=1)
            if cfg.norm == "batch":
                h = tn.batch_norm(h, p[f"block{i}.norm.weight"], p[f"block{i}.norm.bias"],
                                  self.buffers[f"block{i}.norm.running_mean"],
                                  self.buffers[f"block{i}.norm.running_var"],
                                  mode=norm_mode, eps=cfg.eps,
                                  momentum=cfg.bn_momentum if momentum is None else momentum)
            else:
                h = tn.group_norm(h, cfg.groups, p[f"block{i}.norm.weight"], p[f"block{i}.norm.bias"], eps=cfg.eps)
            if i in taps:
                captured[i] = h
            h = tn.relu(h)
            if h.shape[-1] > 1:
                h = tn.spatial_avg_pool(h, 2)
        logits = tn.linear(tn.global_avg_pool(h), self.params["head.weight"], self.params["head.bias"])
        return logits, captured

    def forward(self, x, taps: Iterable[int] = (), norm_mode: str = "eval", momentum: float | None = None):
        """Return ``(class_probs, {block: tap})``."""
        logits, captured = self.forward_logits(x, taps, norm_mode, momentum)
        return tn.softmax(logits), captured

    __call__ = forward

    def predict_proba(self, x: np.ndarray, batch: int = 32, norm_mode: str = "eval") -> np.ndarray:
        out = []
        for s in range(0, len(x), batch):
            probs, _ = self.forward(x[s:s + batch], norm_mode=norm_mode)
            out.append(probs.data)
        return np.concatenate(out) if out else np.zeros((0, self.cfg.num_classes), np.float32)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def config_text(cfg: NetConfig) -> str:
    return kvconfig.to_text(cfg)


def save_checkpoint(net: ToyVideoNet, path: str | Path) -> None:
    entries = dict(net.state_dict())
    entries[_CONFIG_ENTRY] = np.frombuffer(config_text(net.cfg).encode("utf-8"), dtype=np.uint8)
    container.save(path, entries)


def load_checkpoint(path: str | Path) -> ToyVideoNet:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    entries = container.load(path)
    if _CONFIG_ENTRY not in entries:
        raise CheckpointError(f"{path}: no embedded network config")
    text = entries.pop(_CONFIG_ENTRY).tobytes().decode("utf-8")
    cfg = kvconfig.from_mapping(NetConfig, kvconfig.parse_text(text))
    net = ToyVideoNet(cfg)
    expected = net.state_dict()
    if set(entries) != set(expected):
        missing = sorted(set(expected) - set(entries))
        extra = sorted(set(entries) - set(expected))
        raise CheckpointError(f"{path}: entry mismatch (missing {missing}, unexpected {extra})")
    for k, v in entries.items():
        if v.dtype != np.float32 or v.shape != expected[k].shape:
            raise CheckpointError(f"{path}: {k} has {v.dtype}{v.shape}, expected float32{expected[k].shape}")
        if k in net.params:
            net.params[k] = Tensor(v.copy(), requires_grad=True)
        else:
            net.buffers[k] = v.copy()
    return net


# ---------------------------------------------------------------------------
# source training
# ---------------------------------------------------------------------------

class SGD:
    """SGD with heavy-ball momentum, no weight decay (torch-style buffer update)."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.buffers: list[np.ndarray | None] = [None] * len(self.params)

    def step(self) -> None:
        for j, p in enumerate(self.params):
            if p.grad is None:
                continue
            buf = self.buffers[j]
            buf = p.grad.copy() if buf is None else buf * np.float32(self.momentum) + p.grad
            self.buffers[j] = buf
            if self.lr:
                p.data = p.data - np.float32(self.lr) * buf

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 16
    seed: int = 0


@dataclass
class EpochLog:
    epoch: int
    loss: float
    train_acc: float
    val_acc: float | None
    seconds: float


def batch_inputs(clips: ClipSet, idx, net_t: int, flip: np.ndarray | None = None):
    xs, ys = [], []
    for j, i in enumerate(idx):
        v = center_view(clips.clip(int(i)), net_t)
        y = int(clips.labels[int(i)])
        if flip is not None and flip[j]:
            v = v[..., ::-1]
            y = FLIP_LABEL[y]
        xs.append(v)
        ys.append(y)
    return np.ascontiguousarray(np.stack(xs)), np.array(ys)


def evaluate(net: ToyVideoNet, clips: ClipSet, batch: int = 32) -> float:
    """Clean accuracy with the deterministic centre view."""
    correct = 0
    for s in range(0, len(clips), batch):
        idx = range(s, min(len(clips), s + batch))
        x, y = batch_inputs(clips, idx, net.cfg.frames)
        correct += int((net.predict_proba(x, batch).argmax(1) == y).sum())
    return correct / max(len(clips), 1)


def train_source(net: ToyVideoNet, train_set: ClipSet, cfg: TrainConfig = TrainConfig(),
                 val_set: ClipSet | None = None,
                 log: Callable[[EpochLog], None] | None = None) -> list[EpochLog]:
    """Cross-entropy training with random horizontal flips; deterministic in ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(net.parameters(), cfg.lr, cfg.momentum)
    mode = "train" if net.cfg.norm == "batch" else "eval"
    rows = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_set))
        tot_loss, correct = 0.0, 0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            flip = rng.random(len(idx)) < 0.5
            x, y = batch_inputs(train_set, idx, net.cfg.frames, flip)
            with tn.Tape() as tape:
                logits, _ = net.forward_logits(x, norm_mode=mode)
                loss = tn.cross_entropy(logits, y)
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(f"loss became {loss.item()} at epoch {epoch}, batch starting {s}; "
                                       f"try a smaller learning rate than {cfg.lr}")
            opt.zero_grad()
            try:
                tape.backward(loss)
            except tn.NonFiniteError as exc:
                raise TrainingDiverged(f"{exc} at epoch {epoch}, batch starting {s}; "
                                       f"try a smaller learning rate than {cfg.lr}") from None
            opt.step()
            tot_loss += loss.item() * len(idx)
            correct += int((logits.data.argmax(1) == y).sum())
        val_acc = evaluate(net, val_set) if val_set is not None else None
        row = EpochLog(epoch, tot_loss / len(order), correct / len(order), val_acc, time.perf_counter() - t0)
        rows.append(row)
        if log is not None:
            log(row)
    return rows


def log_csv(rows: Sequence[EpochLog]) -> str:
    buf = io.StringIO()
    buf.write("epoch,loss,train_acc,val_acc,seconds\n")
    for r in rows:
        va = "" if r.val_acc is None else f"{r.val_acc:.6f}"
        buf.write(f"{r.epoch},{r.loss:.6f},{r.train_acc:.6f},{va},{r.seconds:.3f}\n")
    return buf.getvalue()


def preset(arch: str, **kw) -> NetConfig:
    """The two shipped architectures, optionally resized (tests use tiny variants)."""
    return dataclasses.replace(NetConfig(arch=arch), **kw)

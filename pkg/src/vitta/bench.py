"""Evaluation protocols over corrupted streams, with self-describing run directories.

A run directory holds::

    config.txt    the full RunConfig as key=value (enough to replay the run)
    records.csv   one row per stream sample
    summary.csv   the protocol's table
    timing.csv    wall-clock per step (kept apart so records replay byte-for-byte)
    plot.svg      rolling accuracy (on/off and partial protocols)
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kvconfig, streams
from .adapt import VittaConfig, make_adapter
from .corruptions import KINDS
from .data import ClipSet, load_split
from .net import ToyVideoNet, load_checkpoint
from .stats import LayerStats, extract_norm_stats, load_stats
from .svg import line_plot

PROTOCOLS = ("single", "random13", "onoff", "time-correlated", "partial")
RECORD_HEADER = ["index", "sample_id", "corruption", "label", "prediction", "correct", "l_align", "l_cons"]


class MissingArtifact(FileNotFoundError):
    pass


@dataclass(frozen=True)
class RunConfig:
    protocol: str = "single"
    method: str = "vitta"
    data_dir: str = "data"
    checkpoint: str = "source.vtt"
    stats_path: str = "stats.vtt"
    foreign_stats: str = ""
    kinds: tuple = KINDS + ("none",)
    severity: int = 5
    limit: int = 0
    period: int = 500
    window: int = 75
    p: float = 1.0
    repeats: int = 3
    seed: int = 0
    # adaptation knobs
    alpha: float = 0.1
    lam: float = 0.1
    views: int = 2
    taps: tuple = (3, 4)
    lr: float = 1e-5
    momentum: float = 0.9
    strategy: str = "uniform-equidistant"
    crop_pad: int = 4
    stats: str = "train"
    tent_lr: float = 1e-4
    dua_momentum: float = 0.1
    dua_floor: float = 0.005

    def validate(self) -> None:
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}; choose from {PROTOCOLS}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")
        if self.repeats < 1 or self.window < 1:
            raise ValueError("repeats and window must be positive")
        self.vitta().validate()

    def vitta(self) -> VittaConfig:
        names = {f.name for f in dataclasses.fields(VittaConfig)}
        return VittaConfig(**{k: getattr(self, k) for k in names})

    def to_text(self) -> str:
        return kvconfig.to_text(self)

    @classmethod
    def from_text(cls, text: str, **overrides) -> "RunConfig":
        values = kvconfig.parse_text(text)
        values.update(overrides)
        return kvconfig.from_mapping(cls, values)


@dataclass
class StreamRecord:
    index: int
    sample_id: int
    corruption: str
    label: int
    prediction: int
    correct: bool
    l_align: float
    l_cons: float
    wall_clock_ms: float


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

@dataclass
class Artifacts:
    net: ToyVideoNet
    val: ClipSet
    train_stats: list[LayerStats] | None = None
    foreign_stats: list[LayerStats] | None = None

    def targets(self, source: str) -> list[LayerStats] | None:
        if source == "train":
            return self.train_stats
        if source == "norm":
            return extract_norm_stats(self.net, (1, 2, 3, 4))
        if source == "foreign" or source.startswith("foreign:"):
            if source.startswith("foreign:"):
                return load_stats(source.split(":", 1)[1], provenance="foreign")
            return self.foreign_stats
        raise ValueError(f"unknown statistics source {source!r}; use train, norm or foreign:PATH")


def load_artifacts(cfg: RunConfig) -> Artifacts:
    ck = Path(cfg.checkpoint)
    if not ck.exists():
        raise MissingArtifact(f"checkpoint not found: {ck}")
    if not (Path(cfg.data_dir) / "val.csv").exists():
        raise MissingArtifact(f"validation manifest not found: {Path(cfg.data_dir) / 'val.csv'}")
    net = load_checkpoint(ck)
    val = load_split(cfg.data_dir, "val")
    train_stats = None
    if cfg.method == "vitta" and cfg.stats == "train":
        if not Path(cfg.stats_path).exists():
            raise MissingArtifact(f"statistics file not found: {cfg.stats_path}")
        train_stats = load_stats(cfg.stats_path)
    foreign = load_stats(cfg.foreign_stats, provenance="foreign") if cfg.foreign_stats else None
    return Artifacts(net, val, train_stats, foreign)


# ---------------------------------------------------------------------------
# streaming core
# ---------------------------------------------------------------------------

def run_stream(arts: Artifacts, cfg: RunConfig, stream: streams.Stream,
               adapt_until: int | None = None) -> list[StreamRecord]:
    """Adapt-then-predict over ``stream``; samples from ``adapt_until`` on are only predicted."""
    vc = cfg.vitta()
    targets = arts.targets(cfg.stats) if cfg.method == "vitta" else None
    adapter = make_adapter(cfg.method, arts.net, vc, targets)
    stop = len(stream) if adapt_until is None else adapt_until
    out = []
    for i in range(len(stream)):
        s = stream.sample(i)
        res = adapter.step(s) if i < stop else adapter.infer(s)
        out.append(StreamRecord(i, s.sample_id, s.corruption, s.label, res.prediction,
                                res.prediction == s.label, res.l_align, res.l_cons, res.ms))
    return out


def accuracy(records: Sequence[StreamRecord]) -> float:
    if not records:
        return float("nan")
    return math.fsum(1.0 for r in records if r.correct) / len(records)


def accumulated_accuracy(records: Sequence[StreamRecord]) -> np.ndarray:
    c = np.array([r.correct for r in records], dtype=np.float64)
    return np.cumsum(c) / np.arange(1, len(c) + 1)


def rolling_accuracy(correct: Sequence[bool], window: int) -> np.ndarray:
    """Mean correctness over the trailing ``window`` samples (shorter at the start)."""
    c = np.asarray(correct, dtype=np.float64)
    cs = np.concatenate([[0.0], np.cumsum(c)])
    i = np.arange(1, len(c) + 1)
    lo = np.maximum(i - window, 0)
    return (cs[i] - cs[lo]) / (i - lo)


def _fmt(v: float) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def records_csv(records: Sequence[StreamRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_HEADER)
    for r in records:
        w.writerow([r.index, r.sample_id, r.corruption, r.label, r.prediction, int(r.correct),
                    _fmt(r.l_align), _fmt(r.l_cons)])
    return buf.getvalue()


def read_records(path: str | Path) -> list[StreamRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [StreamRecord(int(r["index"]), int(r["sample_id"]), r["corruption"], int(r["label"]),
                         int(r["prediction"]), r["correct"] == "1",
                         float(r["l_align"]) if r["l_align"] else float("nan"),
                         float(r["l_cons"]) if r["l_cons"] else float("nan"), 0.0) for r in rows]


def timing_csv(records: Sequence[StreamRecord]) -> str:
    lines = ["index,wall_clock_ms"] + [f"{r.index},{r.wall_clock_ms:.3f}" for r in records]
    return "\n".join(lines) + "\n"


def table_csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    protocol: str
    records: list[StreamRecord]
    header: list[str]
    rows: list[list]
    plot: str | None = None
    extra: dict = dataclasses.field(default_factory=dict)


def run_single_shift(arts: Artifacts, cfg: RunConfig) -> RunResult:
    """One independent stream per corruption kind; rows per kind plus the corruption mean."""
    records, rows, accs = [], [], {}
    for kind in cfg.kinds:
        st = streams.single(arts.val, kind, cfg.severity, cfg.seed, cfg.limit)
        rec = run_stream(arts, cfg, st)
        for r in rec:
            r.index = len(records)
            records.append(r)
        accs[kind] = accuracy(rec)
        rows.append([kind, accs[kind], len(rec)])
    corrupted = [accs[k] for k in cfg.kinds if k != "none"]
    if corrupted:
        rows.append(["mean", math.fsum(corrupted) / len(corrupted), len(corrupted)])
    return RunResult("single", records, ["corruption", "accuracy", "n"], rows, extra={"accuracy": accs})


def run_random_shift(arts: Artifacts, cfg: RunConfig) -> RunResult:
    """``repeats`` shuffled random13 streams, seeds ``seed, seed+1, ...``."""
    records, rows, accs = [], [], []
    for r in range(cfg.repeats):
        st = streams.random13(arts.val, cfg.severity, cfg.seed + r, cfg.limit)
        rec = run_stream(arts, cfg, st)
        for x in rec:
            x.index = len(records)
            records.append(x)
        accs.append(accuracy(rec))
        rows.append([f"repeat{r}", accs[-1], len(rec)])
    mean = math.fsum(accs) / len(accs)
    std = math.sqrt(math.fsum((a - mean) ** 2 for a in accs) / len(accs))
    rows.append(["mean", mean, len(accs)])
    rows.append(["std", std, len(accs)])
    return RunResult("random13", records, ["repeat", "accuracy", "n"], rows,
                     extra={"accuracies": accs, "mean": mean, "std": std})


def segments(n: int, period: int) -> list[tuple[int, int, bool]]:
    """``(start, stop, corrupted)`` for each on/off block of an ``n``-sample stream."""
    return [(s, min(n, s + period), streams.onoff_active(s, period)) for s in range(0, n, period)]


def recovery_samples(rolling: np.ndarray, start: int, stop: int, reference: float, tol: float = 0.02) -> int | None:
    """Samples after ``start`` until the rolling accuracy first reaches ``reference - tol``."""
    for j in range(stop - start):
        if rolling[start + j] >= reference - tol - 1e-12:
            return j
    return None


def source_clean_accuracy(arts: Artifacts, cfg: RunConfig, stream: streams.Stream) -> float:
    """Frozen-model accuracy on the clean versions of every clip in ``stream``."""
    clean = streams.Stream(arts.val, stream.order, ["none"] * len(stream), cfg.severity, cfg.seed)
    return accuracy(run_stream(arts, dataclasses.replace(cfg, method="source"), clean))


def run_onoff(arts: Artifacts, cfg: RunConfig, reference: float | None = None) -> RunResult:
    kind = next((k for k in cfg.kinds if k != "none"), "gauss")
    st = streams.onoff(arts.val, kind, cfg.period, cfg.severity, cfg.seed, cfg.limit)
    records = run_stream(arts, cfg, st)
    if reference is None:
        reference = source_clean_accuracy(arts, cfg, st)
    roll = rolling_accuracy([r.correct for r in records], cfg.window)
    rows = []
    for s, e, on in segments(len(records), cfg.period):
        acc = accuracy(records[s:e])
        rec = None if on or reference is None else recovery_samples(roll, s, e, reference)
        rows.append([s, e, "on" if on else "off", acc, "" if rec is None else rec])
    marks = [s for s, _, _ in segments(len(records), cfg.period)][1:]
    plot = line_plot({cfg.method: roll}, title=f"rolling-{cfg.window} accuracy, on/off {kind}",
                     vlines=marks, hline=reference)
    return RunResult("onoff", records, ["start", "stop", "state", "accuracy", "recovery"], rows, plot,
                     extra={"rolling": roll, "reference": reference})


def run_time_correlated(arts: Artifacts, cfg: RunConfig) -> RunResult:
    records, rows = [], []
    for kind in cfg.kinds:
        st = streams.ordered_by_class(arts.val, kind, cfg.severity, cfg.seed, cfg.limit)
        rec = run_stream(arts, cfg, st)
        for r in rec:
            r.index = len(records)
            records.append(r)
        rows.append([kind, accuracy(rec), len(rec)])
    return RunResult("time-correlated", records, ["corruption", "accuracy", "n"], rows)


def run_partial(arts: Artifacts, cfg: RunConfig, ps: Sequence[float] | None = None) -> RunResult:
    """Adapt on the first ``ceil(p N)`` samples of a single-shift stream, then only predict."""
    ps = (cfg.p,) if ps is None else tuple(ps)
    kind = next((k for k in cfg.kinds if k != "none"), "gauss")
    st = streams.single(arts.val, kind, cfg.severity, cfg.seed, cfg.limit)
    records, rows, curve = [], [], {}
    for p in ps:
        rec = run_stream(arts, cfg, st, adapt_until=math.ceil(p * len(st)))
        for r in rec:
            r.index = len(records)
            records.append(r)
        curve[p] = accuracy(rec)
        rows.append([p, curve[p], len(rec)])
    plot = line_plot({f"{cfg.method} {kind}": np.array([curve[p] for p in ps])}, xs=np.array(ps, float),
                     title="accuracy vs adapted fraction")
    return RunResult("partial", records, ["p", "accuracy", "n"], rows, plot, extra={"curve": curve})


def run_protocol(arts: Artifacts, cfg: RunConfig, reference: float | None = None) -> RunResult:
    cfg.validate()
    if cfg.protocol == "single":
        return run_single_shift(arts, cfg)
    if cfg.protocol == "random13":
        return run_random_shift(arts, cfg)
    if cfg.protocol == "onoff":
        return run_onoff(arts, cfg, reference)
    if cfg.protocol == "time-correlated":
        return run_time_correlated(arts, cfg)
    return run_partial(arts, cfg)


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

ABLATIONS = {
    "taps": [{"taps": (4,)}, {"taps": (3, 4)}, {"taps": (2, 3, 4)}, {"taps": (1, 2, 3, 4)}],
    "views": [{"views": m, "lam": lam} for m in range(1, 6) for lam in (0.1, 0.0)],
    "strategy": [{"strategy": s} for s in
                 ("uniform-equidistant", "uniform-random", "dense-equidistant", "dense-random", "total-random")],
    "momentum": [{"alpha": round(1 - m, 10)} for m in (0.99, 0.95, 0.9, 0.85, 0.8)],
    "stats": [{"stats": "train"}, {"stats": "norm"}, {"stats": "foreign"}],
}


def variant_label(change: dict) -> str:
    return " ".join(f"{k}={','.join(map(str, v)) if isinstance(v, tuple) else v}" for k, v in change.items())


def run_ablation(arts: Artifacts, cfg: RunConfig, axis: str,
                 variants: Sequence[dict] | None = None,
                 progress: Callable[[str], None] | None = None) -> RunResult:
    """Single-shift corruption mean for each variant along ``axis``; other knobs at ``cfg``."""
    if axis not in ABLATIONS:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATIONS)}")
    variants = ABLATIONS[axis] if variants is None else variants
    kinds = tuple(k for k in cfg.kinds if k != "none")
    rows, means = [], {}
    records = []
    for change in variants:
        vcfg = dataclasses.replace(cfg, kinds=kinds, method="vitta", **change)
        res = run_single_shift(arts, vcfg)
        label = variant_label(change)
        means[label] = res.rows[-1][1]
        rows.append([label, means[label]] + [res.extra["accuracy"][k] for k in kinds])
        for r in res.records:
            r.index = len(records)
            records.append(r)
        if progress:
            progress(f"{axis} {label}: {means[label]:.4f}")
    return RunResult(f"ablate-{axis}", records, ["variant", "mean"] + list(kinds), rows, extra={"means": means})


# ---------------------------------------------------------------------------
# run directories
# ---------------------------------------------------------------------------

def write_run(out_dir: str | Path, cfg: RunConfig, result: RunResult, overwrite: bool = False) -> Path:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise FileExistsError(f"{out} exists and is not empty; pass --overwrite to replace it")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    (out / "records.csv").write_text(records_csv(result.records), encoding="utf-8")
    (out / "summary.csv").write_text(table_csv(result.header, result.rows), encoding="utf-8")
    (out / "timing.csv").write_text(timing_csv(result.records), encoding="utf-8")
    if result.plot is not None:
        (out / "plot.svg").write_text(result.plot, encoding="utf-8")
    return out


def new_run_dir(root: str | Path, protocol: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(root) / f"{stamp}-{protocol}"
    path, k = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}-{k}")
        k += 1
    return path


def replay(run_dir: str | Path) -> RunResult:
    """Re-run a finished run from its embedded config."""
    cfg = RunConfig.from_text(Path(run_dir, "config.txt").read_text(encoding="utf-8"))
    arts = load_artifacts(cfg)
    return run_protocol(arts, cfg)

"""Command-line entry point.

Exit codes: 0 success, 1 domain error (missing files, bad values, refusals
to overwrite), 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path
from typing import Sequence

from . import __version__, bench, corruptions, data, kvconfig
from . import net as netmod
from . import stats as statsmod
from .adapt import METHODS
from .report import emit_report
from .sampling import STRATEGIES


class CliError(Exception):
    pass


def _taps(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"taps must be comma-separated block indices, got {text!r}") from None


def _refuse_clobber(path: Path, overwrite: bool) -> None:
    if path.exists() and not overwrite:
        if path.is_dir() and not any(path.iterdir()):
            return
        raise CliError(f"{path} already exists; pass --overwrite to replace it")


def _merge(cls, config_file: str | None, flags: dict, base=None):
    """Layer a key=value file and then explicit flags onto ``cls`` defaults."""
    values = kvconfig.read_file(config_file) if config_file else {}
    values.update({k: v for k, v in flags.items() if v is not None})
    return kvconfig.from_mapping(cls, values, base)


def _echo(title: str, text: str) -> None:
    print(f"# {title}")
    for line in text.rstrip("\n").splitlines():
        print(f"#   {line}")


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------

def cmd_generate_data(a) -> None:
    cfg = _merge(data.MovingShapesConfig, a.config, {
        "seed": a.seed, "train_size": a.train_size, "val_size": a.val_size,
        "palette": a.palette, "channels": a.channels})
    out = Path(a.out)
    _refuse_clobber(out, a.overwrite)
    _echo("dataset config", kvconfig.to_text(cfg))
    tr, va = data.generate_dataset(cfg, out)
    print(f"wrote {tr} and {va}")


def cmd_train_source(a) -> None:
    file_vals = kvconfig.read_file(a.config) if a.config else {}
    net_keys = {f.name for f in dataclasses.fields(netmod.NetConfig)}
    train_keys = {f.name for f in dataclasses.fields(netmod.TrainConfig)}
    for k in file_vals:
        if k.replace("-", "_") not in net_keys | train_keys:
            raise CliError(f"unknown config key {k!r}")
    ds = data.dataset_config(a.data)
    net_vals = {k: v for k, v in file_vals.items() if k.replace("-", "_") in net_keys}
    net_vals.update({k: v for k, v in {"arch": a.arch, "init_seed": a.seed}.items() if v is not None})
    net_vals.setdefault("num_classes", ds.num_classes)
    net_vals.setdefault("in_channels", ds.channels)
    ncfg = kvconfig.from_mapping(netmod.NetConfig, net_vals)
    tcfg = _merge(netmod.TrainConfig, None, {
        **{k: v for k, v in file_vals.items() if k.replace("-", "_") in train_keys},
        "epochs": a.epochs, "lr": a.lr, "batch_size": a.batch_size, "seed": a.seed})
    out = Path(a.out)
    _refuse_clobber(out, a.overwrite)
    _echo("network config", kvconfig.to_text(ncfg))
    _echo("training config", kvconfig.to_text(tcfg))
    train = data.load_split(a.data, "train")
    val = data.load_split(a.data, "val") if a.eval else None
    net = netmod.ToyVideoNet(ncfg)

    def log(row):
        va = "" if row.val_acc is None else f" val_acc={row.val_acc:.4f}"
        print(f"epoch {row.epoch} loss={row.loss:.4f} train_acc={row.train_acc:.4f}{va} ({row.seconds:.1f}s)",
              flush=True)

    rows = netmod.train_source(net, train, tcfg, val, log)
    out.parent.mkdir(parents=True, exist_ok=True)
    netmod.save_checkpoint(net, out)
    Path(str(out) + ".log.csv").write_text(netmod.log_csv(rows), encoding="utf-8")
    print(f"wrote {out}")


def cmd_capture_stats(a) -> None:
    net = netmod.load_checkpoint(a.checkpoint)
    taps = a.taps
    out = Path(a.out)
    _refuse_clobber(out, a.overwrite)
    if a.source == "norm":
        layers = statsmod.extract_norm_stats(net, taps)
    else:
        train = data.load_split(a.data, "train")
        layers = statsmod.capture_train_stats(net, train, taps)
    out.parent.mkdir(parents=True, exist_ok=True)
    statsmod.save_stats(out, layers, {"checkpoint": str(a.checkpoint), "data": str(a.data), "source": a.source})
    for s in layers:
        print(f"block {s.block}: {len(s.mean)} channels, provenance {s.provenance}, n={s.sample_count}")
    print(f"wrote {out}")


def _run_config(a, **fixed) -> bench.RunConfig:
    flags = {
        "method": getattr(a, "method", None), "data_dir": a.data, "checkpoint": a.checkpoint,
        "stats_path": a.stats_file, "severity": a.severity, "limit": a.limit, "seed": a.seed,
        "alpha": a.alpha, "lam": a.lam, "views": a.views, "taps": a.taps, "lr": a.lr,
        "strategy": a.strategy, "tent_lr": a.tent_lr,
    }
    if a.stats is not None:
        if a.stats.startswith("foreign:"):
            flags["stats"] = "foreign"
            flags["foreign_stats"] = a.stats.split(":", 1)[1]
        elif a.stats in ("train", "norm", "foreign"):
            flags["stats"] = a.stats
        else:
            raise CliError(f"--stats must be train, norm or foreign:PATH, got {a.stats!r}")
    flags.update(fixed)
    cfg = _merge(bench.RunConfig, getattr(a, "config", None), flags)
    cfg.validate()
    return cfg


def cmd_adapt(a) -> None:
    cfg = _run_config(a, protocol="single", kinds=(a.corruption,))
    out = Path(a.out)
    _refuse_clobber(out, a.overwrite)
    _echo("run config", cfg.to_text())
    arts = bench.load_artifacts(cfg)
    res = bench.run_single_shift(arts, cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(bench.records_csv(res.records), encoding="utf-8")
    Path(str(out) + ".config.txt").write_text(cfg.to_text(), encoding="utf-8")
    print(f"{cfg.method} on {a.corruption}-{cfg.severity}: accuracy {bench.accuracy(res.records):.4f} "
          f"over {len(res.records)} clips")
    print(f"wrote {out}")


def cmd_bench(a) -> None:
    if a.replay:
        run = Path(a.replay)
        cfg = bench.RunConfig.from_text((run / "config.txt").read_text(encoding="utf-8"))
    else:
        fixed = {"protocol": a.protocol}
        if a.kinds:
            fixed["kinds"] = tuple(k.strip() for k in a.kinds.split(","))
        for key in ("period", "window", "p", "repeats"):
            if getattr(a, key) is not None:
                fixed[key] = getattr(a, key)
        cfg = _run_config(a, **fixed)
    out = Path(a.out) if a.out else bench.new_run_dir(a.runs, cfg.protocol)
    _refuse_clobber(out, a.overwrite)
    _echo("run config", cfg.to_text())
    arts = bench.load_artifacts(cfg)
    res = bench.run_protocol(arts, cfg)
    bench.write_run(out, cfg, res, overwrite=a.overwrite)
    print(bench.table_csv(res.header, res.rows), end="")
    print(f"wrote {out}")


def cmd_ablate(a) -> None:
    cfg = _run_config(a, protocol="single")
    if a.foreign_stats:
        cfg = dataclasses.replace(cfg, foreign_stats=a.foreign_stats)
    axes = sorted(bench.ABLATIONS) if a.axis == "all" else [a.axis]
    _echo("run config", cfg.to_text())
    arts = bench.load_artifacts(dataclasses.replace(cfg, stats="train", method="vitta"))
    for axis in axes:
        out = Path(a.runs) / f"ablate-{axis}-seed{cfg.seed}"
        _refuse_clobber(out, a.overwrite)
        res = bench.run_ablation(arts, cfg, axis, progress=print)
        bench.write_run(out, cfg, res, overwrite=a.overwrite)
        print(f"wrote {out}")


def cmd_report(a) -> None:
    dirs = []
    for r in a.runs:
        p = Path(r)
        if (p / "summary.csv").exists():
            dirs.append(p)
        elif p.is_dir():
            dirs.extend(sorted(d for d in p.iterdir() if (d / "summary.csv").exists()))
        else:
            raise CliError(f"no run directory at {p}")
    md, svg = emit_report(dirs, a.out)
    print(f"wrote {md} and {svg}")


def cmd_preview_corruption(a) -> None:
    out = Path(a.out)
    _refuse_clobber(out, a.overwrite)
    if a.data:
        clips = data.load_split(a.data, "val")
        clip, sid = clips.clip(a.index), int(clips.sample_ids[a.index])
    else:
        clip, _ = data.render_clip(data.MovingShapesConfig(), "val", a.index)
        sid = a.index
    spec = corruptions.CorruptionSpec(a.kind, a.severity, a.seed)
    frame = corruptions.corrupt(clip, spec, sid)[:, a.frame].mean(axis=0)
    corruptions.write_pgm(out, frame)
    print(f"wrote {out} ({spec.tag}, clip {sid}, frame {a.frame})")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _adapt_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file; explicit flags win")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--checkpoint", help="source checkpoint")
    p.add_argument("--stats-file", help="training statistics file")
    p.add_argument("--stats", help="alignment targets: train, norm or foreign:PATH")
    p.add_argument("--severity", type=int)
    p.add_argument("--limit", type=int, help="use only this many clips per stream")
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--views", type=int)
    p.add_argument("--taps", type=_taps)
    p.add_argument("--lr", type=float)
    p.add_argument("--tent-lr", type=float)
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--overwrite", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vitta", description="Online video test-time adaptation toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="verb", metavar="VERB")
    sub.required = True

    p = sub.add_parser("generate-data", help="render the MovingShapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--train-size", type=int)
    p.add_argument("--val-size", type=int)
    p.add_argument("--palette", choices=sorted(data.PALETTES))
    p.add_argument("--channels", type=int, choices=(1, 3))
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(fn=cmd_generate_data)

    p = sub.add_parser("train-source", help="train the source model on clean clips")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--arch", choices=("bn-net", "gn-net"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--eval", action="store_true", help="report validation accuracy every epoch")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(fn=cmd_train_source)

    p = sub.add_parser("capture-stats", help="store per-block feature statistics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory (for --source train)")
    p.add_argument("--source", choices=("train", "norm"), default="train")
    p.add_argument("--taps", type=_taps, default=(3, 4))
    p.add_argument("--out", required=True)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(fn=cmd_capture_stats)

    p = sub.add_parser("adapt", help="run one method over one corrupted stream")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--corruption", choices=corruptions.ALL_KINDS, default="gauss")
    p.add_argument("--out", required=True)
    _adapt_flags(p)
    p.set_defaults(fn=cmd_adapt)

    p = sub.add_parser("bench", help="run an evaluation protocol into a run directory")
    p.add_argument("--protocol", choices=bench.PROTOCOLS, default="single")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--kinds", help="comma-separated corruption kinds")
    p.add_argument("--period", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--p", type=float)
    p.add_argument("--repeats", type=int)
    p.add_argument("--runs", default="runs", help="parent directory for new run directories")
    p.add_argument("--out", help="explicit run directory")
    p.add_argument("--replay", help="re-run the config embedded in this run directory")
    _adapt_flags(p)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("ablate", help="sweep one adaptation knob")
    p.add_argument("--axis", choices=sorted(bench.ABLATIONS) + ["all"], required=True)
    p.add_argument("--foreign-stats", help="statistics file captured on another dataset config")
    p.add_argument("--runs", default="runs")
    _adapt_flags(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("report", help="consolidate run directories into markdown + SVG")
    p.add_argument("runs", nargs="*", help="run directories or parents of run directories")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("preview-corruption", help="write one corrupted frame as PGM")
    p.add_argument("--kind", choices=corruptions.ALL_KINDS, required=True)
    p.add_argument("--severity", type=int, default=5)
    p.add_argument("--data", help="dataset directory (default: render a clip)")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(fn=cmd_preview_corruption)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.fn(args)
    except (CliError, FileNotFoundError, FileExistsError, ValueError, KeyError,
            netmod.ArchitectureError, ArithmeticError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"vitta {args.verb}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Consolidate run directories into one markdown report plus an SVG summary."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable

from .svg import bar_chart


def _read_table(path: Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return (rows[0], rows[1:]) if rows else ([], [])


def _cell(v: str) -> str:
    try:
        f = float(v)
    except ValueError:
        return v
    return v if f.is_integer() and "." not in v else f"{f:.4f}"


def headline(header: list[str], rows: list[list[str]]) -> float | None:
    """The run's headline accuracy: the ``mean`` row if present, else the first row."""
    if "accuracy" not in header or not rows:
        return None
    col = header.index("accuracy")
    chosen = next((r for r in rows if r and r[0] == "mean"), rows[0])
    try:
        return float(chosen[col])
    except (ValueError, IndexError):
        return None


def emit_report(run_dirs: Iterable[str | Path], out_dir: str | Path) -> tuple[Path, Path]:
    """Write ``report.md`` and ``summary.svg`` into ``out_dir``; output depends only on the inputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = sorted(Path(d) for d in run_dirs)
    lines = ["# Run report", "", f"{len(runs)} run(s).", ""]
    bars = {}
    for run in runs:
        summary = run / "summary.csv"
        config = run / "config.txt"
        if not summary.exists():
            raise FileNotFoundError(f"{run} has no summary.csv")
        header, rows = _read_table(summary)
        lines += [f"## {run.name}", ""]
        if config.exists():
            lines += ["```", config.read_text(encoding="utf-8").rstrip("\n"), "```", ""]
        lines.append(f"Source: [{summary.as_posix()}]({summary.as_posix()})")
        lines.append("")
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "---|" * len(header))
        for r in rows:
            lines.append("| " + " | ".join(_cell(c) for c in r) + " |")
        lines.append("")
        h = headline(header, rows)
        if h is not None:
            bars[run.name] = h
    md = out / "report.md"
    md.write_text("\n".join(lines), encoding="utf-8")
    svg = out / "summary.svg"
    svg.write_text(bar_chart(bars, title="headline accuracy per run"), encoding="utf-8")
    return md, svg


def table_sources(report_path: str | Path) -> list[str]:
    """The CSV paths a report cites, in order."""
    out = []
    for line in Path(report_path).read_text(encoding="utf-8").splitlines():
        if line.startswith("Source: [") and "](" in line:
            out.append(line.split("](", 1)[1].rstrip(")"))
    return out

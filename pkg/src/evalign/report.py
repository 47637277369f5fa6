"""Machine-readable result emission: structured JSON, delimited rows, figures.

Cells are keyed (axis, variant, shots); every metric carries its mean and
sample standard deviation over seeds, the sample count and any flags, so the
schema mirrors the AVG/STD presentation of repeated runs. The structured form
round-trips losslessly; figures are line charts of metric vs shots rendered
deterministically for a fixed report.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from evalign.errors import ReportError  # noqa: E402

FORMATS = ("structured", "tabular", "plot")

plt.rcParams["svg.hashsalt"] = "evalign"


@dataclass(frozen=True)
class CellValue:
    mean: float
    std: float
    n: int
    flags: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "n": self.n, "flags": list(self.flags)}

    @staticmethod
    def from_dict(d: dict) -> "CellValue":
        return CellValue(
            mean=d["mean"], std=d["std"], n=d["n"], flags=tuple(d.get("flags", []))
        )


@dataclass(frozen=True)
class ReportCell:
    metrics: Mapping[str, CellValue]
    breakdowns: Mapping[str, Mapping[str, CellValue]] = field(default_factory=dict)
    flags: tuple[str, ...] = ()
    diagnostics: Mapping[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "metrics": {k: v.to_dict() for k, v in sorted(self.metrics.items())},
            "breakdowns": {
                group: {k: v.to_dict() for k, v in sorted(values.items())}
                for group, values in sorted(self.breakdowns.items())
            },
            "flags": sorted(self.flags),
            "diagnostics": {k: self.diagnostics[k] for k in sorted(self.diagnostics)},
        }

    @staticmethod
    def from_dict(d: dict) -> "ReportCell":
        return ReportCell(
            metrics={k: CellValue.from_dict(v) for k, v in d.get("metrics", {}).items()},
            breakdowns={
                group: {k: CellValue.from_dict(v) for k, v in values.items()}
                for group, values in d.get("breakdowns", {}).items()
            },
            flags=tuple(d.get("flags", [])),
            diagnostics=dict(d.get("diagnostics", {})),
        )


CellKey = tuple[str, str, int]  # (axis, variant, shots)


def _key_str(key: CellKey) -> str:
    return f"{key[0]}/{key[1]}/{key[2]}"


def _key_parse(text: str) -> CellKey:
    axis, variant, shots = text.split("/")
    return (axis, variant, int(shots))


@dataclass
class MetricReport:
    metadata: dict = field(default_factory=dict)
    cells: dict[CellKey, ReportCell] = field(default_factory=dict)
    notices: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "metadata": self.metadata,
            "notices": list(self.notices),
            "cells": {_key_str(k): cell.to_dict() for k, cell in sorted(self.cells.items())},
        }

    @staticmethod
    def from_dict(d: dict) -> "MetricReport":
        return MetricReport(
            metadata=dict(d.get("metadata", {})),
            cells={
                _key_parse(k): ReportCell.from_dict(v) for k, v in d.get("cells", {}).items()
            },
            notices=list(d.get("notices", [])),
        )

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def merge(self, other: "MetricReport") -> "MetricReport":
        overlap = set(self.cells) & set(other.cells)
        if overlap:
            raise ReportError(f"cannot merge reports sharing cells: {sorted(overlap)}")
        merged = MetricReport(
            metadata=dict(self.metadata),
            cells={**self.cells, **other.cells},
            notices=[*self.notices, *other.notices],
        )
        return merged


def load_report(path: str | Path) -> MetricReport:
    """Read a structured report, or pull the report line out of a run log."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".jsonl":
        report_line = None
        for line in text.splitlines():
            if not line.strip():
                continue
            row = json.loads(line)
            if row.get("kind") == "report":
                report_line = row
        if report_line is None:
            raise ReportError(f"run log {path} carries no report line")
        return MetricReport.from_dict(report_line["report"])
    return MetricReport.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# emission


def _tabular_rows(report: MetricReport) -> Iterable[list[str]]:
    yield ["axis", "variant", "shots", "metric", "mean", "std", "n", "delta", "flags"]
    for key, cell in sorted(report.cells.items()):
        axis, variant, shots = key
        for name, value in sorted(cell.metrics.items()):
            # Corrected metrics sit next to their *_uncorrected counterpart;
            # surface the signed improvement the same way delta tables do.
            delta = ""
            counterpart = cell.metrics.get(f"{name}_uncorrected")
            if counterpart is not None:
                delta = f"{value.mean - counterpart.mean:+.2f}"
            yield [
                axis,
                variant,
                str(shots),
                name,
                repr(value.mean),
                repr(value.std),
                str(value.n),
                delta,
                ";".join(value.flags),
            ]


def _plot_cells(report: MetricReport, out_dir: Path) -> list[Path]:
    by_axis_variant: dict[tuple[str, str], list[tuple[int, ReportCell]]] = {}
    for (axis, variant, shots), cell in sorted(report.cells.items()):
        by_axis_variant.setdefault((axis, variant), []).append((shots, cell))
    paths = []
    for (axis, variant), cells in sorted(by_axis_variant.items()):
        metric_names = sorted({name for _, cell in cells for name in cell.metrics})
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for name in metric_names:
            xs = [shots for shots, cell in cells if name in cell.metrics]
            ys = [cell.metrics[name].mean for _, cell in cells if name in cell.metrics]
            errs = [cell.metrics[name].std for _, cell in cells if name in cell.metrics]
            ax.errorbar(xs, ys, yerr=errs, marker="o", capsize=2, label=name)
        ax.set_xlabel("shots")
        ax.set_ylabel("metric")
        ax.set_title(f"{axis} / {variant}")
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / f"{axis}_{variant}.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        paths.append(path)
    return paths


def emit(
    report: MetricReport,
    formats: Iterable[str],
    out_dir: str | Path,
    basename: str = "report",
) -> list[Path]:
    """Write the requested formats; returns the paths created."""
    formats = list(formats)
    for fmt in formats:
        if fmt not in FORMATS:
            raise ReportError(f"unknown format {fmt!r}; choose from {FORMATS}")
    if not report.cells:
        raise ReportError("refusing to emit an empty report (no cells)")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if "structured" in formats:
        path = out_dir / f"{basename}.json"
        path.write_text(report.canonical_json(), encoding="utf-8")
        written.append(path)
    if "tabular" in formats:
        path = out_dir / f"{basename}.tsv"
        lines = ["\t".join(row) for row in _tabular_rows(report)]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(path)
    if "plot" in formats:
        written.extend(_plot_cells(report, out_dir))
    return written

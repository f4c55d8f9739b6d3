"""Result aggregation into tables and training-curve figures.

An :class:`ExperimentGrid` collects probe outcomes keyed by (method, arch,
data mode, task, variant), each cell carrying its probe config hash and
source file for traceability.  Table builders render four comparisons
(methods, models, ablations, data scalability) with canonical row and
column ordering, so the same set of cells produces byte-identical output
regardless of insertion order.  Missing cells stay blank; they are never
imputed.  Every table refuses to mix cells whose probe configs differ.
"""

import csv
import dataclasses
import io
import json
import pathlib

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

GRID_FORMAT = "sonarssl-experiment-grid"
BEST_MARK = " *"
ABSENT = ""


@dataclasses.dataclass(frozen=True)
class CellKey:
    method: str
    arch: str
    data_mode: str
    task: str
    variant: str = "default"

    def label(self) -> str:
        return (f"({self.method}, {self.arch}, {self.data_mode}, "
                f"{self.task}, {self.variant})")


@dataclasses.dataclass(frozen=True)
class Cell:
    key: CellKey
    mean: float
    std: float
    n_seeds: int
    config_hash: str
    source: str

    def formatted(self) -> str:
        return f"{self.mean:.3f} ± {self.std:.3f}"


class ExperimentGrid:
    """Cells indexed by key; duplicate keys are rejected, never merged."""

    def __init__(self):
        self._cells: "dict[CellKey, Cell]" = {}

    def add(self, cell: Cell) -> None:
        if cell.key in self._cells:
            old = self._cells[cell.key]
            detail = ("same probe config" if old.config_hash == cell.config_hash
                      else f"probe configs differ: {old.config_hash} vs "
                           f"{cell.config_hash}")
            raise ValueError(f"duplicate cell {cell.key.label()} "
                             f"({detail}; existing source {old.source})")
        self._cells[cell.key] = cell

    def get(self, key: CellKey) -> "Cell | None":
        return self._cells.get(key)

    def __len__(self) -> int:
        return len(self._cells)

    def cells(self) -> "list[Cell]":
        return [self._cells[k] for k in sorted(self._cells, key=dataclasses.astuple)]

    def values_present(self, field: str) -> "list[str]":
        return sorted({getattr(c.key, field) for c in self._cells.values()})

    def save(self, path) -> None:
        doc = {"format": GRID_FORMAT, "version": 1,
               "cells": [{**dataclasses.asdict(c.key), "mean": c.mean,
                          "std": c.std, "n_seeds": c.n_seeds,
                          "config_hash": c.config_hash, "source": c.source}
                         for c in self.cells()]}
        path = pathlib.Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "ExperimentGrid":
        doc = json.loads(pathlib.Path(path).read_text())
        if doc.get("format") != GRID_FORMAT:
            raise ValueError(f"{path} is not an experiment grid file")
        grid = cls()
        for rec in doc["cells"]:
            rec = dict(rec)
            key = CellKey(method=rec.pop("method"), arch=rec.pop("arch"),
                          data_mode=rec.pop("data_mode"),
                          task=rec.pop("task"), variant=rec.pop("variant"))
            grid.add(Cell(key=key, **rec))
        return grid


def cell_from_probe_result(doc: dict, source: str, method: str, arch: str,
                           data_mode: str, variant: str = "default") -> Cell:
    """Build a grid cell from a probe result document."""
    agg = doc["aggregate"]["test_f1"]
    key = CellKey(method=method, arch=arch, data_mode=data_mode,
                  task=doc["probe_config"]["task"], variant=variant)
    return Cell(key=key, mean=agg["mean"], std=agg["std"], n_seeds=agg["n"],
                config_hash=doc["config_hash"], source=str(source))


def resolve_run_provenance(checkpoint_path) -> dict:
    """Read the run snapshot written next to a training checkpoint."""
    checkpoint_path = pathlib.Path(checkpoint_path)
    for base in (checkpoint_path.parent, checkpoint_path.parent.parent):
        candidate = base / "config.json"
        if candidate.exists():
            doc = json.loads(candidate.read_text())
            if doc.get("format") == "sonarssl-run-config":
                cfg = doc["pretrain_config"]
                return {"method": cfg["objective"], "arch": cfg["arch"],
                        "data_mode": cfg["data_mode"],
                        "snapshot_path": str(candidate)}
    raise FileNotFoundError(
        f"no run snapshot (config.json) found beside {checkpoint_path}; "
        "cannot attribute this probe result to a training run")


@dataclasses.dataclass
class Table:
    title: str
    columns: "list[str]"
    rows: "list[list[str]]"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        writer.writerows(self.rows)
        return buf.getvalue()

    def to_text(self) -> str:
        widths = [len(c) for c in self.columns]
        for row in self.rows:
            for i, cell in enumerate(row):
                widths[i] = max(widths[i], len(cell))
        def fmt(row):
            return "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
        lines = [self.title, fmt(self.columns),
                 "  ".join("-" * w for w in widths)]
        lines.extend(fmt(r) for r in self.rows)
        return "\n".join(lines) + "\n"


def _check_uniform_config(cells: "list[Cell]") -> None:
    if not cells:
        return
    expected = cells[0].config_hash
    for cell in cells[1:]:
        if cell.config_hash != expected:
            raise ValueError(
                f"mixed probe configs in one table: cell {cell.key.label()} "
                f"has config hash {cell.config_hash}, expected {expected} "
                f"(from {cells[0].key.label()})")


def _mark_best(matrix: "list[list[Cell | None]]") -> "list[list[str]]":
    """Format cells, tagging each column's best mean; blanks stay blank."""
    n_cols = len(matrix[0]) if matrix else 0
    best = []
    for j in range(n_cols):
        col = [row[j].mean for row in matrix if row[j] is not None]
        best.append(max(col) if col else None)
    out = []
    for row in matrix:
        formatted = []
        for j, cell in enumerate(row):
            if cell is None:
                formatted.append(ABSENT)
            else:
                text = cell.formatted()
                if best[j] is not None and cell.mean == best[j]:
                    text += BEST_MARK
                formatted.append(text)
        out.append(formatted)
    return out


def _axis_table(grid: ExperimentGrid, title: str, row_field: str,
                fixed: "dict[str, str]") -> Table:
    """Generic builder: rows from one key field, columns from tasks."""
    cells = [c for c in grid.cells()
             if all(getattr(c.key, f) == v for f, v in fixed.items())]
    if not cells:
        raise ValueError(f"no cells match {fixed} for table {title!r}")
    _check_uniform_config(cells)
    row_values = sorted({getattr(c.key, row_field) for c in cells})
    tasks = sorted({c.key.task for c in cells})
    index = {(getattr(c.key, row_field), c.key.task): c for c in cells}
    matrix = [[index.get((rv, t)) for t in tasks] for rv in row_values]
    formatted = _mark_best(matrix)
    rows = [[rv] + formatted[i] for i, rv in enumerate(row_values)]
    return Table(title=title, columns=[row_field] + tasks, rows=rows)


def method_comparison(grid: ExperimentGrid, arch: str, data_mode: str,
                      variant: str = "default") -> Table:
    return _axis_table(
        grid, f"Method comparison ({arch}, {data_mode})", "method",
        {"arch": arch, "data_mode": data_mode, "variant": variant})


def model_comparison(grid: ExperimentGrid, method: str, data_mode: str,
                     variant: str = "default") -> Table:
    return _axis_table(
        grid, f"Model comparison ({method}, {data_mode})", "arch",
        {"method": method, "data_mode": data_mode, "variant": variant})


def ablation_table(grid: ExperimentGrid, method: str, arch: str,
                   data_mode: str) -> Table:
    return _axis_table(
        grid, f"Ablation ({method}, {arch}, {data_mode})", "variant",
        {"method": method, "arch": arch, "data_mode": data_mode})


def data_scalability(grid: ExperimentGrid, method: str, arch: str,
                     variant: str = "default") -> Table:
    """Per data mode, with a gain row in F1 points when both modes exist."""
    table = _axis_table(
        grid, f"Data scalability ({method}, {arch})", "data_mode",
        {"method": method, "arch": arch, "variant": variant})
    tasks = table.columns[1:]
    def cell_for(mode, task):
        return grid.get(CellKey(method=method, arch=arch, data_mode=mode,
                                task=task, variant=variant))
    delta_row = ["Δ real_plus_syn − real (pts)"]
    any_delta = False
    for task in tasks:
        a, b = cell_for("real", task), cell_for("real_plus_syn", task)
        if a is None or b is None:
            delta_row.append(ABSENT)
        else:
            delta_row.append(f"{(b.mean - a.mean) * 100:+.1f}")
            any_delta = True
    if any_delta:
        table.rows.append(delta_row)
    return table


def write_report(grid: ExperimentGrid, out_dir) -> "list[pathlib.Path]":
    """Render every table the grid supports; returns the files written.

    Each table goes out as CSV and aligned text.  A summary file lists the
    cells with their provenance.
    """
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    def emit(name: str, table: Table):
        csv_path = out_dir / f"{name}.csv"
        txt_path = out_dir / f"{name}.txt"
        csv_path.write_text(table.to_csv())
        txt_path.write_text(table.to_text())
        written.extend([csv_path, txt_path])

    variants = grid.values_present("variant")
    base_variant = "default" if "default" in variants else variants[0]
    for arch in grid.values_present("arch"):
        for mode in grid.values_present("data_mode"):
            cells = [c for c in grid.cells() if c.key.arch == arch
                     and c.key.data_mode == mode
                     and c.key.variant == base_variant]
            if len({c.key.method for c in cells}) >= 2:
                emit(f"methods_{arch}_{mode}",
                     method_comparison(grid, arch, mode, base_variant))
    for method in grid.values_present("method"):
        for mode in grid.values_present("data_mode"):
            cells = [c for c in grid.cells() if c.key.method == method
                     and c.key.data_mode == mode
                     and c.key.variant == base_variant]
            if len({c.key.arch for c in cells}) >= 2:
                emit(f"models_{method}_{mode}",
                     model_comparison(grid, method, mode, base_variant))
        for arch in grid.values_present("arch"):
            cells = [c for c in grid.cells() if c.key.method == method
                     and c.key.arch == arch]
            if len({c.key.variant for c in cells}) >= 2:
                for mode in sorted({c.key.data_mode for c in cells}):
                    emit(f"ablation_{method}_{arch}_{mode}",
                         ablation_table(grid, method, arch, mode))
            if len({c.key.data_mode for c in cells
                    if c.key.variant == base_variant}) >= 2:
                emit(f"data_{method}_{arch}",
                     data_scalability(grid, method, arch, base_variant))

    summary_lines = ["cells in this report:"]
    for c in grid.cells():
        summary_lines.append(
            f"  {c.key.label()}: {c.formatted()} over {c.n_seeds} seeds "
            f"[config {c.config_hash}] from {c.source}")
    summary = out_dir / "summary.txt"
    summary.write_text("\n".join(summary_lines) + "\n")
    written.append(summary)
    grid.save(out_dir / "grid.json")
    written.append(out_dir / "grid.json")
    return written


def load_metric_series(metrics_path, key: str = "loss_total"):
    """(steps, values) for one metric from a JSONL metrics file."""
    steps, values = [], []
    for line in pathlib.Path(metrics_path).read_text().splitlines():
        rec = json.loads(line)
        if key in rec:
            steps.append(rec["step"])
            values.append(rec[key])
    if not steps:
        raise ValueError(f"{metrics_path} has no values for {key!r}")
    return steps, values


def render_curves(series: "dict[str, tuple[list, list]]", out_path,
                  title: str = "training curves", xlabel: str = "step",
                  ylabel: str = "value") -> pathlib.Path:
    """Plot named (steps, values) series to a PNG with deterministic bytes."""
    if not series:
        raise ValueError("no series to plot")
    out_path = pathlib.Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(7, 4.5), dpi=120)
    try:
        for name in sorted(series):
            steps, values = series[name]
            ax.plot(steps, values, label=name, linewidth=1.4)
        ax.set_title(title)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.grid(alpha=0.3)
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_path, format="png",
                    metadata={"Software": "sonarssl"})
    finally:
        plt.close(fig)
    return out_path

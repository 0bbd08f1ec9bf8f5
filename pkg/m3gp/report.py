"""
Report emission: CSV tables, an aligned plain-text report, Markdown and HTML,
champion model files and per-run evolution logs.

Nothing time- or host-dependent is written, so identical experiments give
byte-identical output directories.
"""
import json
import logging
from pathlib import Path
from typing import Dict, List, Sequence, Union

import markdown as md
import pandas as pd

from .harness import ExperimentReport, HYPER_VS_ORIGINAL, significance_tally, source_target_summary

logger = logging.getLogger(__name__)

IN_IMAGE_MARKERS = {"lower": "v", "higher": "^", "same": ""}


def markdown_to_html(text: str) -> str:
    """Use the markdown module to convert markdown to HTML."""
    return md.markdown(text, extensions=['extra', 'sane_lists'])


def _percent(value: float) -> str:
    return f"{100 * value:.2f}"


def _cell_text(cell) -> str:
    text = _percent(cell.median)
    if cell.in_image:
        text += IN_IMAGE_MARKERS.get(cell.in_image, "")
    if cell.wins:
        text += "*" * cell.wins
    return text


def accuracy_tables(report: ExperimentReport) -> List[Dict]:
    """One table per (method, feature space): rows are training sets, columns targets."""
    tables = []
    targets = report.spec.target_tags
    for features in report.spec.feature_spaces:
        for method in report.spec.methods:
            rows = []
            for combination in report.spec.combinations:
                name = "".join(combination)
                try:
                    cells = [report.cell(method, features, name, t) for t in targets]
                except KeyError:
                    continue
                rows.append([name, _percent(cells[0].train_median)] + [_cell_text(c) for c in cells])
            if rows:
                tables.append({
                    "title": f"{method} / {features} features",
                    "header": ["train", "train acc"] + targets,
                    "rows": rows,
                })
    return tables


def _aligned(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(r[i])) for r in [header] + list(rows)) for i in range(len(header))]
    lines = ["  ".join(str(v).rjust(w) for v, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(str(v).rjust(w) for v, w in zip(row, widths)) for row in rows)
    return "\n".join(lines)


def _pipe_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    lines = ["| " + " | ".join(str(h) for h in header) + " |",
             "|" + "|".join("---" for _ in header) + "|"]
    lines.extend("| " + " | ".join(str(v) for v in row) + " |" for row in rows)
    return "\n".join(lines)


def _frame_rows(frame: pd.DataFrame) -> List[List[str]]:
    return [[f"{v:.4f}" if isinstance(v, float) else str(v) for v in row] for row in frame.itertuples(index=False)]


def render_text(report: ExperimentReport) -> str:
    spec = report.spec
    parts = [
        f"Median test accuracy (%) over {spec.runs} runs; training sets of {spec.training_size} rows; "
        f"master seed {spec.seed}",
        f"Markers at p < {spec.alpha}: '*' one per significant win among cells not trained on the target; "
        f"'v' / '^' significantly lower / higher than the pure-trained cell of the same image",
        "",
    ]
    for table in accuracy_tables(report):
        parts.extend([table["title"], _aligned(table["header"], table["rows"]), ""])
    tally = significance_tally(report)
    parts.extend(["Significance tally", _aligned(list(tally.columns), _frame_rows(tally)), ""])
    summary = source_target_summary(report)
    if len(summary):
        parts.extend(["Unseen-image accuracy per source and target (pure-trained)",
                      _aligned(list(summary.columns), _frame_rows(summary)), ""])
    versus = [c for c in report.comparisons if c.kind == HYPER_VS_ORIGINAL]
    if versus:
        rows = [[c.method, c.first, c.target, f"{c.p_value:.4g}", c.direction if c.significant else "same"]
                for c in versus]
        parts.extend(["Hyper-features versus original features",
                      _aligned(["method", "train", "target", "p", "hyper is"], rows), ""])
    if report.hyperfeatures:
        parts.append("Hyper-features")
        parts.extend(f"  HF{j}: {formula}" for j, formula in enumerate(report.hyperfeatures))
        parts.append("")
    return "\n".join(parts)


def render_markdown(report: ExperimentReport) -> str:
    spec = report.spec
    parts = [
        "# Experiment report",
        "",
        f"Median test accuracy (%) over **{spec.runs}** runs, training sets of {spec.training_size} rows, "
        f"master seed {spec.seed}. `*` marks one significant win (p < {spec.alpha}) among the cells not "
        f"trained on the target; `v` and `^` mark a mixed-trained cell significantly below or above the "
        f"pure-trained cell of the same image.",
        "",
    ]
    for table in accuracy_tables(report):
        escaped = [[v.replace("*", "\\*") for v in row] for row in table["rows"]]
        parts.extend([f"## {table['title']}", "", _pipe_table(table["header"], escaped), ""])
    tally = significance_tally(report)
    parts.extend(["## Significance tally", "", _pipe_table(list(tally.columns), _frame_rows(tally)), ""])
    summary = source_target_summary(report)
    if len(summary):
        parts.extend(["## Sources and targets", "", _pipe_table(list(summary.columns), _frame_rows(summary)), ""])
    if report.hyperfeatures:
        parts.extend(["## Hyper-features", ""])
        parts.extend(f"1. `{formula}`" for formula in report.hyperfeatures)
        parts.append("")
    return "\n".join(parts)


def _write_text(path: Path, text: str):
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(text)
        if not text.endswith("\n"):
            handle.write("\n")


def _write_frame(frame: pd.DataFrame, path: Path):
    frame.to_csv(path, index=False, lineterminator="\n", encoding="utf-8")


def write_report(report: ExperimentReport, out_dir: Union[str, Path]) -> Dict[str, Path]:
    """Write every report artifact under out_dir and return their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "cells": out / "cells.csv",
        "runs": out / "runs.csv",
        "comparisons": out / "comparisons.csv",
        "tally": out / "tally.csv",
        "sources": out / "source_target.csv",
        "text": out / "report.txt",
        "markdown": out / "report.md",
        "html": out / "report.html",
        "spec": out / "spec.json",
    }
    _write_frame(report.cells_frame(), paths["cells"])
    _write_frame(report.runs_frame(), paths["runs"])
    _write_frame(report.comparisons_frame(), paths["comparisons"])
    _write_frame(significance_tally(report), paths["tally"])
    _write_frame(source_target_summary(report), paths["sources"])
    _write_text(paths["text"], render_text(report))
    markdown_text = render_markdown(report)
    _write_text(paths["markdown"], markdown_text)
    _write_text(paths["html"], markdown_to_html(markdown_text))
    _write_text(paths["spec"], json.dumps(report.spec.to_dict(), indent=2, sort_keys=True))

    if report.hyperfeatures:
        paths["hyperfeatures"] = out / "hyperfeatures.txt"
        _write_text(paths["hyperfeatures"], "\n".join(report.hyperfeatures))
    if report.impacts:
        paths["impacts"] = out / "impacts.csv"
        _write_frame(pd.DataFrame([i.to_dict() for i in report.impacts]), paths["impacts"])

    champions = out / "champions"
    logs = out / "logs"
    for record in report.records:
        stem = f"{record.method}_{record.features}_{record.combination}_run{record.run:02d}"
        if record.model is not None:
            champions.mkdir(exist_ok=True)
            _write_text(champions / f"{stem}.json", json.dumps(record.model, indent=2, sort_keys=True))
        if record.trace:
            logs.mkdir(exist_ok=True)
            trace = pd.DataFrame([{
                "generation": g.generation,
                "best_fitness": g.best_fitness,
                "median_fitness": g.median_fitness,
                "best_size": g.best_size,
                "best_dimensions": g.best_dimensions,
            } for g in record.trace])
            _write_frame(trace, logs / f"{stem}.csv")
    logger.info(f"Report written to {out}")
    return paths

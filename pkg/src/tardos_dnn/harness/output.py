"""Result files. Every file opens with the provenance block and holds no timestamps,
so equal config and seed give byte-identical output."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from .experiments import ExperimentResult, SweepResult, TableResult

FORMATS = ("json", "csv")


def _json_text(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _csv_text(provenance: dict, header: list[str], rows) -> str:
    buf = io.StringIO()
    for key in sorted(provenance):
        buf.write(f"# {key}: {provenance[key]}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _ids(values) -> str:
    return " ".join(str(v) for v in values)


RECORD_FIELDS = ["trial", "decision", "t_star", "accused", "colluders", "caught", "false_accusation", "w_max", "s_max"]


def records_csv(result: ExperimentResult) -> str:
    rows = (
        [
            r["trial"],
            r["decision"],
            r["t_star"],
            _ids(r["accused"]),
            _ids(r["colluders"]),
            int(r["caught"]),
            int(r["false_accusation"]),
            repr(r["w_max"]),
            repr(r["s_max"]),
        ]
        for r in result.records
    )
    return _csv_text(result.provenance, RECORD_FIELDS, rows)


def histogram_csv(result: ExperimentResult) -> str:
    hist = result.aggregates["t_star_histogram"]
    return _csv_text(result.provenance, ["t_star", "count"], ((k, v) for k, v in hist.items()))


def write_experiment(result: ExperimentResult, out_dir, fmt: str = "json", stem: str | None = None) -> list[Path]:
    if fmt not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = stem or result.name
    files = {}
    if fmt == "csv":
        files[f"{stem}_trials.csv"] = records_csv(result)
    else:
        files[f"{stem}_trials.json"] = _json_text({"provenance": result.provenance, "records": result.records})
    files[f"{stem}_aggregate.json"] = _json_text({"provenance": result.provenance, "aggregates": result.aggregates})
    files[f"{stem}_t_star_hist.csv"] = histogram_csv(result)
    return _write_all(out, files)


def write_sweep(result: SweepResult, out_dir, fmt: str = "json") -> list[Path]:
    written = []
    for label, run in result.runs.items():
        written += write_experiment(run, out_dir, fmt, stem=f"{result.name}_{_safe(label)}")
    written += _write_all(Path(out_dir), {f"{result.name}_summary.json": _json_text({"provenance": result.provenance, "summary": result.summary})})
    return written


def write_table(result: TableResult, out_dir, fmt: str = "json") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    if fmt == "csv" and result.rows:
        header = list(result.rows[0])
        files[f"{result.name}.csv"] = _csv_text(result.provenance, header, ([r[h] for h in header] for r in result.rows))
    else:
        files[f"{result.name}.json"] = _json_text({"provenance": result.provenance, "rows": result.rows})
    files[f"{result.name}_summary.json"] = _json_text({"provenance": result.provenance, "summary": result.summary})
    if result.histograms:
        edges = result.summary.get("hist_edges")
        rows = []
        for h in result.histograms:
            for i, count in enumerate(h["counts"]):
                rows.append([h["collusion_size"], h["attack"], h["group"], edges[i], edges[i + 1], count])
        files[f"{result.name}_r_hist.csv"] = _csv_text(
            result.provenance, ["collusion_size", "attack", "group", "bin_lo", "bin_hi", "count"], rows
        )
    return _write_all(out, files)


def write_result(result, out_dir, fmt: str = "json") -> list[Path]:
    if isinstance(result, ExperimentResult):
        return write_experiment(result, out_dir, fmt)
    if isinstance(result, SweepResult):
        return write_sweep(result, out_dir, fmt)
    return write_table(result, out_dir, fmt)


def _safe(label: str) -> str:
    return label.replace("/", "-").replace("=", "")


def _write_all(out: Path, files: dict[str, str]) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, text in files.items():
        p = out / name
        p.write_text(text)
        paths.append(p)
    return paths

"""Writing experiment results: results.csv, report.json, converted_samples.csv."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .experiment import ExperimentReport, score_against

RESULT_COLUMNS = ("b", "method", "frequency", "delay", "miss", "score", "accuracy", "seed")
CONVERTED_COLUMNS = ("seed", "b", "method", "sample", "t", "feature", "label", "input", "converted", "partner")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    v = float(v)
    return "" if math.isnan(v) else f"{v:.6f}"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items() if k != "report"}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return None if math.isnan(obj) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def result_rows(report: ExperimentReport) -> list[dict]:
    rows = []
    for ctx in report.contexts:
        base = ctx.references["A on B"]
        full_b = len(ctx.b_train)
        for name in ("A on B", "B on B"):
            m = ctx.references[name]
            rows.append({"b": full_b, "method": name, "frequency": m.get("frequency"),
                         "delay": m.get("delay_s"), "miss": m.get("miss"),
                         "score": score_against(m, base), "accuracy": m.get("accuracy"), "seed": ctx.seed})
        for r in sorted((r for r in report.results if r.seed == ctx.seed),
                        key=lambda r: (r.b, report.config.methods.index(r.method))):
            m = r.metrics
            rows.append({"b": r.b, "method": r.method, "frequency": m.get("frequency"),
                         "delay": m.get("delay_s"), "miss": m.get("miss"),
                         "score": score_against(m, base), "accuracy": m.get("accuracy"), "seed": r.seed})
    return rows


def write_results_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULT_COLUMNS)
        for row in rows:
            writer.writerow([row["method"] if c == "method" else _fmt(row[c]) for c in RESULT_COLUMNS])


def read_results_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RESULT_COLUMNS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return list(reader)


def emit_report(report: ExperimentReport, out_dir) -> list[Path]:
    """Write the three report files into ``out_dir`` (created if missing)."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    paths = [out / "results.csv", out / "report.json", out / "converted_samples.csv"]
    write_results_csv(paths[0], result_rows(report))

    doc = {
        "config": report.config.as_dict(),
        "seeds": [{
            "seed": ctx.seed,
            "sizes": {"a_train": len(ctx.a_train), "a_test": len(ctx.a_test),
                      "b_train": len(ctx.b_train), "b_test": len(ctx.b_test)},
            "references": ctx.references,
            "loss_curves": ctx.history,
        } for ctx in report.contexts],
        "grid": [{
            "seed": r.seed, "b": r.b, "method": r.method, "metrics": r.metrics,
            "loss_curves": r.history, "diagnostics": r.diagnostics,
        } for r in sorted(report.results, key=lambda r: (r.seed, r.b, report.config.methods.index(r.method)))],
        "failures": [{"seed": s, "method": m, "b": b, "error": e} for s, m, b, e in report.failures],
    }
    paths[1].write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    with open(paths[2], "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CONVERTED_COLUMNS)
        for r in sorted(report.results, key=lambda r: (r.seed, r.b, report.config.methods.index(r.method))):
            for sample, t, f, label, vin, vout, partner in r.converted:
                writer.writerow([r.seed, r.b, r.method, sample, t, f, label, _fmt(vin), _fmt(vout), _fmt(partner)])
    return paths


def format_table(rows: list[dict]) -> str:
    """Markdown table of results.csv rows."""
    lines = ["| " + " | ".join(RESULT_COLUMNS) + " |", "|" + "---|" * len(RESULT_COLUMNS)]
    for row in rows:
        lines.append("| " + " | ".join(str(row[c]) if row[c] != "" else "-" for c in RESULT_COLUMNS) + " |")
    return "\n".join(lines)

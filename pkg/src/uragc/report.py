"""Report artifacts on disk and Acc/CR/SS table rendering."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Sequence

from .conformal import CalibrationModel
from .core import dump_record
from .errors import ReportError
from .evaluation import SCHEMA_VERSION, Aggregate, InstanceRecord, RunReport

PANELS = (("Acc", "acc"), ("CR", "cr"), ("SS", "ss"))
RECORDS_FILE = "records.jsonl"
SUMMARY_FILE = "report.json"
TABLE_FILE = "tables.csv"
TEXT_FILE = "summary.txt"


def write_report(report: RunReport, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = report.metadata.get("config_hash", "")
    with open(out / RECORDS_FILE, "w", encoding="utf-8") as fh:
        for r in report.records:
            fh.write(dump_record({"config_hash": chash, **r.to_record()}) + "\n")
    (out / SUMMARY_FILE).write_text(
        json.dumps(report.summary_record(), ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )
    tables = [_table_entry(report)]
    (out / TABLE_FILE).write_text(render_csv(tables, chash), encoding="utf-8")
    (out / TEXT_FILE).write_text(render_summary(report), encoding="utf-8")
    return out


def _table_entry(report: RunReport) -> dict:
    return {
        "strategy": report.metadata.get("strategy", "?"),
        "dataset": report.metadata.get("dataset", "dataset"),
        "protocol": report.metadata.get("protocol", {}).get("kind", "normal"),
        "aggregates": [a.to_record() for a in report.aggregates],
    }


def load_summary(path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / SUMMARY_FILE
    try:
        rec = json.loads(p.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ReportError(f"{p}: unreadable report ({exc})") from exc
    if not isinstance(rec, dict) or "schema_version" not in rec:
        raise ReportError(f"{p}: not a report summary")
    if rec["schema_version"] != SCHEMA_VERSION:
        raise ReportError(f"{p}: schema version {rec['schema_version']} != {SCHEMA_VERSION}")
    for key in ("metadata", "aggregates"):
        if key not in rec:
            raise ReportError(f"{p}: missing {key!r}")
    return rec


def load_report(path) -> RunReport:
    """Full report from a run directory (summary plus per-instance records)."""
    p = Path(path)
    if not p.is_dir():
        p = p.parent
    summary = load_summary(p)
    records = []
    try:
        with open(p / RECORDS_FILE, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    rec.pop("config_hash", None)
                    records.append(InstanceRecord.from_record(rec))
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise ReportError(f"{p / RECORDS_FILE}: unreadable records ({exc})") from exc
    return RunReport(
        summary["metadata"],
        records,
        [CalibrationModel.from_record(m) for m in summary.get("calibration", [])],
        [Aggregate(**a) for a in summary["aggregates"]],
        summary.get("quality", {}),
    )


# ------------------------------------------------------------------- tables


def _headline(entry: dict, subset: str = "all") -> dict | None:
    for a in entry["aggregates"]:
        if a["method"] == "mean" and a["subset"] == subset:
            return a
    return None


def summaries_to_entries(summaries: Sequence[dict]) -> list[dict]:
    out = []
    for s in summaries:
        meta = s["metadata"]
        out.append({
            "strategy": meta.get("strategy", "?"),
            "dataset": meta.get("dataset", "dataset"),
            "protocol": meta.get("protocol", {}).get("kind", "normal"),
            "aggregates": s["aggregates"],
        })
    # same strategy and dataset under several protocols: keep the columns apart
    keys = [(e["strategy"], e["dataset"]) for e in out]
    if len(set(keys)) < len(keys):
        for e in out:
            e["column"] = f"{e['dataset']} ({e['protocol']})"
    return out


def panel_rows(entries: Sequence[dict]) -> list[tuple[str, str, str, float]]:
    """(panel, strategy, dataset, value) for the headline (LAC/APS mean) aggregates."""
    rows = []
    for panel, key in PANELS:
        for e in entries:
            a = _headline(e)
            if a is not None:
                rows.append((panel, e["strategy"], e.get("column", e["dataset"]), a[key]))
    return rows


def render_csv(entries: Sequence[dict], config_hash: str = "") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["panel", "strategy", "dataset", "value", "config_hash"])
    for panel, strategy, dataset, value in panel_rows(entries):
        w.writerow([panel, strategy, dataset, repr(float(value)), config_hash])
    return buf.getvalue()


def parse_csv(text: str) -> dict[tuple[str, str, str], float]:
    rows = csv.DictReader(io.StringIO(text))
    return {(r["panel"], r["strategy"], r["dataset"]): float(r["value"]) for r in rows}


def render_panels(entries: Sequence[dict]) -> str:
    """Aligned text: one panel per metric, rows = strategies, columns = datasets."""
    rows = panel_rows(entries)
    strategies = sorted({r[1] for r in rows})
    datasets = sorted({r[2] for r in rows})
    lookup = {(p, s, d): v for p, s, d, v in rows}
    width = max([len(s) for s in strategies] + [8])
    col = max([len(d) for d in datasets] + [8])
    lines = []
    for panel, _ in PANELS:
        lines.append(f"[{panel}]")
        lines.append(" " * width + "  " + "  ".join(d.rjust(col) for d in datasets))
        for s in strategies:
            cells = []
            for d in datasets:
                v = lookup.get((panel, s, d))
                cells.append(("-" if v is None else f"{v:.4f}").rjust(col))
            lines.append(s.ljust(width) + "  " + "  ".join(cells))
        lines.append("")
    return "\n".join(lines)


def delta_rows(first: Sequence[dict], second: Sequence[dict]) -> list[tuple[str, str, float, float, float]]:
    """(strategy, dataset, dAcc, dCR, dSS) = second minus first, for pairs present in both."""
    a = {(e["strategy"], e["dataset"]): _headline(e) for e in first}
    b = {(e["strategy"], e["dataset"]): _headline(e) for e in second}
    out = []
    for key in sorted(set(a) & set(b)):
        x, y = a[key], b[key]
        if x is None or y is None:
            continue
        out.append((key[0], key[1], y["acc"] - x["acc"], y["cr"] - x["cr"], y["ss"] - x["ss"]))
    return out


def render_deltas(rows) -> str:
    lines = ["strategy  dataset  dAcc  dCR  dSS"]
    for s, d, da, dc, ds in rows:
        lines.append(f"{s}  {d}  {da:+.4f}  {dc:+.4f}  {ds:+.4f}")
    return "\n".join(lines) + "\n"


def render_deltas_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["strategy", "dataset", "d_acc", "d_cr", "d_ss"])
    for s, d, da, dc, ds in rows:
        w.writerow([s, d, repr(da), repr(dc), repr(ds)])
    return buf.getvalue()


def render_summary(report: RunReport) -> str:
    meta = report.metadata
    lines = [
        f"strategy: {meta.get('strategy')}",
        f"protocol: {meta.get('protocol', {}).get('kind')}",
        f"alpha: {meta.get('alpha')}",
        f"config hash: {meta.get('config_hash')}",
    ]
    if "retrieval_depth" in meta:
        lines.append(f"retrieval depth: {meta['retrieval_depth']}")
    for m in report.calibration:
        lines.append(f"q_hat[{m.method}] = {m.q_hat!r} (n = {m.n}{', overflow' if m.overflow else ''})")
    lines.append("")
    lines.append(f"{'subset':<14}{'method':<6}{'n':>7}{'Acc':>9}{'CR':>9}{'SS':>9}")
    for a in report.aggregates:
        lines.append(f"{a.subset:<14}{a.method:<6}{a.n:>7}{a.acc:>9.4f}{a.cr:>9.4f}{a.ss:>9.4f}")
    q = report.quality
    lines.append("")
    lines.append(f"flagged (excluded): {len(q.get('flagged', []))}")
    lines.append(f"failed: {len(q.get('failed', {}))}")
    lines.append(f"skipped: {len(q.get('skipped', {}))}")
    for note in meta.get("notes", []):
        lines.append(f"note: {note}")
    for mark in meta.get("watermarks", []):
        lines.append(f"WARNING: {mark}")
    if "error" in meta:
        lines.append(f"error: {meta['error']}")
    return "\n".join(lines) + "\n"

"""Per-run report files and their aggregation into mean +- std tables."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

SCHEMA = "adbm-report"
SCHEMA_VERSION = 1
COLUMNS = ("clean", "linf", "l1", "l2", "average")
# fixed row order; anything else follows alphabetically
METHOD_ORDER = ("undefended", "diffpure", "adbm")


class ReportSchemaError(ValueError):
    pass


def make_report(config: dict, seed: int, rows: list[dict], **extra) -> dict:
    return {"schema": SCHEMA, "version": SCHEMA_VERSION, "config": config, "seed": seed,
            "rows": rows, **extra}


def table_row(method: str, clean: float, robust: dict[str, float]) -> dict:
    row = {"method": method, "clean": float(clean)}
    row.update({k: float(v) for k, v in robust.items()})
    row["average"] = float(np.mean(list(robust.values()))) if robust else float("nan")
    return row


def _load(item) -> tuple[str, dict]:
    if isinstance(item, dict):
        return "<dict>", item
    path = Path(item)
    try:
        return str(path), json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ReportSchemaError(f"{path}: not valid JSON ({exc})") from exc


def _check(name: str, rep: dict) -> list[str]:
    if rep.get("schema") != SCHEMA or rep.get("version") != SCHEMA_VERSION:
        raise ReportSchemaError(f"{name}: schema {rep.get('schema')!r} v{rep.get('version')}, "
                                f"expected {SCHEMA!r} v{SCHEMA_VERSION}")
    rows = rep.get("rows")
    if not isinstance(rows, list) or not rows:
        raise ReportSchemaError(f"{name}: no rows")
    cols = None
    for row in rows:
        if "method" not in row:
            raise ReportSchemaError(f"{name}: row without a method")
        these = [c for c in row if c != "method"]
        if cols is not None and these != cols:
            raise ReportSchemaError(f"{name}: rows have differing columns")
        cols = these
    return cols


def _rank(method: str):
    return (METHOD_ORDER.index(method), "") if method in METHOD_ORDER else (len(METHOD_ORDER), method)


def _order(methods):
    return sorted(methods, key=_rank)


def merge_reports(items) -> dict:
    """Aggregate report files (or already-loaded dicts) into one table.

    Each method's row holds the mean and the population std over the inputs
    it appears in, plus the count. Column sets must agree across all inputs.
    """
    items = list(items)
    if not items:
        raise ReportSchemaError("no report files given")
    cols = None
    values: dict[str, dict[str, list[float]]] = {}
    seeds = []
    for item in items:
        name, rep = _load(item)
        these = _check(name, rep)
        if cols is None:
            cols, first = these, name
        elif these != cols:
            raise ReportSchemaError(f"{name}: columns {these} differ from {cols} in {first}")
        seeds.append(rep.get("seed"))
        for row in rep["rows"]:
            acc = values.setdefault(row["method"], {c: [] for c in cols})
            for c in cols:
                acc[c].append(float(row[c]))
    rows = []
    for m in _order(values):
        row = {"method": m, "n": len(values[m][cols[0]])}
        for c in cols:
            v = np.asarray(values[m][c])
            row[f"{c}_mean"] = float(v.mean())
            row[f"{c}_std"] = float(v.std())
        rows.append(row)
    return {"columns": cols, "rows": rows, "seeds": seeds, "files": len(items)}


def table_csv(merged: dict) -> str:
    buf = io.StringIO()
    fields = ["method", "n"] + [f"{c}_{s}" for c in merged["columns"] for s in ("mean", "std")]
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for row in merged["rows"]:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


def read_table_csv(text: str) -> list[dict]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        out.append({k: (v if k == "method" else int(v) if k == "n" else float(v)) for k, v in row.items()})
    return out


def table_markdown(merged: dict, scale: float = 100.0) -> str:
    cols = merged["columns"]
    lines = ["| method | " + " | ".join(cols) + " |", "|---" * (len(cols) + 1) + "|"]
    for row in merged["rows"]:
        cells = [f"{scale * row[c + '_mean']:.2f} ± {scale * row[c + '_std']:.2f}" for c in cols]
        lines.append(f"| {row['method']} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def write_table(merged: dict, stem) -> None:
    stem = Path(stem)
    stem.with_suffix(".json").write_text(json.dumps(merged, indent=2))
    stem.with_suffix(".csv").write_text(table_csv(merged))
    stem.with_suffix(".md").write_text(table_markdown(merged))


def sweep_csv(points: list[dict], key: str) -> str:
    """Plot data: one line per (seed, method, sweep value)."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["seed", "method", key, "clean", "robust"], lineterminator="\n")
    w.writeheader()
    for p in sorted(points, key=lambda p: (p["seed"], _rank(p["method"]), p[key])):
        w.writerow({k: p[k] for k in ("seed", "method", key, "clean", "robust")})
    return buf.getvalue()

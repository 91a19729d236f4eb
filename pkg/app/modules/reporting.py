# app/modules/reporting.py
"""
Artefactos de las corridas: CSV de puntos/valores, raw.csv / summary.csv de
los experimentos, diagnóstico JSON-lines, manifest con checksums y el gráfico
log-log en SVG.

Todas las escrituras son atómicas (archivo temporal en la misma carpeta +
os.replace) y deterministas: floats con %.17g, sin marcas de tiempo.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ArgumentError, DomainError
from .stochastic_lab import RateReport, TrialRecord, summarize

logger = logging.getLogger("mlslab.reporting")

RAW_COLUMNS = ("target", "n", "trial", "statistic", "h_measured", "failures")
SUMMARY_COLUMNS = ("n", "x", "aggregate", "slope", "intercept", "stderr")

_SVG_W, _SVG_H, _PAD = 640, 480, 60


def fmt(v: Any) -> str:
    """Formato estable de celdas: %.17g para floats, '' para None."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "%.17g" % float(v)


def atomic_write(path, data) -> Path:
    """
    Entrada:
        - path: destino; data: str (utf-8) o bytes.
    Qué hace:
        - Escribe en un temporal de la misma carpeta y lo renombra sobre el destino.
    Salida esperada:
        - Path final. OSError si la carpeta no es escribible.
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    payload = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", dir=str(target.parent))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, target)
    except OSError:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return target


def _csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([c if isinstance(c, str) else fmt(c) for c in row])
    return buf.getvalue()


def write_table(path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    return atomic_write(path, _csv_text(header, rows))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------- Puntos y valores ----------------------
def write_points_csv(path, points: np.ndarray, parameters: Optional[np.ndarray] = None) -> Path:
    """Columnas x0..x{d-1} y, si hay parámetros de variedad, u0..u{m-1}."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    header = [f"x{j}" for j in range(pts.shape[1])]
    rows = pts
    if parameters is not None:
        par = np.asarray(parameters, dtype=float).reshape(pts.shape[0], -1)
        header += [f"u{j}" for j in range(par.shape[1])]
        rows = np.concatenate([pts, par], axis=1)
    return atomic_write(path, _csv_text(header, rows.tolist()))


def _read_table(path) -> Tuple[List[str], np.ndarray]:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"[IO] file not found: {p}")
    with open(p, encoding="utf-8") as fh:
        header = next(csv.reader(fh), None)
    if not header:
        raise DomainError(f"{p} is empty")
    try:
        data = np.loadtxt(p, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as e:
        raise DomainError(f"{p}: malformed table ({e})") from None
    if data.size == 0:
        data = np.empty((0, len(header)))
    return [h.strip() for h in header], data


def read_points_csv(path) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """(puntos x*, parámetros u* o None)."""
    header, data = _read_table(path)
    xs = [i for i, h in enumerate(header) if h.startswith("x")]
    us = [i for i, h in enumerate(header) if h.startswith("u")]
    if not xs:
        raise DomainError(f"{path}: no x0.. columns in header {header}")
    return data[:, xs], (data[:, us] if us else None)


def write_values_csv(path, values, column: str = "f") -> Path:
    vals = np.asarray(values, dtype=float).ravel()
    return atomic_write(path, _csv_text([column], [[v] for v in vals]))


def read_values_csv(path, column: str = "f") -> np.ndarray:
    header, data = _read_table(path)
    if column not in header:
        raise DomainError(f"{path}: column '{column}' not found in {header}")
    return data[:, header.index(column)]


# ---------------------- Reportes de experimentos ----------------------
def _aux_keys(records: Sequence[TrialRecord]) -> List[str]:
    return sorted({k for r in records for k in r.auxiliary})


def write_raw_csv(path, target: str, records: Sequence[TrialRecord]) -> Path:
    """Columnas fijas + columnas auxiliares ordenadas + degenerate + fits."""
    aux = _aux_keys(records)
    header = list(RAW_COLUMNS) + ["fits", "degenerate"] + aux
    rows = []
    for r in sorted(records, key=lambda r: (r.n, r.trial)):
        rows.append([target, r.n, r.trial, r.statistic, r.h_measured, r.failures, r.fits, r.degenerate]
                    + [r.auxiliary.get(k, math.nan) for k in aux])
    return atomic_write(path, _csv_text(header, rows))


def read_raw_csv(path) -> Tuple[str, List[TrialRecord]]:
    """Inverso de write_raw_csv; permite recalcular el resumen sólo desde el CSV."""
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DomainError(f"{path}: no records")
    if "target" not in rows[0]:
        raise DomainError(f"{path}: no target column")
    fixed = set(RAW_COLUMNS) | {"fits", "degenerate"}
    records = []
    for line, row in enumerate(rows, start=2):
        try:
            aux = {k: float(v) for k, v in row.items() if k not in fixed}
            records.append(TrialRecord(
                n=int(row["n"]), trial=int(row["trial"]), statistic=float(row["statistic"]),
                h_measured=float(row["h_measured"]), failures=int(row["failures"]),
                fits=int(row.get("fits") or 0), degenerate=row.get("degenerate") == "1", auxiliary=aux,
            ))
        except (KeyError, TypeError, ValueError) as e:
            raise DomainError(f"{path}: malformed raw row {line} ({e})") from None
    return rows[0]["target"], records


def write_summary_csv(path, report: RateReport) -> Path:
    rows = [[n, x, y, report.slope, report.intercept, report.stderr] for n, x, y in report.points]
    return atomic_write(path, _csv_text(SUMMARY_COLUMNS, rows))


def read_summary_csv(path) -> List[Tuple[int, float, float]]:
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    try:
        return [(int(r["n"]), float(r["x"]), float(r["aggregate"])) for r in rows]
    except (KeyError, TypeError, ValueError) as e:
        raise DomainError(f"{path}: malformed summary ({e})") from None


def resummarize(raw_path, aggregation: str, x_axis: str, rounding_floor: float = 1e-10) -> RateReport:
    target, records = read_raw_csv(raw_path)
    return summarize(target, records, aggregation, x_axis, rounding_floor)


def write_jsonl(path, rows: Iterable[Dict[str, Any]]) -> Path:
    text = "".join(json.dumps(r, sort_keys=True, ensure_ascii=False, default=_json_default) + "\n" for r in rows)
    return atomic_write(path, text)


def _json_default(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    return str(v)


def write_json(path, payload: Any) -> Path:
    return atomic_write(path, json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False, default=_json_default) + "\n")


def write_manifest(output_dir, config: Dict[str, Any], version: str, seed: int,
                   command: str, artifacts: Sequence[Path], extra: Optional[Dict[str, Any]] = None) -> Path:
    """
    manifest.json: subcomando, versión, semilla, configuración resuelta completa
    y sha256 de cada artefacto (nombres relativos a output_dir).
    """
    out = Path(output_dir)
    files = {}
    for art in sorted(Path(a) for a in artifacts):
        files[os.path.relpath(art, out)] = sha256_file(art)
    payload = {
        "command": command,
        "version": version,
        "seed": seed,
        "config": config,
        "artifacts": files,
    }
    if extra:
        payload["results"] = extra
    return write_json(out / "manifest.json", payload)


# ---------------------- Gráfico ----------------------
def emit_plot(summary: RateReport, path) -> Path:
    """
    Entrada:
        - summary: RateReport con ≥ 2 puntos positivos; path: destino .svg.
    Qué hace:
        - Dispersión log-log de (x, agregado), recta ajustada y anotación "slope=…".
        - Función pura de la entrada: mismo reporte → mismos bytes.
    Salida esperada:
        - Path del SVG. ArgumentError (sin archivo) si hay menos de 2 puntos.
    """
    pts = [(x, y) for _, x, y in summary.points if x > 0 and y > 0 and np.isfinite(x) and np.isfinite(y)]
    if len(pts) < 2:
        raise ArgumentError(f"plot needs at least 2 positive points, got {len(pts)}")
    lx = [math.log10(x) for x, _ in pts]
    ly = [math.log10(y) for _, y in pts]
    x0, x1 = min(lx), max(lx)
    y0, y1 = min(ly), max(ly)
    if summary.slope is not None:
        for xx in (x0, x1):
            yy = (summary.slope * xx * math.log(10.0) + summary.intercept) / math.log(10.0)
            y0, y1 = min(y0, yy), max(y1, yy)
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0

    def sx(v: float) -> float:
        return _PAD + (v - x0) / (x1 - x0) * (_SVG_W - 2 * _PAD)

    def sy(v: float) -> float:
        return _SVG_H - _PAD - (v - y0) / (y1 - y0) * (_SVG_H - 2 * _PAD)

    rows: List[str] = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg width="{_SVG_W}" height="{_SVG_H}" viewBox="0 0 {_SVG_W} {_SVG_H}" '
        'xmlns="http://www.w3.org/2000/svg">',
        f'<rect x="0" y="0" width="{_SVG_W}" height="{_SVG_H}" fill="white"/>',
        f'<line x1="{_PAD}" y1="{_SVG_H - _PAD}" x2="{_SVG_W - _PAD}" y2="{_SVG_H - _PAD}" stroke="black"/>',
        f'<line x1="{_PAD}" y1="{_PAD}" x2="{_PAD}" y2="{_SVG_H - _PAD}" stroke="black"/>',
        f'<text x="{_SVG_W / 2:.1f}" y="{_SVG_H - 15}" text-anchor="middle" font-size="14">'
        f'log10 {summary.x_axis}</text>',
        f'<text x="15" y="{_SVG_H / 2:.1f}" text-anchor="middle" font-size="14" '
        f'transform="rotate(-90 15 {_SVG_H / 2:.1f})">log10 {summary.target} ({summary.aggregation})</text>',
    ]
    for xx, yy in zip(lx, ly):
        rows.append(f'<circle cx="{sx(xx):.3f}" cy="{sy(yy):.3f}" r="4" fill="steelblue"/>')
    if summary.slope is not None:
        ya = (summary.slope * x0 * math.log(10.0) + summary.intercept) / math.log(10.0)
        yb = (summary.slope * x1 * math.log(10.0) + summary.intercept) / math.log(10.0)
        rows.append(f'<line x1="{sx(x0):.3f}" y1="{sy(ya):.3f}" x2="{sx(x1):.3f}" y2="{sy(yb):.3f}" '
                    'stroke="firebrick" stroke-width="2"/>')
        rows.append(f'<text x="{_SVG_W - _PAD:.1f}" y="{_PAD - 20}" text-anchor="end" font-size="16">'
                    f'slope={summary.slope:.3f}</text>')
    rows.append("</svg>")
    return atomic_write(path, "\n".join(rows) + "\n")

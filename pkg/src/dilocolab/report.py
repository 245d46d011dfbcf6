"""Delimited-text tables and plot-data series."""

from __future__ import annotations

import csv
import io
import logging

from dilocolab.datasets import eval_loss_rows
from dilocolab.engine import DATA_PARALLEL, DILOCO

log = logging.getLogger(__name__)

TABLE_SCHEMA = "dilocolab-table/1"


def write_table(columns, rows, out=None) -> str:
    """Comma-separated table preceded by a schema-version header line."""
    buf = io.StringIO()
    buf.write(f"# schema: {TABLE_SCHEMA}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow(["" if v is None else _fmt(v) for v in row])
    text = buf.getvalue()
    if out is not None:
        out.write(text)
    return text


def read_table_text(text: str) -> tuple[list[str], list[list[str]]]:
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], rows[1:]


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def pct_difference(loss: float, baseline: float) -> float:
    return 100.0 * (loss - baseline) / baseline


def pct_difference_series(rows, m_set=None) -> list[tuple]:
    """``(n, pct, "M=m")`` points of DiLoCo loss relative to Data-Parallel.

    ``rows`` are dicts with ``n``, ``algorithm``, ``m`` and ``loss``.
    """
    dp = {r["n"]: r["loss"] for r in rows if r["algorithm"] == DATA_PARALLEL}
    available = sorted({r["m"] for r in rows if r["algorithm"] == DILOCO})
    wanted = list(m_set) if m_set is not None else available
    series = []
    for m in wanted:
        for r in sorted((r for r in rows if r["algorithm"] == DILOCO and r["m"] == m), key=lambda r: r["n"]):
            if r["n"] in dp:
                series.append((r["n"], pct_difference(r["loss"], dp[r["n"]]), f"M={m}"))
    return series


def bundled_loss_rows():
    return eval_loss_rows()


def store_loss_rows(records) -> list[dict]:
    from dilocolab.sweep import summarize

    return [{"n": e.n, "algorithm": e.algorithm, "m": e.m, "loss": e.loss} for e in summarize(records)]


def outer_lr_series(records, m_set=None) -> list[tuple]:
    from dilocolab.sweep import outer_lr_summary

    best = outer_lr_summary(records)
    wanted = list(m_set) if m_set is not None else sorted({m for _, m in best})
    return [(n, eta, f"M={m}") for m in wanted for (n, mm), eta in sorted(best.items()) if mm == m]


def series_table(series) -> str:
    return write_table(["x", "y", "series"], series)

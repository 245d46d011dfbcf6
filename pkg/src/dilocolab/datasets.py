"""Bundled result tables shipped as delimited text."""

from __future__ import annotations

import csv
import io
from importlib import resources

SCHEMA_VERSION = "1"

DATASETS = (
    "model_sizes",
    "eval_loss",
    "extrapolation",
    "independent_fits",
    "joint_fits",
    "loo_residuals",
    "parametric_residuals",
    "bandwidth",
)

# Nominal sizes used for fitting; labels follow the loss table.
NOMINAL_N = {
    "35M": 35e6,
    "90M": 90e6,
    "180M": 180e6,
    "335M": 335e6,
    "550M": 550e6,
    "1.3B": 1.3e9,
    "2.4B": 2.4e9,
    "4B": 4e9,
    "10B": 10e9,
}


def _read_lines(name: str) -> list[str]:
    if name not in DATASETS:
        raise KeyError(f"unknown dataset {name!r}; choose from {', '.join(DATASETS)}")
    text = resources.files("dilocolab").joinpath("data", f"{name}.csv").read_text()
    return text.splitlines()


def header(name: str) -> dict[str, str]:
    """Key/value pairs from the leading ``# key: value`` comment lines."""
    meta = {}
    for line in _read_lines(name):
        if not line.startswith("#"):
            break
        key, _, value = line[1:].partition(":")
        meta[key.strip()] = value.strip()
    return meta


def read_table(name: str) -> list[dict[str, str]]:
    lines = [ln for ln in _read_lines(name) if ln and not ln.startswith("#")]
    return list(csv.DictReader(io.StringIO("\n".join(lines))))


def eval_loss_rows() -> list[dict]:
    """Parsed loss table: ``n`` float, ``m`` int or None, ``loss`` float."""
    rows = []
    for r in read_table("eval_loss"):
        rows.append(
            {
                "label": r["label"],
                "n": float(r["n"]),
                "algorithm": r["algorithm"],
                "m": int(r["m"]) if r["m"] else None,
                "loss": float(r["loss"]),
                "pct_printed": float(r["pct_printed"]) if r["pct_printed"] else None,
            }
        )
    return rows

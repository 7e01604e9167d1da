"""Figure rendering from the experiment CSV schemas.

Each documented schema maps to one figure kind; a CSV whose header does not
match its schema is refused before anything is written.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


class SchemaError(Exception):
    pass


SCHEMAS = {
    "table1_curve": ["n", "mode", "seed", "accuracy"],
    "table3_bars": ["condition", "seed", "accuracy"],
    "table4_bars": ["method", "seed", "accuracy"],
    "noise_curves": ["n", "snr", "seed", "accuracy"],
    "loss_history": ["update", "loss", "lr"],
}


@dataclass(frozen=True)
class PlotSpec:
    csv_path: str
    kind: str
    out_path: str

    def __post_init__(self):
        if self.kind not in SCHEMAS:
            raise SchemaError(f"unknown figure kind {self.kind!r}")


def _load_rows(spec: PlotSpec):
    schema = SCHEMAS[spec.kind]
    with open(spec.csv_path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{spec.csv_path}: empty file") from None
        if header != schema:
            missing = [c for c in schema if c not in header]
            raise SchemaError(
                f"{spec.csv_path}: header {header} does not match {schema}"
                + (f" (missing column {missing[0]!r})" if missing else "")
            )
        rows = [dict(zip(schema, row)) for row in reader if row]
    if not rows:
        raise SchemaError(f"{spec.csv_path}: no data rows")
    return rows


def _mean_err(values):
    arr = np.array(values, dtype=np.float64)
    return arr.mean(), arr.std()


def _grouped(rows, key):
    groups = {}
    for row in rows:
        groups.setdefault(row[key], []).append(float(row["accuracy"]))
    return groups


def plot(spec: PlotSpec) -> None:
    rows = _load_rows(spec)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    if spec.kind == "table1_curve":
        for mode in dict.fromkeys(r["mode"] for r in rows):
            pts = _grouped([r for r in rows if r["mode"] == mode], "n")
            ns = sorted(pts, key=int)
            means, errs = zip(*(_mean_err(pts[n]) for n in ns))
            ax.errorbar([int(n) for n in ns], means, yerr=errs, marker="o",
                        capsize=3, label=mode)
        ax.set_xlabel("training images per class")
        ax.set_ylabel("accuracy")
        ax.legend()
    elif spec.kind in ("table3_bars", "table4_bars"):
        key = "condition" if spec.kind == "table3_bars" else "method"
        groups = _grouped(rows, key)
        labels = list(dict.fromkeys(r[key] for r in rows))
        means, errs = zip(*(_mean_err(groups[l]) for l in labels))
        ax.bar(range(len(labels)), means, yerr=errs, capsize=3)
        ax.set_xticks(range(len(labels)), labels, rotation=20)
        ax.set_ylabel("accuracy")
    elif spec.kind == "noise_curves":
        for snr in dict.fromkeys(r["snr"] for r in rows):
            pts = _grouped([r for r in rows if r["snr"] == snr], "n")
            ns = sorted(pts, key=int)
            means, errs = zip(*(_mean_err(pts[n]) for n in ns))
            label = "clean" if snr == "none" else f"{snr} dB"
            ax.errorbar([int(n) for n in ns], means, yerr=errs, marker="o",
                        capsize=3, label=label)
        ax.set_xlabel("training images per class")
        ax.set_ylabel("accuracy")
        ax.legend()
    else:  # loss_history
        updates = [int(r["update"]) for r in rows]
        losses = [float(r["loss"]) for r in rows]
        ax.plot(updates, losses, linewidth=0.8)
        ax.set_xlabel("update")
        ax.set_ylabel("training loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    out = Path(spec.out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=140)
    plt.close(fig)

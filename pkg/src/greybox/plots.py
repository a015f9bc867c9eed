"""Figures for grid reports, drawn with matplotlib's Agg canvas (no display needed)."""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .io import atomic_write_bytes


def _axes(width=6.0, height=3.2):
    fig = Figure(figsize=(width, height), dpi=120)
    FigureCanvasAgg(fig)
    ax = fig.add_subplot()
    ax.spines[["top", "right"]].set_visible(False)
    return fig, ax


def _save(fig: Figure, path) -> str:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", bbox_inches="tight", metadata={"Software": None})
    atomic_write_bytes(path, buf.getvalue())
    return str(path)


def gap_by_unit(unit_gaps: list[dict], path) -> str:
    """Bar chart of the mean white-box gap per release unit."""
    fig, ax = _axes()
    labels = [g["unit_id"] for g in unit_gaps]
    values = [g["mean_gap"] for g in unit_gaps]
    ax.bar(np.arange(len(labels)), values, color="0.45")
    ax.set_xticks(np.arange(len(labels)), labels, rotation=45, ha="right")
    ax.axhline(0.0, color="k", lw=0.6)
    ax.set_ylabel("white-box ASR - TSR")
    ax.set_title("Transferability gap by release unit")
    return _save(fig, path)


def segment_bars(segments: list[dict], key: str, path) -> str:
    """Grouped bars of mean TSR per release unit, one series per value of ``key``."""
    fig, ax = _axes(7.0, 3.2)
    units = list(dict.fromkeys(s["unit_id"] for s in segments))
    levels = sorted({str(s[key]) for s in segments})
    width = 0.8 / max(len(levels), 1)
    x = np.arange(len(units))
    for i, level in enumerate(levels):
        vals = {s["unit_id"]: s["mean_tsr"] for s in segments if str(s[key]) == level}
        ax.bar(x + i * width - 0.4 + width / 2, [vals.get(u, np.nan) for u in units], width, label=level)
    ax.set_xticks(x, units, rotation=45, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("mean TSR")
    ax.legend(frameon=False, title=key)
    return _save(fig, path)


def attack_comparison(rows: list[dict], path) -> str:
    """White-box ASR, backbone-attack TSR and black-box TSR side by side, per target mode."""
    fig, ax = _axes(5.0, 3.2)
    kinds = list(dict.fromkeys(r["kind"] for r in rows))
    modes = sorted({r["mode"] for r in rows})
    width = 0.8 / max(len(modes), 1)
    x = np.arange(len(kinds))
    for i, mode in enumerate(modes):
        vals = {r["kind"]: r["mean_rate"] for r in rows if r["mode"] == mode}
        ax.bar(x + i * width - 0.4 + width / 2, [vals.get(k, np.nan) for k in kinds], width, label=mode)
    ax.set_xticks(x, kinds)
    ax.set_ylim(0, 1)
    ax.set_ylabel("success rate on target")
    ax.legend(frameon=False, title="target mode")
    return _save(fig, path)


def render_all(summary: dict, out_dir) -> list[str]:
    out = Path(out_dir) / "figures"
    written = []
    if summary["unit_gaps"]:
        written.append(gap_by_unit(summary["unit_gaps"], out / "gap_by_unit.png"))
    if summary["by_mode"]:
        written.append(segment_bars(summary["by_mode"], "mode", out / "tsr_by_mode.png"))
    if summary["by_dataset"]:
        written.append(segment_bars(summary["by_dataset"], "dataset", out / "tsr_by_dataset.png"))
    if summary["attack_comparison"]:
        written.append(attack_comparison(summary["attack_comparison"], out / "attack_comparison.png"))
    return written

"""Read a grid ``results.csv`` and summarise it.

The summary holds per-unit white-box gaps, segmentations by target tuning
mode, dataset and targeting, ANOVA tables over target meta-information, the
knowledge curve over grey-box units and the white-box / backbone-attack /
black-box comparison.  Every table is also written as CSV so that plots can be
redrawn elsewhere.
"""

from __future__ import annotations

import csv
import math
import os
from collections import defaultdict
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .grid import BLACK_BOX, RESULT_COLUMNS, WHITE_BOX, enumerate_release_units, parse_model_id
from .io import atomic_write_csv, atomic_write_json, fmt_float
from .metrics import TransferRecord, anova_f

UNIT_ORDER = {u.id: i for i, u in enumerate(enumerate_release_units())}
UNIT_BITS = {u.id: u.bitstring for u in enumerate_release_units()}
UNIT_KNOWN = {u.id: u.known_count for u in enumerate_release_units()}
ANOVA_FACTORS = ("mode", "dataset", "depth")

GAP_COLUMNS = ("unit_id", "known_flags", "mean_gap", "mean_tsr", "cells")
SEGMENT_COLUMNS = ("segment", "level", "unit_id", "mean_tsr", "mean_gap", "cells")
ANOVA_COLUMNS = ("response", "factor", "levels", "f", "df_between", "df_within", "ss_between", "ss_within", "note")
COMPARISON_COLUMNS = ("kind", "mode", "attack", "mean_rate", "cells")
KNOWLEDGE_COLUMNS = ("known_fields", "mean_tsr", "cells")


# ---------------------------------------------------------------- reading


def _parse_float(value: str, row: int, column: str, lo: float, hi: float) -> float:
    try:
        x = float(value)
    except ValueError:
        raise ValidationError(f"row {row}, column {column!r}: {value!r} is not a number") from None
    if not (lo <= x <= hi) or math.isnan(x):
        raise ValidationError(f"row {row}, column {column!r}: {x} outside [{lo}, {hi}]")
    return x


def _parse_int(value: str, row: int, column: str, lo: int) -> int:
    try:
        x = int(value)
    except ValueError:
        raise ValidationError(f"row {row}, column {column!r}: {value!r} is not an integer") from None
    if x < lo:
        raise ValidationError(f"row {row}, column {column!r}: {x} is below {lo}")
    return x


def parse_results(lines) -> list[TransferRecord]:
    """Parse CSV text lines into records; schema errors name the row and column.

    Rows are numbered from 1 for the first data row (the header is row 0).
    """
    reader = csv.reader(lines)
    header = next(reader, None)
    if header is None:
        raise ValidationError("row 0: missing header")
    if tuple(header) != RESULT_COLUMNS:
        for i, (got, want) in enumerate(zip(header, RESULT_COLUMNS)):
            if got != want:
                raise ValidationError(f"row 0, column {i + 1}: expected header {want!r}, got {got!r}")
        raise ValidationError(f"row 0: expected {len(RESULT_COLUMNS)} columns, got {len(header)}")
    records = []
    ln2 = math.log(2.0)
    for row_no, row in enumerate(reader, start=1):
        if not row:
            continue
        if len(row) != len(RESULT_COLUMNS):
            raise ValidationError(f"row {row_no}: expected {len(RESULT_COLUMNS)} columns, got {len(row)}")
        v = dict(zip(RESULT_COLUMNS, row))
        for col in ("target_id", "proxy_id", "backbone", "pretext", "unit_id", "attack"):
            if not v[col]:
                raise ValidationError(f"row {row_no}, column {col!r}: empty value")
        if v["unit_id"] not in UNIT_ORDER:
            raise ValidationError(f"row {row_no}, column 'unit_id': unknown release unit {v['unit_id']!r}")
        if v["targeted"] not in ("0", "1"):
            raise ValidationError(f"row {row_no}, column 'targeted': expected 0 or 1, got {v['targeted']!r}")
        records.append(TransferRecord(
            v["target_id"], v["proxy_id"], v["backbone"], v["pretext"], v["unit_id"], v["attack"],
            v["targeted"] == "1",
            _parse_float(v["asr"], row_no, "asr", 0.0, 1.0),
            _parse_float(v["tsr"], row_no, "tsr", 0.0, 1.0),
            _parse_float(v["mean_clean_entropy"], row_no, "mean_clean_entropy", 0.0, math.inf),
            _parse_float(v["mean_adv_entropy"], row_no, "mean_adv_entropy", 0.0, math.inf),
            _parse_float(v["mean_js"], row_no, "mean_js", 0.0, ln2 + 1e-12),
            _parse_int(v["n_samples"], row_no, "n_samples", 1),
            _parse_int(v["seed"], row_no, "seed", 0),
        ))
    return records


def read_results(path) -> list[TransferRecord]:
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise ValidationError(f"results file not found: {path}")
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_results(fh)


# ---------------------------------------------------------------- aggregation


def is_primary(r: TransferRecord) -> bool:
    """Rows crafted on proxies (or white-box) rather than backbone-attack or square rows."""
    return not (r.attack.startswith("backbone-") or r.attack.startswith("square-"))


def target_meta(target_id: str) -> dict:
    try:
        return parse_model_id(target_id)
    except ValidationError:
        return {"family": "?", "pretext": "?", "dataset": "?", "mode": "?", "depth": "?", "batch_size": "?"}


def _baselines(records) -> dict[tuple, float]:
    return {(r.target_id, r.attack, r.targeted): r.asr for r in records if r.unit_id == WHITE_BOX}


def row_gaps(records: list[TransferRecord]) -> list[float]:
    """White-box ASR minus TSR for each primary row, matched on target, attack and targeting."""
    base = _baselines(records)
    gaps = []
    for r in records:
        key = (r.target_id, r.attack, r.targeted)
        if key not in base:
            raise ValidationError(f"no white-box baseline for target {r.target_id!r} ({r.attack})")
        gaps.append(base[key] - r.tsr)
    return gaps


def _mean(values) -> float:
    return float(np.mean(values)) if len(values) else float("nan")


def unit_gap_table(primary: list[TransferRecord], gaps: list[float]) -> list[dict]:
    cells = defaultdict(list)
    for r, g in zip(primary, gaps):
        cells[r.unit_id].append((g, r.tsr))
    return [{"unit_id": u, "known_flags": UNIT_BITS[u], "mean_gap": _mean([g for g, _ in v]),
             "mean_tsr": _mean([t for _, t in v]), "cells": len(v)}
            for u, v in sorted(cells.items(), key=lambda kv: UNIT_ORDER[kv[0]])]


def segment_table(primary, gaps, key) -> list[dict]:
    cells = defaultdict(list)
    for r, g in zip(primary, gaps):
        level = int(r.targeted) if key == "targeted" else target_meta(r.target_id)[key]
        cells[(str(level), r.unit_id)].append((g, r.tsr))
    return [{key: level, "unit_id": u, "mean_tsr": _mean([t for _, t in v]),
             "mean_gap": _mean([g for g, _ in v]), "cells": len(v)}
            for (level, u), v in sorted(cells.items(), key=lambda kv: (kv[0][0], UNIT_ORDER[kv[0][1]]))]


def anova_tables(records: list[TransferRecord]) -> list[dict]:
    """One-way ANOVA of entropy and JS responses across each meta-information factor."""
    clean = {}
    for r in records:
        clean.setdefault(r.target_id, r.mean_clean_entropy)
    grey = [r for r in records if is_primary(r) and r.unit_id not in (WHITE_BOX, BLACK_BOX)]
    responses = {
        "clean_entropy": [(t, h) for t, h in clean.items()],
        "adv_entropy": [(r.target_id, r.mean_adv_entropy) for r in grey],
        "js": [(r.target_id, r.mean_js) for r in grey],
    }
    rows = []
    for response, values in responses.items():
        for factor in ANOVA_FACTORS:
            groups = defaultdict(list)
            for target, value in values:
                groups[str(target_meta(target)[factor])].append(value)
            levels = {k: len(v) for k, v in sorted(groups.items())}
            row = {"response": response, "factor": factor, "levels": levels, "f": None, "df_between": None,
                   "df_within": None, "ss_between": None, "ss_within": None, "note": ""}
            try:
                res = anova_f([groups[k] for k in sorted(groups)])
            except ValidationError as exc:
                row["note"] = str(exc)
            else:
                row.update(f=res.f, df_between=res.df_between, df_within=res.df_within,
                           ss_between=res.ss_between, ss_within=res.ss_within,
                           note="zero within-group variance" if res.infinite else "")
            rows.append(row)
    return rows


def reference_attack(records: list[TransferRecord]) -> str | None:
    """The white-box PGD attack the backbone and square rows are compared with."""
    iters = sorted({int(r.attack.rsplit("-", 1)[1]) for r in records
                    if r.unit_id == WHITE_BOX and r.attack.startswith("pgd-") and not r.targeted})
    if not iters:
        return None
    wanted = {int(r.attack.rsplit("-", 1)[1]) for r in records if r.attack.startswith("backbone-pgd-")}
    match = [i for i in iters if i in wanted]
    return f"pgd-{(match or iters)[0]}"


def attack_comparison(records: list[TransferRecord]) -> list[dict]:
    """Mean success on the target for white-box PGD, grey-box PGD, the backbone attack and square.

    Only untargeted rows on targets that have all of the compared rows enter.
    """
    ref = reference_attack(records)
    kinds = {"white-box": [], "grey-box": [], "backbone": [], "black-box": []}
    for r in records:
        if r.targeted:
            continue
        if r.unit_id == WHITE_BOX and r.attack == ref:
            kinds["white-box"].append((r, r.asr))
        elif r.attack == ref and r.unit_id != BLACK_BOX:
            kinds["grey-box"].append((r, r.tsr))
        elif r.attack.startswith("backbone-"):
            kinds["backbone"].append((r, r.tsr))
        elif r.attack.startswith("square-"):
            kinds["black-box"].append((r, r.tsr))
    present = [k for k in ("white-box", "backbone", "black-box") if kinds[k]]
    if not present:
        return []
    common = set.intersection(*({r.target_id for r, _ in kinds[k]} for k in present))
    rows = []
    for kind, items in kinds.items():
        items = [(r, v) for r, v in items if r.target_id in common]
        if not items:
            continue
        by_mode = defaultdict(list)
        for r, v in items:
            by_mode[str(target_meta(r.target_id)["mode"])].append(v)
        by_mode["all"] = [v for _, v in items]
        attack = sorted({r.attack for r, _ in items})
        for mode in sorted(by_mode):
            rows.append({"kind": kind, "mode": mode, "attack": ";".join(attack),
                         "mean_rate": _mean(by_mode[mode]), "cells": len(by_mode[mode])})
    return rows


def knowledge_curve(primary, gaps) -> list[dict]:
    cells = defaultdict(list)
    for r in primary:
        if r.unit_id not in (WHITE_BOX, BLACK_BOX):
            cells[UNIT_KNOWN[r.unit_id]].append(r.tsr)
    return [{"known_fields": k, "mean_tsr": _mean(v), "cells": len(v)} for k, v in sorted(cells.items())]


def summarize(records: list[TransferRecord]) -> dict:
    primary = [r for r in records if is_primary(r)]
    gaps = row_gaps(primary)
    return {
        "rows": len(records),
        "targets": len({r.target_id for r in records}),
        "unit_gaps": unit_gap_table(primary, gaps),
        "by_mode": segment_table(primary, gaps, "mode"),
        "by_dataset": segment_table(primary, gaps, "dataset"),
        "by_targeted": segment_table(primary, gaps, "targeted"),
        "anova": anova_tables(records),
        "knowledge_curve": knowledge_curve(primary, gaps),
        "attack_comparison": attack_comparison(records),
    }


# ---------------------------------------------------------------- writing


def _cell(value) -> str:
    if isinstance(value, float):
        return fmt_float(value)
    if isinstance(value, dict):
        return ";".join(f"{k}={v}" for k, v in value.items())
    return "" if value is None else str(value)


def _rows(items, columns) -> list[list[str]]:
    return [[_cell(item.get(c)) for c in columns] for item in items]


def write_report(summary: dict, out_dir, figures: bool = True) -> dict:
    out = Path(out_dir)
    written = {"summary": str(out / "summary.json")}
    atomic_write_json(out / "summary.json", _json_safe(summary))
    atomic_write_csv(out / "unit_gaps.csv", GAP_COLUMNS, _rows(summary["unit_gaps"], GAP_COLUMNS))
    segments = []
    for key in ("mode", "dataset", "targeted"):
        segments += [{**s, "segment": key, "level": s[key]} for s in summary[f"by_{key}"]]
    atomic_write_csv(out / "segments.csv", SEGMENT_COLUMNS, _rows(segments, SEGMENT_COLUMNS))
    atomic_write_csv(out / "anova.csv", ANOVA_COLUMNS, _rows(summary["anova"], ANOVA_COLUMNS))
    atomic_write_csv(out / "comparison.csv", COMPARISON_COLUMNS,
                     _rows(summary["attack_comparison"], COMPARISON_COLUMNS))
    atomic_write_csv(out / "knowledge.csv", KNOWLEDGE_COLUMNS, _rows(summary["knowledge_curve"], KNOWLEDGE_COLUMNS))
    for name in ("unit_gaps", "segments", "anova", "comparison", "knowledge"):
        written[name] = str(out / f"{name}.csv")
    if figures:
        from .plots import render_all

        written["figures"] = render_all(summary, out)
    return written


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_safe(v) for v in obj]
    return obj


def report(results_csv, out_dir, figures: bool = True) -> dict:
    """Read ``results_csv``, summarise it and write the summary files to ``out_dir``."""
    summary = summarize(read_results(results_csv))
    return {"summary": summary, "files": write_report(summary, out_dir, figures)}

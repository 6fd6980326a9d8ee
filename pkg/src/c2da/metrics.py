"""Dice / ASSD with spacing awareness and per-tissue, per-GW report tables."""

from __future__ import annotations

import json
import math
from collections import defaultdict

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

__all__ = [
    "TISSUE_CLASSES",
    "COLUMN_NAMES",
    "dice",
    "extract_surface",
    "assd",
    "subject_metrics",
    "build_report",
    "format_table",
    "report_to_csv",
]

TISSUE_CLASSES = (1, 2, 3, 4, 5, 6)
COLUMN_NAMES = {1: "CSF", 2: "GM", 3: "WM", 4: "Ven.", 5: "Cer.", 6: "Bra."}

_FACE = ndimage.generate_binary_structure(3, 1)


def _grid(x):
    return np.asarray(getattr(x, "data", x))


def _check_pair(pred, gt):
    p, g = _grid(pred), _grid(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} != ground-truth shape {g.shape}")
    return p, g


def dice(pred, gt, cls: int) -> float:
    """Overlap ``2|P & G| / (|P| + |G|)`` for one class; 1.0 when both are empty."""
    p, g = _check_pair(pred, gt)
    pm, gm = p == cls, g == cls
    denom = int(pm.sum()) + int(gm.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pm, gm).sum()) / denom


def extract_surface(mask) -> np.ndarray:
    """Indices (k x 3) of mask voxels with a face neighbour outside the mask.

    The grid border counts as outside.
    """
    m = np.asarray(mask, dtype=bool)
    if m.ndim == 2:
        m = m[..., None]
    interior = ndimage.binary_erosion(m, structure=_FACE, border_value=0)
    return np.argwhere(m & ~interior)


def assd(pred, gt, cls: int, spacing=None) -> float:
    """Average symmetric surface distance in mm.

    Returns ``nan`` when exactly one of the two surfaces is empty and 0.0 when
    both are.
    """
    p, g = _check_pair(pred, gt)
    if spacing is None:
        sp_p = getattr(pred, "spacing", None)
        sp_g = getattr(gt, "spacing", None)
        if sp_p is not None and sp_g is not None and tuple(sp_p) != tuple(sp_g):
            raise ValueError(f"spacing mismatch: {sp_p} vs {sp_g}")
        spacing = sp_p or sp_g or (1.0, 1.0, 1.0)
    else:
        for other in (getattr(pred, "spacing", None), getattr(gt, "spacing", None)):
            if other is not None and not np.allclose(other, spacing):
                raise ValueError(f"spacing {tuple(spacing)} disagrees with label spacing {other}")
    spacing = np.asarray(spacing, dtype=np.float64)

    sp = extract_surface(p == cls) * spacing
    sg = extract_surface(g == cls) * spacing
    if len(sp) == 0 and len(sg) == 0:
        return 0.0
    if len(sp) == 0 or len(sg) == 0:
        return math.nan
    d_pg, _ = cKDTree(sg).query(sp)
    d_gp, _ = cKDTree(sp).query(sg)
    return float((d_pg.sum() + d_gp.sum()) / (len(sp) + len(sg)))


def subject_metrics(pred, gt, spacing=None) -> dict:
    if spacing is None:
        spacing = getattr(gt, "spacing", (1.0, 1.0, 1.0))
    row = {"dice": {}, "assd": {}}
    for c in TISSUE_CLASSES:
        row["dice"][c] = dice(pred, gt, c)
        row["assd"][c] = assd(_grid(pred), _grid(gt), c, spacing)
    row["mean_dice"] = float(np.mean([row["dice"][c] for c in TISSUE_CLASSES]))
    defined = [v for v in row["assd"].values() if not math.isnan(v)]
    row["mean_assd"] = float(np.mean(defined)) if defined else math.nan
    return row


def _stats(values):
    vals = [v for v in values if not math.isnan(v)]
    if not vals:
        return math.nan, math.nan
    arr = np.asarray(vals, dtype=np.float64)
    return float(arr.mean()), float(arr.std())  # population std


def _summarize(rows) -> dict:
    per_class = {}
    for c in TISSUE_CLASSES:
        dm, ds = _stats([r["dice"][c] for r in rows])
        am, asd_ = _stats([r["assd"][c] for r in rows])
        per_class[COLUMN_NAMES[c]] = {
            "dice_mean": dm,
            "dice_std": ds,
            "assd_mean": am,
            "assd_std": asd_,
            "n_undefined": sum(math.isnan(r["assd"][c]) for r in rows),
        }
    dm, ds = _stats([r["mean_dice"] for r in rows])
    am, asd_ = _stats([r["mean_assd"] for r in rows])
    mean = {
        "dice_mean": dm,
        "dice_std": ds,
        "assd_mean": am,
        "assd_std": asd_,
        "n_undefined": sum(math.isnan(r["mean_assd"]) for r in rows),
    }
    return {"per_class": per_class, "mean": mean, "n_subjects": len(rows)}


def build_report(pairs) -> dict:
    """Aggregate ``(pred, gt, record)`` triples into a metrics report.

    ``record`` needs ``subject_id`` and ``gw`` attributes.  The mean Dice of a
    subject is the average of its six per-class Dice values; report-level
    statistics then average over subjects with a population std.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("build_report needs at least one (pred, gt, record) triple")
    rows = []
    for pred, gt, rec in pairs:
        m = subject_metrics(pred, gt)
        m["subject_id"] = rec.subject_id
        m["gw"] = int(rec.gw)
        rows.append(m)

    report = _summarize(rows)
    by_gw = defaultdict(list)
    for r in rows:
        by_gw[r["gw"]].append(r)
    report["per_gw"] = [dict(gw=gw, **_summarize(by_gw[gw])) for gw in sorted(by_gw)]
    report["per_subject"] = [
        {
            "subject_id": r["subject_id"],
            "gw": r["gw"],
            "dice": {COLUMN_NAMES[c]: r["dice"][c] for c in TISSUE_CLASSES},
            "assd": {COLUMN_NAMES[c]: r["assd"][c] for c in TISSUE_CLASSES},
            "mean_dice": r["mean_dice"],
            "mean_assd": r["mean_assd"],
        }
        for r in rows
    ]
    return report


def _nan_to_none(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_nan_to_none(v) for v in obj]
    return obj


def report_to_json(report: dict) -> str:
    return json.dumps(_nan_to_none(report), indent=1, sort_keys=True) + "\n"


def _cell(mean, std, scale, digits):
    if mean is None or (isinstance(mean, float) and math.isnan(mean)):
        return "n/a"
    return f"{mean * scale:.{digits}f}±{std * scale:.{digits}f}"


def _table_rows(report):
    cols = [COLUMN_NAMES[c] for c in TISSUE_CLASSES]
    yield "all", [report["per_class"][k] for k in cols] + [report["mean"]]
    for g in report.get("per_gw", []):
        yield f"GW{g['gw']}", [g["per_class"][k] for k in cols] + [g["mean"]]


def format_table(report: dict) -> str:
    """Aligned text table: Dice [%] then ASSD (mm), Table-1 column order."""
    cols = [COLUMN_NAMES[c] for c in TISSUE_CLASSES] + ["Mean"]
    lines = []
    for title, key, scale, digits in (("Dice [%]", "dice", 100.0, 1), ("ASSD (mm)", "assd", 1.0, 2)):
        lines.append(title)
        lines.append("".join(f"{h:>14}" for h in ["group"] + cols))
        for name, cells in _table_rows(report):
            vals = [_cell(c[f"{key}_mean"], c[f"{key}_std"], scale, digits) for c in cells]
            lines.append("".join(f"{v:>14}" for v in [name] + vals))
        lines.append("")
    return "\n".join(lines)


def report_to_csv(report: dict) -> str:
    cols = [COLUMN_NAMES[c] for c in TISSUE_CLASSES] + ["Mean"]
    header = ["group"] + [f"dice_{c}" for c in cols] + [f"assd_{c}" for c in cols]
    out = [",".join(header)]
    for name, cells in _table_rows(report):
        vals = [name]
        for key in ("dice", "assd"):
            for c in cells:
                v = c[f"{key}_mean"]
                vals.append("" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}")
        out.append(",".join(vals))
    return "\n".join(out) + "\n"

"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

import numpy as np

from .volume import LabelMap, Volume


def check_volume(v, name="volume") -> Volume:
    if isinstance(v, Volume):
        return v
    if isinstance(v, np.ndarray):
        return Volume(v)
    raise TypeError(f"{name}: expected a Volume or ndarray, got {type(v).__name__}")


def check_volume_list(xs, name="X", allow_empty=False) -> list:
    if isinstance(xs, (Volume, np.ndarray)):
        xs = [xs]
    xs = [check_volume(v, f"{name}[{i}]") for i, v in enumerate(xs)]
    if not xs and not allow_empty:
        raise ValueError(f"{name}: at least one volume is required")
    return xs


def check_label_list(ys, volumes, name="y") -> list:
    if ys is None:
        raise ValueError(f"{name}: labels are required")
    if isinstance(ys, (LabelMap, np.ndarray)):
        ys = [ys]
    out = []
    for i, lab in enumerate(ys):
        if not isinstance(lab, LabelMap):
            lab = LabelMap(np.asarray(lab), getattr(volumes[i], "spacing", (1.0, 1.0, 1.0)))
        out.append(lab)
    if len(out) != len(volumes):
        raise ValueError(f"{name}: {len(out)} label maps for {len(volumes)} volumes")
    for i, (lab, v) in enumerate(zip(out, volumes)):
        if lab.shape != check_volume(v).shape:
            raise ValueError(f"{name}[{i}]: shape {lab.shape} does not match volume {check_volume(v).shape}")
    return out

"""Volume and label-map data model, the ``mvol`` container, and slice primitives.

Grids are indexed ``(h, w, n)``; ``n`` is the slice (through-plane) axis.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

__all__ = [
    "TISSUE_LEGEND",
    "N_CLASSES",
    "MvolFormatError",
    "MvolCorruptionError",
    "Volume",
    "LabelMap",
    "SliceImage",
    "SubjectRecord",
    "load_volume",
    "save_volume",
    "zscore_normalize",
    "resample_slice",
    "rotate_slice",
    "extract_slices",
    "read_manifest",
    "write_manifest",
]

TISSUE_LEGEND = {
    0: "background",
    1: "CSF",
    2: "GM",
    3: "WM",
    4: "ventricles",
    5: "cerebellum",
    6: "brainstem",
}
N_CLASSES = len(TISSUE_LEGEND)

DOMAINS = ("source", "target", "deformed_source")

_MAGIC = b"MVOL"
_DTYPES = {"f32": np.dtype("<f4"), "i8": np.dtype("i1")}


class MvolFormatError(ValueError):
    """Header of an mvol file cannot be parsed."""


class MvolCorruptionError(ValueError):
    """Payload of an mvol file disagrees with its header."""


def _check_spacing(spacing) -> tuple:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
        raise ValueError(f"spacing must be three positive finite values, got {spacing}")
    return spacing


@dataclass
class Volume:
    """A 3D scalar grid ``data[h, w, n]`` with physical spacing in mm."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        H, W, N = data.shape
        if H < 8 or W < 8 or N < 1:
            raise ValueError(f"volume extents must satisfy H>=8, W>=8, N>=1; got {data.shape}")
        data = data.astype(np.float32, copy=False)
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        self.data = data
        self.spacing = _check_spacing(self.spacing)

    @property
    def shape(self) -> tuple:
        return self.data.shape


@dataclass
class LabelMap:
    """Integer tissue-class grid; values are restricted to :data:`TISSUE_LEGEND`."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    legend: dict = field(default_factory=lambda: dict(TISSUE_LEGEND))

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"label data must be 3D, got shape {data.shape}")
        if data.size and (data.min() < 0 or data.max() >= N_CLASSES):
            raise ValueError(
                f"label values must lie in 0..{N_CLASSES - 1}, found range "
                f"[{data.min()}, {data.max()}]"
            )
        if not np.issubdtype(data.dtype, np.integer):
            if not np.all(np.equal(np.mod(data, 1), 0)):
                raise ValueError("label data must be integral")
        self.data = data.astype(np.int8, copy=False)
        self.spacing = _check_spacing(self.spacing)

    @property
    def shape(self) -> tuple:
        return self.data.shape


@dataclass
class SliceImage:
    data: np.ndarray
    subject_id: str = ""
    index: int = 0

    @property
    def provenance(self) -> tuple:
        return (self.subject_id, self.index)


@dataclass
class SubjectRecord:
    """One entry of a cohort manifest.

    Paths are stored relative to the manifest's directory when written.
    ``split`` is one of ``source``, ``target_train``, ``target_val``,
    ``target_test`` or ``deformed_source``.
    """

    subject_id: str
    gw: int
    domain: str
    volume_path: str
    label_path: Optional[str] = None
    split: Optional[str] = None

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")
        if self.domain in ("source", "deformed_source") and not self.label_path:
            raise ValueError(f"{self.domain} record {self.subject_id!r} requires a label path")
        self.gw = int(self.gw)

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "gw": self.gw,
            "domain": self.domain,
            "volume_path": self.volume_path,
            "label_path": self.label_path,
            "split": self.split,
        }


# --------------------------------------------------------------------------
# mvol container
# --------------------------------------------------------------------------

def _encode(v) -> bytes:
    if isinstance(v, LabelMap):
        dtype = "i8"
    elif isinstance(v, Volume):
        dtype = "f32"
    else:
        raise TypeError(f"expected Volume or LabelMap, got {type(v).__name__}")
    H, W, N = v.data.shape
    header = json.dumps(
        {"dims": [H, W, N], "spacing": list(v.spacing), "dtype": dtype},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    # payload is row-major over (n, h, w)
    payload = np.ascontiguousarray(np.transpose(v.data, (2, 0, 1)), dtype=_DTYPES[dtype])
    return _MAGIC + struct.pack("<I", len(header)) + header + payload.tobytes()


def save_volume(v, path) -> None:
    """Write a :class:`Volume` or :class:`LabelMap` to ``path`` as mvol.

    Output bytes depend only on the grid and spacing.
    """
    if isinstance(v, LabelMap):
        # re-run invariants in case data was mutated after construction
        if v.data.min() < 0 or v.data.max() >= N_CLASSES:
            raise ValueError(f"label values must lie in 0..{N_CLASSES - 1}")
    elif isinstance(v, Volume) and not np.all(np.isfinite(v.data)):
        raise ValueError("volume contains non-finite values")
    blob = _encode(v)
    with open(os.fspath(path), "wb") as fh:
        fh.write(blob)


def load_volume(path):
    """Read an mvol file; ``i8`` payloads come back as :class:`LabelMap`."""
    with open(os.fspath(path), "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:4] != _MAGIC:
        raise MvolFormatError(f"{path}: missing MVOL magic")
    (hlen,) = struct.unpack("<I", blob[4:8])
    if 8 + hlen > len(blob):
        raise MvolFormatError(f"{path}: header length {hlen} exceeds file size")
    try:
        header = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
        dims = [int(d) for d in header["dims"]]
        spacing = [float(s) for s in header["spacing"]]
        dtype = header["dtype"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise MvolFormatError(f"{path}: malformed header ({exc})") from exc
    if dtype not in _DTYPES or len(dims) != 3 or len(spacing) != 3:
        raise MvolFormatError(f"{path}: unsupported header {header}")
    H, W, N = dims
    np_dtype = _DTYPES[dtype]
    payload = blob[8 + hlen :]
    expected = H * W * N * np_dtype.itemsize
    if len(payload) != expected:
        raise MvolCorruptionError(
            f"{path}: payload has {len(payload)} bytes, header implies {expected}"
        )
    flat = np.frombuffer(payload, dtype=np_dtype).reshape(N, H, W)
    data = np.ascontiguousarray(np.transpose(flat, (1, 2, 0)))
    if dtype == "i8":
        return LabelMap(data, spacing)
    return Volume(data.astype(np.float32), spacing)


# --------------------------------------------------------------------------
# intensity normalization
# --------------------------------------------------------------------------

def zscore_normalize(v: Volume, mask: Optional[LabelMap] = None) -> Volume:
    """Shift and scale ``v`` so the normalization region has mean 0, std 1.

    The region is the foreground (``label != 0``) of ``mask`` when given,
    otherwise every voxel. A region with std below 1e-8 maps to all zeros.
    """
    x = v.data.astype(np.float64)
    if mask is not None:
        if mask.shape != v.shape:
            raise ValueError(f"mask shape {mask.shape} != volume shape {v.shape}")
        region = x[mask.data != 0]
        if region.size == 0:
            raise ValueError("mask foreground is empty")
    else:
        region = x
    mu = region.mean()
    sd = region.std()
    if sd < 1e-8:
        return Volume(np.zeros_like(v.data), v.spacing)
    return Volume(((x - mu) / sd).astype(np.float32), v.spacing)


# --------------------------------------------------------------------------
# 2D slice primitives
# --------------------------------------------------------------------------

def _check_kind(kind: str) -> int:
    if kind == "intensity":
        return 1
    if kind == "label":
        return 0
    raise ValueError(f"kind must be 'intensity' or 'label', got {kind!r}")


def resample_slice(slice2d, target: Sequence[int], kind: str = "intensity", subject_id="", index=0) -> SliceImage:
    """Resize a 2D grid to ``target`` extents.

    Corner pixels map onto corner pixels; intensity uses bilinear
    interpolation, labels use nearest neighbour.
    """
    order = _check_kind(kind)
    x = np.asarray(slice2d)
    Hs, Ws = int(target[0]), int(target[1])
    if Hs < 8 or Ws < 8:
        raise ValueError(f"target extents must be >= 8, got {(Hs, Ws)}")
    if x.ndim != 2:
        raise ValueError(f"expected a 2D grid, got shape {x.shape}")
    if x.shape == (Hs, Ws):
        out = x.copy()
    else:
        rows = np.linspace(0.0, x.shape[0] - 1, Hs)
        cols = np.linspace(0.0, x.shape[1] - 1, Ws)
        grid = np.meshgrid(rows, cols, indexing="ij")
        src = x.astype(np.float64) if order else x
        out = ndimage.map_coordinates(src, grid, order=order, mode="nearest")
        out = out.astype(x.dtype if not order else np.float32)
    if order:
        out = out.astype(np.float32, copy=False)
    return SliceImage(out, subject_id, index)


def rotate_slice(slice2d, angle_deg: float, kind: str = "intensity") -> np.ndarray:
    """Rotate a 2D grid about its centre by ``angle_deg`` degrees.

    A point at offset ``(dh, dw)`` from the centre moves to
    ``(dh cos a - dw sin a, dh sin a + dw cos a)``. Pixels sampled from outside
    the input are filled with 0.
    """
    order = _check_kind(kind)
    x = np.asarray(slice2d)
    if angle_deg % 360.0 == 0.0:
        return x.copy()
    H, W = x.shape
    ch, cw = (H - 1) / 2.0, (W - 1) / 2.0
    a = np.deg2rad(angle_deg)
    c, s = np.cos(a), np.sin(a)
    hh, ww = np.meshgrid(np.arange(H) - ch, np.arange(W) - cw, indexing="ij")
    # inverse map: output point -> input point (rotate by -a)
    src_h = c * hh + s * ww + ch
    src_w = -s * hh + c * ww + cw
    src = x.astype(np.float64) if order else x
    out = ndimage.map_coordinates(src, [src_h, src_w], order=order, mode="constant", cval=0)
    return out.astype(np.float32) if order else out.astype(x.dtype)


def extract_slices(v, working_size: Sequence[int] = (128, 192), subject_id: str = "") -> list:
    """Split ``v`` along ``n`` into slices resampled to ``working_size``."""
    kind = "label" if isinstance(v, LabelMap) else "intensity"
    return [
        resample_slice(v.data[:, :, i], working_size, kind, subject_id=subject_id, index=i)
        for i in range(v.data.shape[2])
    ]


# --------------------------------------------------------------------------
# manifest
# --------------------------------------------------------------------------

def read_manifest(path) -> list:
    with open(os.fspath(path), "r", encoding="utf-8") as fh:
        rows = json.load(fh)
    if not isinstance(rows, list):
        raise ValueError(f"{path}: manifest must be a JSON array")
    return [SubjectRecord(**row) for row in rows]


def write_manifest(records, path) -> None:
    with open(os.fspath(path), "w", encoding="utf-8") as fh:
        json.dump([r.to_dict() for r in records], fh, indent=1)
        fh.write("\n")

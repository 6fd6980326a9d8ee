"""Deterministic synthetic fetal-brain phantoms and the cohort generator.

Source subjects are isotropic 0.75 mm volumes; target subjects are the same
kind of phantom pushed through a thick-slice acquisition model (through-plane
blur, decimation, gamma style shift, noise).
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .volume import LabelMap, SubjectRecord, Volume, save_volume, write_manifest

logger = logging.getLogger(__name__)

__all__ = [
    "ISO_SPACING_MM",
    "THICK_SPACING_MM",
    "PhantomParams",
    "DegradeParams",
    "CohortConfig",
    "ConfigError",
    "tissue_radii",
    "generate_subject",
    "degrade_to_target",
    "generate_cohort",
    "quarantine_label_path",
]

ISO_SPACING_MM = 0.75
THICK_SPACING_MM = 4.4
GW_MIN, GW_MAX = 22, 33

# T2-like ordering: fluid bright, cortex dark
DEFAULT_MEANS = (0.0, 1.0, 0.35, 0.62, 0.88, 0.48, 0.74)


def _growth(gw: float) -> float:
    """Linear brain-size factor, 0.72 at GW 22 and 1.0 at GW 33."""
    return 0.72 + 0.28 * (gw - GW_MIN) / (GW_MAX - GW_MIN)


def tissue_radii(gw: float) -> dict:
    """Semi-axes in mm of the nested tissue ellipsoids at gestational week ``gw``.

    Ventricles shrink relative to the brain as gw grows while the cortical
    ribbon thins and folds more; cerebellum and brainstem grow faster than
    the cerebrum.
    """
    s = _growth(gw)
    t = (gw - GW_MIN) / (GW_MAX - GW_MIN)
    envelope = np.array([27.0, 32.0, 24.0]) * s
    return {
        "envelope": envelope,
        "cortex": envelope * 0.86,
        "wm": envelope * (0.86 - (0.14 - 0.04 * t)),
        "ventricles": np.array([4.5, 13.0, 6.5]) * (1.25 - 0.55 * t) * s,
        "cerebellum": np.array([12.0, 8.0, 7.0]) * (0.75 + 0.5 * t) * s,
        "brainstem": np.array([4.5, 5.0, 10.0]) * (0.8 + 0.4 * t) * s,
        "fold_amplitude": 0.015 + 0.05 * t,
        "fold_frequency": 3.0 + 4.0 * t,
    }


@dataclass
class PhantomParams:
    gw: int = 27
    seed: int = 0
    base_extents: tuple = (96, 96, 96)
    radii_mm: Optional[dict] = None
    intensity_means: tuple = DEFAULT_MEANS
    noise_sigma: float = 0.02
    bias_field_amplitude: float = 0.05

    def __post_init__(self):
        if not (GW_MIN <= int(self.gw) <= GW_MAX):
            raise ValueError(f"gw must lie in [{GW_MIN}, {GW_MAX}], got {self.gw}")
        if self.noise_sigma < 0 or self.bias_field_amplitude < 0:
            raise ValueError("noise_sigma and bias_field_amplitude must be >= 0")
        if len(self.intensity_means) != 7:
            raise ValueError("intensity_means needs one value per class (7)")
        if self.radii_mm is None:
            self.radii_mm = tissue_radii(self.gw)
        r = self.radii_mm
        for key in ("envelope", "cortex", "wm", "ventricles", "cerebellum", "brainstem"):
            if np.any(np.asarray(r[key]) <= 0):
                raise ValueError(f"radius {key!r} must be positive")
        env, wm, ven = (np.asarray(r[k]) for k in ("envelope", "wm", "ventricles"))
        if not (np.all(env > wm) and np.all(wm > ven)):
            raise ValueError("tissue radii must nest: envelope > WM shell > ventricles")


@dataclass
class DegradeParams:
    slice_spacing_ratio: float = THICK_SPACING_MM / ISO_SPACING_MM
    blur_sigma: float = 1.5
    gamma: float = 1.8
    noise_sigma_target: float = 0.04

    def __post_init__(self):
        if not self.slice_spacing_ratio >= 1:
            raise ValueError("slice_spacing_ratio must be >= 1")
        if self.blur_sigma < 0 or self.noise_sigma_target < 0 or self.gamma <= 0:
            raise ValueError("blur_sigma, noise_sigma_target must be >= 0 and gamma > 0")


def _coords_mm(extents, spacing):
    axes = [(np.arange(n) - (n - 1) / 2.0) * spacing for n in extents]
    return np.meshgrid(*axes, indexing="ij")


def _ellipsoid(coords, center, radii):
    return sum(((c - c0) / r) ** 2 for c, c0, r in zip(coords, center, radii))


def _bias_field(coords, rng, amplitude, half_fov):
    """Smooth multiplicative field ``1 + amplitude * f`` with ``max|f| = 1``."""
    if amplitude == 0:
        return 1.0
    f = np.zeros_like(coords[0])
    for _ in range(3):
        k = rng.uniform(0.3, 1.0, size=3) * np.pi / half_fov
        phase = rng.uniform(0, 2 * np.pi, size=3)
        f += np.prod([np.cos(ki * c + p) for ki, c, p in zip(k, coords, phase)], axis=0)
    f /= np.abs(f).max()
    return 1.0 + amplitude * f


def generate_subject(p: PhantomParams):
    """Render one isotropic phantom; returns ``(Volume, LabelMap)``."""
    rng = np.random.default_rng([int(p.seed) & 0xFFFFFFFFFFFFFFFF, int(p.gw)])
    r = p.radii_mm
    spacing = (ISO_SPACING_MM,) * 3
    coords = _coords_mm(p.base_extents, ISO_SPACING_MM)
    h, w, n = coords

    # small per-subject anatomical jitter
    jitter = 1.0 + rng.uniform(-0.03, 0.03, size=3)
    env = np.asarray(r["envelope"]) * jitter
    rho = np.sqrt(_ellipsoid(coords, (0, 0, 0), env))

    theta = np.arctan2(w, h)
    phi = np.arctan2(n, np.hypot(h, w))
    k = r["fold_frequency"]
    fold = r["fold_amplitude"] * np.sin(k * theta + rng.uniform(0, 2 * np.pi)) * np.cos(
        k * phi + rng.uniform(0, 2 * np.pi)
    )
    cortex_scale = np.asarray(r["cortex"]) / np.asarray(r["envelope"])
    wm_scale = np.asarray(r["wm"]) / np.asarray(r["envelope"])
    rho_c = rho / (cortex_scale.mean() * (1.0 + fold))
    rho_w = rho / (wm_scale.mean() * (1.0 + fold))

    labels = np.zeros(p.base_extents, dtype=np.int8)
    inside = rho <= 1.0
    labels[inside] = 1
    labels[rho_c <= 1.0] = 2
    labels[rho_w <= 1.0] = 3

    ven = np.asarray(r["ventricles"]) * jitter
    off = 0.45 * np.asarray(r["wm"])[0]
    for sign in (-1.0, 1.0):
        labels[_ellipsoid(coords, (sign * off, 0.05 * env[1], 0.1 * env[2]), ven) <= 1.0] = 4

    cer = np.asarray(r["cerebellum"]) * jitter
    cer_center = (0.0, -0.6 * env[1], -0.5 * env[2])
    labels[(_ellipsoid(coords, cer_center, cer) <= 1.0) & inside] = 5

    bs = np.asarray(r["brainstem"]) * jitter
    bs_center = (0.0, -0.2 * env[1], -0.62 * env[2])
    labels[(_ellipsoid(coords, bs_center, bs) <= 1.0) & inside] = 6

    means = np.asarray(p.intensity_means, dtype=np.float64)
    img = means[labels]
    half_fov = 0.5 * max(p.base_extents) * ISO_SPACING_MM
    img = img * _bias_field(coords, rng, p.bias_field_amplitude, half_fov)
    if p.noise_sigma > 0:
        img = img + rng.normal(0.0, p.noise_sigma, size=img.shape) * inside
    img[~inside] = 0.0
    return Volume(img.astype(np.float32), spacing), LabelMap(labels, spacing)


def degrade_to_target(v: Volume, labels: LabelMap, d: DegradeParams, seed: int = 0):
    """Simulate a thick-slice acquisition of an isotropic phantom.

    Blur along ``n`` (sigma in input voxels), keep every ``ratio``-th slice
    (``floor(N / ratio)`` slices), apply ``x -> x**gamma`` to min-max
    normalized intensities and add noise inside the brain.  Labels are
    decimated by nearest neighbour without blur.
    """
    sh, sw, sn = v.spacing
    if not (np.isclose(sh, sw) and np.isclose(sh, sn)):
        raise ValueError(f"degrade_to_target expects an isotropic volume, got spacing {v.spacing}")
    ratio = float(d.slice_spacing_ratio)
    N = v.shape[2]
    n_out = int(np.floor(N / ratio + 1e-9))
    if n_out < 1:
        raise ValueError(f"ratio {ratio} leaves no slices from N={N}")

    x = v.data.astype(np.float64)
    if d.blur_sigma > 0:
        x = ndimage.gaussian_filter1d(x, d.blur_sigma, axis=2, mode="constant")
    # slice centres spread symmetrically over the volume
    centres = (N - 1) / 2.0 + (np.arange(n_out) - (n_out - 1) / 2.0) * ratio
    idx = np.clip(np.rint(centres).astype(int), 0, N - 1)
    if ratio == 1.0:
        idx = np.arange(N)
    x = x[:, :, idx]
    lab = labels.data[:, :, idx]
    brain = lab != 0

    if d.gamma != 1.0:
        lo, hi = x.min(), x.max()
        if hi > lo:
            x = ((x - lo) / (hi - lo)) ** d.gamma * (hi - lo) + lo
    if d.noise_sigma_target > 0:
        rng = np.random.default_rng(seed)
        x = x + rng.normal(0.0, d.noise_sigma_target, size=x.shape) * brain
    if d.blur_sigma > 0 or d.noise_sigma_target > 0:
        x = np.where(brain, x, 0.0)
    spacing = (sh, sw, sn * ratio)
    return Volume(x.astype(np.float32), spacing), LabelMap(lab, spacing)


# --------------------------------------------------------------------------
# cohort
# --------------------------------------------------------------------------

SPLITS = ("source", "target_train", "target_val", "target_test")


@dataclass
class CohortConfig:
    master_seed: int = 0
    counts: dict = field(
        default_factory=lambda: {"source": 12, "target_train": 24, "target_val": 6, "target_test": 12}
    )
    source_gw_range: tuple = (25, 29)
    target_gw_range: tuple = (GW_MIN, GW_MAX)
    base_extents: tuple = (96, 96, 96)
    source_noise_sigma: float = 0.02
    source_bias_amplitude: float = 0.05
    target_noise_sigma: float = 0.02
    target_bias_amplitude: float = 0.35
    degrade: dict = field(default_factory=lambda: asdict(DegradeParams()))

    @classmethod
    def from_dict(cls, cfg: dict) -> "CohortConfig":
        """Validate a parsed JSON config; field paths appear in error messages."""
        if not isinstance(cfg, dict):
            raise ConfigError("<root>: cohort config must be a JSON object")
        if "master_seed" not in cfg:
            raise ConfigError("master_seed: required key is missing")
        known = set(cls.__dataclass_fields__)
        unknown = set(cfg) - known
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown key")
        if not isinstance(cfg["master_seed"], int):
            raise ConfigError("master_seed: must be an integer")
        kw = dict(cfg)
        if "counts" in kw:
            counts = dict(cls().counts)
            for k, v in kw["counts"].items():
                if k not in SPLITS:
                    raise ConfigError(f"counts.{k}: unknown split")
                if not isinstance(v, int) or v < 1:
                    raise ConfigError(f"counts.{k}: must be an integer >= 1")
                counts[k] = v
            kw["counts"] = counts
        if "degrade" in kw:
            deg = asdict(DegradeParams())
            for k, v in kw["degrade"].items():
                if k not in deg:
                    raise ConfigError(f"degrade.{k}: unknown key")
                deg[k] = v
            try:
                DegradeParams(**deg)
            except ValueError as exc:
                raise ConfigError(f"degrade: {exc}") from exc
            kw["degrade"] = deg
        for key in ("source_gw_range", "target_gw_range", "base_extents"):
            if key in kw:
                kw[key] = tuple(int(v) for v in kw[key])
        out = cls(**kw)
        out.validate()
        return out

    def validate(self):
        s0, s1 = self.source_gw_range
        t0, t1 = self.target_gw_range
        if not (GW_MIN <= t0 <= t1 <= GW_MAX):
            raise ConfigError(f"target_gw_range: must lie within [{GW_MIN}, {GW_MAX}]")
        if not (t0 <= s0 <= s1 <= t1):
            raise ConfigError("source_gw_range: must be a subrange of target_gw_range")
        n_gw = t1 - t0 + 1
        if self.counts["target_train"] < n_gw:
            raise ConfigError(
                f"counts.target_train: {self.counts['target_train']} subjects cannot cover "
                f"{n_gw} gestational weeks"
            )
        for k in SPLITS:
            if self.counts.get(k, 0) < 1:
                raise ConfigError(f"counts.{k}: must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("source_gw_range", "target_gw_range", "base_extents"):
            d[key] = list(d[key])
        return d


def _gw_schedule(count, lo, hi, rng, cover):
    """GWs for a split; with ``cover`` every week in [lo, hi] appears."""
    weeks = np.arange(lo, hi + 1)
    if cover:
        reps = int(np.ceil(count / len(weeks)))
        gws = np.tile(weeks, reps)[:count]
    else:
        gws = rng.choice(weeks, size=count, replace=True)
    return sorted(int(g) for g in gws)


def quarantine_label_path(cohort_root, subject_id: str) -> Path:
    """Where target-train labels live; only the fully supervised bound may read them."""
    return Path(cohort_root) / "quarantine" / "target_train" / f"{subject_id}_lab.mvol"


def generate_cohort(cfg: CohortConfig, out_dir) -> list:
    """Write the cohort under ``out_dir`` and return its manifest records."""
    cfg.validate()
    out = Path(out_dir)
    rng = np.random.default_rng(cfg.master_seed)
    # one integer seed per subject keeps subjects independent of each other
    seeds = rng.integers(0, 2**63 - 1, size=sum(cfg.counts.values()) + 4)
    deg = DegradeParams(**cfg.degrade)
    records = []
    s_iter = iter(seeds[4:])
    for split in SPLITS:
        (out / split).mkdir(parents=True, exist_ok=True)
        if split == "source":
            gws = _gw_schedule(cfg.counts[split], *cfg.source_gw_range, rng, cover=True)
        else:
            gws = _gw_schedule(cfg.counts[split], *cfg.target_gw_range, rng, cover=split == "target_train")
        for i, gw in enumerate(gws):
            sid = f"{split}_{i:03d}"
            seed = int(next(s_iter))
            if split == "source":
                pp = PhantomParams(gw, seed, tuple(cfg.base_extents),
                                   noise_sigma=cfg.source_noise_sigma,
                                   bias_field_amplitude=cfg.source_bias_amplitude)
                vol, lab = generate_subject(pp)
            else:
                pp = PhantomParams(gw, seed, tuple(cfg.base_extents),
                                   noise_sigma=cfg.target_noise_sigma,
                                   bias_field_amplitude=cfg.target_bias_amplitude)
                vol, lab = degrade_to_target(*generate_subject(pp), deg, seed=seed ^ 0x5EED)
            vpath = out / split / f"{sid}.mvol"
            save_volume(vol, vpath)
            if split == "target_train":
                lpath = quarantine_label_path(out, sid)
                lpath.parent.mkdir(parents=True, exist_ok=True)
                save_volume(lab, lpath)
                label_rel = None
            else:
                lpath = out / split / f"{sid}_lab.mvol"
                save_volume(lab, lpath)
                label_rel = os.path.relpath(lpath, out)
            records.append(
                SubjectRecord(
                    subject_id=sid,
                    gw=gw,
                    domain="source" if split == "source" else "target",
                    volume_path=os.path.relpath(vpath, out),
                    label_path=label_rel,
                    split=split,
                )
            )
            logger.debug("generated %s (gw=%d)", sid, gw)
    write_manifest(records, out / "manifest.json")
    with open(out / "cohort_config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    return records

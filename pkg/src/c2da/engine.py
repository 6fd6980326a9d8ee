"""Cycle-consistent adaptation: data pipeline, training step, training loop, inference.

Every variant shares one code path; the variant only switches loss terms
and data sources on or off (see :data:`VARIANT_FLAGS`).
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import ConfigError, NumericalError, QuarantineError
from .fourier import DEFAULT_ALPHA, MaskSpec, build_mask, extract_codes
from .losses import (
    LossBreakdown,
    LossWeights,
    loss_adv_disc,
    loss_adv_enc,
    loss_seg,
    loss_syn,
    total_loss,
)
from .metrics import TISSUE_CLASSES, dice
from .networks import Discriminator, Generator, Segmentor
from .phantom import quarantine_label_path
from .volume import (
    LabelMap,
    Volume,
    load_volume,
    resample_slice,
    rotate_slice,
    zscore_normalize,
)

logger = logging.getLogger(__name__)

__all__ = [
    "VARIANTS",
    "VARIANT_FLAGS",
    "TrainConfig",
    "Models",
    "Subject",
    "build_models",
    "compute_losses",
    "train_step",
    "fit_models",
    "run_training",
    "predict_volume",
    "load_checkpoint",
]

VARIANTS = ("WoDA", "FS", "Reg", "Reg_FCC", "Reg_G", "Reg_FCC_G", "Full")

# (use_registration, use_fcc, use_generator, use_adversarial)
VARIANT_FLAGS = {
    "WoDA": dict(use_registration=False, use_fcc=False, use_generator=False, use_adversarial=False),
    "Reg": dict(use_registration=True, use_fcc=False, use_generator=False, use_adversarial=False),
    "Reg_FCC": dict(use_registration=True, use_fcc=True, use_generator=False, use_adversarial=False),
    "Reg_G": dict(use_registration=True, use_fcc=False, use_generator=True, use_adversarial=False),
    "Reg_FCC_G": dict(use_registration=True, use_fcc=True, use_generator=True, use_adversarial=False),
    "Full": dict(use_registration=True, use_fcc=True, use_generator=True, use_adversarial=True),
    "FS": dict(use_registration=True, use_fcc=True, use_generator=True, use_adversarial=True),
}


@dataclass
class TrainConfig:
    variant: str = "Full"
    alpha: float = DEFAULT_ALPHA
    lr_main: float = 1e-4
    lr_disc: float = 1e-5
    disc_epoch_period: int = 3
    epochs: int = 40
    batch_size: int = 8
    seed: int = 0
    working_size: tuple = (128, 192)
    base_width: int = 32
    generator_width: int = 32
    beta: float = 3.0
    gamma: float = 0.1
    backward_cycle_weight: float = 0.0
    adv_form: str = "nonsaturating"
    steps_per_epoch: Optional[int] = None
    val_every: int = 1
    min_foreground: float = 0.05
    augment_rotation: bool = True
    sampling: str = "subject"

    def __post_init__(self):
        if self.variant not in VARIANT_FLAGS:
            raise ConfigError(f"variant: must be one of {list(VARIANTS)}, got {self.variant!r}")
        self.working_size = tuple(int(s) for s in self.working_size)
        if len(self.working_size) != 2 or min(self.working_size) < 8:
            raise ConfigError(f"working_size: need two extents >= 8, got {self.working_size}")
        if not (0.0 <= float(self.alpha) < 0.5):
            raise ConfigError(f"alpha: must lie in [0, 0.5), got {self.alpha}")
        if self.sampling not in ("subject", "slice"):
            raise ConfigError(f"sampling: must be 'subject' or 'slice', got {self.sampling!r}")
        if self.adv_form not in ("nonsaturating", "minimax"):
            raise ConfigError(f"adv_form: unknown value {self.adv_form!r}")
        for key in ("epochs", "batch_size", "disc_epoch_period", "val_every"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"{key}: must be >= 1")
        LossWeights(self.beta, self.gamma, self.backward_cycle_weight)

    @property
    def flags(self) -> dict:
        return VARIANT_FLAGS[self.variant]

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.beta, self.gamma, self.backward_cycle_weight)

    @property
    def reads_target_labels(self) -> bool:
        return self.variant == "FS"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["working_size"] = list(self.working_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown training config key")
        return cls(**d)


@dataclass
class Models:
    segmentor: Segmentor
    generator: Generator
    discriminator: Discriminator
    opt_main: Optional[torch.optim.Optimizer] = None
    opt_disc: Optional[torch.optim.Optimizer] = None

    def state_dict(self) -> dict:
        out = {
            "segmentor": self.segmentor.state_dict(),
            "generator": self.generator.state_dict(),
            "discriminator": self.discriminator.state_dict(),
        }
        if self.opt_main is not None:
            out["opt_main"] = self.opt_main.state_dict()
            out["opt_disc"] = self.opt_disc.state_dict()
        return out


def build_models(cfg: TrainConfig, dtype=torch.float32) -> Models:
    torch.manual_seed(cfg.seed)
    S = Segmentor(base_width=cfg.base_width).to(dtype)
    G = Generator(base_width=cfg.generator_width).to(dtype)
    D = Discriminator(S.bottleneck_channels).to(dtype)
    opt_main = torch.optim.Adam(list(S.parameters()) + list(G.parameters()), lr=cfg.lr_main)
    opt_disc = torch.optim.Adam(D.parameters(), lr=cfg.lr_disc)
    return Models(S, G, D, opt_main, opt_disc)


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------

@dataclass
class Subject:
    """A loaded subject: whole-volume z-scored intensities plus optional labels."""

    subject_id: str
    gw: int
    volume: Volume
    labels: Optional[LabelMap] = None
    slices: list = field(default_factory=list)


def _foreground_slices(raw: Volume, min_fraction: float) -> list:
    frac = (raw.data != 0).mean(axis=(0, 1))
    keep = [i for i, f in enumerate(frac) if f >= min_fraction]
    return keep or list(range(raw.shape[2]))


def make_subject(subject_id, gw, volume: Volume, labels: Optional[LabelMap] = None,
                 min_foreground: float = 0.05) -> Subject:
    if labels is not None and labels.shape != volume.shape:
        raise ValueError(f"{subject_id}: labels {labels.shape} do not match volume {volume.shape}")
    keep = _foreground_slices(volume, min_foreground)
    return Subject(subject_id, int(gw), zscore_normalize(volume), labels, keep)


class SliceSampler:
    """Produces augmented, resized training batches with Fourier codes."""

    def __init__(self, subjects, cfg: TrainConfig, rng: np.random.Generator, with_labels: bool):
        self.subjects = list(subjects)
        self.cfg = cfg
        self.rng = rng
        self.with_labels = with_labels
        self.index = [(si, k) for si, s in enumerate(self.subjects) for k in s.slices]
        self._counts = np.array([len(s.slices) for s in self.subjects])
        self._offsets = np.concatenate([[0], np.cumsum(self._counts)[:-1]])
        if with_labels and any(s.labels is None for s in self.subjects):
            raise ValueError("labelled sampler received a subject without labels")

    def __len__(self):
        return len(self.index)

    def epoch_order(self) -> np.ndarray:
        """Slice positions for one epoch.

        ``subject`` sampling draws a subject uniformly, then one of its
        slices, so thick-slice subjects weigh as much as isotropic ones.
        """
        n = len(self.index)
        if self.cfg.sampling == "slice":
            return self.rng.permutation(n)
        subj = self.rng.integers(0, len(self.subjects), size=n)
        return self._offsets[subj] + self.rng.integers(0, self._counts[subj])

    def batch(self, positions):
        cfg = self.cfg
        xs, ys, ids = [], [], []
        for pos in positions:
            si, k = self.index[int(pos)]
            subj = self.subjects[si]
            img = subj.volume.data[:, :, k]
            lab = subj.labels.data[:, :, k] if self.with_labels else None
            angle = float(self.rng.uniform(0.0, 360.0)) if cfg.augment_rotation else 0.0
            img = rotate_slice(img, angle, "intensity")
            xs.append(resample_slice(img, cfg.working_size, "intensity").data)
            if lab is not None:
                lab = rotate_slice(lab, angle, "label")
                ys.append(resample_slice(lab, cfg.working_size, "label").data)
            ids.append(f"{subj.subject_id}:{k}")
        x = np.stack(xs)
        codes = extract_codes(x, cfg.alpha)
        batch = {
            "x": torch.from_numpy(x[:, None].astype(np.float32)),
            "fcc": torch.from_numpy(codes.fcc[:, None]),
            "fsc": torch.from_numpy(codes.fsc[:, None]),
            "ids": ids,
        }
        if ys:
            batch["labels"] = torch.from_numpy(np.stack(ys).astype(np.int64))
        return batch


# --------------------------------------------------------------------------
# one optimization step
# --------------------------------------------------------------------------

def torch_fcc(x, alpha):
    """Differentiable content code of a (B, 1, H, W) tensor."""
    mask = torch.as_tensor(build_mask(MaskSpec(float(alpha), tuple(x.shape[-2:]))), dtype=x.dtype)
    spec = torch.fft.fft2(x)
    return torch.fft.ifft2(spec * (1.0 - mask)).real


def compute_losses(models: Models, batch_src: dict, batch_tgt: Optional[dict], cfg: TrainConfig):
    """Forward pass for one source/target batch pair.

    Returns ``(total, parts, bottlenecks)``; ``parts`` holds the individual
    tensors and ``bottlenecks`` the source/target encoder features used by
    the discriminator update.
    """
    flags = cfg.flags
    S, G, D = models.segmentor, models.generator, models.discriminator
    key = "fcc" if flags["use_fcc"] else "x"
    if batch_tgt is not None and "labels" in batch_tgt and not cfg.reads_target_labels:
        raise QuarantineError(f"variant {cfg.variant} received target labels")

    feats_s = S.encode_all(batch_src[key])
    logits_s = S.decode(feats_s)
    parts = {}
    seg = loss_seg(logits_s, batch_src["labels"])

    needs_target = batch_tgt is not None and (
        flags["use_generator"] or flags["use_adversarial"] or cfg.reads_target_labels
    )
    feats_t = logits_t = None
    if needs_target:
        feats_t = S.encode_all(batch_tgt[key])
        logits_t = S.decode(feats_t)
        if cfg.reads_target_labels:
            seg = loss_seg(torch.cat([logits_s, logits_t]), torch.cat([batch_src["labels"], batch_tgt["labels"]]))
    parts["seg"] = seg

    if flags["use_generator"]:
        prob_s = logits_s.softmax(dim=1)
        synth_s = G(prob_s, batch_src["fsc"])
        parts["syn_source"] = loss_syn(synth_s, batch_src["x"])
        if needs_target:
            prob_t = logits_t.softmax(dim=1)
            synth_t = G(prob_t, batch_tgt["fsc"])
            parts["syn_target"] = loss_syn(synth_t, batch_tgt["x"])
        if cfg.backward_cycle_weight > 0:
            pairs = [(synth_s, prob_s)] + ([(synth_t, prob_t)] if needs_target else [])
            bc = 0.0
            for synth, prob in pairs:
                inp = torch_fcc(synth, cfg.alpha) if flags["use_fcc"] else synth
                bc = bc + torch.mean((S(inp).softmax(dim=1) - prob) ** 2)
            parts["backward_cycle"] = bc / len(pairs)

    if flags["use_adversarial"] and needs_target:
        d_tgt = torch.sigmoid(D(feats_t[-1]))
        parts["adv"] = loss_adv_enc(d_tgt, cfg.adv_form)

    _check_finite(parts, batch_src, batch_tgt)
    total, _ = total_loss(parts, cfg.weights)
    bottlenecks = (feats_s[-1], feats_t[-1] if feats_t is not None else None)
    return total, parts, bottlenecks


def _check_finite(parts, batch_src, batch_tgt):
    values = {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in parts.items()}
    if not all(math.isfinite(v) for v in values.values()):
        ids = list(batch_src.get("ids", [])) + list((batch_tgt or {}).get("ids", []))
        raise NumericalError(f"non-finite loss; terms={values}; batch={ids}")


def train_step(models: Models, batch_src: dict, batch_tgt: Optional[dict], cfg: TrainConfig,
               epoch: int = 0) -> LossBreakdown:
    """One update of segmentor + generator; the discriminator steps on gated epochs."""
    models.segmentor.train()
    models.generator.train()
    models.discriminator.train()
    total, parts, (bott_s, bott_t) = compute_losses(models, batch_src, batch_tgt, cfg)
    _, breakdown = total_loss(parts, cfg.weights)

    models.opt_main.zero_grad(set_to_none=True)
    total.backward()
    models.opt_main.step()

    if cfg.flags["use_adversarial"] and bott_t is not None and epoch % cfg.disc_epoch_period == 0:
        D = models.discriminator
        models.opt_disc.zero_grad(set_to_none=True)
        d_loss = loss_adv_disc(torch.sigmoid(D(bott_s.detach())), torch.sigmoid(D(bott_t.detach())))
        d_loss.backward()
        models.opt_disc.step()
    models.opt_disc.zero_grad(set_to_none=True)
    return breakdown


# --------------------------------------------------------------------------
# inference
# --------------------------------------------------------------------------

@torch.no_grad()
def predict_volume(segmentor: Segmentor, v: Volume, cfg: TrainConfig, batch_size: int = 16,
                   normalize: bool = True) -> LabelMap:
    """Segment every slice of ``v`` and restack at the native in-plane extents."""
    segmentor.eval()
    vol = zscore_normalize(v) if normalize else v
    H, W, N = vol.shape
    slices = np.stack([resample_slice(vol.data[:, :, i], cfg.working_size, "intensity").data for i in range(N)])
    inp = extract_codes(slices, cfg.alpha).fcc if cfg.flags["use_fcc"] else slices
    dtype = next(segmentor.parameters()).dtype
    preds = []
    for start in range(0, N, batch_size):
        chunk = torch.from_numpy(np.ascontiguousarray(inp[start:start + batch_size, None])).to(dtype)
        preds.append(segmentor(chunk).argmax(dim=1).numpy())
    pred = np.concatenate(preds).astype(np.int8)
    out = np.stack([resample_slice(pred[i], (H, W), "label").data for i in range(N)], axis=-1)
    return LabelMap(out, v.spacing)


def mean_dice(pred: LabelMap, gt: LabelMap) -> float:
    return float(np.mean([dice(pred, gt, c) for c in TISSUE_CLASSES]))


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

@dataclass
class CheckpointRecord:
    path: str
    epoch: int
    val_dice: float
    log_path: str = ""


def _save_checkpoint(models: Models, cfg: TrainConfig, ckpt_dir: Path, epoch: int, val_dice: float):
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    torch.save(models.state_dict(), ckpt_dir / "params.pt")
    meta = {"variant": cfg.variant, "alpha": cfg.alpha, "epoch": epoch, "val_dice": val_dice,
            "config": cfg.to_dict()}
    with open(ckpt_dir / "metadata.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(ckpt_dir) -> tuple:
    """Return ``(Models, TrainConfig, metadata)`` from a checkpoint directory."""
    ckpt_dir = Path(ckpt_dir)
    with open(ckpt_dir / "metadata.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    cfg = TrainConfig.from_dict(meta["config"])
    models = build_models(cfg)
    state = torch.load(ckpt_dir / "params.pt", map_location="cpu", weights_only=True)
    models.segmentor.load_state_dict(state["segmentor"])
    models.generator.load_state_dict(state["generator"])
    models.discriminator.load_state_dict(state["discriminator"])
    return models, cfg, meta


def fit_models(cfg: TrainConfig, source, target, val=(), run_dir=None, log=None) -> tuple:
    """Train on in-memory subjects.

    ``source`` subjects must carry labels; ``target`` subjects carry labels
    only for the fully supervised variant.  ``val`` subjects (with labels)
    select the best epoch by mean Dice.  Returns ``(models, history)``.
    """
    source, target, val = list(source), list(target), list(val)
    if not source:
        raise ConfigError("source: no training subjects")
    if not target and (cfg.flags["use_generator"] or cfg.flags["use_adversarial"] or cfg.reads_target_labels):
        raise ConfigError("target_train: no training subjects")
    if not cfg.reads_target_labels and any(t.labels is not None for t in target):
        raise QuarantineError(f"variant {cfg.variant} must not see target-train labels")

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    models = build_models(cfg)
    src_sampler = SliceSampler(source, cfg, rng, with_labels=True)
    tgt_sampler = SliceSampler(target, cfg, rng, with_labels=cfg.reads_target_labels) if target else None

    bs = cfg.batch_size
    steps = cfg.steps_per_epoch or max(1, len(src_sampler) // bs)
    best = (-1.0, -1)
    best_state = None
    history = []
    ckpt_dir = Path(run_dir) / "checkpoint" if run_dir is not None else None
    for epoch in range(cfg.epochs):
        t0 = time.time()
        src_order = src_sampler.epoch_order()
        tgt_order = tgt_sampler.epoch_order() if tgt_sampler is not None else None
        sums = LossBreakdown()
        for step in range(steps):
            pos = np.take(src_order, range(step * bs, (step + 1) * bs), mode="wrap")
            b_src = src_sampler.batch(pos)
            b_tgt = None
            if tgt_sampler is not None:
                b_tgt = tgt_sampler.batch(np.take(tgt_order, range(step * bs, (step + 1) * bs), mode="wrap"))
            bd = train_step(models, b_src, b_tgt, cfg, epoch)
            for k, v in bd.to_dict().items():
                setattr(sums, k, getattr(sums, k) + v / steps)
            if log is not None and epoch == 0 and step < 10:
                log.setdefault("first_steps", []).append(bd.to_dict())
        entry = {"epoch": epoch, **sums.to_dict(), "seconds": round(time.time() - t0, 2)}
        if val and ((epoch + 1) % cfg.val_every == 0 or epoch == cfg.epochs - 1):
            scores = [mean_dice(predict_volume(models.segmentor, s.volume, cfg, normalize=False), s.labels)
                      for s in val]
            entry["val_dice"] = float(np.mean(scores))
            if entry["val_dice"] > best[0]:
                best = (entry["val_dice"], epoch)
                best_state = {k: v.detach().clone() for k, v in models.segmentor.state_dict().items()}
                if ckpt_dir is not None:
                    _save_checkpoint(models, cfg, ckpt_dir, epoch, entry["val_dice"])
        history.append(entry)
        logger.info("epoch %d %s", epoch, json.dumps(entry))
        if run_dir is not None:
            with open(Path(run_dir) / "train_log.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry) + "\n")
    if best_state is not None:
        models.segmentor.load_state_dict(best_state)
    elif ckpt_dir is not None:
        _save_checkpoint(models, cfg, ckpt_dir, cfg.epochs - 1, float("nan"))
    return models, history


def _resolve(root: Path, rel: str) -> Path:
    p = Path(rel)
    return p if p.is_absolute() else root / p


def load_labels(record, root, allow_quarantine: bool = False) -> Optional[LabelMap]:
    """Labels for ``record``; target-train labels come only from quarantine and only when allowed."""
    root = Path(root)
    if record.split == "target_train":
        if not allow_quarantine:
            raise QuarantineError(f"labels of {record.subject_id} are quarantined")
        return load_volume(quarantine_label_path(root, record.subject_id))
    if record.label_path is None:
        return None
    return load_volume(_resolve(root, record.label_path))


def subjects_from_records(records, root, with_labels: bool, allow_quarantine: bool = False,
                          min_foreground: float = 0.05) -> list:
    root = Path(root)
    out = []
    for r in records:
        vol = load_volume(_resolve(root, r.volume_path))
        lab = load_labels(r, root, allow_quarantine) if with_labels else None
        out.append(make_subject(r.subject_id, r.gw, vol, lab, min_foreground))
    return out


def run_training(cfg: TrainConfig, manifest, root, run_dir) -> CheckpointRecord:
    """Train ``cfg.variant`` on a cohort manifest and checkpoint the best epoch."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    by_split = {}
    for r in manifest:
        by_split.setdefault(r.split, []).append(r)
    for split in ("source", "target_train", "target_val"):
        if not by_split.get(split):
            raise ConfigError(f"{split}: split is empty in the manifest")
    src_records = list(by_split["source"])
    if cfg.flags["use_registration"]:
        src_records += by_split.get("deformed_source", [])

    mf = cfg.min_foreground
    source = subjects_from_records(src_records, root, with_labels=True, min_foreground=mf)
    target = subjects_from_records(by_split["target_train"], root, with_labels=cfg.reads_target_labels,
                                   allow_quarantine=cfg.reads_target_labels, min_foreground=mf)
    val = subjects_from_records(by_split["target_val"], root, with_labels=True, min_foreground=mf)

    log_path = run_dir / "train_log.jsonl"
    log_path.write_text("")
    _, history = fit_models(cfg, source, target, val, run_dir=run_dir)
    with open(run_dir / "checkpoint" / "metadata.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    return CheckpointRecord(str(run_dir / "checkpoint"), meta["epoch"], meta["val_dice"], str(log_path))

"""Training objectives: segmentation, synthesis, adversarial terms and their weighted sum."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .errors import NumericalError
from .volume import N_CLASSES

__all__ = [
    "PROB_FLOOR",
    "LossWeights",
    "LossBreakdown",
    "NumericalError",
    "cross_entropy_term",
    "soft_dice_term",
    "loss_seg",
    "loss_syn",
    "loss_adv_disc",
    "loss_adv_enc",
    "total_loss",
]

PROB_FLOOR = 1e-7


@dataclass
class LossWeights:
    beta: float = 3.0
    gamma: float = 0.1
    backward_cycle_weight: float = 0.0

    def __post_init__(self):
        if min(self.beta, self.gamma, self.backward_cycle_weight) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    seg: float = 0.0
    adv: float = 0.0
    syn_source: float = 0.0
    syn_target: float = 0.0
    backward_cycle: float = 0.0
    total: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _check_labels(labels):
    if labels.dtype.is_floating_point:
        raise ValueError("labels must be an integer tensor")
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= N_CLASSES):
        raise ValueError(f"label values must lie in 0..{N_CLASSES - 1}")


def cross_entropy_term(logits, labels):
    _check_labels(labels)
    return F.cross_entropy(logits, labels.long())


def soft_dice_term(logits, labels, eps=1e-5):
    """``1 - mean_c soft Dice`` with sums taken over the whole batch."""
    _check_labels(labels)
    prob = logits.softmax(dim=1)
    onehot = F.one_hot(labels.long(), logits.shape[1]).permute(0, 3, 1, 2).to(prob.dtype)
    dims = (0, 2, 3)
    inter = (prob * onehot).sum(dims)
    denom = prob.sum(dims) + onehot.sum(dims)
    return 1.0 - ((2.0 * inter + eps) / (denom + eps)).mean()


def loss_seg(logits, labels):
    """Pixel-mean cross-entropy plus soft Dice loss, equally weighted."""
    if logits.shape[0] != labels.shape[0] or logits.shape[-2:] != labels.shape[-2:]:
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} disagree")
    return cross_entropy_term(logits, labels) + soft_dice_term(logits, labels)


def loss_syn(synth, original):
    if synth.shape != original.shape:
        raise ValueError(f"shape mismatch: {tuple(synth.shape)} vs {tuple(original.shape)}")
    return torch.mean((synth - original) ** 2)


def loss_adv_disc(d_src, d_tgt):
    """Discriminator loss on probabilities: ``-[mean log d_src + mean log(1 - d_tgt)]``."""
    d_src = torch.as_tensor(d_src).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
    d_tgt = torch.as_tensor(d_tgt).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
    return -(torch.log(d_src).mean() + torch.log1p(-d_tgt).mean())


def loss_adv_enc(d_tgt, form: str = "nonsaturating"):
    """Encoder-side adversarial loss; target features should look like source.

    ``nonsaturating`` gives ``-mean log d_tgt``; ``minimax`` gives
    ``mean log(1 - d_tgt)``.
    """
    d_tgt = torch.as_tensor(d_tgt).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
    if form == "nonsaturating":
        return -torch.log(d_tgt).mean()
    if form == "minimax":
        return torch.log1p(-d_tgt).mean()
    raise ValueError(f"unknown adversarial form {form!r}")


def _value(x) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


def total_loss(parts, w: LossWeights):
    """Combine loss terms; works on floats or tensors.

    ``parts`` maps ``seg``, ``adv``, ``syn_source``, ``syn_target`` and
    optionally ``backward_cycle`` to values.  Returns ``(total, breakdown)``
    where ``total`` keeps the autograd graph when tensors are passed.
    """
    seg = parts.get("seg", 0.0)
    adv = parts.get("adv", 0.0)
    syn_s = parts.get("syn_source", 0.0)
    syn_t = parts.get("syn_target", 0.0)
    bc = parts.get("backward_cycle", 0.0)
    for name, v in (("seg", seg), ("adv", adv), ("syn_source", syn_s), ("syn_target", syn_t), ("backward_cycle", bc)):
        if not math.isfinite(_value(v)):
            raise NumericalError(f"loss term {name} is not finite ({_value(v)})")
    total = seg + w.gamma * adv + w.beta * (syn_s + syn_t) + w.backward_cycle_weight * bc
    breakdown = LossBreakdown(
        seg=_value(seg),
        adv=_value(adv),
        syn_source=_value(syn_s),
        syn_target=_value(syn_t),
        backward_cycle=_value(bc),
        total=_value(total),
    )
    return total, breakdown

"""Adversarial, cycle-consistency and segmentation objectives.

Discriminators emit raw scores; every log-sigmoid here goes through
``F.logsigmoid`` so no finite score produces NaN or inf.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import torch
import torch.nn.functional as F

GAN_MODES = ("nonsaturating", "minimax", "lsgan")


@dataclass(frozen=True)
class LossWeights:
    gan_g1: float = 1.0
    gan_g2: float = 1.0
    cycle_a: float = 10.0
    cycle_b: float = 10.0
    seg: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")

    def as_tuple(self) -> tuple[float, ...]:
        return (self.gan_g1, self.gan_g2, self.cycle_a, self.cycle_b, self.seg)


PAPER_WEIGHTS = LossWeights()


@dataclass(frozen=True)
class LossReport:
    gan_G1: float
    gan_G2: float
    cycle_A: float
    cycle_B: float
    seg: float
    d1: float
    d2: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


REPORT_FIELDS = tuple(f.name for f in fields(LossReport))


def adversarial_loss_D(scores_real: torch.Tensor, scores_fake: torch.Tensor, mode: str = "nonsaturating") -> torch.Tensor:
    """Discriminator objective (to minimise), averaged over patches and batch."""
    if mode == "lsgan":
        return 0.5 * (((scores_real - 1.0) ** 2).mean() + (scores_fake ** 2).mean())
    # log(1 - sigmoid(s)) == logsigmoid(-s)
    return -(F.logsigmoid(scores_real).mean() + F.logsigmoid(-scores_fake).mean())


def adversarial_loss_G(scores_fake: torch.Tensor, mode: str = "nonsaturating") -> torch.Tensor:
    """Generator-side adversarial term.

    ``nonsaturating``: -E log sigmoid(s).  ``minimax``: E log(1 - sigmoid(s)),
    the literal second term of the GAN value function.  ``lsgan``: E (s - 1)^2.
    """
    if mode == "nonsaturating":
        return -F.logsigmoid(scores_fake).mean()
    if mode == "minimax":
        return F.logsigmoid(-scores_fake).mean()
    if mode == "lsgan":
        return ((scores_fake - 1.0) ** 2).mean()
    raise ValueError(f"unknown GAN mode {mode!r}")


def cycle_loss(original: torch.Tensor, reconstructed: torch.Tensor) -> torch.Tensor:
    if original.shape != reconstructed.shape:
        raise ValueError(f"shape mismatch: {tuple(original.shape)} vs {tuple(reconstructed.shape)}")
    return (original - reconstructed).abs().mean()


def _check_labels(labels: torch.Tensor, num_classes: int, spatial) -> None:
    if labels.shape != spatial:
        raise ValueError(f"label shape {tuple(labels.shape)} does not match prediction {tuple(spatial)}")
    if labels.numel() and (int(labels.max()) >= num_classes or int(labels.min()) < 0):
        raise ValueError(f"class id out of range [0, {num_classes})")


def seg_loss(probs: torch.Tensor, labels: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Pixel-wise cross-entropy from probabilities (N, C, H, W) and ids (N, H, W).

    ``reduction="mean"`` averages over pixels and batch; ``"sum"`` sums over
    pixels and averages over the batch.
    """
    _check_labels(labels, probs.shape[1], probs.shape[:1] + probs.shape[2:])
    picked = probs.gather(1, labels.long().unsqueeze(1)).squeeze(1)
    nll = -torch.log(picked.clamp_min(torch.finfo(probs.dtype).tiny))
    return _reduce(nll, reduction)


def seg_loss_from_logits(logits: torch.Tensor, labels: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Same value as :func:`seg_loss` on ``softmax(logits)``, computed stably."""
    _check_labels(labels, logits.shape[1], logits.shape[:1] + logits.shape[2:])
    nll = F.cross_entropy(logits, labels.long(), reduction="none")
    return _reduce(nll, reduction)


def _reduce(nll, reduction):
    if reduction == "mean":
        return nll.mean()
    if reduction == "sum":
        return nll.flatten(1).sum(1).mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def total_loss(gan_g1, gan_g2, cycle_a, cycle_b, seg, weights: LossWeights = PAPER_WEIGHTS):
    """Weighted sum of the five generator-side terms."""
    w = weights
    return (w.gan_g1 * gan_g1 + w.gan_g2 * gan_g2 + w.cycle_a * cycle_a
            + w.cycle_b * cycle_b + w.seg * seg)

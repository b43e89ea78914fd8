"""Objective terms for unsupervised artifact reduction training.

Two adversarial terms (clean-looking corrections, real-looking artifact
transfers), two L1 reconstruction terms (self-reconstruction, cycle back
from the transferred image) and an artifact-consistency term tying the
removed artifact map to the added one. Adversarial losses default to the
non-saturating logits form; a least-squares variant is selectable.

All L1 terms are means over batch and pixels so the default weights are
resolution-independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

GAN_MODES = ("nonsaturating", "lsgan")


@dataclass(frozen=True)
class LossWeights:
    adv_clean: float = 1.0
    adv_artifact: float = 1.0
    recon: float = 20.0
    cycle: float = 20.0
    art: float = 20.0

    def __post_init__(self):
        for name in ("adv_clean", "adv_artifact", "recon", "cycle", "art"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(
            adv_clean=self.adv_clean * factor,
            adv_artifact=self.adv_artifact * factor,
            recon=self.recon * factor,
            cycle=self.cycle * factor,
            art=self.art * factor,
        )


@dataclass
class LossReport:
    """Per-term scalar values plus the weighted total for one iteration."""

    adv_clean: float
    adv_artifact: float
    recon: float
    cycle: float
    art: float
    total: float
    d_clean: float = 0.0
    d_artifact: float = 0.0

    def is_finite(self) -> bool:
        import math

        return all(
            math.isfinite(v)
            for v in (
                self.adv_clean,
                self.adv_artifact,
                self.recon,
                self.cycle,
                self.art,
                self.total,
                self.d_clean,
                self.d_artifact,
            )
        )

    def as_dict(self) -> dict[str, float]:
        return {
            "adv_clean": self.adv_clean,
            "adv_artifact": self.adv_artifact,
            "recon": self.recon,
            "cycle": self.cycle,
            "art": self.art,
            "total": self.total,
            "d_clean": self.d_clean,
            "d_artifact": self.d_artifact,
        }


def _check_finite(*tensors: torch.Tensor) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise ValueError("non-finite discriminator scores")


def adversarial_loss(
    d_real: torch.Tensor,
    d_fake: torch.Tensor,
    role: str,
    gan_mode: str = "nonsaturating",
) -> torch.Tensor:
    """GAN loss from patch score maps.

    Discriminator role: push real scores up and fake scores down
    (mean softplus(-d_real) + mean softplus(d_fake)). Generator role:
    push fake scores up (mean softplus(-d_fake)). The lsgan variant
    regresses real patches to 1 and fake patches to 0.
    """
    if role not in ("generator", "discriminator"):
        raise ValueError(f"role must be 'generator' or 'discriminator', got {role!r}")
    if gan_mode not in GAN_MODES:
        raise ValueError(f"gan_mode must be one of {GAN_MODES}, got {gan_mode!r}")
    _check_finite(d_fake)
    if role == "discriminator":
        _check_finite(d_real)
        if gan_mode == "nonsaturating":
            return F.softplus(-d_real).mean() + F.softplus(d_fake).mean()
        return ((d_real - 1.0) ** 2).mean() + (d_fake**2).mean()
    if gan_mode == "nonsaturating":
        return F.softplus(-d_fake).mean()
    return ((d_fake - 1.0) ** 2).mean()


def adv_loss_clean(d_real, d_fake, role, gan_mode="nonsaturating"):
    """Adversarial term for the clean domain (real: y, fake: corrected x)."""
    return adversarial_loss(d_real, d_fake, role, gan_mode)


def adv_loss_artifact(d_real, d_fake, role, gan_mode="nonsaturating"):
    """Adversarial term for the artifact domain (real: x_a, fake: transferred y)."""
    return adversarial_loss(d_real, d_fake, role, gan_mode)


def recon_loss(xa_rec: torch.Tensor, xa: torch.Tensor, y_rec: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Self-reconstruction: mean |xa_rec - xa| + mean |y_rec - y|."""
    return (xa_rec - xa).abs().mean() + (y_rec - y).abs().mean()


def cycle_loss(y_cycled: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean L1 between the re-corrected transfer output and the clean input."""
    return (y_cycled - y).abs().mean()


def artifact_consistency_loss(
    xa: torch.Tensor, x_corrected: torch.Tensor, ya_transfer: torch.Tensor, y: torch.Tensor
) -> torch.Tensor:
    """Mean L1 between the removed and the added artifact difference maps."""
    return ((xa - x_corrected) - (ya_transfer - y)).abs().mean()


def total_loss(
    adv_clean_term, adv_artifact_term, recon_term, cycle_term, art_term, weights: LossWeights
):
    """Weighted sum of the five generator-side terms."""
    return (
        weights.adv_clean * adv_clean_term
        + weights.adv_artifact * adv_artifact_term
        + weights.recon * recon_term
        + weights.cycle * cycle_term
        + weights.art * art_term
    )

"""Adversarial base losses and consistency regularization terms.

All functions build graph-tracked scalars from logit/image tensors. The
non-saturating loss is written in softplus form, which never evaluates
log(0): -log(sigmoid(x)) = softplus(-x) and -log(1 - sigmoid(x)) =
softplus(x).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOSS_FAMILIES = ("ns", "hinge", "wgan")


def generator_loss(family: str, d_fake: Tensor) -> Tensor:
    """Generator-side base loss of the given family on fake logits."""
    if family == "ns":
        return ad.tensor_mean(ad.softplus(ad.negate(d_fake)))
    if family in ("hinge", "wgan"):
        return ad.negate(ad.tensor_mean(d_fake))
    raise ValueError(f"unknown loss family {family!r}")


def ns_losses(d_real: Tensor, d_fake: Tensor) -> Tuple[Tensor, Tensor]:
    """Non-saturating GAN losses from real/fake logits."""
    loss_d = ad.add(ad.tensor_mean(ad.softplus(ad.negate(d_real))),
                    ad.tensor_mean(ad.softplus(d_fake)))
    return loss_d, generator_loss("ns", d_fake)


def hinge_losses(d_real: Tensor, d_fake: Tensor) -> Tuple[Tensor, Tensor]:
    """Hinge discriminator loss with margin 1; generator loss -mean(d_fake)."""
    ones_r = Tensor(np.ones_like(d_real.data))
    ones_f = Tensor(np.ones_like(d_fake.data))
    real_term = ad.negate(ad.tensor_mean(
        ad.min_with_const(ad.subtract(d_real, ones_r), 0.0)))
    fake_term = ad.negate(ad.tensor_mean(
        ad.min_with_const(ad.subtract(ad.negate(d_fake), ones_f), 0.0)))
    loss_d = ad.add(real_term, fake_term)
    return loss_d, generator_loss("hinge", d_fake)


def wgan_losses(d_real: Tensor, d_fake: Tensor) -> Tuple[Tensor, Tensor]:
    """Wasserstein critic/generator losses on raw critic values."""
    loss_d = ad.add(ad.negate(ad.tensor_mean(d_real)),
                    ad.tensor_mean(d_fake))
    return loss_d, generator_loss("wgan", d_fake)


_FAMILIES = {"ns": ns_losses, "hinge": hinge_losses, "wgan": wgan_losses}


def base_losses(family: str, d_real: Tensor,
                d_fake: Tensor) -> Tuple[Tensor, Tensor]:
    """Dispatch to the configured loss family."""
    if family not in _FAMILIES:
        raise ValueError(f"unknown loss family {family!r}")
    return _FAMILIES[family](d_real, d_fake)


def consistency_l2(a: Tensor, b: Tensor) -> Tensor:
    """Mean over the batch of squared L2 distance between matching rows."""
    if a.shape != b.shape:
        raise ad.ShapeError(
            f"consistency_l2: shapes {a.shape} and {b.shape} differ")
    n = a.shape[0] if a.data.ndim > 0 else 1
    total = ad.tensor_sum(ad.square(ad.subtract(a, b)))
    return ad.scale(total, 1.0 / n)


def bcr_discriminator_terms(d_x: Tensor, d_tx: Tensor, d_gz: Tensor,
                            d_tgz: Tensor) -> Tuple[Tensor, Tensor]:
    """Consistency penalties pairing each batch with its augmented twin."""
    return consistency_l2(d_x, d_tx), consistency_l2(d_gz, d_tgz)


def zcr_terms(d_gz: Tensor, d_gtz: Tensor, g_z: Tensor,
              g_tz: Tensor) -> Tuple[Tensor, Tensor]:
    """Latent-perturbation terms: discriminator insensitivity penalty and
    (negated) generator diversity reward."""
    l_dis = consistency_l2(d_gz, d_gtz)
    l_gen = ad.negate(consistency_l2(g_z, g_tz))
    return l_dis, l_gen


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar loss components of one step; absent terms are zero."""

    base_d: float = 0.0
    base_g: float = 0.0
    l_real: float = 0.0
    l_fake: float = 0.0
    l_dis: float = 0.0
    l_gen: float = 0.0
    total_d: float = 0.0
    total_g: float = 0.0

    @classmethod
    def from_components(cls, *, base_d: float = 0.0, base_g: float = 0.0,
                        l_real: float = 0.0, l_fake: float = 0.0,
                        l_dis: float = 0.0, l_gen: float = 0.0,
                        lambda_real: float = 0.0, lambda_fake: float = 0.0,
                        lambda_dis: float = 0.0,
                        lambda_gen: float = 0.0) -> "LossBreakdown":
        """Totals accumulate left to right, matching the loss-tensor build
        order, so they recompute exactly from the stored components."""
        total_d = base_d + lambda_real * l_real + lambda_fake * l_fake \
            + lambda_dis * l_dis
        total_g = base_g + lambda_gen * l_gen
        return cls(base_d=base_d, base_g=base_g, l_real=l_real,
                   l_fake=l_fake, l_dis=l_dis, l_gen=l_gen,
                   total_d=total_d, total_g=total_g)

    FIELDS = ("base_d", "base_g", "l_real", "l_fake", "l_dis", "l_gen",
              "total_d", "total_g")

    def merged_with(self, other: "LossBreakdown") -> "LossBreakdown":
        """Overlay generator-side fields from ``other`` onto this breakdown."""
        return LossBreakdown(
            base_d=self.base_d, l_real=self.l_real, l_fake=self.l_fake,
            l_dis=self.l_dis, total_d=self.total_d,
            base_g=other.base_g, l_gen=other.l_gen, total_g=other.total_g)

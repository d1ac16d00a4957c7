"""WGAN-GP adversarial, attribute classification, cycle-consistency and the
combined objectives with odd-iteration gating."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Optional

import torch
import torch.nn.functional as F

from .labelspace import Encoding
from .nets import ShapeMismatch


class UnlabelledBatch(ValueError):
    pass


@dataclass
class LossWeights:
    lambda_cls: float = 1.0
    lambda_cyc: float = 10.0
    lambda_gp: float = 10.0
    lambda_mch: float = 0.5

    def __post_init__(self):
        for name, v in vars(self).items():
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


def gradient_penalty(critic: Callable[[torch.Tensor], torch.Tensor], real: torch.Tensor,
                     fake: torch.Tensor, alpha: Optional[torch.Tensor] = None,
                     generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """mean over samples of (||grad_x critic(x_hat)||_2 - 1)^2.

    ``x_hat = alpha * real + (1 - alpha) * fake`` with one alpha ~ U(0, 1)
    per sample. The graph is kept so the penalty can be differentiated
    w.r.t. the critic's parameters.
    """
    if real.shape != fake.shape:
        raise ShapeMismatch(f"real {tuple(real.shape)} vs fake {tuple(fake.shape)}")
    if alpha is None:
        alpha = torch.rand(real.shape[0], generator=generator, dtype=real.dtype)
    alpha = alpha.to(real.dtype).reshape(-1, *([1] * (real.dim() - 1)))
    x_hat = (alpha * real.detach() + (1 - alpha) * fake.detach()).requires_grad_(True)
    out = critic(x_hat)
    grad, = torch.autograd.grad(out.sum(), x_hat, create_graph=True)
    norms = grad.flatten(1).norm(2, dim=1)
    return ((norms - 1) ** 2).mean()


def wasserstein_critic_loss(adv_real: torch.Tensor, adv_fake: torch.Tensor) -> torch.Tensor:
    return adv_fake.mean() - adv_real.mean()


def adv_loss_D(D, real: torch.Tensor, fake: torch.Tensor, lambda_gp: float = 10.0,
               rng: Optional[torch.Generator] = None, alpha: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Critic loss: mean D_adv(fake) - mean D_adv(real) + lambda_gp * GP.

    ``D`` is a :class:`~matchgan.nets.Discriminator` or any callable mapping
    images to one score per image. ``fake`` is detached here.
    """
    if real.shape != fake.shape:
        raise ShapeMismatch(f"real {tuple(real.shape)} vs fake {tuple(fake.shape)}")
    critic = D.adv if hasattr(D, "adv") else D
    loss = wasserstein_critic_loss(critic(real), critic(fake.detach()))
    if lambda_gp:
        loss = loss + lambda_gp * gradient_penalty(critic, real, fake, alpha, rng)
    return loss


def adv_loss_G(D, fake: torch.Tensor) -> torch.Tensor:
    critic = D.adv if hasattr(D, "adv") else D
    return -critic(fake).mean()


def classification_loss(logits: torch.Tensor, labels: torch.Tensor, encoding=Encoding.MULTI_LABEL_BINARY):
    """Sigmoid BCE summed over attributes, or softmax CE for one-hot labels; batch mean."""
    if labels is None:
        raise UnlabelledBatch("classification loss needs labels")
    if logits.shape != labels.shape:
        raise ShapeMismatch(f"logits {tuple(logits.shape)} vs labels {tuple(labels.shape)}")
    labels = labels.to(logits.dtype)
    if Encoding(encoding) is Encoding.ONE_HOT:
        return F.cross_entropy(logits, labels.argmax(dim=1))
    return F.binary_cross_entropy_with_logits(logits, labels, reduction="sum") / logits.shape[0]


def cls_loss_D(D, real: torch.Tensor, labels: Optional[torch.Tensor], encoding=Encoding.MULTI_LABEL_BINARY):
    if labels is None:
        raise UnlabelledBatch("cls_loss_D is defined on labelled batches only")
    return classification_loss(D(real)[2], labels, encoding)


def cls_loss_G(D, fake: torch.Tensor, target_labels: torch.Tensor, encoding=Encoding.MULTI_LABEL_BINARY):
    return classification_loss(D(fake)[2], target_labels, encoding)


def l1_reconstruction(x: torch.Tensor, x_rec: torch.Tensor) -> torch.Tensor:
    if x.shape != x_rec.shape:
        raise ShapeMismatch(f"{tuple(x.shape)} vs {tuple(x_rec.shape)}")
    return (x - x_rec).abs().mean()


def cycle_loss(G, real: torch.Tensor, src_labels: Optional[torch.Tensor],
               trg_labels: torch.Tensor, fake: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean L1 between ``real`` and ``G(G(real, trg), src)``.

    Pass ``fake = G(real, trg)`` to reuse an already computed translation.
    """
    if src_labels is None:
        raise UnlabelledBatch("cycle loss needs source labels")
    if fake is None:
        fake = G(real, trg_labels)
    return l1_reconstruction(real, G(fake, src_labels))


def total_loss_D(parts: Mapping[str, torch.Tensor], weights: LossWeights, is_odd: bool) -> torch.Tensor:
    """adv + odd * (lambda_cls * cls + lambda_mch * mch); absent parts are skipped."""
    loss = parts["adv"]
    if is_odd:
        if "cls" in parts:
            loss = loss + weights.lambda_cls * parts["cls"]
        if "mch" in parts:
            loss = loss + weights.lambda_mch * parts["mch"]
    return loss


def total_loss_G(parts: Mapping[str, torch.Tensor], weights: LossWeights, is_odd: bool) -> torch.Tensor:
    """adv + lambda_cls * cls + lambda_mch * mch + odd * lambda_cyc * cyc.

    ``parts["adv"]`` is the generator's adversarial term, already negated
    (see :func:`adv_loss_G`).
    """
    loss = parts["adv"]
    if "cls" in parts:
        loss = loss + weights.lambda_cls * parts["cls"]
    if "mch" in parts:
        loss = loss + weights.lambda_mch * parts["mch"]
    if is_odd and "cyc" in parts:
        loss = loss + weights.lambda_cyc * parts["cyc"]
    return loss

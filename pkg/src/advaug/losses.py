"""Loss terms, the gradient-reversal op, and the overall training objective.

The trainer minimizes, in a single fused backward pass,

    overall = task + lambda_gan * gan_g + gamma_reg * reg

where the task term reaches the generators through ``grad_reverse`` so that
one backward simultaneously descends the task loss for the learner and
ascends it for the generators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import ConsistencyError, TrainingAbort
from .warp import identity_flow, spatial_gradient

__all__ = [
    "LossWeights",
    "LossReport",
    "METRICS_HEADER",
    "task_loss",
    "grad_reverse",
    "reg_affine",
    "reg_deform",
    "reg_appear",
    "gan_loss_d",
    "gan_loss_g",
    "gan_loss_d_from_logits",
    "gan_loss_g_from_logits",
    "overall_objective",
]

METRICS_HEADER = "step,l_adv,l_gan_g,l_gan_d,l_reg_affine,l_reg_deform,l_reg_appear,l_overall"


@dataclass(frozen=True)
class LossWeights:
    """Weights of the GAN and magnitude-regularization terms."""

    lambda_gan: float = 1.0
    gamma_reg: float = 0.1

    def __post_init__(self):
        for name in ("lambda_gan", "gamma_reg"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class LossReport:
    """Per-step scalar losses. ``l_overall`` must equal the weighted sum."""

    step: int
    l_adv: float
    l_gan_g: float
    l_gan_d: float
    l_reg_affine: float
    l_reg_deform: float
    l_reg_appear: float
    l_overall: float
    weights: LossWeights = field(default_factory=LossWeights)

    @property
    def l_reg(self) -> float:
        return self.l_reg_affine + self.l_reg_deform + self.l_reg_appear

    def __post_init__(self):
        vals = (self.l_adv, self.l_gan_g, self.l_gan_d, self.l_reg_affine,
                self.l_reg_deform, self.l_reg_appear, self.l_overall)
        if not all(math.isfinite(v) for v in vals):
            raise TrainingAbort(f"non-finite loss at step {self.step}: {vals}")
        expected = self.l_adv + self.weights.lambda_gan * self.l_gan_g + self.weights.gamma_reg * self.l_reg
        if abs(expected - self.l_overall) > 1e-6:
            raise ConsistencyError(
                f"l_overall={self.l_overall} deviates from weighted sum {expected} at step {self.step}"
            )

    @classmethod
    def build(cls, step, l_adv, l_gan_g, l_gan_d, regs, weights):
        """Assemble a self-consistent report from component floats."""
        ra, rd, ri = (float(regs.get(k, 0.0)) for k in ("affine", "deform", "appearance"))
        overall = float(l_adv) + weights.lambda_gan * float(l_gan_g) + weights.gamma_reg * (ra + rd + ri)
        return cls(step, float(l_adv), float(l_gan_g), float(l_gan_d), ra, rd, ri, overall, weights)

    def csv_row(self) -> str:
        vals = (self.l_adv, self.l_gan_g, self.l_gan_d, self.l_reg_affine,
                self.l_reg_deform, self.l_reg_appear, self.l_overall)
        return ",".join([str(self.step)] + [repr(v) for v in vals])


def task_loss(predictions: Tensor, labels: Tensor, task: str = "classification") -> Tensor:
    """Mean cross-entropy from logits.

    classification: predictions (B, K), labels (B,).
    segmentation: predictions (B, K, H, W), labels (B, H, W); per-pixel mean.
    """
    if task == "classification":
        if predictions.dim() != 2:
            raise ValueError(f"classification logits must be (B, K), got {tuple(predictions.shape)}")
    elif task == "segmentation":
        if predictions.dim() != 4:
            raise ValueError(f"segmentation logits must be (B, K, H, W), got {tuple(predictions.shape)}")
    else:
        raise ValueError(f"unknown task {task!r}")
    num_classes = predictions.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(
            f"label values must lie in [0, {num_classes}), got range "
            f"[{int(labels.min())}, {int(labels.max())}]"
        )
    return F.cross_entropy(predictions, labels)


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, scale):
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return -ctx.scale * grad_output, None


def grad_reverse(x: Tensor, scale: float = 1.0) -> Tensor:
    """Identity in the forward pass; multiplies the gradient by -scale on the way back."""
    if not (scale > 0 and math.isfinite(scale)):
        raise ValueError(f"scale must be positive and finite, got {scale}")
    return _GradReverse.apply(x, scale)


def reg_affine(flow: Tensor) -> Tensor:
    """Mean squared deviation of a sampling flow from the identity flow."""
    if flow.shape[-1] != 2 or flow.dim() < 3:
        raise ValueError(f"expected a (..., H, W, 2) flow, got {tuple(flow.shape)}")
    h, w = flow.shape[-3], flow.shape[-2]
    base = identity_flow(h, w, dtype=flow.dtype, device=flow.device)
    return ((flow - base) ** 2).mean()


def reg_deform(residual_flow: Tensor) -> Tensor:
    """Smoothness penalty: mean squared forward difference of a residual displacement field."""
    return (spatial_gradient(residual_flow) ** 2).mean()


def reg_appear(mask: Tensor) -> Tensor:
    """Magnitude penalty: mean squared entry of an additive appearance mask."""
    return (mask ** 2).mean()


def _check_scores(p: Tensor, name: str) -> None:
    if p.numel() == 0:
        raise ValueError(f"{name} is empty")
    if not bool(((p > 0) & (p < 1)).all()):
        raise ValueError(f"{name} must lie strictly in (0, 1)")


def _logit(p: Tensor) -> Tensor:
    return torch.log(p) - torch.log1p(-p)


def gan_loss_d_from_logits(logit_real: Tensor, logit_fake: Tensor) -> Tensor:
    """mean log sigmoid(real) + mean log(1 - sigmoid(fake)), in stable softplus form.

    The discriminator ascends this value; callers minimize its negation.
    """
    return (-F.softplus(-logit_real)).mean() + (-F.softplus(logit_fake)).mean()


def gan_loss_d(p_real: Tensor, p_fake: Tensor) -> Tensor:
    """Discriminator objective from probability scores in (0, 1)."""
    _check_scores(p_real, "p_real")
    _check_scores(p_fake, "p_fake")
    return gan_loss_d_from_logits(_logit(p_real), _logit(p_fake))


def gan_loss_g_from_logits(logit_fake: Tensor, variant: str = "minimax") -> Tensor:
    """Generator GAN term to be minimized.

    minimax: mean log(1 - sigmoid(fake)) as written in the adversarial game;
    nonsaturating: -mean log sigmoid(fake).
    """
    if variant == "minimax":
        return (-F.softplus(logit_fake)).mean()
    if variant == "nonsaturating":
        return F.softplus(-logit_fake).mean()
    raise ValueError(f"unknown gan variant {variant!r}")


def gan_loss_g(p_fake: Tensor, variant: str = "minimax") -> Tensor:
    """Generator GAN term from probability scores in (0, 1)."""
    _check_scores(p_fake, "p_fake")
    return gan_loss_g_from_logits(_logit(p_fake), variant)


def overall_objective(l_adv, l_gan_g, l_reg, weights: LossWeights):
    """Weighted sum of the three loss groups. Works on floats or tensors."""
    terms = {"l_adv": l_adv, "l_gan_g": l_gan_g, "l_reg": l_reg}
    for name, t in terms.items():
        val = float(t.detach()) if isinstance(t, Tensor) else float(t)
        if not math.isfinite(val):
            raise TrainingAbort(f"non-finite objective component {name}={val}")
    return l_adv + weights.lambda_gan * l_gan_g + weights.gamma_reg * l_reg

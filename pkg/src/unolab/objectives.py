"""Training objectives over gathered forward outputs.

Three terms:

  flow      mean squared error between predicted and target velocity over
            every generative position (and latent dim) in the batch
  language  next-token cross-entropy of the caption head, mean over every
            supervised caption position in the batch
  vision    negative cosine similarity between each metaquery's final hidden
            state (truncated to the understanding feature width, an identity
            connector) and its clean-image patch feature, mean over queries

The combined loss is  flow + lambda1 * language + lambda2 * vision.  A term
is added only when it is enabled, its weight is positive, and its rows exist
in the batch; an excluded term contributes exactly zero and is absent from
the autograd graph, so its gradient is exactly zero by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .model import BatchOutputs

COS_EPS = 1e-8


@dataclass(frozen=True)
class UnoLossConfig:
    lambda1: float = 0.1  # language weight
    lambda2: float = 0.2  # vision weight
    enable_language: bool = True
    enable_vision: bool = True

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    """Detached per-term values. A term that was not computed (absent rows or
    disabled) is None; total always reflects exactly the added terms."""

    total: float
    mse: float | None
    lang: float | None
    vis: float | None


def loss_flow(out: BatchOutputs) -> torch.Tensor:
    if out.vel_pred.shape[0] == 0:
        raise ValueError("loss_flow: batch has no generative positions")
    return ((out.vel_pred - out.vel_target) ** 2).mean()


def loss_language(out: BatchOutputs) -> torch.Tensor:
    if out.cap_logits.shape[0] == 0:
        raise ValueError("loss_language: batch has no supervised caption positions")
    return F.cross_entropy(out.cap_logits, out.cap_targets)


def loss_vision(out: BatchOutputs) -> torch.Tensor:
    if out.mq_hidden.shape[0] == 0:
        raise ValueError("loss_vision: batch has no supervised metaqueries")
    d_und = out.vision_targets.shape[1]
    h = out.mq_hidden[:, :d_und]  # identity connector: truncate to feature width
    v = out.vision_targets
    hn = torch.linalg.vector_norm(h, dim=-1).clamp_min(COS_EPS)
    vn = torch.linalg.vector_norm(v, dim=-1).clamp_min(COS_EPS)
    cos = (h * v).sum(-1) / (hn * vn)
    return -cos.mean()


def loss_total(
    out: BatchOutputs, cfg: UnoLossConfig
) -> tuple[torch.Tensor, LossBreakdown]:
    terms: list[torch.Tensor] = []
    mse = lang = vis = None
    if out.vel_pred.shape[0]:
        t = loss_flow(out)
        terms.append(t)
        mse = float(t.detach())
    if cfg.enable_language and cfg.lambda1 > 0 and out.cap_logits.shape[0]:
        t = loss_language(out)
        terms.append(cfg.lambda1 * t)
        lang = float(t.detach())
    if cfg.enable_vision and cfg.lambda2 > 0 and out.mq_hidden.shape[0]:
        t = loss_vision(out)
        terms.append(cfg.lambda2 * t)
        vis = float(t.detach())
    if not terms:
        raise ValueError("loss_total: no loss terms apply to this batch")
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    bd = LossBreakdown(total=float(total.detach()), mse=mse, lang=lang, vis=vis)
    if not math.isfinite(bd.total):
        raise FloatingPointError(f"non-finite loss: {bd}")
    return total, bd

"""Training objective: Dice + weighted cross-entropy segmentation loss and symmetric InfoNCE."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    lambda_dice: float = 0.6
    lambda_ce: float = 0.4
    lambda_vl: float = 0.02
    tau: float = 0.07
    # None: derive inverse-frequency weights from the training catalog
    class_weights: Optional[tuple[float, ...]] = None
    epsilon: float = 1e-6

    def __post_init__(self):
        if min(self.lambda_dice, self.lambda_ce, self.lambda_vl) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.tau <= 0 or self.epsilon <= 0:
            raise ValueError("tau and epsilon must be positive")
        if self.class_weights is not None:
            object.__setattr__(self, "class_weights", tuple(float(w) for w in self.class_weights))
            if any(w <= 0 for w in self.class_weights):
                raise ValueError("class weights must be positive")


def _batched(p: torch.Tensor, y: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(y.shape)}")
    if p.ndim == 3:
        p, y = p[None], y[None]
    if p.ndim != 4:
        raise ValueError("expected (C, H, W) or (B, C, H, W) tensors")
    return p, y.to(p.dtype)


def dice_loss(p: torch.Tensor, y: torch.Tensor, epsilon: float = 1e-6) -> torch.Tensor:
    """Soft multi-class Dice loss, per item over its pixels, averaged over the batch."""
    p, y = _batched(p, y)
    inter = (p * y).sum(dim=(2, 3))
    denom = p.sum(dim=(2, 3)) + y.sum(dim=(2, 3)) + epsilon
    return (1 - (2 * inter / denom).mean(dim=1)).mean()


def weighted_ce(p: torch.Tensor, y: torch.Tensor, weights: Optional[Sequence[float] | torch.Tensor] = None) -> torch.Tensor:
    """Class-weighted cross-entropy on probabilities, averaged over all pixels in the batch."""
    p, y = _batched(p, y)
    c = p.shape[1]
    w = torch.ones(c, dtype=p.dtype, device=p.device) if weights is None else torch.as_tensor(weights, dtype=p.dtype, device=p.device)
    if w.shape != (c,):
        raise ValueError(f"expected {c} class weights, got {tuple(w.shape)}")
    n = p.shape[0] * p.shape[2] * p.shape[3]
    logp = torch.log(p.clamp(min=PROB_FLOOR, max=1.0))
    return -(w.view(1, c, 1, 1) * y * logp).sum() / n


def seg_loss(p: torch.Tensor, y: torch.Tensor, cfg: LossConfig = LossConfig(), weights=None) -> torch.Tensor:
    weights = cfg.class_weights if weights is None else weights
    return cfg.lambda_dice * dice_loss(p, y, cfg.epsilon) + cfg.lambda_ce * weighted_ce(p, y, weights)


def infonce_symmetric(v: torch.Tensor, t: torch.Tensor, tau: float = 0.07) -> torch.Tensor:
    """Symmetric image<->text InfoNCE over a batch of unit-norm embedding pairs."""
    if v.ndim != 2 or v.shape != t.shape or v.shape[0] < 1:
        raise ValueError(f"expected matching (N, D) embeddings, got {tuple(v.shape)} and {tuple(t.shape)}")
    for m in (v, t):
        if (m.norm(dim=1) - 1).abs().max() > 1e-3:
            raise ValueError("unnormalized embedding")
    logits = v @ t.T / tau
    diag = logits.diagonal()
    v2t = _neg_log_softmax_diag(logits - diag[:, None])
    t2v = _neg_log_softmax_diag(logits.T - diag[:, None])
    return (v2t + t2v).sum() / (2 * v.shape[0])


def _neg_log_softmax_diag(d: torch.Tensor) -> torch.Tensor:
    """-log softmax at the diagonal, given rows already shifted so the diagonal is 0.

    Written as log(1 + sum_{k!=i} exp(d_ik)) so well-separated pairs do not lose their
    tiny loss to cancellation against a large logsumexp.
    """
    off = ~torch.eye(d.shape[0], dtype=torch.bool, device=d.device)
    d = d.masked_fill(~off, -torch.inf)
    m = d.max(dim=1).values.clamp(min=0)
    big = m + torch.log(torch.exp(-m) + torch.exp(d - m[:, None]).sum(dim=1))
    small = torch.log1p(torch.exp(d.clamp(max=0)).sum(dim=1))
    return torch.where(m > 0, big, small)


def total_loss(
    p: torch.Tensor,
    y: torch.Tensor,
    v: Optional[torch.Tensor],
    t: Optional[torch.Tensor],
    cfg: LossConfig = LossConfig(),
    weights=None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Segmentation loss plus weighted contrastive term; returns (total, component record)."""
    weights = cfg.class_weights if weights is None else weights
    dice = dice_loss(p, y, cfg.epsilon)
    ce = weighted_ce(p, y, weights)
    if v is None or t is None or cfg.lambda_vl == 0:
        # no contrastive term: baseline model, or the term is switched off
        vl = torch.zeros((), dtype=p.dtype, device=p.device)
    else:
        vl = infonce_symmetric(v, t, cfg.tau)
    total = cfg.lambda_dice * dice + cfg.lambda_ce * ce + cfg.lambda_vl * vl
    record = {"dice": dice.item(), "ce": ce.item(), "vl": vl.item(), "total": total.item()}
    return total, record

"""
Recommender losses

    L_r     = mean over (u, i, j) of -log sigma(y_ui - y_uj)
    L_s     = mean over nodes of -log softmax_v(cos(z_u, z_hat_v) / tau)[u]
    L       = L_r + theta1 * (L_s_user + L_s_item) + theta2 * ||Theta||^2
"""
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from kgdiffrec.errors import DivergenceError


def predict(user_rows: torch.Tensor, item_rows: torch.Tensor) -> torch.Tensor:
    """Inner product of matching user and item rows"""
    return (user_rows * item_rows).sum(dim=-1)


def bpr_loss(positive_scores: torch.Tensor, negative_scores: torch.Tensor) -> torch.Tensor:
    """Mean of -log sigma(y_pos - y_neg); softplus keeps large negative margins finite"""
    if positive_scores.numel() == 0:
        raise ValueError("bpr_loss needs at least one triple")
    return F.softplus(negative_scores - positive_scores).mean()


def infonce_loss(main_rows: torch.Tensor, contrastive_rows: torch.Tensor, tau: float) -> torch.Tensor:
    """
    InfoNCE between two views of the same nodes

    Row u of each view is the positive pair; every other row of the
    contrastive view is a negative. Zero-norm rows get cosine 0.
    """
    if main_rows.shape != contrastive_rows.shape:
        raise ValueError(f"View shapes differ: {tuple(main_rows.shape)} vs {tuple(contrastive_rows.shape)}")
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if main_rows.shape[0] == 0:
        return main_rows.new_zeros(())
    logits = F.normalize(main_rows, dim=1) @ F.normalize(contrastive_rows, dim=1).T / tau
    return (torch.logsumexp(logits, dim=1) - logits.diagonal()).mean()


def squared_norm(parameters: Iterable[torch.Tensor]) -> torch.Tensor:
    """||Theta||^2 summed over all given tensors"""
    total: Optional[torch.Tensor] = None
    for parameter in parameters:
        term = parameter.pow(2).sum()
        total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return total


@dataclass
class LossBreakdown:
    """
    Terms of the joint objective for one batch

    Fields:
        bpr: L_r
        contrastive_user: L_s over users
        contrastive_item: L_s over items
        weight_decay: ||Theta||^2 (before theta2)
        total: Weighted sum
    """
    bpr: torch.Tensor
    contrastive_user: torch.Tensor
    contrastive_item: torch.Tensor
    weight_decay: torch.Tensor
    total: torch.Tensor
    theta1: float
    theta2: float
    tau: float

    def as_dict(self) -> Dict[str, float]:
        return {
            'bpr_loss': float(self.bpr.item()),
            'contrastive_user': float(self.contrastive_user.item()),
            'contrastive_item': float(self.contrastive_item.item()),
            'weight_decay': float(self.weight_decay.item()),
            'total': float(self.total.item()),
        }


def joint_loss(
    bpr: torch.Tensor,
    contrastive_user: torch.Tensor,
    contrastive_item: torch.Tensor,
    weight_decay: torch.Tensor,
    theta1: float = 1e-2,
    theta2: float = 1e-5,
    tau: float = 0.5,
) -> LossBreakdown:
    """Combine the loss terms; a zero weight drops its term from the graph"""
    total = bpr
    if theta1 != 0:
        total = total + theta1 * (contrastive_user + contrastive_item)
    if theta2 != 0:
        total = total + theta2 * weight_decay
    return LossBreakdown(
        bpr=bpr,
        contrastive_user=contrastive_user,
        contrastive_item=contrastive_item,
        weight_decay=weight_decay,
        total=total,
        theta1=theta1,
        theta2=theta2,
        tau=tau,
    )


def backward(loss: torch.Tensor, named_parameters: Iterable[Tuple[str, nn.Parameter]]) -> Dict[str, torch.Tensor]:
    """
    Backpropagate `loss` and audit every parameter gradient

    Returns:
        name -> gradient (zeros for parameters the loss does not reach)

    Raises:
        DivergenceError: If the loss or any gradient is non-finite
    """
    if not torch.isfinite(loss):
        raise DivergenceError('loss', f"value={loss.item()}")
    loss.backward()
    gradients: Dict[str, torch.Tensor] = {}
    for name, parameter in named_parameters:
        if not parameter.requires_grad:
            continue
        grad = parameter.grad if parameter.grad is not None else torch.zeros_like(parameter)
        if not torch.isfinite(grad).all():
            raise DivergenceError(name, "gradient contains NaN or Inf")
        gradients[name] = grad
    return gradients


from enum import Enum
from typing import List, Sequence

import torch
from torch import nn

from maceexplain.src.blackbox import DTYPE
from maceexplain.src.errors import InputShapeError

PROBABILITY_CLAMP = 1e-7


class RelevanceLossMode(Enum):
    # Binary cross-entropy against f_k(i)
    FULL_BCE = "full-bce"
    # One-sided -f log(sigma) form
    LITERAL = "literal"


def compute_relevances(
    embeddings: torch.Tensor, weights: torch.Tensor
) -> torch.Tensor:
    """
    Relevance r_jk = <theta^R_jk, e_jk> for every concept of one class.

    Args:
        embeddings: Tensor ... x C x Q
        weights: Relevance chunks of shape C x Q

    Returns:
        Tensor ... x C of signed relevances

    Raises:
        InputShapeError: If the shapes disagree
    """
    if tuple(embeddings.shape[-2:]) != tuple(weights.shape):
        raise InputShapeError(
            f"Embeddings {tuple(embeddings.shape[-2:])} do not match "
            f"relevance weights {tuple(weights.shape)}"
        )
    return (embeddings * weights).sum(dim=-1)


def class_probability_estimate(relevances: torch.Tensor) -> torch.Tensor:
    """sigma(sum_j r_jk) over the last axis."""
    if relevances.shape[-1] < 1:
        raise InputShapeError("At least one concept relevance is required")
    return torch.sigmoid(relevances.sum(dim=-1))


def compute_relevance_loss(
    relevances: torch.Tensor,
    target_probs: torch.Tensor,
    mode: RelevanceLossMode = RelevanceLossMode.FULL_BCE,
) -> torch.Tensor:
    """
    Relevance loss of one class over a batch.

    Args:
        relevances: Tensor B x C of relevances r_jk(i)
        target_probs: Tensor B of black-box probabilities f_k(i)
        mode: FULL_BCE sums the binary cross-entropy; LITERAL sums
            -f_k(i) log sigma_i only

    Returns:
        Non-negative scalar tensor
    """
    if torch.any(target_probs < 0) or torch.any(target_probs > 1):
        raise ValueError("Target probabilities must lie in [0, 1]")
    sigma = class_probability_estimate(relevances).clamp(
        PROBABILITY_CLAMP, 1 - PROBABILITY_CLAMP
    )
    loss = -target_probs * torch.log(sigma)
    if mode is RelevanceLossMode.FULL_BCE:
        loss = loss - (1 - target_probs) * torch.log(1 - sigma)
    return loss.sum()


class RelevanceEstimator(nn.Module):
    """Relevance chunks theta^R, one C_k x Q block per class, no bias."""

    def __init__(
        self,
        concepts_per_class: Sequence[int],
        embed_dim: int,
        generator: torch.Generator,
    ):
        super().__init__()
        self.weights = nn.ParameterList([
            nn.Parameter(
                torch.randn(count, embed_dim, generator=generator,
                            dtype=DTYPE) / embed_dim ** 0.5
            )
            for count in concepts_per_class
        ])

    def forward(self, embeddings: List[torch.Tensor]) -> List[torch.Tensor]:
        return [
            compute_relevances(e, w) for e, w in zip(embeddings, self.weights)
        ]

    def keep(self, kept: Sequence[Sequence[int]]) -> None:
        for k, indices in enumerate(kept):
            rows = self.weights[k].detach()[list(indices)].clone()
            self.weights[k] = nn.Parameter(rows)

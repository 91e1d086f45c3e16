"""
Output generator: reconstructs the first dense-layer output z from the
concatenated concept embeddings and scores the reconstruction.

Embeddings are concatenated class-major, concept-minor:
[e_0,0, e_1,0, ..., e_(C_0-1),0, e_0,1, ...], each block of length Q.
"""
from enum import Enum
from typing import List, Sequence

import torch
from torch import nn

from maceexplain.src.blackbox import DTYPE
from maceexplain.src.errors import InputShapeError

KL_CLAMP = 1e-9
NORMALIZATION_TOLERANCE = 1e-6


class KLDirection(Enum):
    RECONSTRUCTED_ORIGINAL = "reconstructed||original"
    ORIGINAL_RECONSTRUCTED = "original||reconstructed"


def flatten_embeddings(embeddings: List[torch.Tensor]) -> torch.Tensor:
    """Concatenates tensors ... x C_k x Q into ... x (sum C_k * Q)."""
    return torch.cat([e.flatten(start_dim=-2) for e in embeddings], dim=-1)


def reconstruct_dense(
    embeddings: torch.Tensor, layer: nn.Linear
) -> torch.Tensor:
    """
    Affine map from flattened embeddings to the dense-layer output.

    Args:
        embeddings: Tensor ... x (sum C_k * Q), class-major order
        layer: The output generator's linear layer theta^O

    Raises:
        InputShapeError: If the width does not match the layer
    """
    if embeddings.shape[-1] != layer.in_features:
        raise InputShapeError(
            f"Embedding width {embeddings.shape[-1]} does not match "
            f"output generator input {layer.in_features}"
        )
    return layer(embeddings)


def compute_reconstruction_loss(
    z: torch.Tensor, z_hat: torch.Tensor
) -> torch.Tensor:
    """Squared L2 distance ||z - z_hat||^2, summed over a batch."""
    if z.shape != z_hat.shape:
        raise InputShapeError(
            f"Dense outputs differ in shape: {tuple(z.shape)} vs "
            f"{tuple(z_hat.shape)}"
        )
    return ((z - z_hat) ** 2).sum()


def _check_normalized(probs: torch.Tensor, name: str) -> None:
    sums = probs.detach().sum(dim=-1)
    if torch.any(probs.detach() < 0) or torch.any(
        (sums - 1).abs() > NORMALIZATION_TOLERANCE
    ):
        raise ValueError(f"{name} is not a probability vector")


def compute_output_divergence(
    probs_from_z_hat: torch.Tensor, probs_from_z: torch.Tensor
) -> torch.Tensor:
    """
    KL(p || q) with p = f(z_hat), q = f(z), summed over a batch.

    Terms with p_k = 0 contribute 0; q is clamped at 1e-9.

    Raises:
        ValueError: If either input is not normalized
    """
    _check_normalized(probs_from_z_hat, "Reconstructed distribution")
    _check_normalized(probs_from_z, "Original distribution")
    p = probs_from_z_hat
    q = probs_from_z.clamp_min(KL_CLAMP)
    safe_p = torch.where(p > 0, p, torch.ones_like(p))
    terms = torch.where(p > 0, p * torch.log(safe_p / q), torch.zeros_like(p))
    return terms.sum()


class OutputGenerator(nn.Module):
    """Linear head theta^O from all concept embeddings to R^L."""

    def __init__(
        self,
        concepts_per_class: Sequence[int],
        embed_dim: int,
        dense_dim: int,
    ):
        super().__init__()
        self.embed_dim = embed_dim
        self.layer = nn.Linear(
            sum(concepts_per_class) * embed_dim, dense_dim
        ).to(DTYPE)

    def forward(self, embeddings: List[torch.Tensor]) -> torch.Tensor:
        return reconstruct_dense(flatten_embeddings(embeddings), self.layer)

    def keep(
        self,
        concepts_per_class: Sequence[int],
        kept: Sequence[Sequence[int]],
    ) -> None:
        """Deletes the input columns of concepts not listed in kept."""
        columns = []
        offset = 0
        for count, indices in zip(concepts_per_class, kept):
            for j in indices:
                start = (offset + j) * self.embed_dim
                columns.extend(range(start, start + self.embed_dim))
            offset += count
        weight = self.layer.weight.detach()[:, columns].clone()
        bias = self.layer.bias.detach().clone()
        layer = nn.Linear(len(columns), self.layer.out_features).to(DTYPE)
        with torch.no_grad():
            layer.weight.copy_(weight)
            layer.bias.copy_(bias)
        self.layer = layer

"""
Concept maps: per-pixel channel mixing of the tap activation with ReLU.

The filter of concept j of class k is a D-vector. Applied at every spatial
site of x (H x W x D) it gives c_jk[h, w] = max(0, sum_d x[h, w, d] * w[d]),
a 1x1 convolution without bias.
"""
import math
from typing import List, Sequence

import torch
from torch import nn

from maceexplain.src.blackbox import DTYPE
from maceexplain.src.errors import InputShapeError


def count_parameters(
    num_classes: int, concepts_per_class: int, tap_depth: int
) -> int:
    """Number of filter weights K * C * D."""
    return num_classes * concepts_per_class * tap_depth


def class_concept_maps(x: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """
    Concept maps of one class.

    Args:
        x: Tap activation of shape ... x H x W x D
        weights: Filters of shape C x D

    Returns:
        Tensor ... x C x H x W, non-negative

    Raises:
        InputShapeError: If the depths do not match
    """
    if x.shape[-1] != weights.shape[-1]:
        raise InputShapeError(
            f"Tap depth {x.shape[-1]} does not match filter depth "
            f"{weights.shape[-1]}"
        )
    return torch.relu(torch.einsum("...hwd,cd->...chw", x, weights))


def generate_concept_maps(
    x: torch.Tensor, weights: torch.Tensor
) -> torch.Tensor:
    """
    Concept maps of all classes at once.

    Args:
        x: Tap activation of shape ... x H x W x D
        weights: Filters of shape K x C x D

    Returns:
        Tensor ... x K x C x H x W
    """
    if weights.dim() != 3:
        raise InputShapeError("Filters must have shape K x C x D")
    if x.shape[-1] != weights.shape[-1]:
        raise InputShapeError(
            f"Tap depth {x.shape[-1]} does not match filter depth "
            f"{weights.shape[-1]}"
        )
    return torch.relu(torch.einsum("...hwd,kcd->...kchw", x, weights))


def init_filters(
    num_concepts: int, tap_depth: int, generator: torch.Generator
) -> torch.Tensor:
    """Zero-mean Gaussian filters with standard deviation 1/sqrt(D)."""
    return torch.randn(
        num_concepts, tap_depth, generator=generator, dtype=DTYPE
    ) / math.sqrt(tap_depth)


class MapGenerator(nn.Module):
    """
    Learned filters theta^M, one C_k x D block per class.

    Classes may hold different numbers of concepts after pruning.
    """

    def __init__(
        self,
        concepts_per_class: Sequence[int],
        tap_depth: int,
        generator: torch.Generator,
    ):
        super().__init__()
        self.tap_depth = tap_depth
        self.weights = nn.ParameterList([
            nn.Parameter(init_filters(count, tap_depth, generator))
            for count in concepts_per_class
        ])

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        """Concept maps per class, each of shape ... x C_k x H x W."""
        return [class_concept_maps(x, w) for w in self.weights]

    def keep(self, kept: Sequence[Sequence[int]]) -> None:
        """Drops filter rows not listed in kept (per class)."""
        for k, indices in enumerate(kept):
            rows = self.weights[k].detach()[list(indices)].clone()
            self.weights[k] = nn.Parameter(rows)

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch
from torch import nn

from maceexplain.src.blackbox import DTYPE
from maceexplain.src.errors import ConfigurationError, InputShapeError

logger = logging.getLogger(__name__)

HIDDEN_WIDTHS = (256, 64)
NORM_GUARD = 1e-12


def normalize_embeddings(raw: torch.Tensor) -> torch.Tensor:
    """
    L2-normalizes the last axis.

    Vectors with norm below 1e-12 get 1e-12 added to the norm before the
    division.
    """
    norm = raw.norm(dim=-1, keepdim=True)
    norm = torch.where(norm < NORM_GUARD, norm + NORM_GUARD, norm)
    return raw / norm


def squared_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return ((a - b) ** 2).sum(dim=-1)


class EmbeddingNetwork(nn.Module):
    """
    Dense network shared by the concepts of one class.

    Flattened concept maps pass through tanh layers of widths
    hidden_widths + (embed_dim,), then get L2-normalized.
    """

    def __init__(
        self,
        map_size: int,
        embed_dim: int,
        hidden_widths: Sequence[int] = HIDDEN_WIDTHS,
    ):
        super().__init__()
        self.map_size = map_size
        self.embed_dim = embed_dim
        widths = [map_size, *hidden_widths, embed_dim]
        self.layers = nn.ModuleList([
            nn.Linear(w_in, w_out).to(DTYPE)
            for w_in, w_out in zip(widths[:-1], widths[1:])
        ])

    def raw(self, maps: torch.Tensor) -> torch.Tensor:
        """Pre-normalization tanh output for maps of shape ... x H x W."""
        hidden = maps.flatten(start_dim=-2)
        for layer in self.layers:
            hidden = torch.tanh(layer(hidden))
        return hidden

    def forward(self, maps: torch.Tensor) -> torch.Tensor:
        return normalize_embeddings(self.raw(maps))


def embed(
    concept_maps: torch.Tensor, network: EmbeddingNetwork
) -> torch.Tensor:
    """
    Embeds the concept maps of one class.

    Args:
        concept_maps: Tensor ... x C x H x W
        network: The class's embedding network

    Returns:
        Tensor ... x C x Q of unit-norm embeddings

    Raises:
        InputShapeError: If H * W does not match the network input
    """
    if concept_maps.dim() < 3:
        raise InputShapeError("Concept maps must have shape ... x C x H x W")
    size = concept_maps.shape[-1] * concept_maps.shape[-2]
    if size != network.map_size:
        raise InputShapeError(
            f"Concept maps have {size} cells, network expects "
            f"{network.map_size}"
        )
    return network(concept_maps)


class EmbeddingGenerator(nn.Module):
    """Per-class embedding networks theta^E_k with identical layer shapes."""

    def __init__(
        self,
        num_classes: int,
        map_size: int,
        embed_dim: int,
        hidden_widths: Sequence[int] = HIDDEN_WIDTHS,
    ):
        super().__init__()
        self.embed_dim = embed_dim
        self.hidden_widths = tuple(hidden_widths)
        self.networks = nn.ModuleList([
            EmbeddingNetwork(map_size, embed_dim, hidden_widths)
            for _ in range(num_classes)
        ])

    def forward(self, maps: List[torch.Tensor]) -> List[torch.Tensor]:
        return [embed(m, net) for m, net in zip(maps, self.networks)]


@dataclass
class NegativeChoice:
    """
    Result of semi-hard negative selection.

    Args:
        index: Position of the chosen negative in the pool
        distance: Squared distance from anchor to the chosen negative
        fallback: True if no semi-hard negative existed and the hardest
            negative was returned instead
    """
    index: int
    distance: float
    fallback: bool


def select_semi_hard_negative(
    anchor: torch.Tensor,
    positive: torch.Tensor,
    negative_pool: torch.Tensor,
    margin: float = 1.0,
    generator: Optional[torch.Generator] = None,
) -> NegativeChoice:
    """
    Picks a negative n with d(a,p)^2 < d(a,n)^2 < d(a,p)^2 + margin.

    Among qualifying candidates the choice is uniform at random. If none
    qualifies, the hardest negative (smallest d(a,n)^2) is returned and
    flagged as a fallback.

    Raises:
        ConfigurationError: If the pool is empty
    """
    if negative_pool.shape[0] == 0:
        raise ConfigurationError("Negative pool must not be empty")
    with torch.no_grad():
        d_ap = squared_distance(anchor, positive)
        d_an = squared_distance(anchor.unsqueeze(0), negative_pool)
        qualifying = torch.nonzero(
            (d_an > d_ap) & (d_an < d_ap + margin)
        ).flatten()
        if len(qualifying) > 0:
            pick = torch.randint(len(qualifying), (1,), generator=generator)
            index = int(qualifying[pick].item())
            fallback = False
        else:
            index = int(torch.argmin(d_an).item())
            fallback = True
    return NegativeChoice(
        index=index, distance=float(d_an[index].item()), fallback=fallback
    )


@dataclass
class TripletSelection:
    """
    Mined triplets of one class, as index tensors of equal length.

    Triplet t uses embedding [anchor_image[t], concept[t]] as anchor,
    [positive_image[t], concept[t]] as positive and
    [anchor_image[t], negative_concept[t]] as negative.
    """
    anchor_image: torch.Tensor
    positive_image: torch.Tensor
    concept: torch.Tensor
    negative_concept: torch.Tensor
    fallback: torch.Tensor

    def __len__(self) -> int:
        return len(self.anchor_image)


def mine_triplets(
    embeddings: torch.Tensor,
    margin: float = 1.0,
    generator: Optional[torch.Generator] = None,
) -> TripletSelection:
    """
    Mines one negative for every anchor-positive pair of every concept.

    Every image serves as anchor for each concept j, paired with every
    other image's concept-j embedding as positive. Negatives come from the
    anchor image's other concepts, selected by the semi-hard rule.

    Args:
        embeddings: Tensor B x C x Q of in-class embeddings
        margin: Triplet margin alpha
        generator: Random source for choosing among semi-hard candidates
    """
    num_images, num_concepts, _ = embeddings.shape
    with torch.no_grad():
        images = torch.arange(num_images)
        anchor_grid, positive_grid = torch.meshgrid(images, images,
                                                    indexing="ij")
        distinct = anchor_grid != positive_grid
        anchors = anchor_grid[distinct]
        positives = positive_grid[distinct]

        d_ap = squared_distance(embeddings[anchors], embeddings[positives])
        within = squared_distance(
            embeddings.unsqueeze(2), embeddings.unsqueeze(1)
        )
        d_an = within[anchors]
        d_ap = d_ap.unsqueeze(-1)

        other = ~torch.eye(num_concepts, dtype=torch.bool)
        qualifying = other & (d_an > d_ap) & (d_an < d_ap + margin)
        scores = torch.rand(d_an.shape, generator=generator, dtype=DTYPE)
        semi_hard = torch.where(
            qualifying, scores, torch.full_like(scores, -1.0)
        ).argmax(dim=-1)
        hardest = torch.where(
            other, d_an, torch.full_like(d_an, float("inf"))
        ).argmin(dim=-1)
        found = qualifying.any(dim=-1)
        negatives = torch.where(found, semi_hard, hardest)

        num_pairs = len(anchors)
        concepts = torch.arange(num_concepts).repeat(num_pairs)
    return TripletSelection(
        anchor_image=anchors.repeat_interleave(num_concepts),
        positive_image=positives.repeat_interleave(num_concepts),
        concept=concepts,
        negative_concept=negatives.flatten(),
        fallback=~found.flatten(),
    )


def triplet_loss_from_selection(
    embeddings: torch.Tensor,
    selection: TripletSelection,
    margin: float = 1.0,
) -> torch.Tensor:
    """Sum of hinge terms [d_ap^2 - d_an^2 + margin]_+ over the selection."""
    anchor = embeddings[selection.anchor_image, selection.concept]
    positive = embeddings[selection.positive_image, selection.concept]
    negative = embeddings[selection.anchor_image, selection.negative_concept]
    terms = (
        squared_distance(anchor, positive)
        - squared_distance(anchor, negative)
        + margin
    )
    return torch.relu(terms).sum()


def compute_triplet_loss(
    embeddings: torch.Tensor,
    margin: float = 1.0,
    generator: Optional[torch.Generator] = None,
    class_index: Optional[int] = None,
) -> torch.Tensor:
    """
    Triplet loss of one class over the in-class images of a mini-batch.

    Args:
        embeddings: Tensor B_k x C x Q of unit-norm embeddings
        margin: Triplet margin alpha
        generator: Random source for semi-hard mining
        class_index: Only used in log messages

    Returns:
        Scalar tensor; zero with a warning when the class has fewer than
        two images or fewer than two concepts
    """
    num_images, num_concepts = embeddings.shape[0], embeddings.shape[1]
    if num_images < 2 or num_concepts < 2:
        logger.warning(
            "Skipping triplet loss of class %s: %d images, %d concepts",
            class_index, num_images, num_concepts,
        )
        return embeddings.new_zeros(())
    selection = mine_triplets(embeddings, margin, generator)
    fallbacks = int(selection.fallback.sum().item())
    if fallbacks:
        logger.debug(
            "Class %s: %d of %d triplets fell back to the hardest negative",
            class_index, fallbacks, len(selection),
        )
    return triplet_loss_from_selection(embeddings, selection, margin)

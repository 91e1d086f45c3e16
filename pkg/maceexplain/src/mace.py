from dataclasses import dataclass
from typing import Any, Dict, List, Sequence

import numpy as np
import torch
from torch import nn

from maceexplain.src.blackbox import DTYPE, BlackBoxSpec
from maceexplain.src.checkpoint import load_archive, save_archive
from maceexplain.src.concept_maps import MapGenerator
from maceexplain.src.embedding import HIDDEN_WIDTHS, EmbeddingGenerator
from maceexplain.src.errors import CheckpointError, PruningError
from maceexplain.src.reconstruction import OutputGenerator
from maceexplain.src.relevance import RelevanceEstimator

MODEL_FORMAT = "mace-model"


@dataclass
class MaceOutput:
    """
    Everything the model computes from one batch of tap activations.

    Per-class lists are indexed by class k; entry k has C_k concepts.

    Args:
        maps: Concept maps, each ... x C_k x H x W
        embeddings: Unit-norm embeddings, each ... x C_k x Q
        relevances: Relevance scores, each ... x C_k
        z_hat: Reconstructed dense-layer output, ... x L
    """
    maps: List[torch.Tensor]
    embeddings: List[torch.Tensor]
    relevances: List[torch.Tensor]
    z_hat: torch.Tensor


class MaceModel(nn.Module):
    """
    All learned parameters: filters theta^M, embedding networks theta^E,
    relevance chunks theta^R and the output generator theta^O.

    Concepts keep their original index in concept_ids after pruning, so
    reports and file names stay stable.

    Args:
        spec: Shape description of the black box being explained
        concepts_per_class: Number of concepts C_k per class
        embed_dim: Embedding width Q
        seed: Seed for parameter initialization
        hidden_widths: Hidden layer widths of the embedding networks
    """

    def __init__(
        self,
        spec: BlackBoxSpec,
        concepts_per_class: Sequence[int],
        embed_dim: int,
        seed: int = 0,
        hidden_widths: Sequence[int] = HIDDEN_WIDTHS,
    ):
        super().__init__()
        if len(concepts_per_class) != spec.num_classes:
            raise ValueError("Need one concept count per class")
        if any(count < 1 for count in concepts_per_class):
            raise ValueError("Every class needs at least one concept")
        if embed_dim < 1:
            raise ValueError("Embedding dimension must be positive")
        self.spec = spec
        self.embed_dim = embed_dim
        self.seed = seed
        self.hidden_widths = tuple(hidden_widths)
        self.concept_ids: List[List[int]] = [
            list(range(count)) for count in concepts_per_class
        ]
        self.trained_epochs = 0
        self.metadata: Dict[str, Any] = {}

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            generator = torch.default_generator
            self.map_generator = MapGenerator(
                concepts_per_class, spec.tap_depth, generator
            )
            self.embedding_generator = EmbeddingGenerator(
                spec.num_classes,
                spec.tap_height * spec.tap_width,
                embed_dim,
                hidden_widths,
            )
            self.relevance_estimator = RelevanceEstimator(
                concepts_per_class, embed_dim, generator
            )
            self.output_generator = OutputGenerator(
                concepts_per_class, embed_dim, spec.dense_dim
            )

    @classmethod
    def uniform(
        cls,
        spec: BlackBoxSpec,
        num_concepts: int,
        embed_dim: int,
        seed: int = 0,
    ) -> "MaceModel":
        """Model with the same number of concepts for every class."""
        return cls(spec, [num_concepts] * spec.num_classes, embed_dim, seed)

    @property
    def concepts_per_class(self) -> List[int]:
        return [int(w.shape[0]) for w in self.map_generator.weights]

    def forward(self, x: torch.Tensor) -> MaceOutput:
        """
        Runs the model on tap activations of shape ... x H x W x D.
        """
        maps = self.map_generator(x)
        embeddings = self.embedding_generator(maps)
        relevances = self.relevance_estimator(embeddings)
        z_hat = self.output_generator(embeddings)
        return MaceOutput(
            maps=maps, embeddings=embeddings, relevances=relevances,
            z_hat=z_hat,
        )

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def prune(self, kept: Sequence[Sequence[int]]) -> None:
        """
        Removes every concept not listed in kept.

        Args:
            kept: Per class, positions (not original ids) of the concepts
                to keep, in ascending order

        Raises:
            PruningError: If a class would lose all concepts or an index
                is out of range
        """
        counts = self.concepts_per_class
        if len(kept) != len(counts):
            raise PruningError("Need one list of kept concepts per class")
        for k, indices in enumerate(kept):
            if not indices:
                raise PruningError(
                    f"Pruning would remove every concept of class "
                    f"{self.spec.class_names[k]}; review the prune thresholds"
                )
            if sorted(set(indices)) != list(indices) or not all(
                0 <= j < counts[k] for j in indices
            ):
                raise PruningError(
                    f"Invalid kept concepts for class {k}: {list(indices)}"
                )
        self.output_generator.keep(counts, kept)
        self.map_generator.keep(kept)
        self.relevance_estimator.keep(kept)
        self.concept_ids = [
            [ids[j] for j in indices]
            for ids, indices in zip(self.concept_ids, kept)
        ]

    def to_arrays(self) -> Dict[str, np.ndarray]:
        """All parameters under stable names."""
        return {
            name: tensor.detach().numpy().copy()
            for name, tensor in self._named_tensors().items()
        }

    def manifest(self) -> Dict[str, Any]:
        return {
            "format": MODEL_FORMAT,
            "spec": self.spec.to_dict(),
            "concepts_per_class": self.concepts_per_class,
            "concept_ids": self.concept_ids,
            "embed_dim": self.embed_dim,
            "hidden_widths": list(self.hidden_widths),
            "seed": self.seed,
            "trained_epochs": self.trained_epochs,
            "dense_tap": "post-activation",
            "concept_order": "class-major, concept-minor",
            "metadata": self.metadata,
        }

    def save(self, path: str) -> None:
        save_archive(path, self.to_arrays(), self.manifest())

    @classmethod
    def load(cls, path: str, require_trained: bool = False) -> "MaceModel":
        """
        Reads a checkpoint written by save.

        Raises:
            CheckpointError: If the archive is not a MACE checkpoint, is
                incomplete, or is untrained while require_trained is set
        """
        arrays, manifest = load_archive(path)
        if manifest.get("format") != MODEL_FORMAT:
            raise CheckpointError(f"{path} is not a MACE checkpoint")
        if require_trained and not manifest.get("trained_epochs"):
            raise CheckpointError(f"Checkpoint {path} has not been trained")
        model = cls(
            BlackBoxSpec.from_dict(manifest["spec"]),
            manifest["concepts_per_class"],
            manifest["embed_dim"],
            seed=manifest.get("seed", 0),
            hidden_widths=manifest.get("hidden_widths", HIDDEN_WIDTHS),
        )
        expected = model.to_arrays()
        missing = sorted(set(expected) - set(arrays))
        if missing:
            raise CheckpointError(f"Checkpoint {path} lacks arrays: {missing}")
        tensors = model._named_tensors()
        with torch.no_grad():
            for name, tensor in tensors.items():
                if tuple(arrays[name].shape) != tuple(tensor.shape):
                    raise CheckpointError(
                        f"Array {name} has shape {arrays[name].shape}, "
                        f"expected {tuple(tensor.shape)}"
                    )
                tensor.copy_(torch.as_tensor(arrays[name], dtype=DTYPE))
        model.concept_ids = [list(ids) for ids in manifest["concept_ids"]]
        model.trained_epochs = manifest.get("trained_epochs", 0)
        model.metadata = manifest.get("metadata", {})
        return model

    def _named_tensors(self) -> Dict[str, torch.Tensor]:
        tensors: Dict[str, torch.Tensor] = {}
        for k in range(self.spec.num_classes):
            tensors[f"map/class_{k:02d}"] = self.map_generator.weights[k]
            tensors[f"relevance/class_{k:02d}"] = (
                self.relevance_estimator.weights[k]
            )
            network = self.embedding_generator.networks[k]
            for i, layer in enumerate(network.layers):
                prefix = f"embedding/class_{k:02d}/layer_{i}"
                tensors[f"{prefix}/weight"] = layer.weight
                tensors[f"{prefix}/bias"] = layer.bias
        tensors["output/weight"] = self.output_generator.layer.weight
        tensors["output/bias"] = self.output_generator.layer.bias
        return tensors


def clone_model(model: MaceModel) -> MaceModel:
    """Independent copy with identical parameters and bookkeeping."""
    copy = MaceModel(
        model.spec, model.concepts_per_class, model.embed_dim,
        seed=model.seed, hidden_widths=model.hidden_widths,
    )
    copy.load_state_dict(model.state_dict())
    copy.concept_ids = [list(ids) for ids in model.concept_ids]
    copy.trained_epochs = model.trained_epochs
    copy.metadata = dict(model.metadata)
    return copy

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from maceexplain.src.blackbox import DTYPE, BlackBox, LabeledImage
from maceexplain.src.config import TrainConfig
from maceexplain.src.embedding import compute_triplet_loss
from maceexplain.src.errors import ConfigurationError, TrainingDivergedError
from maceexplain.src.mace import MaceModel
from maceexplain.src.reconstruction import (
    KLDirection,
    compute_output_divergence,
    compute_reconstruction_loss,
)
from maceexplain.src.relevance import compute_relevance_loss
from maceexplain.src.synthetic import stack_labels, stack_pixels

logger = logging.getLogger(__name__)


@dataclass
class TapCache:
    """
    Black-box outputs of a set of images, computed once.

    The black box is frozen, so x, z and f(x) never change during training.
    """
    x: torch.Tensor
    z: torch.Tensor
    probs: torch.Tensor
    labels: torch.Tensor
    image_ids: np.ndarray

    @classmethod
    def from_images(
        cls, blackbox: BlackBox, images: Sequence[LabeledImage]
    ) -> "TapCache":
        x, z, probs = blackbox.tap_batch(stack_pixels(images))
        return cls(
            x=torch.as_tensor(x, dtype=DTYPE),
            z=torch.as_tensor(z, dtype=DTYPE),
            probs=torch.as_tensor(probs, dtype=DTYPE),
            labels=torch.as_tensor(stack_labels(images)),
            image_ids=np.array([im.image_id for im in images]),
        )

    def subset(self, index: np.ndarray) -> "TapCache":
        rows = torch.as_tensor(index, dtype=torch.long)
        return TapCache(
            x=self.x[rows],
            z=self.z[rows],
            probs=self.probs[rows],
            labels=self.labels[rows],
            image_ids=self.image_ids[index],
        )

    def __len__(self) -> int:
        return len(self.labels)


def make_batches(
    labels: Sequence[int],
    batch_size: int,
    seed: int,
    epoch: int = 0,
) -> List[np.ndarray]:
    """
    Class-stratified shuffled mini-batches covering every index once.

    The number of batches is len(labels) // batch_size (at least one).
    Each class is shuffled and split evenly across the batches, so every
    batch holds at least two images of a class whenever that class has two
    images per batch available. The random stream is seeded with
    (seed, epoch).

    Returns:
        List of index arrays into labels
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng([seed, epoch])
    num_batches = max(1, len(labels) // batch_size)
    chunks: List[List[np.ndarray]] = [[] for _ in range(num_batches)]
    for label in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == label))
        offset = int(rng.integers(num_batches))
        for b, part in enumerate(np.array_split(members, num_batches)):
            chunks[(b + offset) % num_batches].append(part)
    return [rng.permutation(np.concatenate(parts)) for parts in chunks]


def _mining_generator(*keys: int) -> torch.Generator:
    state = np.random.SeedSequence(list(keys)).generate_state(1)[0]
    return torch.Generator().manual_seed(int(state))


@dataclass
class LossBreakdown:
    """
    Loss terms of one step.

    Args:
        embedding: Triplet loss L^E_k per class
        relevance: Relevance loss L^R_k per class
        reconstruction: L^D, exactly zero when switched off
        output: L^O, exactly zero when switched off
        total: Weighted sum of all terms
    """
    embedding: List[torch.Tensor]
    relevance: List[torch.Tensor]
    reconstruction: torch.Tensor
    output: torch.Tensor
    total: torch.Tensor

    def as_floats(
        self, use_ld: bool = True, use_lo: bool = True
    ) -> Dict[str, float]:
        values = {}
        for k, term in enumerate(self.embedding):
            values[f"LE_{k}"] = float(term.item())
        for k, term in enumerate(self.relevance):
            values[f"LR_{k}"] = float(term.item())
        if use_ld:
            values["LD"] = float(self.reconstruction.item())
        if use_lo:
            values["LO"] = float(self.output.item())
        values["total"] = float(self.total.item())
        return values

    def check_finite(self, epoch: int, step: int) -> None:
        """
        Raises:
            TrainingDivergedError: Naming the first non-finite term
        """
        named = [(f"LE_{k}", t) for k, t in enumerate(self.embedding)]
        named += [(f"LR_{k}", t) for k, t in enumerate(self.relevance)]
        named += [("LD", self.reconstruction), ("LO", self.output)]
        for name, term in named:
            if not torch.isfinite(term):
                raise TrainingDivergedError(name, epoch, step)


def total_loss(
    batch: TapCache,
    model: MaceModel,
    blackbox: BlackBox,
    config: TrainConfig,
    mining_keys: Tuple[int, ...] = (0,),
) -> LossBreakdown:
    """
    Joint objective sum_k (L^E_k + L^R_k) + L^D + L^O on one batch.

    Args:
        batch: Cached black-box outputs of the batch images
        model: MACE model being trained
        blackbox: Frozen classifier, used for f(z_hat)
        config: Loss switches, weights, margin and relevance loss mode
        mining_keys: Seed material for the per-class mining generators
    """
    output = model(batch.x)
    embedding_terms = []
    relevance_terms = []
    for k in range(model.spec.num_classes):
        in_class = batch.labels == k
        generator = _mining_generator(*mining_keys, k)
        embedding_terms.append(compute_triplet_loss(
            output.embeddings[k][in_class], config.margin, generator, k
        ))
        relevance_terms.append(compute_relevance_loss(
            output.relevances[k], batch.probs[:, k], config.loss_mode
        ))

    zero = output.z_hat.new_zeros(())
    reconstruction = (
        compute_reconstruction_loss(batch.z, output.z_hat)
        if config.use_ld else zero
    )
    if config.use_lo:
        reconstructed_probs = blackbox.dense_probabilities(output.z_hat)
        if config.divergence_direction is KLDirection.RECONSTRUCTED_ORIGINAL:
            divergence = compute_output_divergence(
                reconstructed_probs, batch.probs
            )
        else:
            divergence = compute_output_divergence(
                batch.probs, reconstructed_probs
            )
    else:
        divergence = zero

    weights = config.loss_weights
    total = (
        weights["embedding"] * torch.stack(embedding_terms).sum()
        + weights["relevance"] * torch.stack(relevance_terms).sum()
        + weights["reconstruction"] * reconstruction
        + weights["output"] * divergence
    )
    return LossBreakdown(
        embedding=embedding_terms,
        relevance=relevance_terms,
        reconstruction=reconstruction,
        output=divergence,
        total=total,
    )


@dataclass
class TrainReport:
    """
    Per-epoch mean loss values of a training run.

    Wall time and checkpoint paths are excluded from equality so that two
    runs with the same seed compare equal.
    """
    seed: int
    config: Dict[str, Any]
    epochs: List[Dict[str, float]] = field(default_factory=list)
    wall_time: float = field(default=0.0, compare=False)
    checkpoints: List[str] = field(default_factory=list, compare=False)

    def add_epoch(self, values: Dict[str, float]) -> None:
        for name, value in values.items():
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"Invalid recorded loss {name}={value}")
        self.epochs.append(dict(values))

    @property
    def initial_total(self) -> float:
        return self.epochs[0]["total"]

    @property
    def final_total(self) -> float:
        return self.epochs[-1]["total"]

    @property
    def loss_ratio(self) -> float:
        """Final over first epoch mean total loss."""
        if not self.epochs or self.initial_total == 0:
            return 0.0
        return self.final_total / self.initial_total

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.epochs)
        frame.insert(0, "epoch", range(1, len(self.epochs) + 1))
        return frame

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "config": self.config,
            "epochs": self.epochs,
            "wall_time": self.wall_time,
            "checkpoints": self.checkpoints,
        }

    def write(self, stem: str) -> List[str]:
        """Writes {stem}.csv and {stem}.json and returns both paths."""
        csv_path, json_path = f"{stem}.csv", f"{stem}.json"
        self.to_frame().to_csv(csv_path, index=False)
        with open(json_path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
        return [csv_path, json_path]


def _check_class_coverage(labels: torch.Tensor, num_classes: int) -> None:
    counts = torch.bincount(labels, minlength=num_classes)
    thin = [k for k in range(num_classes) if counts[k] < 2]
    if thin:
        raise ConfigurationError(
            f"Classes {thin} have fewer than two training images"
        )


def train(
    blackbox: BlackBox,
    dataset: Sequence[LabeledImage],
    config: TrainConfig,
    model: Optional[MaceModel] = None,
    epochs: Optional[int] = None,
    checkpoint_dir: Optional[str] = None,
) -> Tuple[MaceModel, TrainReport]:
    """
    Jointly minimizes the MACE objective with Adam.

    All four parameter groups are updated in one optimization phase. The
    black box stays frozen; its outputs are cached before the first step.

    Args:
        blackbox: The classifier to explain
        dataset: Training images
        config: Training configuration
        model: Model to continue training (fine-tuning); a fresh model
            seeded with config.seed is created when omitted
        epochs: Overrides config.epochs
        checkpoint_dir: Directory for periodic checkpoints

    Returns:
        Tuple of (trained model, report)

    Raises:
        ConfigurationError: If a class has fewer than two images
        TrainingDivergedError: If a loss term stops being finite
    """
    cache = TapCache.from_images(blackbox, dataset)
    _check_class_coverage(cache.labels, blackbox.spec.num_classes)
    if model is None:
        model = MaceModel.uniform(
            blackbox.spec, config.num_concepts, config.embed_dim, config.seed
        )
    model.train()
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=config.learning_rate,
        betas=(0.9, 0.999),
        eps=1e-8,
    )
    num_epochs = config.epochs if epochs is None else epochs
    report = TrainReport(seed=config.seed, config=asdict(config))
    labels = cache.labels.numpy()
    started = time.perf_counter()

    for _ in range(num_epochs):
        epoch = model.trained_epochs
        sums: Dict[str, float] = {}
        batches = make_batches(labels, config.batch_size, config.seed, epoch)
        for step, index in enumerate(batches):
            batch = cache.subset(index)
            optimizer.zero_grad()
            breakdown = total_loss(
                batch, model, blackbox, config, (config.seed, epoch, step)
            )
            breakdown.check_finite(epoch, step)
            breakdown.total.backward()
            optimizer.step()
            for name, value in breakdown.as_floats(
                config.use_ld, config.use_lo
            ).items():
                sums[name] = sums.get(name, 0.0) + value
        means = {name: value / len(batches) for name, value in sums.items()}
        report.add_epoch(means)
        model.trained_epochs += 1
        logger.info(
            "Epoch %d/%d - total loss %.4f",
            len(report.epochs), num_epochs, means["total"],
        )
        if (
            checkpoint_dir
            and config.checkpoint_every
            and len(report.epochs) % config.checkpoint_every == 0
        ):
            path = os.path.join(
                checkpoint_dir, f"mace_epoch_{model.trained_epochs:03d}.npz"
            )
            model.save(path)
            report.checkpoints.append(path)

    report.wall_time = time.perf_counter() - started
    model.eval()
    model.metadata.update({
        "train_config": asdict(config),
        "relevance_loss_mode": config.relevance_loss_mode,
        "mining_seed": config.seed,
        "batch_seed_derivation": "numpy default_rng([seed, epoch])",
    })
    return model, report

from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import pytest
import torch

from maceexplain.src.blackbox import LabeledImage, ToyBlackBox
from maceexplain.src.config import MaceConfig
from maceexplain.src.mace import MaceModel
from maceexplain.src.pruner import PruneReport, prune_and_finetune
from maceexplain.src.synthetic import (
    class_names_for,
    generate_synthetic_dataset,
    split_dataset,
)
from maceexplain.src.toy_training import train_toy_classifier
from maceexplain.src.trainer import TrainReport, train


@pytest.fixture
def tiny_images():
    """Two classes, eight 16 x 16 images each."""
    return generate_synthetic_dataset(
        num_classes=2, per_class=8, seed=3, image_size=16
    )


@pytest.fixture
def tiny_blackbox():
    """Untrained but seeded toy black box with a 2 x 2 x 4 tap."""
    torch.manual_seed(0)
    return ToyBlackBox.build(
        num_classes=2,
        image_size=16,
        dense_dim=8,
        final_depth=4,
        class_names=class_names_for(2),
    )


@pytest.fixture
def tiny_model(tiny_blackbox):
    """Three concepts per class with four-dimensional embeddings."""
    return MaceModel.uniform(tiny_blackbox.spec, 3, 4, seed=0)


@dataclass
class DefaultRun:
    """
    The toy black box and MACE models trained with the default
    configuration. Models are trained on first use and shared afterwards.
    """
    config: MaceConfig
    blackbox: ToyBlackBox
    train_set: List[LabeledImage]
    held_out: List[LabeledImage]
    _models: Dict[int, Tuple[MaceModel, TrainReport]] = field(
        default_factory=dict
    )
    _pruned: Dict[int, Tuple[MaceModel, PruneReport]] = field(
        default_factory=dict
    )

    def model(self, seed: int = 0) -> MaceModel:
        return self.trained(seed)[0]

    def trained(self, seed: int = 0) -> Tuple[MaceModel, TrainReport]:
        if seed not in self._models:
            config = self.config.with_overrides("train", seed=seed)
            self._models[seed] = train(
                self.blackbox, self.train_set, config.train
            )
        return self._models[seed]

    def pruned(self, seed: int = 0) -> Tuple[MaceModel, PruneReport]:
        """Pruned and fine-tuned model of a seed, with its prune report."""
        if seed not in self._pruned:
            config = self.config.with_overrides("train", seed=seed)
            pruned, report, _ = prune_and_finetune(
                self.model(seed),
                self.blackbox,
                self.train_set,
                self.held_out,
                config.prune,
                config.train,
                upscale_mode=config.eval.upscale_mode,
            )
            self._pruned[seed] = (pruned, report)
        return self._pruned[seed]


@pytest.fixture(scope="session")
def default_run():
    """Default-configuration toy black box, trained once per session."""
    config = MaceConfig()
    dataset, toy = config.dataset, config.toy
    images = generate_synthetic_dataset(
        dataset.num_classes, dataset.per_class, dataset.seed,
        image_size=dataset.image_size,
    )
    blackbox = train_toy_classifier(
        images,
        epochs=toy.epochs,
        seed=toy.seed,
        class_names=class_names_for(dataset.num_classes),
        learning_rate=toy.learning_rate,
        batch_size=toy.batch_size,
        dense_dim=toy.dense_dim,
        final_depth=toy.final_depth,
        held_out_fraction=dataset.held_out_fraction,
        min_accuracy=None,
    )
    train_set, held_out = split_dataset(
        images, dataset.held_out_fraction, toy.seed
    )
    return DefaultRun(config, blackbox, train_set, held_out)

"""
Run bookkeeping shared by the CLI commands: output locations, the cached
dataset and black box, and the run manifest written after every command.
"""
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Dict, List, Optional, Tuple

from maceexplain import __version__
from maceexplain.src.blackbox import LabeledImage, ToyBlackBox
from maceexplain.src.config import DatasetConfig, MaceConfig
from maceexplain.src.errors import ConfigurationError
from maceexplain.src.synthetic import (
    class_names_for,
    generate_synthetic_dataset,
    load_dataset_cache,
    save_dataset_cache,
    split_dataset,
)
from maceexplain.src.toy_training import train_toy_classifier

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "MACE_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "./mace_runs"
RUN_MANIFEST_NAME = "run_manifest.json"


def default_output_root() -> str:
    return os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT)


def prepare_output_dir(path: str) -> str:
    """
    Creates a directory and checks that it is writable.

    Raises:
        ConfigurationError: If the directory cannot be created or written
    """
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise ConfigurationError(
            f"Cannot create output directory {path}: {e.strerror}"
        )
    if not os.access(path, os.W_OK):
        raise ConfigurationError(f"Output directory is not writable: {path}")
    return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    """
    Record of one command invocation.

    Every file the command writes is listed in artifacts; the manifest
    itself is written last.

    Args:
        command: Command name, e.g. "train" or "eval faithfulness"
        output_dir: Directory holding the run's outputs
        config_path: Effective configuration written for the run
        seeds: Named seeds the run depended on
        checkpoints: Checkpoints read or written by the run
    """
    command: str
    output_dir: str
    config_path: Optional[str] = None
    seeds: Dict[str, int] = field(default_factory=dict)
    checkpoints: List[str] = field(default_factory=list)
    artifacts: List[str] = field(default_factory=list)
    version: str = __version__
    started: str = field(default_factory=_now)
    finished: Optional[str] = None

    def add(self, *paths: str) -> None:
        for path in paths:
            if path not in self.artifacts:
                self.artifacts.append(path)

    def write(self) -> str:
        """
        Writes the manifest into output_dir after checking that every
        listed artifact exists.

        Raises:
            ConfigurationError: If a listed artifact is missing
        """
        missing = [p for p in self.artifacts if not os.path.exists(p)]
        if missing:
            raise ConfigurationError(
                f"Run artifacts were not written: {missing}"
            )
        self.finished = _now()
        path = os.path.join(self.output_dir, RUN_MANIFEST_NAME)
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2)
        return path

    @classmethod
    def read(cls, path: str) -> "RunManifest":
        try:
            with open(path, "r") as f:
                return cls(**json.load(f))
        except FileNotFoundError:
            raise ConfigurationError(f"Run manifest not found: {path}")


def dataset_cache_path(root: str, config: DatasetConfig) -> str:
    name = (
        f"synthetic_k{config.num_classes}_n{config.per_class}"
        f"_s{config.seed}_px{config.image_size}.npz"
    )
    return os.path.join(root, "datasets", name)


def load_or_generate_dataset(
    root: str, config: DatasetConfig
) -> Tuple[List[LabeledImage], str, bool]:
    """
    Returns the cached dataset, generating and caching it when absent.

    Returns:
        Tuple of (images, cache path, True on a cache hit)
    """
    path = dataset_cache_path(root, config)
    if os.path.exists(path):
        images, _ = load_dataset_cache(path)
        logger.info("Dataset cache hit: %s", path)
        return images, path, True
    prepare_output_dir(os.path.dirname(path))
    images = generate_synthetic_dataset(
        config.num_classes, config.per_class, config.seed, config.image_size
    )
    save_dataset_cache(path, images, asdict(config))
    logger.info("Cached %d images at %s", len(images), path)
    return images, path, False


def blackbox_path(root: str, config: MaceConfig) -> str:
    data, toy = config.dataset, config.toy
    name = (
        f"toy_k{data.num_classes}_n{data.per_class}_s{data.seed}"
        f"_px{data.image_size}_t{toy.seed}_e{toy.epochs}"
        f"_l{toy.dense_dim}_d{toy.final_depth}.npz"
    )
    return os.path.join(root, "blackbox", name)


def load_or_train_blackbox(
    root: str, config: MaceConfig, images: List[LabeledImage]
) -> Tuple[ToyBlackBox, str, bool]:
    """
    Returns the cached toy black box, training it when absent.

    Returns:
        Tuple of (black box, checkpoint path, True on a cache hit)
    """
    path = blackbox_path(root, config)
    if os.path.exists(path):
        logger.info("Black box cache hit: %s", path)
        return ToyBlackBox.load(path), path, True
    toy = config.toy
    blackbox = train_toy_classifier(
        images,
        epochs=toy.epochs,
        seed=toy.seed,
        class_names=class_names_for(config.dataset.num_classes),
        learning_rate=toy.learning_rate,
        batch_size=toy.batch_size,
        dense_dim=toy.dense_dim,
        final_depth=toy.final_depth,
        held_out_fraction=config.dataset.held_out_fraction,
        min_accuracy=toy.min_accuracy,
    )
    prepare_output_dir(os.path.dirname(path))
    blackbox.save(path)
    return blackbox, path, False


def split_for(
    config: MaceConfig, images: List[LabeledImage]
) -> Tuple[List[LabeledImage], List[LabeledImage]]:
    """The training and held-out parts the toy black box was trained on."""
    return split_dataset(
        images, config.dataset.held_out_fraction, config.toy.seed
    )

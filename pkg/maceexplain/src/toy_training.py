import logging
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from torch import nn

from maceexplain.src.blackbox import DTYPE, BlackBox, LabeledImage, ToyBlackBox
from maceexplain.src.errors import ConfigurationError, ToyTrainingError
from maceexplain.src.synthetic import split_dataset, stack_labels, stack_pixels

logger = logging.getLogger(__name__)


def evaluate_accuracy(
    blackbox: BlackBox, images: Sequence[LabeledImage]
) -> float:
    """Fraction of images whose argmax prediction equals the label."""
    if not images:
        return 0.0
    probs = blackbox.predict_proba(stack_pixels(images))
    return float(np.mean(probs.argmax(axis=1) == stack_labels(images)))


def _class_accuracy(
    blackbox: BlackBox, images: Sequence[LabeledImage]
) -> Dict[int, float]:
    probs = blackbox.predict_proba(stack_pixels(images))
    labels = stack_labels(images)
    predicted = probs.argmax(axis=1)
    return {
        int(k): float(np.mean(predicted[labels == k] == k))
        for k in np.unique(labels)
    }


def train_toy_classifier(
    dataset: Sequence[LabeledImage],
    epochs: int = 40,
    seed: int = 0,
    class_names: Optional[List[str]] = None,
    learning_rate: float = 3e-3,
    batch_size: int = 32,
    dense_dim: int = 64,
    final_depth: int = 16,
    held_out_fraction: float = 0.2,
    min_accuracy: Optional[float] = 0.8,
) -> ToyBlackBox:
    """
    Trains the reference toy classifier on a labeled dataset.

    The dataset is split into training and held-out parts; the held-out
    accuracy is recorded on the returned black box. Training is
    single-threaded and deterministic for a fixed seed.

    Args:
        dataset: Labeled images, all of the same shape
        epochs: Number of passes over the training part
        seed: Seed for initialization, split and shuffling
        class_names: Optional class labels
        learning_rate: Adam learning rate
        batch_size: Mini-batch size
        dense_dim: Width L of the dense layer
        final_depth: Depth D of the last conv block
        held_out_fraction: Share of each class kept for evaluation
        min_accuracy: Required held-out accuracy, None to skip the check

    Returns:
        Trained, frozen ToyBlackBox

    Raises:
        ConfigurationError: If the dataset is empty
        ToyTrainingError: If held-out accuracy stays below min_accuracy
    """
    if not dataset:
        raise ConfigurationError("Cannot train on an empty dataset")
    if epochs < 0:
        raise ConfigurationError("Epochs must not be negative")

    num_classes = int(max(image.label for image in dataset)) + 1
    height, width, channels = dataset[0].pixels.shape
    if height != width:
        raise ConfigurationError("Toy classifier expects square images")

    train_part, held_out = split_dataset(dataset, held_out_fraction, seed)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    blackbox = ToyBlackBox.build(
        num_classes=num_classes,
        image_size=height,
        input_channels=channels,
        dense_dim=dense_dim,
        final_depth=final_depth,
        class_names=class_names,
    )
    network = blackbox.network
    for parameter in network.parameters():
        parameter.requires_grad_(True)
    network.train()

    pixels = torch.as_tensor(stack_pixels(train_part), dtype=DTYPE)
    pixels = pixels.permute(0, 3, 1, 2)
    labels = torch.as_tensor(stack_labels(train_part))
    optimizer = torch.optim.Adam(network.parameters(), lr=learning_rate)
    criterion = nn.CrossEntropyLoss()

    epoch_losses = []
    for epoch in range(epochs):
        order = rng.permutation(len(train_part))
        running = 0.0
        for start in range(0, len(order), batch_size):
            index = torch.as_tensor(order[start:start + batch_size])
            optimizer.zero_grad()
            loss = criterion(network(pixels[index]), labels[index])
            loss.backward()
            optimizer.step()
            running += loss.item() * len(index)
        epoch_losses.append(running / len(order))
        logger.info(
            "Toy classifier epoch %d/%d - loss %.4f",
            epoch + 1, epochs, epoch_losses[-1],
        )

    network.eval()
    for parameter in network.parameters():
        parameter.requires_grad_(False)

    blackbox.accuracy = evaluate_accuracy(blackbox, held_out)
    blackbox.seed = seed
    logger.info("Toy classifier held-out accuracy %.3f", blackbox.accuracy)

    if min_accuracy is not None and blackbox.accuracy < min_accuracy:
        raise ToyTrainingError(
            accuracy=blackbox.accuracy,
            required=min_accuracy,
            epoch_losses=epoch_losses,
            class_accuracy=_class_accuracy(blackbox, held_out),
        )
    return blackbox

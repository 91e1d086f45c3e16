"""
Synthetic shapes dataset used in place of a natural-image dataset.

Every class is a motif made of two distinguishable parts (for example a
ring with a dot in its center). A motif is composited at a random position,
scale and rotation over a noisy gradient background, so the class identity is
position-invariant and each class has several localized sub-parts.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from maceexplain.src.blackbox import LabeledImage
from maceexplain.src.checkpoint import load_archive, save_archive
from maceexplain.src.errors import CheckpointError, ConfigurationError

logger = logging.getLogger(__name__)

DATASET_FORMAT = "mace-synthetic-dataset"


@dataclass(frozen=True)
class Part:
    """
    One sub-part of a motif, in motif-local coordinates.

    Args:
        shape: disc, ring, bar, square, checker, cross, triangle or diamond
        offset: Center of the part relative to the motif center
        size: Half extent of the part
        color: RGB color in [0, 1]
    """
    shape: str
    offset: Tuple[float, float]
    size: float
    color: Tuple[float, float, float]


@dataclass(frozen=True)
class Motif:
    name: str
    parts: Tuple[Part, ...]


MOTIFS: Tuple[Motif, ...] = (
    Motif("fox-analog", (
        Part("triangle", (0.0, -0.45), 0.4, (0.95, 0.55, 0.10)),
        Part("disc", (0.0, 0.45), 0.35, (0.95, 0.95, 0.85)),
    )),
    Motif("zebra-analog", (
        Part("checker", (-0.45, 0.0), 0.4, (0.05, 0.05, 0.05)),
        Part("bar", (0.45, 0.0), 0.45, (0.95, 0.95, 0.95)),
    )),
    Motif("dalmatian-analog", (
        Part("ring", (0.0, 0.0), 0.7, (0.15, 0.20, 0.85)),
        Part("disc", (0.0, 0.0), 0.25, (0.90, 0.15, 0.15)),
    )),
    Motif("tiger-analog", (
        Part("cross", (-0.45, -0.45), 0.4, (0.95, 0.45, 0.0)),
        Part("square", (0.45, 0.45), 0.3, (0.10, 0.60, 0.10)),
    )),
    Motif("panda-analog", (
        Part("disc", (-0.45, 0.0), 0.35, (0.02, 0.02, 0.02)),
        Part("disc", (0.45, 0.0), 0.35, (0.98, 0.98, 0.98)),
    )),
    Motif("giraffe-analog", (
        Part("diamond", (0.0, -0.5), 0.4, (0.95, 0.85, 0.20)),
        Part("bar", (0.0, 0.45), 0.45, (0.45, 0.25, 0.05)),
    )),
    Motif("penguin-analog", (
        Part("square", (0.0, -0.4), 0.35, (0.05, 0.05, 0.10)),
        Part("triangle", (0.0, 0.45), 0.35, (0.95, 0.90, 0.0)),
    )),
    Motif("seal-analog", (
        Part("ring", (-0.4, 0.0), 0.4, (0.55, 0.55, 0.55)),
        Part("diamond", (0.45, 0.0), 0.35, (0.0, 0.85, 0.85)),
    )),
    Motif("parrot-analog", (
        Part("triangle", (-0.45, 0.0), 0.35, (0.90, 0.05, 0.10)),
        Part("cross", (0.45, 0.0), 0.4, (0.10, 0.85, 0.20)),
    )),
    Motif("whale-analog", (
        Part("bar", (-0.45, 0.0), 0.45, (0.10, 0.35, 0.95)),
        Part("checker", (0.45, 0.0), 0.4, (0.0, 0.10, 0.35)),
    )),
)


def class_names_for(num_classes: int) -> List[str]:
    """Returns the motif names of the first num_classes classes."""
    if not 2 <= num_classes <= len(MOTIFS):
        raise ConfigurationError(
            f"Number of classes must be between 2 and {len(MOTIFS)}, "
            f"got {num_classes}"
        )
    return [motif.name for motif in MOTIFS[:num_classes]]


def _part_mask(part: Part, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    du = u - part.offset[0]
    dv = v - part.offset[1]
    s = part.size
    if part.shape == "disc":
        return du ** 2 + dv ** 2 <= s ** 2
    if part.shape == "ring":
        r2 = du ** 2 + dv ** 2
        return (r2 <= s ** 2) & (r2 >= (0.7 * s) ** 2)
    if part.shape == "bar":
        return (np.abs(du) <= s / 3.5) & (np.abs(dv) <= s)
    if part.shape == "square":
        return np.maximum(np.abs(du), np.abs(dv)) <= s
    if part.shape == "diamond":
        return np.abs(du) + np.abs(dv) <= s
    if part.shape == "cross":
        horizontal = (np.abs(du) <= s) & (np.abs(dv) <= s / 3)
        vertical = (np.abs(dv) <= s) & (np.abs(du) <= s / 3)
        return horizontal | vertical
    if part.shape == "triangle":
        rise = dv + s
        return (rise >= 0) & (dv <= s) & (np.abs(du) <= rise / 2)
    if part.shape == "checker":
        inside = np.maximum(np.abs(du), np.abs(dv)) <= s
        cell = s / 2
        parity = (
            np.floor((du + s) / cell) + np.floor((dv + s) / cell)
        ) % 2 == 0
        return inside & parity
    raise ConfigurationError(f"Unknown part shape: {part.shape}")


def render_motif(
    motif: Motif, image_size: int, rng: np.random.Generator
) -> np.ndarray:
    """
    Draws one motif over a randomized background.

    Returns:
        Array image_size x image_size x 3 with values in [0, 1]
    """
    rows, cols = np.mgrid[0:image_size, 0:image_size].astype(np.float64)

    # Background: random base color, linear ramp and pixel noise
    base = rng.uniform(0.25, 0.65, size=3)
    ramp_angle = rng.uniform(0.0, 2 * np.pi)
    ramp = (
        np.cos(ramp_angle) * cols + np.sin(ramp_angle) * rows
    ) / image_size
    tint = rng.uniform(-0.2, 0.2, size=3)
    image = base + ramp[..., None] * tint
    image = image + rng.normal(0.0, 0.03, size=image.shape)

    # Placement keeps the whole motif inside the frame
    scale = rng.uniform(0.18, 0.28) * image_size
    margin = 1.05 * scale
    center_x = rng.uniform(margin, image_size - margin)
    center_y = rng.uniform(margin, image_size - margin)
    angle = rng.uniform(0.0, 2 * np.pi)
    dx = (cols - center_x) / scale
    dy = (rows - center_y) / scale
    u = np.cos(angle) * dx + np.sin(angle) * dy
    v = -np.sin(angle) * dx + np.cos(angle) * dy

    for part in motif.parts:
        color = np.asarray(part.color) + rng.normal(0.0, 0.04, size=3)
        image[_part_mask(part, u, v)] = color
    return np.clip(image, 0.0, 1.0)


def generate_synthetic_dataset(
    num_classes: int,
    per_class: int,
    seed: int,
    image_size: int = 64,
) -> List[LabeledImage]:
    """
    Generates a labeled synthetic dataset.

    The result is ordered class by class; image ids are the positions in
    the returned list. The output is a pure function of the arguments.

    Args:
        num_classes: Number of classes (2 to 10)
        per_class: Images per class
        seed: Random seed
        image_size: Side length in pixels

    Returns:
        List of num_classes * per_class labeled images
    """
    class_names_for(num_classes)
    if per_class < 0:
        raise ConfigurationError("Images per class must not be negative")
    rng = np.random.default_rng(seed)
    images = []
    for label in range(num_classes):
        for _ in range(per_class):
            pixels = render_motif(MOTIFS[label], image_size, rng)
            images.append(
                LabeledImage(pixels=pixels, label=label, image_id=len(images))
            )
    return images


def split_dataset(
    images: Sequence[LabeledImage],
    held_out_fraction: float,
    seed: int,
) -> Tuple[List[LabeledImage], List[LabeledImage]]:
    """
    Class-stratified split into a training part and a held-out part.

    Both parts keep ascending image id order.
    """
    if not 0.0 < held_out_fraction < 1.0:
        raise ConfigurationError("Held-out fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    held_out_ids = set()
    labels = sorted({image.label for image in images})
    for label in labels:
        ids = [image.image_id for image in images if image.label == label]
        count = int(round(len(ids) * held_out_fraction))
        chosen = rng.permutation(len(ids))[:count]
        held_out_ids.update(ids[i] for i in chosen)
    train = [im for im in images if im.image_id not in held_out_ids]
    held_out = [im for im in images if im.image_id in held_out_ids]
    return train, held_out


def stack_pixels(images: Sequence[LabeledImage]) -> np.ndarray:
    return np.stack([image.pixels for image in images])


def stack_labels(images: Sequence[LabeledImage]) -> np.ndarray:
    return np.array([image.label for image in images], dtype=np.int64)


def save_dataset_cache(
    path: str, images: Sequence[LabeledImage], parameters: Dict
) -> None:
    """Writes images, labels and generation parameters to an archive."""
    arrays = {
        "pixels": stack_pixels(images),
        "labels": stack_labels(images),
        "image_ids": np.array([im.image_id for im in images], dtype=np.int64),
    }
    manifest = {"format": DATASET_FORMAT, "parameters": dict(parameters)}
    save_archive(path, arrays, manifest)


def load_dataset_cache(path: str) -> Tuple[List[LabeledImage], Dict]:
    """
    Reads a dataset archive.

    Returns:
        Tuple of (images, generation parameters)
    """
    arrays, manifest = load_archive(path)
    if manifest.get("format") != DATASET_FORMAT:
        raise CheckpointError(f"{path} is not a dataset archive")
    images = [
        LabeledImage(pixels=pixels, label=int(label), image_id=int(image_id))
        for pixels, label, image_id in zip(
            arrays["pixels"], arrays["labels"], arrays["image_ids"]
        )
    ]
    logger.info("Loaded %d cached images from %s", len(images), path)
    return images, manifest["parameters"]

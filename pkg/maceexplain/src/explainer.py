"""
Explanations of single images: upscaled concept heatmaps, thresholded
binary masks, union masks, overlay renders and relevance-annotated bundles.
"""
import json
import logging
import os
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import matplotlib
import matplotlib.pyplot as plt
import numpy as np
import torch
import torch.nn.functional as F

from maceexplain.src.blackbox import DTYPE, BlackBox, LabeledImage
from maceexplain.src.errors import InputShapeError
from maceexplain.src.mace import MaceModel

logger = logging.getLogger(__name__)

UPSCALE_MODES = ("bilinear", "nearest")
OVERLAY_COLORMAP = "viridis"
OVERLAY_ALPHA = 0.5


@dataclass
class ConceptActivations:
    """
    Model outputs for a batch of images, as arrays.

    Per-class lists are indexed by class k.

    Args:
        maps: Concept maps, each N x C_k x H x W
        embeddings: Embeddings, each N x C_k x Q
        relevances: Relevances, each N x C_k
        z: Black-box dense outputs, N x L
        z_hat: Reconstructed dense outputs, N x L
        probs: Black-box class probabilities, N x K
        x: Tap activations, N x H x W x D
    """
    maps: List[np.ndarray]
    embeddings: List[np.ndarray]
    relevances: List[np.ndarray]
    z: np.ndarray
    z_hat: np.ndarray
    probs: np.ndarray
    x: np.ndarray

    @property
    def predicted(self) -> np.ndarray:
        return self.probs.argmax(axis=1)


def compute_activations(
    model: MaceModel,
    blackbox: BlackBox,
    pixels: np.ndarray,
    batch_size: int = 64,
) -> ConceptActivations:
    """Runs the black box and the model over N x height x width x channels."""
    x, z, probs = blackbox.tap_batch(pixels, batch_size)
    num_classes = blackbox.spec.num_classes
    maps: List[List[np.ndarray]] = [[] for _ in range(num_classes)]
    embeddings: List[List[np.ndarray]] = [[] for _ in range(num_classes)]
    relevances: List[List[np.ndarray]] = [[] for _ in range(num_classes)]
    z_hat = []
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            chunk = torch.as_tensor(x[start:start + batch_size], dtype=DTYPE)
            output = model(chunk)
            for k in range(num_classes):
                maps[k].append(output.maps[k].numpy())
                embeddings[k].append(output.embeddings[k].numpy())
                relevances[k].append(output.relevances[k].numpy())
            z_hat.append(output.z_hat.numpy())
    return ConceptActivations(
        maps=[np.concatenate(m) for m in maps],
        embeddings=[np.concatenate(e) for e in embeddings],
        relevances=[np.concatenate(r) for r in relevances],
        z=z,
        z_hat=np.concatenate(z_hat),
        probs=probs,
        x=x,
    )


def heatmaps_from_maps(
    maps: np.ndarray,
    height: int,
    width: int,
    mode: str = "bilinear",
) -> np.ndarray:
    """
    Upscales maps of shape ... x H x W to ... x height x width and min-max
    normalizes every map on its own.

    Raises:
        InputShapeError: If the target is smaller than the maps
        ValueError: On an unknown mode
    """
    if mode not in UPSCALE_MODES:
        raise ValueError(f"Unknown upscale mode: {mode}")
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim < 2:
        raise InputShapeError("Concept maps need at least two dimensions")
    if height < maps.shape[-2] or width < maps.shape[-1]:
        raise InputShapeError(
            f"Target {height}x{width} is smaller than map "
            f"{maps.shape[-2]}x{maps.shape[-1]}"
        )
    lead = maps.shape[:-2]
    flat = torch.as_tensor(maps, dtype=DTYPE).reshape(-1, 1, *maps.shape[-2:])
    if mode == "bilinear":
        resized = F.interpolate(
            flat, size=(height, width), mode="bilinear", align_corners=False
        )
    else:
        resized = F.interpolate(flat, size=(height, width), mode="nearest")
    resized = resized.reshape(len(flat), -1).numpy()
    low = resized.min(axis=1, keepdims=True)
    span = resized.max(axis=1, keepdims=True) - low
    normalized = np.divide(
        resized - low, span, out=np.zeros_like(resized), where=span > 0
    )
    return normalized.reshape(*lead, height, width)


def upscale_and_normalize(
    concept_map: np.ndarray,
    height: int,
    width: int,
    mode: str = "bilinear",
) -> np.ndarray:
    """
    Heatmap in [0, 1] at image resolution for one H x W concept map.

    A constant map gives an all-zero heatmap.
    """
    concept_map = np.asarray(concept_map)
    if concept_map.ndim != 2:
        raise InputShapeError("A concept map must be two-dimensional")
    return heatmaps_from_maps(concept_map, height, width, mode)


@dataclass
class BinaryMask:
    """
    Boolean pixel mask at image resolution.

    Args:
        values: Boolean array height x width
        class_index: Class the mask explains
        concept: Original concept id, None for a union mask
        threshold: Heatmap threshold the mask was cut at
    """
    values: np.ndarray
    class_index: Optional[int] = None
    concept: Optional[int] = None
    threshold: Optional[float] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=bool)
        if self.values.ndim != 2:
            raise InputShapeError("A mask must be two-dimensional")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @property
    def coverage(self) -> float:
        """Fraction of pixels set."""
        return float(self.values.mean())

    def is_empty(self) -> bool:
        return not self.values.any()


def check_threshold(threshold: float) -> None:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"Threshold must lie in (0, 1), got {threshold}")


def threshold_mask(
    heatmap: np.ndarray,
    threshold: float,
    class_index: Optional[int] = None,
    concept: Optional[int] = None,
) -> BinaryMask:
    """Sets every pixel whose heatmap value is at least threshold."""
    check_threshold(threshold)
    return BinaryMask(
        values=np.asarray(heatmap) >= threshold,
        class_index=class_index,
        concept=concept,
        threshold=threshold,
    )


def union_mask(
    masks: Sequence[BinaryMask],
    shape: Optional[Tuple[int, int]] = None,
) -> BinaryMask:
    """
    Element-wise OR of masks.

    Args:
        masks: Masks of identical shape
        shape: Shape of the empty mask returned for an empty list

    Raises:
        InputShapeError: If the shapes differ
        ValueError: If masks is empty and no shape is given
    """
    if not masks:
        if shape is None:
            raise ValueError("An empty union needs an explicit shape")
        return BinaryMask(values=np.zeros(shape, dtype=bool))
    first = masks[0]
    if any(m.shape != first.shape for m in masks):
        raise InputShapeError("Masks in a union must have identical shapes")
    values = np.logical_or.reduce([m.values for m in masks])
    thresholds = {m.threshold for m in masks}
    return BinaryMask(
        values=values,
        class_index=first.class_index,
        threshold=first.threshold if len(thresholds) == 1 else None,
    )


def union_masks_from_heatmaps(
    heatmaps: np.ndarray, threshold: float
) -> np.ndarray:
    """Union over the concept axis of heatmaps ... x C x h x w."""
    if heatmaps.shape[-3] == 0:
        return np.zeros(heatmaps.shape[:-3] + heatmaps.shape[-2:], dtype=bool)
    return (heatmaps >= threshold).any(axis=-3)


@dataclass
class ConceptExplanation:
    """
    One concept of the queried class on one image.

    Args:
        concept: Original concept id (stable across pruning)
        concept_map: Raw map H x W at tap resolution
        heatmap: Upscaled, normalized map at image resolution
        relevance: Relevance r_jk of the concept for the image
        mask: Heatmap thresholded at the bundle's threshold
    """
    concept: int
    concept_map: np.ndarray
    heatmap: np.ndarray
    relevance: float
    mask: BinaryMask


@dataclass
class ExplanationBundle:
    """
    Explanation of one image for one class.

    Concepts are sorted by descending relevance; the union mask is the OR
    of all their masks.
    """
    image_id: int
    class_index: int
    class_name: str
    threshold: float
    class_probability: float
    predicted_class: int
    concepts: List[ConceptExplanation]
    union: BinaryMask

    @property
    def positive(self) -> List[ConceptExplanation]:
        """Concepts with positive relevance."""
        return [c for c in self.concepts if c.relevance > 0]

    @property
    def positive_union(self) -> BinaryMask:
        return union_mask([c.mask for c in self.positive], self.union.shape)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "image_id": self.image_id,
            "class_index": self.class_index,
            "class_name": self.class_name,
            "threshold": self.threshold,
            "class_probability": self.class_probability,
            "predicted_class": self.predicted_class,
            "union_coverage": self.union.coverage,
            "concepts": [
                {
                    "concept": c.concept,
                    "relevance": c.relevance,
                    "positive": c.relevance > 0,
                    "mask_coverage": c.mask.coverage,
                }
                for c in self.concepts
            ],
        }


def explain(
    model: MaceModel,
    blackbox: BlackBox,
    image: LabeledImage,
    class_index: Union[int, str],
    threshold: float = 0.5,
    upscale_mode: str = "bilinear",
) -> ExplanationBundle:
    """
    Explains one image for any class, predicted or not.

    Args:
        model: Trained, optionally pruned model
        blackbox: The explained classifier
        image: Image to explain
        class_index: Class index or class name
        threshold: Heatmap threshold for the binary masks
        upscale_mode: "bilinear" or "nearest"

    Raises:
        ValueError: If the class is unknown
    """
    k = blackbox.spec.class_index(str(class_index))
    activations = compute_activations(model, blackbox, image.pixels[None])
    height, width = image.pixels.shape[:2]
    maps = activations.maps[k][0]
    heatmaps = heatmaps_from_maps(maps, height, width, upscale_mode)
    relevances = activations.relevances[k][0]

    concepts = [
        ConceptExplanation(
            concept=model.concept_ids[k][j],
            concept_map=maps[j],
            heatmap=heatmaps[j],
            relevance=float(relevances[j]),
            mask=threshold_mask(
                heatmaps[j], threshold, k, model.concept_ids[k][j]
            ),
        )
        for j in range(len(maps))
    ]
    # Stable sort keeps concept order among equal relevances
    concepts.sort(key=lambda c: -c.relevance)
    union = union_mask([c.mask for c in concepts], (height, width))
    union.class_index = k
    union.threshold = threshold
    return ExplanationBundle(
        image_id=image.image_id,
        class_index=k,
        class_name=blackbox.spec.class_names[k],
        threshold=threshold,
        class_probability=float(activations.probs[0, k]),
        predicted_class=int(activations.predicted[0]),
        concepts=concepts,
        union=union,
    )


def explain_top_classes(
    model: MaceModel,
    blackbox: BlackBox,
    image: LabeledImage,
    top_n: int = 3,
    threshold: float = 0.5,
    upscale_mode: str = "bilinear",
) -> List[ExplanationBundle]:
    """Bundles for the black box's top_n classes, most probable first."""
    if top_n < 1:
        raise ValueError("top_n must be positive")
    probs = blackbox.predict_proba(image.pixels[None])[0]
    order = np.argsort(-probs, kind="stable")[:top_n]
    return [
        explain(model, blackbox, image, int(k), threshold, upscale_mode)
        for k in order
    ]


def render_overlay(
    pixels: np.ndarray,
    heatmap: np.ndarray,
    colormap: str = OVERLAY_COLORMAP,
    alpha: float = OVERLAY_ALPHA,
) -> np.ndarray:
    """
    Alpha-blends a colormapped heatmap over an image.

    Args:
        pixels: Image height x width x channels in [0, 1]
        heatmap: Heatmap height x width in [0, 1]

    Returns:
        RGB image height x width x 3 in [0, 1]

    Raises:
        InputShapeError: If the spatial shapes differ
    """
    if pixels.shape[:2] != heatmap.shape:
        raise InputShapeError(
            f"Heatmap {heatmap.shape} does not match image {pixels.shape[:2]}"
        )
    rgb = pixels if pixels.shape[-1] == 3 else np.repeat(
        pixels[..., :1], 3, axis=-1
    )
    colored = matplotlib.colormaps[colormap](np.clip(heatmap, 0, 1))[..., :3]
    return np.clip((1 - alpha) * rgb + alpha * colored, 0.0, 1.0)


def save_raster(path: str, image: np.ndarray) -> None:
    """Writes an RGB array in [0, 1] as a PNG file."""
    plt.imsave(path, image, format="png")


def write_bundle(
    bundle: ExplanationBundle,
    image: LabeledImage,
    output_dir: str,
) -> List[str]:
    """
    Writes one overlay per concept and the bundle metadata.

    Overlays are named {image_id}_{class}_{concept}.png; the metadata goes
    to {image_id}_{class}.json.

    Returns:
        Paths of the written files
    """
    os.makedirs(output_dir, exist_ok=True)
    paths = []
    stem = f"{bundle.image_id}_{bundle.class_name}"
    for concept in bundle.concepts:
        path = os.path.join(output_dir, f"{stem}_{concept.concept}.png")
        save_raster(path, render_overlay(image.pixels, concept.heatmap))
        paths.append(path)
    union_path = os.path.join(output_dir, f"{stem}_union.png")
    save_raster(
        union_path,
        render_overlay(image.pixels, bundle.union.values.astype(np.float64)),
    )
    paths.append(union_path)
    meta_path = os.path.join(output_dir, f"{stem}.json")
    with open(meta_path, "w") as f:
        json.dump(bundle.to_dict(), f, indent=2)
    paths.append(meta_path)
    logger.info("Wrote %d explanation files to %s", len(paths), output_dir)
    return paths


def write_concept_grid(
    tiles: Sequence[Tuple[np.ndarray, np.ndarray]],
    path: str,
    titles: Optional[Sequence[str]] = None,
    columns: int = 5,
) -> str:
    """
    Tiles (pixels, heatmap) overlays into a single PNG.

    Args:
        tiles: Image and heatmap per tile
        path: Output file
        titles: Optional caption per tile
        columns: Tiles per row
    """
    if not tiles:
        raise ValueError("A concept grid needs at least one tile")
    columns = min(columns, len(tiles))
    rows = -(-len(tiles) // columns)
    fig, axes = plt.subplots(
        rows, columns, figsize=(2 * columns, 2 * rows), squeeze=False
    )
    for i, ax in enumerate(axes.flat):
        ax.axis("off")
        if i < len(tiles):
            pixels, heatmap = tiles[i]
            ax.imshow(render_overlay(pixels, heatmap))
            if titles is not None:
                ax.set_title(titles[i], fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path

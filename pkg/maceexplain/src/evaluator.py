"""
Quantitative protocols: faithfulness masking drop, robustness IoU under
perturbations, embedding stability, relevance rank analytics, output
fidelity and the loss ablation.

Every protocol explains the class the black box predicts for the original
image unless stated otherwise. Random streams are seeded per image from
(seed, image_id), so results do not depend on evaluation order.
"""
import json
import logging
from dataclasses import dataclass, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from scipy.spatial.distance import cdist

from maceexplain.src.blackbox import DTYPE, BlackBox, LabeledImage
from maceexplain.src.config import TrainConfig
from maceexplain.src.errors import ConfigurationError
from maceexplain.src.explainer import (
    ConceptActivations,
    check_threshold,
    compute_activations,
    heatmaps_from_maps,
    threshold_mask,
    union_masks_from_heatmaps,
)
from maceexplain.src.mace import MaceModel
from maceexplain.src.perturbations import Perturbation
from maceexplain.src.synthetic import stack_labels, stack_pixels
from maceexplain.src.trainer import train

logger = logging.getLogger(__name__)

FILL_MODES = ("zero", "mean")
RANK_TOLERANCE = 1e-12
RANK_COLUMNS = ["rank", "mean_percentage", "support"]

FillValue = Union[float, np.ndarray]


def _records(frame: pd.DataFrame) -> List[Dict[str, Any]]:
    return frame.reset_index().to_dict(orient="records")


def _write_frame(
    frame: pd.DataFrame, stem: str, extra: Dict[str, Any]
) -> List[str]:
    json_path, csv_path = f"{stem}.json", f"{stem}.csv"
    frame.to_csv(csv_path, index=False)
    with open(json_path, "w") as f:
        payload = {**extra, "rows": frame.to_dict(orient="records")}
        json.dump(payload, f, indent=2)
    return [csv_path, json_path]


def fill_value_for(
    images: Sequence[LabeledImage], fill: str = "zero"
) -> FillValue:
    """
    Value written into masked pixels: 0, or the per-channel dataset mean.
    """
    if fill not in FILL_MODES:
        raise ConfigurationError(f"Unknown fill mode: {fill}")
    if fill == "zero":
        return 0.0
    return stack_pixels(images).mean(axis=(0, 1, 2))


def apply_mask(
    pixels: np.ndarray, mask: np.ndarray, fill_value: FillValue = 0.0
) -> np.ndarray:
    """Replaces the masked pixels (all channels) with fill_value."""
    selected = np.asarray(mask, dtype=bool)[..., None]
    return np.where(selected, fill_value, pixels)


def _class_heatmaps(
    activations: ConceptActivations,
    classes: Sequence[int],
    height: int,
    width: int,
    upscale_mode: str,
) -> List[np.ndarray]:
    """Per image i, the C x h x w heatmaps of class classes[i]."""
    return [
        heatmaps_from_maps(activations.maps[k][i], height, width, upscale_mode)
        for i, k in enumerate(classes)
    ]


def random_concept_maps(
    x: np.ndarray, num_concepts: int, rng: np.random.Generator
) -> np.ndarray:
    """
    Maps of fresh Gaussian filters, drawn like the learned filters at
    initialization.

    Args:
        x: Tap activation H x W x D
        num_concepts: Number of filters

    Returns:
        Array num_concepts x H x W
    """
    depth = x.shape[-1]
    weights = rng.standard_normal((num_concepts, depth)) / np.sqrt(depth)
    return np.maximum(np.einsum("hwd,cd->chw", x, weights), 0.0)


def _masking_drops(
    blackbox: BlackBox,
    pixels: np.ndarray,
    masks: np.ndarray,
    classes: np.ndarray,
    p_before: np.ndarray,
    fill_value: FillValue,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (drop, p_after, empty) for a batch of masks."""
    empty = ~masks.reshape(len(masks), -1).any(axis=1)
    masked = apply_mask(pixels, masks, fill_value)
    probs = blackbox.predict_proba(masked)
    p_after = probs[np.arange(len(masks)), classes]
    p_after = np.where(empty, p_before, p_after)
    return p_before - p_after, p_after, empty


@dataclass
class MaskingDrop:
    """
    Probability drop of one class after masking one image.

    Args:
        image_id: Id of the image
        class_index: Class whose probability is measured
        p_before: Probability on the original image
        p_after: Probability on the masked image
        empty_mask: True if nothing was masked (drop is then exactly 0)
    """
    image_id: int
    class_index: int
    p_before: float
    p_after: float
    empty_mask: bool

    @property
    def drop(self) -> float:
        return 0.0 if self.empty_mask else self.p_before - self.p_after


def faithfulness_drop(
    model: MaceModel,
    blackbox: BlackBox,
    image: LabeledImage,
    threshold: float,
    fill_value: FillValue = 0.0,
    upscale_mode: str = "bilinear",
) -> MaskingDrop:
    """
    Removes the union mask of the predicted class's concepts and measures
    the drop of that class's probability.
    """
    check_threshold(threshold)
    activations = compute_activations(model, blackbox, image.pixels[None])
    k = int(activations.predicted[0])
    height, width = image.pixels.shape[:2]
    heatmaps = heatmaps_from_maps(
        activations.maps[k][0], height, width, upscale_mode
    )
    mask = union_masks_from_heatmaps(heatmaps, threshold)
    p_before = activations.probs[:, k]
    _, p_after, empty = _masking_drops(
        blackbox, image.pixels[None], mask[None], np.array([k]), p_before,
        fill_value,
    )
    if empty[0]:
        logger.warning("Empty union mask for image %d", image.image_id)
    return MaskingDrop(
        image_id=image.image_id,
        class_index=k,
        p_before=float(p_before[0]),
        p_after=float(p_after[0]),
        empty_mask=bool(empty[0]),
    )


def random_baseline_drop(
    blackbox: BlackBox,
    image: LabeledImage,
    threshold: float,
    seed: int,
    num_concepts: int,
    fill_value: FillValue = 0.0,
    upscale_mode: str = "bilinear",
) -> MaskingDrop:
    """
    Same masking pipeline with the learned filters replaced by random ones.

    Args:
        num_concepts: Number of random filters, the kept concept count of
            the predicted class
        seed: Combined with the image id to seed the filters
    """
    check_threshold(threshold)
    tap = blackbox.forward_tap(image)
    k = int(np.argmax(tap.probs))
    rng = np.random.default_rng([seed, image.image_id])
    maps = random_concept_maps(tap.x, num_concepts, rng)
    height, width = image.pixels.shape[:2]
    heatmaps = heatmaps_from_maps(maps, height, width, upscale_mode)
    mask = union_masks_from_heatmaps(heatmaps, threshold)
    p_before = tap.probs[[k]]
    _, p_after, empty = _masking_drops(
        blackbox, image.pixels[None], mask[None], np.array([k]), p_before,
        fill_value,
    )
    return MaskingDrop(
        image_id=image.image_id,
        class_index=k,
        p_before=float(p_before[0]),
        p_after=float(p_after[0]),
        empty_mask=bool(empty[0]),
    )


@dataclass
class FaithfulnessReport:
    """
    Per-image masking drops for every threshold and method.

    Rows carry image_id, threshold, method ("mace" or "random"), seed,
    p_before, p_after, drop and empty_mask.
    """
    rows: pd.DataFrame
    thresholds: Tuple[float, ...]
    fill: str = "zero"

    def summary(self) -> pd.DataFrame:
        """Mean drop per threshold, one column per method."""
        return self.rows.pivot_table(
            index="threshold", columns="method", values="drop", aggfunc="mean"
        )

    def mean_drop(self, method: str = "mace") -> pd.Series:
        return self.summary()[method]

    def write(self, stem: str) -> List[str]:
        return _write_frame(
            self.rows, stem,
            {"thresholds": list(self.thresholds), "fill": self.fill,
             "summary": _records(self.summary())},
        )


def faithfulness_sweep(
    model: MaceModel,
    blackbox: BlackBox,
    images: Sequence[LabeledImage],
    thresholds: Sequence[float] = (0.3, 0.4, 0.5, 0.6, 0.7),
    baseline_seeds: Sequence[int] = (0,),
    fill: str = "zero",
    fill_value: Optional[FillValue] = None,
    upscale_mode: str = "bilinear",
) -> FaithfulnessReport:
    """
    Faithfulness drop of MACE and of the random baseline over a dataset.

    Args:
        images: Evaluation images
        thresholds: Threshold grid
        baseline_seeds: One random-baseline draw per seed; empty disables
            the baseline
        fill: "zero" or "mean"
        fill_value: Overrides the value derived from fill
    """
    for t in thresholds:
        check_threshold(t)
    if fill_value is None:
        fill_value = fill_value_for(images, fill)
    pixels = stack_pixels(images)
    image_ids = np.array([im.image_id for im in images])
    height, width = pixels.shape[1:3]
    activations = compute_activations(model, blackbox, pixels)
    predicted = activations.predicted
    p_before = activations.probs[np.arange(len(images)), predicted]

    methods: List[Tuple[str, Optional[int], List[np.ndarray]]] = [
        ("mace", None, _class_heatmaps(
            activations, predicted, height, width, upscale_mode
        )),
    ]
    for seed in baseline_seeds:
        heatmaps = []
        for i, image_id in enumerate(image_ids):
            rng = np.random.default_rng([seed, int(image_id)])
            count = model.concepts_per_class[predicted[i]]
            maps = random_concept_maps(activations.x[i], count, rng)
            heatmaps.append(
                heatmaps_from_maps(maps, height, width, upscale_mode)
            )
        methods.append(("random", seed, heatmaps))

    frames = []
    for method, seed, heatmaps in methods:
        for t in thresholds:
            masks = np.stack([
                union_masks_from_heatmaps(h, t) for h in heatmaps
            ])
            drop, p_after, empty = _masking_drops(
                blackbox, pixels, masks, predicted, p_before, fill_value
            )
            if method == "mace" and empty.any():
                logger.warning(
                    "%d empty union masks at threshold %.2f", empty.sum(), t
                )
            frames.append(pd.DataFrame({
                "image_id": image_ids,
                "threshold": t,
                "method": method,
                "seed": -1 if seed is None else seed,
                "p_before": p_before,
                "p_after": p_after,
                "drop": drop,
                "empty_mask": empty,
            }))
    return FaithfulnessReport(
        rows=pd.concat(frames, ignore_index=True),
        thresholds=tuple(thresholds),
        fill=fill,
    )


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two boolean masks; two empty masks give 1."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError("Masks must have identical shapes")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def _perturbed_pixels(
    images: Sequence[LabeledImage], perturbation: Perturbation, noise_seed: int
) -> np.ndarray:
    return np.stack([
        perturbation.apply(
            im.pixels, np.random.default_rng([noise_seed, im.image_id])
        )
        for im in images
    ])


def robustness_iou(
    model: MaceModel,
    blackbox: BlackBox,
    image: LabeledImage,
    perturbation: Perturbation,
    threshold: float,
    noise_seed: int = 0,
    upscale_mode: str = "bilinear",
) -> float:
    """
    IoU of the union masks of an image and its perturbed copy.

    Both masks explain the class predicted for the original image.
    """
    report = robustness_sweep(
        model, blackbox, [image], [perturbation], [threshold],
        noise_seed, upscale_mode,
    )
    return float(report.rows["iou"].iloc[0])


@dataclass
class RobustnessReport:
    """Rows of (image_id, kind, intensity, threshold, iou)."""
    rows: pd.DataFrame

    def summary(self) -> pd.DataFrame:
        """Mean IoU per perturbation kind, intensity and threshold."""
        return (
            self.rows.groupby(["kind", "intensity", "threshold"])["iou"]
            .mean()
            .reset_index()
        )

    def write(self, stem: str) -> List[str]:
        return _write_frame(
            self.rows, stem,
            {"summary": self.summary().to_dict(orient="records")},
        )


def robustness_sweep(
    model: MaceModel,
    blackbox: BlackBox,
    images: Sequence[LabeledImage],
    perturbations: Sequence[Perturbation],
    thresholds: Sequence[float] = (0.3, 0.4, 0.5, 0.6, 0.7),
    noise_seed: int = 0,
    upscale_mode: str = "bilinear",
) -> RobustnessReport:
    """Robustness IoU of every image under every perturbation and threshold."""
    for t in thresholds:
        check_threshold(t)
    pixels = stack_pixels(images)
    image_ids = [im.image_id for im in images]
    height, width = pixels.shape[1:3]
    original = compute_activations(model, blackbox, pixels)
    predicted = original.predicted
    original_heatmaps = _class_heatmaps(
        original, predicted, height, width, upscale_mode
    )
    rows = []
    for perturbation in perturbations:
        perturbed_pixels = _perturbed_pixels(images, perturbation, noise_seed)
        perturbed = compute_activations(model, blackbox, perturbed_pixels)
        perturbed_heatmaps = _class_heatmaps(
            perturbed, predicted, height, width, upscale_mode
        )
        for t in thresholds:
            for i, image_id in enumerate(image_ids):
                rows.append({
                    "image_id": image_id,
                    "kind": perturbation.kind,
                    "intensity": perturbation.intensity,
                    "threshold": t,
                    "iou": iou(
                        union_masks_from_heatmaps(original_heatmaps[i], t),
                        union_masks_from_heatmaps(perturbed_heatmaps[i], t),
                    ),
                })
    return RobustnessReport(rows=pd.DataFrame(rows))


@dataclass
class StabilityReport:
    """
    Pairwise Euclidean distances between concept embeddings.

    Rows and columns are ordered concept-major: all chosen images of the
    first concept, then all images of the second concept, and so on.
    """
    class_index: int
    concepts: List[int]
    image_ids: List[int]
    distances: np.ndarray

    def _blocks(self) -> Tuple[np.ndarray, np.ndarray]:
        n = len(self.image_ids)
        concept_of = np.repeat(np.arange(len(self.concepts)), n)
        same = concept_of[:, None] == concept_of[None, :]
        off_diagonal = ~np.eye(len(concept_of), dtype=bool)
        return same & off_diagonal, ~same

    @property
    def intra_mean(self) -> float:
        """Mean distance within a concept, self-pairs excluded."""
        intra, _ = self._blocks()
        return float(self.distances[intra].mean())

    @property
    def inter_mean(self) -> float:
        _, inter = self._blocks()
        return float(self.distances[inter].mean())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "class_index": self.class_index,
            "concepts": self.concepts,
            "image_ids": self.image_ids,
            "intra_mean": self.intra_mean,
            "inter_mean": self.inter_mean,
        }

    def write(self, stem: str) -> List[str]:
        labels = [
            f"c{c}_i{i}" for c in self.concepts for i in self.image_ids
        ]
        csv_path, json_path = f"{stem}.csv", f"{stem}.json"
        pd.DataFrame(self.distances, index=labels, columns=labels).to_csv(
            csv_path
        )
        with open(json_path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
        return [csv_path, json_path]


def stability_matrix(
    model: MaceModel,
    blackbox: BlackBox,
    images: Sequence[LabeledImage],
    class_index: int,
    num_images: int = 10,
    num_concepts: int = 5,
    seed: int = 0,
) -> StabilityReport:
    """
    Distance matrix of the embeddings of num_concepts concepts of one class
    on num_images in-class images, both chosen with a seeded draw.

    Raises:
        ConfigurationError: If fewer than two images or concepts are
            available
    """
    in_class = [im for im in images if im.label == class_index]
    available = model.concepts_per_class[class_index]
    if len(in_class) < 2 or available < 2:
        raise ConfigurationError(
            "Stability needs at least two in-class images and two concepts"
        )
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(
        len(in_class), min(num_images, len(in_class)), replace=False
    ))
    positions = np.sort(rng.choice(
        available, min(num_concepts, available), replace=False
    ))
    selected = [in_class[i] for i in chosen]
    activations = compute_activations(model, blackbox, stack_pixels(selected))
    embeddings = activations.embeddings[class_index][:, positions]
    rows = embeddings.transpose(1, 0, 2).reshape(-1, embeddings.shape[-1])
    return StabilityReport(
        class_index=class_index,
        concepts=[model.concept_ids[class_index][j] for j in positions],
        image_ids=[im.image_id for im in selected],
        distances=cdist(rows, rows),
    )


@dataclass
class RankAnalyticsReport:
    """
    Relevance analytics against the black box's class ranking.

    Args:
        ranks: Rows (rank, mean_percentage, support); ranks without a
            supporting image are omitted
        concepts: Rows (class_index, concept, class_average, avg_true,
            avg_others)
        denominator: "positive" or "all"
    """
    ranks: pd.DataFrame
    concepts: pd.DataFrame
    denominator: str = "positive"

    @property
    def true_above_others_fraction(self) -> float:
        """Share of concepts whose AVG True exceeds AVG Others."""
        if self.concepts.empty:
            return 0.0
        return float(
            (self.concepts["avg_true"] > self.concepts["avg_others"]).mean()
        )

    @property
    def mean_gap(self) -> float:
        """Mean of AVG True minus AVG Others over all concepts."""
        if self.concepts.empty:
            return 0.0
        gap = self.concepts["avg_true"] - self.concepts["avg_others"]
        return float(gap.mean())

    def write(self, stem: str) -> List[str]:
        ranks_path = f"{stem}_ranks.csv"
        concepts_path = f"{stem}_concepts.csv"
        json_path = f"{stem}.json"
        self.ranks.to_csv(ranks_path, index=False)
        self.concepts.to_csv(concepts_path, index=False)
        with open(json_path, "w") as f:
            json.dump({
                "denominator": self.denominator,
                "true_above_others_fraction": self.true_above_others_fraction,
                "mean_gap": self.mean_gap,
                "ranks": self.ranks.to_dict(orient="records"),
                "concepts": self.concepts.to_dict(orient="records"),
            }, f, indent=2)
        return [ranks_path, concepts_path, json_path]


def rank_analytics_from_arrays(
    relevances: Sequence[np.ndarray],
    probs: np.ndarray,
    labels: np.ndarray,
    concept_ids: Optional[Sequence[Sequence[int]]] = None,
    denominator: str = "positive",
) -> RankAnalyticsReport:
    """
    Rank analytics from precomputed relevances.

    Args:
        relevances: Per class, N x C_k relevances
        probs: N x K black-box probabilities, defining each class's rank
        labels: True labels, length N
        concept_ids: Per class, original concept ids
        denominator: "positive" divides by the positive concepts of the
            class and skips pairs without any; "all" divides by C_k
    """
    if denominator not in ("positive", "all"):
        raise ConfigurationError(f"Unknown rank denominator: {denominator}")
    num_images, num_classes = probs.shape
    order = np.argsort(-probs, axis=1, kind="stable")
    rank_of = np.empty_like(order)
    rank_of[np.arange(num_images)[:, None], order] = np.arange(
        1, num_classes + 1
    )

    percentages: Dict[int, List[float]] = {}
    concept_rows = []
    for k in range(num_classes):
        r = np.asarray(relevances[k])
        in_class = labels == k
        class_average = r[in_class].mean(axis=0)
        slack = RANK_TOLERANCE * np.maximum(1.0, np.abs(class_average))
        below = r < class_average - slack
        positive = r > 0
        for i in range(num_images):
            count = (
                positive[i].sum() if denominator == "positive" else r.shape[1]
            )
            if count == 0:
                continue
            share = 100.0 * (positive[i] & below[i]).sum() / count
            percentages.setdefault(int(rank_of[i, k]), []).append(share)
        others = r[~in_class]
        for j in range(r.shape[1]):
            concept_rows.append({
                "class_index": k,
                "concept": concept_ids[k][j] if concept_ids else j,
                "class_average": float(class_average[j]),
                "avg_true": float(class_average[j]),
                "avg_others": (
                    float(others[:, j].mean()) if len(others) else np.nan
                ),
            })
    rank_rows = [
        {
            "rank": rank,
            "mean_percentage": float(np.mean(values)),
            "support": len(values),
        }
        for rank, values in sorted(percentages.items())
    ]
    return RankAnalyticsReport(
        ranks=pd.DataFrame(rank_rows, columns=RANK_COLUMNS),
        concepts=pd.DataFrame(concept_rows),
        denominator=denominator,
    )


def rank_analytics(
    model: MaceModel,
    blackbox: BlackBox,
    test_set: Sequence[LabeledImage],
    denominator: str = "positive",
    shuffle_seed: Optional[int] = None,
) -> RankAnalyticsReport:
    """
    Rank analytics of a model on a labeled test set.

    Args:
        shuffle_seed: When set, labels are permuted with this seed before
            the analysis. Concepts carry no class signal under permuted
            labels, so the AVG True / AVG Others gap should vanish.
    """
    labels = stack_labels(test_set)
    missing = [
        k for k in range(blackbox.spec.num_classes) if not np.any(labels == k)
    ]
    if missing:
        raise ConfigurationError(f"Classes {missing} have no test images")
    if shuffle_seed is not None:
        labels = np.random.default_rng(shuffle_seed).permutation(labels)
    activations = compute_activations(model, blackbox, stack_pixels(test_set))
    return rank_analytics_from_arrays(
        activations.relevances, activations.probs, labels,
        model.concept_ids, denominator,
    )


@dataclass
class OutputFidelityReport:
    """
    Agreement of f(z_hat) with f(z).

    Args:
        agreement: Share of images where both predict the same class
        mean_kl: Mean KL(f(z_hat) || f(z))
        mean_squared_error: Mean ||z - z_hat||^2
        num_images: Evaluated images
        rows: Per image (image_id, predicted, p_original, p_reconstructed,
            agree, kl, squared_error); both probabilities are of the
            class f(z) predicts
    """
    agreement: float
    mean_kl: float
    mean_squared_error: float
    num_images: int
    rows: Optional[pd.DataFrame] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "agreement": self.agreement,
            "mean_kl": self.mean_kl,
            "mean_squared_error": self.mean_squared_error,
            "num_images": self.num_images,
        }

    def write(self, stem: str) -> List[str]:
        if self.rows is None:
            path = f"{stem}.json"
            with open(path, "w") as f:
                json.dump(self.to_dict(), f, indent=2)
            return [path]
        return _write_frame(self.rows, stem, self.to_dict())


def output_fidelity(
    model: MaceModel, blackbox: BlackBox, images: Sequence[LabeledImage]
) -> OutputFidelityReport:
    activations = compute_activations(model, blackbox, stack_pixels(images))
    with torch.no_grad():
        reconstructed = blackbox.dense_probabilities(
            torch.as_tensor(activations.z_hat, dtype=DTYPE)
        ).numpy()
    original = activations.probs
    safe = np.where(reconstructed > 0, reconstructed, 1.0)
    kl = np.where(
        reconstructed > 0,
        reconstructed * np.log(safe / np.maximum(original, 1e-9)),
        0.0,
    ).sum(axis=1)
    predicted = original.argmax(axis=1)
    agree = reconstructed.argmax(axis=1) == predicted
    squared_error = ((activations.z - activations.z_hat) ** 2).sum(axis=1)
    index = np.arange(len(images))
    rows = pd.DataFrame({
        "image_id": [im.image_id for im in images],
        "predicted": predicted,
        "p_original": original[index, predicted],
        "p_reconstructed": reconstructed[index, predicted],
        "agree": agree,
        "kl": kl,
        "squared_error": squared_error,
    })
    return OutputFidelityReport(
        agreement=float(np.mean(agree)),
        mean_kl=float(kl.mean()),
        mean_squared_error=float(squared_error.mean()),
        num_images=len(images),
        rows=rows,
    )


@dataclass
class MaskingEffect:
    """Class distribution before and after removing one concept's mask."""
    image_id: int
    class_index: int
    concept: int
    coverage: float
    before: np.ndarray
    after: np.ndarray

    @property
    def drop(self) -> float:
        k = self.class_index
        return float(self.before[k] - self.after[k])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "image_id": self.image_id,
            "class_index": self.class_index,
            "concept": self.concept,
            "coverage": self.coverage,
            "drop": self.drop,
            "before": self.before.tolist(),
            "after": self.after.tolist(),
        }


def concept_masking_effect(
    model: MaceModel,
    blackbox: BlackBox,
    image: LabeledImage,
    class_index: int,
    concept: int,
    threshold: float = 0.5,
    fill_value: FillValue = 0.0,
    upscale_mode: str = "bilinear",
) -> MaskingEffect:
    """
    Removes a single concept's mask and reports the full class distribution
    before and after, exposing how the remaining concepts compensate.

    Args:
        concept: Original concept id

    Raises:
        ValueError: If the concept is not part of the model
    """
    if concept not in model.concept_ids[class_index]:
        raise ValueError(
            f"Concept {concept} of class {class_index} is not in the model"
        )
    position = model.concept_ids[class_index].index(concept)
    activations = compute_activations(model, blackbox, image.pixels[None])
    height, width = image.pixels.shape[:2]
    heatmap = heatmaps_from_maps(
        activations.maps[class_index][0, position], height, width, upscale_mode
    )
    mask = threshold_mask(heatmap, threshold, class_index, concept)
    after = blackbox.predict_proba(
        apply_mask(image.pixels, mask.values, fill_value)[None]
    )[0]
    return MaskingEffect(
        image_id=image.image_id,
        class_index=class_index,
        concept=concept,
        coverage=mask.coverage,
        before=activations.probs[0],
        after=after,
    )


ABLATION_VARIANTS = {
    "full": {"use_lo": True, "use_ld": True},
    "no-lo": {"use_lo": False, "use_ld": True},
    "no-ld": {"use_lo": True, "use_ld": False},
}


@dataclass
class AblationReport:
    """Rows of (variant, seed, threshold, mean_drop)."""
    rows: pd.DataFrame

    def summary(self) -> pd.DataFrame:
        """Mean drop per threshold, one column per variant."""
        return self.rows.pivot_table(
            index="threshold", columns="variant", values="mean_drop",
            aggfunc="mean",
        )[list(ABLATION_VARIANTS)]

    def write(self, stem: str) -> List[str]:
        return _write_frame(
            self.rows, stem,
            {"summary": _records(self.summary())},
        )


def ablation_compare(
    blackbox: BlackBox,
    train_set: Sequence[LabeledImage],
    test_set: Sequence[LabeledImage],
    base_config: TrainConfig,
    thresholds: Sequence[float] = (0.3, 0.4, 0.5, 0.6, 0.7),
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    fill: str = "zero",
    upscale_mode: str = "bilinear",
) -> AblationReport:
    """
    Trains the full model and the variants without L^O and without L^D on
    identical seeds, then compares their faithfulness drops.
    """
    fill_value = fill_value_for(test_set, fill)
    rows = []
    for seed in seeds:
        for variant, switches in ABLATION_VARIANTS.items():
            config = replace(base_config, seed=seed, **switches)
            model, _ = train(blackbox, train_set, config)
            report = faithfulness_sweep(
                model, blackbox, test_set, thresholds, baseline_seeds=(),
                fill=fill, fill_value=fill_value, upscale_mode=upscale_mode,
            )
            for t, drop in report.mean_drop("mace").items():
                rows.append({
                    "variant": variant,
                    "seed": seed,
                    "threshold": t,
                    "mean_drop": float(drop),
                })
            logger.info("Ablation variant %s, seed %d done", variant, seed)
    return AblationReport(rows=pd.DataFrame(rows))

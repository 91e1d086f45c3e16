"""
Concept pruning.

Four rules flag concepts that carry no class-specific meaning. All rules
are evaluated on the same frozen model; the pruned set is the union of the
four rules' verdicts and is removed in one step before fine-tuning.
"""
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from maceexplain.src.blackbox import BlackBox, LabeledImage
from maceexplain.src.config import PruneConfig, TrainConfig
from maceexplain.src.errors import ConfigurationError
from maceexplain.src.explainer import (
    compute_activations,
    heatmaps_from_maps,
    write_concept_grid,
)
from maceexplain.src.mace import MaceModel, clone_model
from maceexplain.src.synthetic import stack_labels, stack_pixels
from maceexplain.src.trainer import TrainReport, train

logger = logging.getLogger(__name__)

RULE_NAMES = (
    "top_relevance_mismatch",
    "promiscuous_positive",
    "whole_image_mask",
    "in_class_negative",
)


@dataclass
class RuleVerdict:
    """
    Outcome of one rule for one concept.

    Args:
        rule: Rule name
        statistic: The measured value
        threshold: Value the statistic was compared against
        fired: True if the rule asks for pruning
    """
    rule: str
    statistic: float
    threshold: float
    fired: bool


def rank_by_relevance(
    relevances: np.ndarray, image_ids: np.ndarray
) -> np.ndarray:
    """Indices by descending relevance, ties by ascending image id."""
    return np.lexsort((np.asarray(image_ids), -np.asarray(relevances)))


def rule_top_relevance_mismatch(
    relevances: np.ndarray,
    labels: np.ndarray,
    image_ids: np.ndarray,
    class_index: int,
    top_t: int = 10,
    mismatch_s: int = 5,
) -> RuleVerdict:
    """
    Fires if more than S of the T most relevant images are off-class.

    With fewer than T images all of them are ranked and the allowance is
    scaled to ceil(S * n / T).
    """
    n = len(relevances)
    allowed = mismatch_s if n >= top_t else math.ceil(mismatch_s * n / top_t)
    top = rank_by_relevance(relevances, image_ids)[:top_t]
    mismatches = int(np.sum(np.asarray(labels)[top] != class_index))
    return RuleVerdict(
        rule="top_relevance_mismatch",
        statistic=float(mismatches),
        threshold=float(allowed),
        fired=mismatches > allowed,
    )


def rule_promiscuous_positive(
    relevances: np.ndarray, positive_fraction_max: float = 0.5
) -> RuleVerdict:
    """Fires if the concept is positive on too many of all test images."""
    values = np.asarray(relevances)
    fraction = float(np.mean(values > 0)) if len(values) else 0.0
    return RuleVerdict(
        rule="promiscuous_positive",
        statistic=fraction,
        threshold=positive_fraction_max,
        fired=fraction > positive_fraction_max,
    )


def rule_whole_image_mask(
    coverages: np.ndarray, mask_coverage_max: float = 0.95
) -> RuleVerdict:
    """Fires if the mask covers nearly the whole in-class image on average."""
    mean = float(np.mean(coverages)) if len(coverages) else 0.0
    return RuleVerdict(
        rule="whole_image_mask",
        statistic=mean,
        threshold=mask_coverage_max,
        fired=mean > mask_coverage_max,
    )


def rule_in_class_negative(
    in_class_relevances: np.ndarray, in_class_positive_min: float = 0.05
) -> RuleVerdict:
    """Fires if the concept is rarely positive on its own class."""
    values = np.asarray(in_class_relevances)
    fraction = float(np.mean(values > 0)) if len(values) else 0.0
    return RuleVerdict(
        rule="in_class_negative",
        statistic=fraction,
        threshold=in_class_positive_min,
        fired=fraction < in_class_positive_min,
    )


@dataclass
class ClassStatistics:
    """
    Everything the rules need for the concepts of one class.

    Args:
        class_index: Class k
        concept_ids: Original ids of the class's concepts
        relevances: N x C_k relevances over the test set
        labels: Test labels, length N
        image_ids: Test image ids, length N
        coverages: n_k x C_k mask coverage on the in-class test images
    """
    class_index: int
    concept_ids: List[int]
    relevances: np.ndarray
    labels: np.ndarray
    image_ids: np.ndarray
    coverages: np.ndarray

    @property
    def in_class(self) -> np.ndarray:
        return self.labels == self.class_index


def collect_concept_statistics(
    model: MaceModel,
    blackbox: BlackBox,
    test_set: Sequence[LabeledImage],
    mask_threshold: float = 0.5,
    upscale_mode: str = "bilinear",
) -> List[ClassStatistics]:
    """
    Relevances and mask coverages of every concept on a labeled test set.

    Raises:
        ConfigurationError: If a class has no test image
    """
    labels = stack_labels(test_set)
    missing = [
        k for k in range(blackbox.spec.num_classes) if not np.any(labels == k)
    ]
    if missing:
        raise ConfigurationError(f"Classes {missing} have no test images")
    activations = compute_activations(model, blackbox, stack_pixels(test_set))
    image_ids = np.array([im.image_id for im in test_set])
    height, width = blackbox.spec.input_height, blackbox.spec.input_width
    statistics = []
    for k in range(blackbox.spec.num_classes):
        in_class = labels == k
        heatmaps = heatmaps_from_maps(
            activations.maps[k][in_class], height, width, upscale_mode
        )
        coverages = (heatmaps >= mask_threshold).mean(axis=(-2, -1))
        statistics.append(ClassStatistics(
            class_index=k,
            concept_ids=list(model.concept_ids[k]),
            relevances=activations.relevances[k],
            labels=labels,
            image_ids=image_ids,
            coverages=coverages,
        ))
    return statistics


@dataclass
class ConceptVerdict:
    class_index: int
    concept: int
    position: int
    rules: List[RuleVerdict]

    @property
    def pruned(self) -> bool:
        return any(rule.fired for rule in self.rules)


@dataclass
class PruneReport:
    """
    Rule verdicts for every concept and the resulting per-class counts.

    A concept is pruned iff at least one of its rules fired.
    """
    verdicts: List[ConceptVerdict]
    class_names: List[str]
    config: Dict[str, Any] = field(default_factory=dict)

    def kept_positions(self) -> List[List[int]]:
        kept: List[List[int]] = [[] for _ in self.class_names]
        for verdict in self.verdicts:
            if not verdict.pruned:
                kept[verdict.class_index].append(verdict.position)
        return kept

    @property
    def kept_counts(self) -> List[int]:
        return [len(positions) for positions in self.kept_positions()]

    @property
    def pruned_concepts(self) -> List[Tuple[int, int]]:
        return [
            (v.class_index, v.concept) for v in self.verdicts if v.pruned
        ]

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for verdict in self.verdicts:
            row: Dict[str, Any] = {
                "class": self.class_names[verdict.class_index],
                "concept": verdict.concept,
            }
            for rule in verdict.rules:
                row[rule.rule] = rule.statistic
                row[f"{rule.rule}_fired"] = rule.fired
            row["pruned"] = verdict.pruned
            rows.append(row)
        return pd.DataFrame(rows)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "config": self.config,
            "kept_counts": dict(zip(self.class_names, self.kept_counts)),
            "concepts": [
                {
                    "class": self.class_names[v.class_index],
                    "concept": v.concept,
                    "pruned": v.pruned,
                    "rules": [asdict(rule) for rule in v.rules],
                }
                for v in self.verdicts
            ],
        }

    def format_table(self) -> str:
        frame = self.to_frame()
        columns = ["class", "concept", *RULE_NAMES, "pruned"]
        return frame[columns].to_string(index=False, float_format="%.3f")

    def write(self, stem: str) -> List[str]:
        """Writes {stem}.json and {stem}.csv and returns both paths."""
        json_path, csv_path = f"{stem}.json", f"{stem}.csv"
        with open(json_path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
        self.to_frame().to_csv(csv_path, index=False)
        return [json_path, csv_path]


def evaluate_rules(
    statistics: Sequence[ClassStatistics],
    config: PruneConfig,
    class_names: Sequence[str],
) -> PruneReport:
    """Applies all four rules to every concept; side-effect free."""
    verdicts = []
    for stats in statistics:
        in_class = stats.in_class
        for j, concept in enumerate(stats.concept_ids):
            relevances = stats.relevances[:, j]
            rules = [
                rule_top_relevance_mismatch(
                    relevances, stats.labels, stats.image_ids,
                    stats.class_index, config.top_t, config.mismatch_s,
                ),
                rule_promiscuous_positive(
                    relevances, config.positive_fraction_max
                ),
                rule_whole_image_mask(
                    stats.coverages[:, j], config.mask_coverage_max
                ),
                rule_in_class_negative(
                    relevances[in_class], config.in_class_positive_min
                ),
            ]
            verdict = ConceptVerdict(stats.class_index, concept, j, rules)
            if verdict.pruned:
                logger.info(
                    "Pruning concept %d of %s: %s",
                    concept, class_names[stats.class_index],
                    ", ".join(r.rule for r in rules if r.fired),
                )
            verdicts.append(verdict)
    return PruneReport(
        verdicts=verdicts,
        class_names=list(class_names),
        config=asdict(config),
    )


def prune_and_finetune(
    model: MaceModel,
    blackbox: BlackBox,
    train_set: Sequence[LabeledImage],
    test_set: Sequence[LabeledImage],
    prune_config: PruneConfig,
    train_config: TrainConfig,
    upscale_mode: str = "bilinear",
) -> Tuple[MaceModel, PruneReport, Optional[TrainReport]]:
    """
    Prunes non-meaningful concepts, then fine-tunes the smaller model.

    The input model is left untouched.

    Args:
        model: Trained model
        blackbox: The explained classifier
        train_set: Images used for fine-tuning
        test_set: Held-out images the rules are evaluated on
        prune_config: Rule thresholds and fine-tuning length
        train_config: Training configuration reused for fine-tuning

    Returns:
        Tuple of (pruned model, prune report, fine-tuning report or None)

    Raises:
        PruningError: If a class would lose all of its concepts
    """
    statistics = collect_concept_statistics(
        model, blackbox, test_set, prune_config.mask_threshold, upscale_mode
    )
    report = evaluate_rules(
        statistics, prune_config, blackbox.spec.class_names
    )
    pruned = clone_model(model)
    pruned.prune(report.kept_positions())
    pruned.metadata["prune_config"] = asdict(prune_config)
    logger.info(
        "Kept concepts per class: %s (%d pruned)",
        report.kept_counts, len(report.pruned_concepts),
    )
    fine_tune_report = None
    if prune_config.fine_tune_epochs > 0:
        pruned, fine_tune_report = train(
            blackbox, train_set, train_config,
            model=pruned, epochs=prune_config.fine_tune_epochs,
        )
    return pruned, report, fine_tune_report


def top_images_for_concept(
    model: MaceModel,
    blackbox: BlackBox,
    images: Sequence[LabeledImage],
    class_index: int,
    concept: int,
    top_t: int = 10,
) -> List[LabeledImage]:
    """
    The top_t images with the highest relevance for one concept.

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
    activations = compute_activations(model, blackbox, stack_pixels(images))
    relevances = activations.relevances[class_index][:, position]
    image_ids = np.array([im.image_id for im in images])
    order = rank_by_relevance(relevances, image_ids)[:top_t]
    return [images[i] for i in order]


def write_prototype_grid(
    model: MaceModel,
    blackbox: BlackBox,
    images: Sequence[LabeledImage],
    class_index: int,
    concept: int,
    path: str,
    top_t: int = 10,
    upscale_mode: str = "bilinear",
) -> str:
    """Overlays of one concept on its top_t images, tiled into one PNG."""
    top = top_images_for_concept(
        model, blackbox, images, class_index, concept, top_t
    )
    position = model.concept_ids[class_index].index(concept)
    activations = compute_activations(model, blackbox, stack_pixels(top))
    height, width = blackbox.spec.input_height, blackbox.spec.input_width
    heatmaps = heatmaps_from_maps(
        activations.maps[class_index][:, position], height, width,
        upscale_mode,
    )
    names = blackbox.spec.class_names
    return write_concept_grid(
        [(im.pixels, heatmap) for im, heatmap in zip(top, heatmaps)],
        path,
        titles=[f"#{im.image_id} {names[im.label]}" for im in top],
    )

import json
import os

import numpy as np
import pandas as pd
import pytest

from maceexplain.src.config import TrainConfig
from maceexplain.src.errors import ConfigurationError
from maceexplain.src.evaluator import (
    ABLATION_VARIANTS,
    MaskingDrop,
    ablation_compare,
    apply_mask,
    concept_masking_effect,
    faithfulness_drop,
    faithfulness_sweep,
    fill_value_for,
    iou,
    output_fidelity,
    random_baseline_drop,
    random_concept_maps,
    rank_analytics,
    rank_analytics_from_arrays,
    robustness_iou,
    robustness_sweep,
    stability_matrix,
)
from maceexplain.src.explainer import compute_activations
from maceexplain.src.perturbations import Perturbation, identity_perturbation
from maceexplain.src.synthetic import stack_labels, stack_pixels


def test_iou_of_overlapping_masks():
    """One shared pixel out of three covered gives 1/3."""
    a = np.array([True, True, False, False])
    b = np.array([False, True, True, False])
    assert iou(a, b) == pytest.approx(1 / 3)


def test_iou_edge_cases():
    """Two empty masks agree perfectly, disjoint masks not at all."""
    empty = np.zeros((3, 3), dtype=bool)
    assert iou(empty, empty) == 1.0
    a = empty.copy()
    a[0, 0] = True
    b = empty.copy()
    b[2, 2] = True
    assert iou(a, b) == 0.0
    with pytest.raises(ValueError):
        iou(a, np.zeros((2, 2), dtype=bool))


def test_apply_mask_fills_every_channel():
    """Masked pixels take the fill value in every channel."""
    pixels = np.full((2, 2, 3), 0.5)
    mask = np.array([[True, False], [False, False]])
    masked = apply_mask(pixels, mask, 0.0)
    assert np.all(masked[0, 0] == 0.0)
    assert np.all(masked[1, 1] == 0.5)

    channel_means = np.array([0.1, 0.2, 0.3])
    masked = apply_mask(pixels, mask, channel_means)
    assert np.allclose(masked[0, 0], channel_means)
    assert np.all(pixels[0, 0] == 0.5)


def test_fill_value_modes(tiny_images):
    """Zero fill is a scalar, mean fill one value per channel."""
    assert fill_value_for(tiny_images, "zero") == 0.0
    means = fill_value_for(tiny_images, "mean")
    assert means.shape == (3,)
    assert np.all((means > 0) & (means < 1))
    with pytest.raises(ConfigurationError):
        fill_value_for(tiny_images, "noise")


def test_random_concept_maps_are_seeded_and_nonnegative():
    """Random filters depend only on the generator and pass a ReLU."""
    x = np.random.default_rng(0).standard_normal((2, 2, 4))
    first = random_concept_maps(x, 5, np.random.default_rng([7, 1]))
    second = random_concept_maps(x, 5, np.random.default_rng([7, 1]))
    other = random_concept_maps(x, 5, np.random.default_rng([8, 1]))
    assert first.shape == (5, 2, 2)
    assert np.all(first >= 0)
    assert np.array_equal(first, second)
    assert not np.array_equal(first, other)


def test_empty_mask_drop_is_exactly_zero():
    """An empty mask never counts as a drop."""
    drop = MaskingDrop(
        image_id=0, class_index=1, p_before=0.9, p_after=0.2, empty_mask=True
    )
    assert drop.drop == 0.0


def test_faithfulness_sweep_rows(tiny_model, tiny_blackbox, tiny_images):
    """One row per image, threshold and method draw."""
    images = tiny_images[:6]
    report = faithfulness_sweep(
        tiny_model, tiny_blackbox, images,
        thresholds=(0.3, 0.7), baseline_seeds=(0, 1),
    )
    assert len(report.rows) == 6 * 2 * 3
    assert set(report.rows["method"]) == {"mace", "random"}
    assert set(report.rows["seed"]) == {-1, 0, 1}

    empty = report.rows[report.rows["empty_mask"]]
    assert np.all(empty["drop"] == 0.0)
    assert np.allclose(
        report.rows["drop"], report.rows["p_before"] - report.rows["p_after"]
    )

    summary = report.summary()
    assert list(summary.index) == [0.3, 0.7]
    assert set(summary.columns) == {"mace", "random"}


def test_faithfulness_does_not_depend_on_image_order(
    tiny_model, tiny_blackbox, tiny_images
):
    """Random filters are seeded per image, not per position."""
    images = tiny_images[:5]
    forward = faithfulness_sweep(
        tiny_model, tiny_blackbox, images, thresholds=(0.5,)
    ).rows
    backward = faithfulness_sweep(
        tiny_model, tiny_blackbox, images[::-1], thresholds=(0.5,)
    ).rows
    keys = ["method", "image_id"]
    forward = forward.sort_values(keys).reset_index(drop=True)
    backward = backward.sort_values(keys).reset_index(drop=True)
    assert np.allclose(forward["drop"], backward["drop"])


def test_single_image_drop_matches_sweep(
    tiny_model, tiny_blackbox, tiny_images
):
    """One image's drop equals its row in the sweep."""
    image = tiny_images[0]
    single = faithfulness_drop(tiny_model, tiny_blackbox, image, 0.5)
    random_single = random_baseline_drop(
        tiny_blackbox, image, 0.5, seed=0,
        num_concepts=tiny_model.concepts_per_class[single.class_index],
    )
    rows = faithfulness_sweep(
        tiny_model, tiny_blackbox, [image], thresholds=(0.5,),
        baseline_seeds=(0,),
    ).rows.set_index("method")

    assert single.drop == pytest.approx(rows.loc["mace", "drop"])
    assert random_single.drop == pytest.approx(rows.loc["random", "drop"])


def test_faithfulness_rejects_bad_threshold(
    tiny_model, tiny_blackbox, tiny_images
):
    """Thresholds outside (0, 1) are rejected."""
    with pytest.raises(ValueError):
        faithfulness_sweep(
            tiny_model, tiny_blackbox, tiny_images[:2], thresholds=(1.0,)
        )


def test_report_files(tiny_model, tiny_blackbox, tiny_images, tmp_path):
    """A faithfulness report writes CSV and JSON with every row."""
    report = faithfulness_sweep(
        tiny_model, tiny_blackbox, tiny_images[:3], thresholds=(0.5,)
    )
    paths = report.write(str(tmp_path / "faithfulness"))
    assert all(os.path.exists(p) for p in paths)
    with open(str(tmp_path / "faithfulness.json")) as f:
        payload = json.load(f)
    assert payload["thresholds"] == [0.5]
    assert len(payload["rows"]) == len(report.rows)


def test_identity_perturbation_keeps_masks(
    tiny_model, tiny_blackbox, tiny_images
):
    """Without a perturbation both masks coincide."""
    assert robustness_iou(
        tiny_model, tiny_blackbox, tiny_images[0], identity_perturbation(),
        0.5,
    ) == 1.0


def test_robustness_sweep_rows(tiny_model, tiny_blackbox, tiny_images):
    """One row per image, perturbation and threshold."""
    perturbations = [
        Perturbation("brightness", 0.1),
        Perturbation("rotation", 15.0),
    ]
    report = robustness_sweep(
        tiny_model, tiny_blackbox, tiny_images[:4], perturbations,
        thresholds=(0.4, 0.6),
    )
    assert len(report.rows) == 4 * 2 * 2
    assert report.rows["iou"].between(0.0, 1.0).all()
    assert len(report.summary()) == 2 * 2


def test_stability_matrix_shape(tiny_model, tiny_blackbox, tiny_images):
    """Concept-major distances are symmetric with a zero diagonal."""
    report = stability_matrix(
        tiny_model, tiny_blackbox, tiny_images, class_index=0,
        num_images=4, num_concepts=2, seed=1,
    )
    assert report.distances.shape == (8, 8)
    assert np.allclose(report.distances, report.distances.T)
    assert np.allclose(np.diag(report.distances), 0.0)
    assert len(report.concepts) == 2
    assert len(report.image_ids) == 4
    assert report.intra_mean >= 0 and report.inter_mean >= 0


def test_stability_is_seeded(tiny_model, tiny_blackbox, tiny_images):
    """The same seed selects the same images."""
    first = stability_matrix(
        tiny_model, tiny_blackbox, tiny_images, 1, num_images=3, seed=5
    )
    second = stability_matrix(
        tiny_model, tiny_blackbox, tiny_images, 1, num_images=3, seed=5
    )
    assert first.image_ids == second.image_ids
    assert np.array_equal(first.distances, second.distances)


def test_stability_needs_two_concepts(tiny_blackbox, tiny_images):
    """Distances between concepts need at least two of them."""
    from maceexplain.src.mace import MaceModel

    model = MaceModel.uniform(tiny_blackbox.spec, 1, 4, seed=0)
    with pytest.raises(ConfigurationError):
        stability_matrix(model, tiny_blackbox, tiny_images, class_index=0)


def _rank_inputs():
    probs = np.array([[0.7, 0.3], [0.2, 0.8]])
    labels = np.array([0, 1])
    relevances = [
        np.array([[1.0, 2.0], [0.5, -1.0]]),
        np.array([[3.0, 0.0], [1.0, 1.0]]),
    ]
    return relevances, probs, labels


def test_rank_analytics_hand_oracle():
    """
    Image 1 ranks class 0 second; of its single positive concept, the one
    below the class average counts, giving 100%. Every other pair gives 0%.
    """
    report = rank_analytics_from_arrays(*_rank_inputs())
    ranks = report.ranks.set_index("rank")
    assert ranks.loc[1, "mean_percentage"] == pytest.approx(0.0)
    assert ranks.loc[2, "mean_percentage"] == pytest.approx(50.0)
    assert list(ranks["support"]) == [2, 2]


def test_rank_analytics_all_denominator():
    """Dividing by all concepts halves the rank-2 share."""
    report = rank_analytics_from_arrays(*_rank_inputs(), denominator="all")
    ranks = report.ranks.set_index("rank")
    assert ranks.loc[2, "mean_percentage"] == pytest.approx(25.0)


def test_rank_analytics_concept_averages():
    """AVG True and AVG Others per concept, under original ids."""
    report = rank_analytics_from_arrays(
        *_rank_inputs(), concept_ids=[[4, 9], [0, 2]]
    )
    concepts = report.concepts
    assert list(concepts["concept"]) == [4, 9, 0, 2]
    assert list(concepts["avg_true"]) == [1.0, 2.0, 1.0, 1.0]
    assert list(concepts["avg_others"]) == [0.5, -1.0, 3.0, 0.0]
    assert report.true_above_others_fraction == pytest.approx(0.75)


def test_rank_analytics_skips_images_without_positive_concepts():
    """Images without positive concepts do not support their rank."""
    relevances, probs, labels = _rank_inputs()
    relevances[0] = np.array([[1.0, 2.0], [0.0, -1.0]])
    report = rank_analytics_from_arrays(relevances, probs, labels)
    ranks = report.ranks.set_index("rank")
    assert ranks.loc[2, "support"] == 1
    assert ranks.loc[2, "mean_percentage"] == pytest.approx(0.0)


def test_rank_analytics_rejects_unknown_denominator():
    """Only the positive and all denominators exist."""
    with pytest.raises(ConfigurationError):
        rank_analytics_from_arrays(*_rank_inputs(), denominator="some")


def test_rank_analytics_needs_every_class(
    tiny_model, tiny_blackbox, tiny_images
):
    """Every class needs test images of its own."""
    only_first = [im for im in tiny_images if im.label == 0]
    with pytest.raises(ConfigurationError):
        rank_analytics(tiny_model, tiny_blackbox, only_first)


def test_output_fidelity_ranges(tiny_model, tiny_blackbox, tiny_images):
    """Agreement is a share; KL and squared error are non-negative."""
    report = output_fidelity(tiny_model, tiny_blackbox, tiny_images)
    assert report.num_images == len(tiny_images)
    assert 0.0 <= report.agreement <= 1.0
    assert report.mean_kl >= -1e-12
    assert report.mean_squared_error >= 0.0


def test_output_fidelity_rows(
    tiny_model, tiny_blackbox, tiny_images, tmp_path
):
    """Per-image rows aggregate to the summary and are written as CSV."""
    report = output_fidelity(tiny_model, tiny_blackbox, tiny_images)
    rows = report.rows
    assert list(rows["image_id"]) == [im.image_id for im in tiny_images]
    assert rows["agree"].mean() == pytest.approx(report.agreement)
    assert rows["kl"].mean() == pytest.approx(report.mean_kl)
    assert rows["squared_error"].mean() == pytest.approx(
        report.mean_squared_error
    )
    assert rows[["p_original", "p_reconstructed"]].stack().between(
        0.0, 1.0
    ).all()
    paths = report.write(str(tmp_path / "fidelity"))
    assert [p.rsplit(".", 1)[-1] for p in paths] == ["csv", "json"]
    with open(paths[1]) as f:
        assert json.load(f)["num_images"] == len(tiny_images)


def test_rank_analytics_mean_gap():
    """Gaps 0.5, 3, -2 and 1 average to 0.625."""
    report = rank_analytics_from_arrays(*_rank_inputs())
    assert report.mean_gap == pytest.approx(0.625)


def test_rank_analytics_with_shuffled_labels(
    tiny_model, tiny_blackbox, tiny_images
):
    """A shuffle seed analyses the same relevances under permuted labels."""
    shuffled = rank_analytics(
        tiny_model, tiny_blackbox, tiny_images, shuffle_seed=4
    )
    labels = np.random.default_rng(4).permutation(stack_labels(tiny_images))
    activations = compute_activations(
        tiny_model, tiny_blackbox, stack_pixels(tiny_images)
    )
    expected = rank_analytics_from_arrays(
        activations.relevances, activations.probs, labels,
        tiny_model.concept_ids,
    )
    pd.testing.assert_frame_equal(shuffled.concepts, expected.concepts)
    pd.testing.assert_frame_equal(shuffled.ranks, expected.ranks)


def test_concept_masking_effect(tiny_model, tiny_blackbox, tiny_images):
    """Before and after are full distributions; the drop is per class."""
    image = tiny_images[0]
    effect = concept_masking_effect(
        tiny_model, tiny_blackbox, image, class_index=0, concept=1
    )
    assert effect.before.sum() == pytest.approx(1.0)
    assert effect.after.sum() == pytest.approx(1.0)
    assert effect.drop == pytest.approx(effect.before[0] - effect.after[0])
    assert 0.0 <= effect.coverage <= 1.0
    assert effect.to_dict()["concept"] == 1


def test_concept_masking_effect_unknown_concept(
    tiny_model, tiny_blackbox, tiny_images
):
    """A concept id outside the model raises ValueError."""
    with pytest.raises(ValueError):
        concept_masking_effect(
            tiny_model, tiny_blackbox, tiny_images[0], 0, concept=7
        )


def test_ablation_trains_every_variant(tiny_blackbox, tiny_images):
    """One row per variant for a single seed and threshold."""
    config = TrainConfig(
        num_concepts=2, embed_dim=3, epochs=1, batch_size=8
    )
    report = ablation_compare(
        tiny_blackbox, tiny_images, tiny_images[:4], config,
        thresholds=(0.5,), seeds=(0,),
    )
    assert set(report.rows["variant"]) == set(ABLATION_VARIANTS)
    assert len(report.rows) == 3
    assert list(report.summary().columns) == list(ABLATION_VARIANTS)


@pytest.mark.slow
def test_default_model_reproduces_blackbox_outputs(default_run):
    """
    f(z_hat) agrees with f(z) on at least 90% of held-out images with a
    mean KL below 0.1.
    """
    report = output_fidelity(
        default_run.model(0), default_run.blackbox, default_run.held_out
    )
    assert report.agreement >= 0.9
    assert report.mean_kl < 0.1


@pytest.mark.slow
def test_default_masks_beat_random_concepts(default_run):
    """
    Averaged over three training seeds, MACE union masks drop the
    predicted-class probability more than random concept combinations at
    every threshold.
    """
    settings = default_run.config.eval
    summaries = [
        faithfulness_sweep(
            default_run.model(seed), default_run.blackbox,
            default_run.held_out, thresholds=settings.thresholds,
            baseline_seeds=settings.seeds, fill=settings.fill,
            upscale_mode=settings.upscale_mode,
        ).summary()
        for seed in (0, 1, 2)
    ]
    mean = sum(summaries) / len(summaries)
    assert list(mean.index) == list(settings.thresholds)
    assert (mean["mace"] > mean["random"]).all(), mean.to_string()


@pytest.mark.slow
def test_kept_concepts_prefer_their_class(default_run):
    """
    After pruning, at least 80% of kept concepts are more relevant on their
    own class than on others; under shuffled labels the gap vanishes.
    """
    pruned, _ = default_run.pruned(0)
    report = rank_analytics(pruned, default_run.blackbox, default_run.held_out)
    assert report.true_above_others_fraction >= 0.8
    assert report.mean_gap > 0
    shuffled = rank_analytics(
        pruned, default_run.blackbox, default_run.held_out, shuffle_seed=0
    )
    assert abs(shuffled.mean_gap) < 0.5 * report.mean_gap


@pytest.mark.slow
def test_concept_embeddings_cluster_across_images(default_run):
    """
    For every class, embeddings of one concept on different held-out images
    are closer than embeddings of different concepts.
    """
    model = default_run.model(0)
    settings = default_run.config.eval
    for class_index in range(default_run.blackbox.spec.num_classes):
        report = stability_matrix(
            model, default_run.blackbox, default_run.held_out, class_index,
            num_images=settings.stability_images,
            num_concepts=settings.stability_concepts,
        )
        assert report.intra_mean < report.inter_mean, class_index


@pytest.mark.slow
def test_full_objective_is_most_faithful(default_run):
    """
    Over five seeds, the full objective drops the predicted-class
    probability at least as much as either variant without L^O or L^D.
    """
    settings = default_run.config.eval
    report = ablation_compare(
        default_run.blackbox, default_run.train_set, default_run.held_out,
        default_run.config.train, thresholds=settings.thresholds,
        seeds=settings.ablation_seeds, fill=settings.fill,
        upscale_mode=settings.upscale_mode,
    )
    assert sorted(set(report.rows["seed"])) == [0, 1, 2, 3, 4]
    overall = report.rows.groupby("variant")["mean_drop"].mean()
    assert overall["full"] >= overall["no-lo"], overall.to_string()
    assert overall["full"] >= overall["no-ld"], overall.to_string()

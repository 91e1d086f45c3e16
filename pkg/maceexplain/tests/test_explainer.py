import json
import os

import matplotlib
import numpy as np
import pytest

from maceexplain.src.errors import InputShapeError
from maceexplain.src.explainer import (
    BinaryMask,
    compute_activations,
    explain,
    explain_top_classes,
    heatmaps_from_maps,
    render_overlay,
    threshold_mask,
    union_mask,
    union_masks_from_heatmaps,
    upscale_and_normalize,
    write_bundle,
    write_concept_grid,
)
from maceexplain.src.synthetic import stack_pixels


def _mask(*cells, shape=(2, 2)):
    """Binary mask with the given cells set."""
    values = np.zeros(shape, dtype=bool)
    for cell in cells:
        values[cell] = True
    return BinaryMask(values=values)


def test_constant_map_gives_zero_heatmap():
    """A constant map has no range and normalizes to zeros."""
    heatmap = upscale_and_normalize(np.full((2, 2), 3.0), 8, 8)
    assert heatmap.shape == (8, 8)
    assert np.all(heatmap == 0)


def test_single_hot_cell_reaches_one():
    """A single hot cell gives maximum 1 over its upscaled region."""
    concept_map = np.zeros((2, 2))
    concept_map[0, 1] = 5.0
    heatmap = upscale_and_normalize(concept_map, 4, 4, mode="nearest")
    assert heatmap.max() == 1.0 and heatmap.min() == 0.0
    assert np.all(heatmap[:2, 2:] == 1.0)
    assert np.all(heatmap[2:, :] == 0.0)


def test_bilinear_upscale_matches_hand_oracle():
    """
    A 2 x 2 map upscaled to 4 x 4 with half-pixel centers equals
    A M A^T with rows of A at 0, 0.25, 0.75 and 1 between the cells.
    """
    concept_map = np.array([[0.0, 1.0], [2.0, 4.0]])
    a = np.array([[1.0, 0.0], [0.75, 0.25], [0.25, 0.75], [0.0, 1.0]])
    expected = a @ concept_map @ a.T
    expected = (expected - expected.min()) / (expected.max() -
                                              expected.min())
    heatmap = upscale_and_normalize(concept_map, 4, 4, mode="bilinear")
    assert np.allclose(heatmap, expected, atol=1e-6)


def test_heatmaps_normalize_each_map():
    """Every map in a batch is normalized on its own."""
    maps = np.stack([np.array([[0.0, 1.0], [0.0, 0.0]]),
                     np.array([[0.0, 10.0], [0.0, 0.0]])])
    heatmaps = heatmaps_from_maps(maps, 4, 4)
    assert np.allclose(heatmaps[0], heatmaps[1])
    assert heatmaps.max() == pytest.approx(1.0)


def test_upscale_rejects_smaller_target_and_bad_mode():
    """Downscaling and unknown modes are rejected."""
    with pytest.raises(InputShapeError):
        upscale_and_normalize(np.zeros((4, 4)), 2, 2)
    with pytest.raises(ValueError):
        upscale_and_normalize(np.zeros((2, 2)), 4, 4, mode="bicubic")
    with pytest.raises(InputShapeError):
        upscale_and_normalize(np.zeros(4), 4, 4)


def test_threshold_mask():
    """
    Values at or above the threshold are set, an all-zero heatmap gives an
    empty mask, and a higher threshold gives a subset.
    """
    mask = threshold_mask(np.array([[0.4, 0.6]]), 0.5)
    assert mask.values.tolist() == [[False, True]]
    assert threshold_mask(np.zeros((3, 3)), 0.01).is_empty()
    heatmap = np.random.default_rng(0).random((6, 6))
    high = threshold_mask(heatmap, 0.7).values
    low = threshold_mask(heatmap, 0.3).values
    assert np.all(low[high])


def test_threshold_outside_unit_interval():
    """Thresholds must lie strictly between 0 and 1."""
    for threshold in (0.0, 1.0, -0.5):
        with pytest.raises(ValueError):
            threshold_mask(np.zeros((2, 2)), threshold)


def test_union_mask():
    """Union is element-wise OR, idempotent and monotone."""
    a = _mask((0, 0))
    b = _mask((1, 1))
    union = union_mask([a, b])
    assert union.values.tolist() == [[True, False], [False, True]]
    assert np.array_equal(union_mask([a, a]).values, a.values)
    assert np.all(union.values[a.values])
    assert union.coverage == 0.5


def test_union_mask_edge_cases():
    """An empty list needs a shape; masks must agree in shape."""
    assert union_mask([], shape=(3, 2)).is_empty()
    with pytest.raises(ValueError):
        union_mask([])
    with pytest.raises(InputShapeError):
        union_mask([_mask((0, 0)), _mask((0, 0), shape=(3, 3))])


def test_union_masks_from_heatmaps():
    """The vectorized union matches the mask-by-mask union."""
    heatmaps = np.random.default_rng(1).random((3, 4, 4))
    expected = union_mask([threshold_mask(h, 0.6) for h in heatmaps])
    assert np.array_equal(union_masks_from_heatmaps(heatmaps, 0.6),
                          expected.values)
    assert not union_masks_from_heatmaps(np.zeros((0, 4, 4)), 0.6).any()


def test_explain_bundle(tiny_model, tiny_blackbox, tiny_images):
    """
    A bundle holds every concept of the class, sorted by relevance, with
    maps, heatmaps and masks at the right resolutions.
    """
    bundle = explain(tiny_model, tiny_blackbox, tiny_images[2], 1)
    assert bundle.class_name == "zebra-analog"
    assert len(bundle.concepts) == 3
    relevances = [c.relevance for c in bundle.concepts]
    assert relevances == sorted(relevances, reverse=True)
    first = bundle.concepts[0]
    assert first.concept_map.shape == (2, 2)
    assert first.heatmap.shape == (16, 16)
    assert first.mask.shape == (16, 16)
    assert all(c.relevance > 0 for c in bundle.positive)
    union = union_mask([c.mask for c in bundle.concepts])
    assert np.array_equal(bundle.union.values, union.values)
    assert 0.0 <= bundle.class_probability <= 1.0


def test_explain_accepts_class_names(tiny_model, tiny_blackbox, tiny_images):
    """Classes can be named; unknown classes raise ValueError."""
    by_name = explain(tiny_model, tiny_blackbox, tiny_images[0],
                      "fox-analog")
    assert by_name.class_index == 0
    with pytest.raises(ValueError):
        explain(tiny_model, tiny_blackbox, tiny_images[0], "unicorn")


def test_threshold_changes_masks_only(tiny_model, tiny_blackbox,
                                      tiny_images):
    """Two thresholds share maps and relevances and differ in masks."""
    low = explain(tiny_model, tiny_blackbox, tiny_images[5], 0, 0.3)
    high = explain(tiny_model, tiny_blackbox, tiny_images[5], 0, 0.7)
    for a, b in zip(low.concepts, high.concepts):
        assert a.concept == b.concept
        assert a.relevance == b.relevance
        assert np.array_equal(a.heatmap, b.heatmap)
        assert np.all(a.mask.values[b.mask.values])


def test_explain_uses_original_ids_after_pruning(tiny_model, tiny_blackbox,
                                                 tiny_images):
    """Pruned models keep their original concept ids in bundles."""
    tiny_model.prune([[0, 2], [1]])
    bundle = explain(tiny_model, tiny_blackbox, tiny_images[0], 0)
    assert sorted(c.concept for c in bundle.concepts) == [0, 2]


def test_explain_top_classes(tiny_model, tiny_blackbox, tiny_images):
    """Top classes come most probable first."""
    bundles = explain_top_classes(tiny_model, tiny_blackbox, tiny_images[0],
                                  top_n=2)
    assert len(bundles) == 2
    assert bundles[0].class_probability >= bundles[1].class_probability
    assert bundles[0].class_index == bundles[0].predicted_class
    with pytest.raises(ValueError):
        explain_top_classes(tiny_model, tiny_blackbox, tiny_images[0], 0)


def test_compute_activations_shapes(tiny_model, tiny_blackbox, tiny_images):
    """Batched activations cover every image and class."""
    activations = compute_activations(tiny_model, tiny_blackbox,
                                      stack_pixels(tiny_images),
                                      batch_size=5)
    assert activations.maps[0].shape == (16, 3, 2, 2)
    assert activations.relevances[1].shape == (16, 3)
    assert activations.z_hat.shape == (16, 8)
    assert activations.predicted.shape == (16,)


def test_render_overlay():
    """
    An all-zero heatmap blends the image with the colormap's lowest color;
    rendering keeps the image size and is deterministic.
    """
    pixels = np.full((4, 5, 3), 0.2)
    overlay = render_overlay(pixels, np.zeros((4, 5)))
    low = np.array(matplotlib.colormaps["viridis"](0.0)[:3])
    assert overlay.shape == (4, 5, 3)
    assert np.allclose(overlay, 0.5 * 0.2 + 0.5 * low)
    heatmap = np.random.default_rng(2).random((4, 5))
    assert np.array_equal(render_overlay(pixels, heatmap),
                          render_overlay(pixels, heatmap))
    with pytest.raises(InputShapeError):
        render_overlay(pixels, np.zeros((5, 4)))


def test_write_bundle(tiny_model, tiny_blackbox, tiny_images, tmp_path):
    """One overlay per concept, a union overlay and JSON metadata."""
    image = tiny_images[4]
    bundle = explain(tiny_model, tiny_blackbox, image, 0)
    paths = write_bundle(bundle, image, str(tmp_path / "bundle"))
    names = sorted(os.path.basename(p) for p in paths)
    assert names == sorted([
        "4_fox-analog_0.png", "4_fox-analog_1.png", "4_fox-analog_2.png",
        "4_fox-analog_union.png", "4_fox-analog.json",
    ])
    with open(str(tmp_path / "bundle" / "4_fox-analog.json")) as f:
        data = json.load(f)
    assert data["class_name"] == "fox-analog"
    assert len(data["concepts"]) == 3


def test_write_concept_grid(tmp_path):
    """Tiles go into a single PNG; an empty grid is rejected."""
    tiles = [(np.full((4, 4, 3), 0.5), np.eye(4)) for _ in range(3)]
    path = write_concept_grid(tiles, str(tmp_path / "grid.png"),
                              titles=["a", "b", "c"], columns=2)
    assert os.path.getsize(path) > 0
    with pytest.raises(ValueError):
        write_concept_grid([], str(tmp_path / "empty.png"))


@pytest.mark.slow
def test_predicted_class_has_positive_concepts(default_run):
    """
    Explaining the predicted class of a held-out image finds at least one
    positive-relevance concept on at least 90% of images.
    """
    model, _ = default_run.pruned(0)
    blackbox = default_run.blackbox
    probs = blackbox.predict_proba(stack_pixels(default_run.held_out))
    threshold = default_run.config.prune.mask_threshold
    nonempty = [
        bool(explain(
            model, blackbox, image, int(predicted), threshold
        ).positive)
        for image, predicted in zip(default_run.held_out, probs.argmax(1))
    ]
    assert np.mean(nonempty) >= 0.9

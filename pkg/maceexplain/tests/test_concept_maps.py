import pytest
import torch
from torch.autograd import gradcheck

from maceexplain.src.blackbox import DTYPE
from maceexplain.src.concept_maps import (
    MapGenerator,
    class_concept_maps,
    count_parameters,
    generate_concept_maps,
    init_filters,
)
from maceexplain.src.errors import InputShapeError


def _constant_channels():
    """2 x 2 x 3 activation whose channels are constant 1, 2 and 3."""
    return torch.tensor([1.0, 2.0, 3.0], dtype=DTYPE).expand(2, 2, 3)


def test_zero_activation_gives_zero_maps():
    """All-zero x yields all-zero maps for any filters."""
    x = torch.zeros(2, 2, 3, dtype=DTYPE)
    weights = torch.randn(4, 3, dtype=DTYPE)
    assert torch.all(class_concept_maps(x, weights) == 0)


def test_negative_channel_sum_is_clipped():
    """Filter (1, -1, 0) sums to -1 everywhere, which ReLU clips to 0."""
    weights = torch.tensor([[1.0, -1.0, 0.0]], dtype=DTYPE)
    maps = class_concept_maps(_constant_channels(), weights)
    assert maps.shape == (1, 2, 2)
    assert torch.all(maps == 0)


def test_single_channel_filter_gives_constant_map():
    """Filter (0, 0, 1) selects the third channel, a constant 3."""
    weights = torch.tensor([[0.0, 0.0, 1.0]], dtype=DTYPE)
    maps = class_concept_maps(_constant_channels(), weights)
    assert torch.allclose(maps, torch.full((1, 2, 2), 3.0, dtype=DTYPE))


def test_all_classes_at_once_match_per_class():
    """The batched form agrees with the per-class form."""
    x = torch.rand(5, 2, 2, 3, dtype=DTYPE)
    weights = torch.randn(2, 4, 3, dtype=DTYPE)
    together = generate_concept_maps(x, weights)
    assert together.shape == (5, 2, 4, 2, 2)
    for k in range(2):
        assert torch.allclose(
            together[:, k], class_concept_maps(x, weights[k])
        )


def test_depth_mismatch_raises():
    """Filters of the wrong depth raise InputShapeError."""
    x = torch.rand(2, 2, 3, dtype=DTYPE)
    with pytest.raises(InputShapeError):
        class_concept_maps(x, torch.randn(4, 5, dtype=DTYPE))
    with pytest.raises(InputShapeError):
        generate_concept_maps(x, torch.randn(4, 3, dtype=DTYPE))


def test_count_parameters():
    """Filter count is K * C * D."""
    assert count_parameters(10, 10, 512) == 51200
    assert count_parameters(1, 1, 1) == 1
    assert count_parameters(4, 10, 16) == 640


def test_init_filters_shape_and_scale():
    """Initial filters are C x D with spread about 1/sqrt(D)."""
    generator = torch.Generator().manual_seed(0)
    filters = init_filters(200, 64, generator)
    assert filters.shape == (200, 64)
    assert filters.dtype == DTYPE
    assert abs(float(filters.std()) - 0.125) < 0.01


def test_map_generator_keeps_selected_rows():
    """Pruning keeps only the listed filter rows of each class."""
    generator = torch.Generator().manual_seed(1)
    maps = MapGenerator([3, 2], tap_depth=4, generator=generator)
    original = maps.weights[0].detach().clone()
    maps.keep([[0, 2], [1]])
    assert maps.weights[0].shape == (2, 4)
    assert maps.weights[1].shape == (1, 4)
    assert torch.equal(maps.weights[0].detach(), original[[0, 2]])
    outputs = maps(torch.rand(2, 2, 4, dtype=DTYPE))
    assert [tuple(o.shape) for o in outputs] == [(2, 2, 2), (1, 2, 2)]


def test_concept_map_gradients():
    """Analytic gradients match central differences."""
    # Keep pre-activations away from the ReLU kink
    x = torch.rand(2, 2, 3, dtype=DTYPE) + 0.5
    weights = torch.rand(2, 3, dtype=DTYPE).requires_grad_(True)
    assert gradcheck(
        lambda w: class_concept_maps(x, w), (weights,),
        eps=1e-5, atol=1e-6, rtol=1e-4,
    )

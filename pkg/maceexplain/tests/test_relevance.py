import math

import pytest
import torch
from torch.autograd import gradcheck

from maceexplain.src.blackbox import DTYPE
from maceexplain.src.errors import InputShapeError
from maceexplain.src.relevance import (
    RelevanceEstimator,
    RelevanceLossMode,
    class_probability_estimate,
    compute_relevance_loss,
    compute_relevances,
)


def _t(*values):
    return torch.tensor(values, dtype=DTYPE)


def test_zero_chunk_gives_zero_relevance():
    """An all-zero weight chunk has zero relevance."""
    embeddings = torch.rand(2, 3, 4, dtype=DTYPE)
    assert torch.all(compute_relevances(embeddings,
                                        torch.zeros(3, 4, dtype=DTYPE)) == 0)


def test_unit_chunk_on_unit_embedding():
    """A chunk equal to the unit embedding gives relevance 1."""
    e = _t([1.0, 0.0, 0.0])
    assert float(compute_relevances(e, e)[0]) == 1.0


def test_negated_chunk_negates_relevance():
    """Relevance is linear in the weight chunk."""
    embeddings = torch.rand(3, 2, 4, dtype=DTYPE)
    weights = torch.randn(2, 4, dtype=DTYPE)
    assert torch.allclose(compute_relevances(embeddings, -weights),
                          -compute_relevances(embeddings, weights))


def test_relevance_shape_mismatch():
    """Chunks that do not match the embeddings raise InputShapeError."""
    with pytest.raises(InputShapeError):
        compute_relevances(torch.rand(2, 3, 4, dtype=DTYPE),
                           torch.rand(3, 5, dtype=DTYPE))


def test_probability_estimate_values():
    """
    Zero relevances give 0.5, a sum of ln 3 gives 0.75 and large sums
    approach 1 monotonically.
    """
    assert float(class_probability_estimate(_t(0.0, 0.0))) == 0.5
    half = math.log(3.0) / 2
    assert float(class_probability_estimate(_t(half, half))) == \
        pytest.approx(0.75, abs=1e-12)
    values = [float(class_probability_estimate(_t(s))) for s in (1, 5, 20)]
    assert values == sorted(values)
    assert values[-1] > 1 - 1e-8


def test_perfect_match_costs_nothing():
    """Target 1 and estimate close to 1 give loss close to 0 in both modes."""
    relevances = torch.full((3, 2), 10.0, dtype=DTYPE)
    targets = torch.ones(3, dtype=DTYPE)
    for mode in RelevanceLossMode:
        loss = compute_relevance_loss(relevances, targets, mode)
        assert float(loss) < 1e-6


def test_zero_target_modes_differ():
    """
    With targets all zero the literal form is 0 for any estimate, while
    the full binary cross-entropy penalizes a positive estimate.
    """
    relevances = torch.full((2, 2), 1.0, dtype=DTYPE)
    targets = torch.zeros(2, dtype=DTYPE)
    literal = compute_relevance_loss(relevances, targets,
                                     RelevanceLossMode.LITERAL)
    full = compute_relevance_loss(relevances, targets,
                                  RelevanceLossMode.FULL_BCE)
    assert float(literal) == 0.0
    # -log(1 - sigma(2)) per image
    expected = 2 * -math.log(1 - 1 / (1 + math.exp(-2.0)))
    assert float(full) == pytest.approx(expected, abs=1e-9)


def test_half_target_half_estimate_is_ln2():
    """f = 0.5 and sigma = 0.5 give ln 2 in full-bce mode."""
    loss = compute_relevance_loss(_t([0.0]), _t(0.5))
    assert float(loss) == pytest.approx(math.log(2.0), abs=1e-12)


def test_loss_matches_hand_oracle():
    """Both modes match an explicit per-image sum."""
    relevances = _t([0.2, -0.1], [1.0, 0.4], [-0.7, 0.1], [0.0, 0.3])
    targets = _t(0.9, 0.1, 0.5, 0.0)
    literal, full = 0.0, 0.0
    for row, f in zip(relevances.tolist(), targets.tolist()):
        sigma = 1 / (1 + math.exp(-sum(row)))
        literal += -f * math.log(sigma)
        full += -f * math.log(sigma) - (1 - f) * math.log(1 - sigma)
    assert float(compute_relevance_loss(
        relevances, targets, RelevanceLossMode.LITERAL
    )) == pytest.approx(literal, abs=1e-9)
    assert float(compute_relevance_loss(
        relevances, targets, RelevanceLossMode.FULL_BCE
    )) == pytest.approx(full, abs=1e-9)


def test_targets_outside_unit_interval_rejected():
    """Targets must be probabilities."""
    with pytest.raises(ValueError):
        compute_relevance_loss(_t([0.0]), _t(1.5))


def test_estimator_keep_rows():
    """Pruning keeps only the listed relevance chunks."""
    estimator = RelevanceEstimator([3, 2], 4,
                                   torch.Generator().manual_seed(0))
    original = estimator.weights[1].detach().clone()
    estimator.keep([[0, 1, 2], [1]])
    assert estimator.weights[0].shape == (3, 4)
    assert torch.equal(estimator.weights[1].detach(), original[[1]])


def test_relevance_loss_gradients():
    """Analytic gradients of both modes match central differences."""
    torch.manual_seed(0)
    targets = torch.rand(4, dtype=DTYPE)
    for mode in RelevanceLossMode:
        relevances = (torch.randn(4, 3, dtype=DTYPE) * 0.5).requires_grad_()
        assert gradcheck(
            lambda r: compute_relevance_loss(r, targets, mode),
            (relevances,), eps=1e-5, atol=1e-6, rtol=1e-4,
        )

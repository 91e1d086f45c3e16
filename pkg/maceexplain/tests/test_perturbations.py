import numpy as np
import pytest

from maceexplain.src.config import EvalConfig
from maceexplain.src.perturbations import (
    PERTURBATION_KINDS,
    Perturbation,
    adjust_brightness,
    adjust_contrast,
    add_gaussian_noise,
    identity_perturbation,
    perturbation_grid,
    rotate_image,
)


def _image():
    return np.random.default_rng(0).uniform(0.2, 0.8, size=(8, 8, 3))


def test_brightness_shifts_and_clips():
    """Brightness adds a constant and stays in [0, 1]."""
    pixels = _image()
    assert np.allclose(adjust_brightness(pixels, 0.1), pixels + 0.1)
    assert adjust_brightness(pixels, 0.9).max() == 1.0
    assert adjust_brightness(pixels, -0.9).min() == 0.0


def test_contrast_scales_around_mean():
    """Contrast keeps the mean and scales deviations from it."""
    pixels = _image()
    out = adjust_contrast(pixels, 1.2)
    assert out.mean() == pytest.approx(pixels.mean(), abs=1e-12)
    assert np.allclose(out - pixels.mean(), 1.2 * (pixels - pixels.mean()))
    assert np.allclose(adjust_contrast(pixels, 0.0), pixels.mean())


def test_noise_is_seeded():
    """Equal generators give equal noise; zero std is the identity."""
    pixels = _image()
    first = add_gaussian_noise(pixels, 0.05, np.random.default_rng(3))
    second = add_gaussian_noise(pixels, 0.05, np.random.default_rng(3))
    assert np.array_equal(first, second)
    assert not np.array_equal(first, pixels)
    assert np.array_equal(
        add_gaussian_noise(pixels, 0.0, np.random.default_rng(3)), pixels
    )


def test_rotation_keeps_shape():
    """Rotation keeps the frame size; zero degrees is the identity."""
    pixels = _image()
    rotated = rotate_image(pixels, 15.0)
    assert rotated.shape == pixels.shape
    assert rotated.min() >= 0.0 and rotated.max() <= 1.0
    assert np.array_equal(rotate_image(pixels, 0.0), pixels)


def test_quarter_turn_moves_corners():
    """A 90 degree rotation moves a marked corner to another corner."""
    pixels = np.zeros((5, 5, 1))
    pixels[0, 0, 0] = 1.0
    rotated = rotate_image(pixels, 90.0)
    assert rotated[0, 0, 0] == pytest.approx(0.0, abs=1e-9)
    corners = [rotated[0, 4, 0], rotated[4, 0, 0], rotated[4, 4, 0]]
    assert max(corners) == pytest.approx(1.0, abs=1e-9)


def test_perturbation_validation():
    """Unknown kinds and negative scales are rejected."""
    with pytest.raises(ValueError):
        Perturbation("blur", 1.0)
    with pytest.raises(ValueError):
        Perturbation("contrast", -1.0)
    with pytest.raises(ValueError):
        Perturbation("gaussian-noise", -0.1)


def test_perturbation_apply():
    """Apply dispatches on the kind; noise needs a generator."""
    pixels = _image()
    shifted = Perturbation("brightness", 0.1).apply(pixels)
    assert np.allclose(shifted, pixels + 0.1)
    with pytest.raises(ValueError):
        Perturbation("gaussian-noise", 0.02).apply(pixels)
    assert Perturbation("rotation", -5.0).label == "rotation(-5)"


def test_identity_perturbation():
    """The identity leaves images unchanged."""
    pixels = _image()
    assert np.array_equal(identity_perturbation().apply(pixels), pixels)


def test_grid_follows_config():
    """The default grid has every kind at every configured intensity."""
    grid = perturbation_grid(EvalConfig())
    assert len(grid) == 4 + 2 + 2 + 4
    assert {p.kind for p in grid} == set(PERTURBATION_KINDS)
    custom = perturbation_grid(EvalConfig(brightness=(0.3,), contrast=(),
                                          noise=(), rotation=()))
    assert custom == [Perturbation("brightness", 0.3)]

"""
Image perturbations for measuring explanation robustness.

All functions take and return images height x width x channels with values
in [0, 1]; results are clipped back into that range.
"""
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np
from scipy import ndimage

from maceexplain.src.config import EvalConfig

PERTURBATION_KINDS = ("brightness", "contrast", "gaussian-noise", "rotation")


def adjust_brightness(pixels: np.ndarray, delta: float) -> np.ndarray:
    """Adds delta to every pixel."""
    return np.clip(pixels + delta, 0.0, 1.0)


def adjust_contrast(pixels: np.ndarray, factor: float) -> np.ndarray:
    """Scales deviations from the image mean by factor."""
    mean = pixels.mean()
    return np.clip(mean + (pixels - mean) * factor, 0.0, 1.0)


def add_gaussian_noise(
    pixels: np.ndarray, std: float, rng: np.random.Generator
) -> np.ndarray:
    if std == 0:
        return pixels.copy()
    return np.clip(pixels + rng.normal(0.0, std, pixels.shape), 0.0, 1.0)


def rotate_image(pixels: np.ndarray, degrees: float) -> np.ndarray:
    """Rotates about the center keeping the shape; corners fill with 0."""
    if degrees == 0:
        return pixels.copy()
    rotated = ndimage.rotate(
        pixels, degrees, axes=(1, 0), reshape=False, order=1,
        mode="constant", cval=0.0,
    )
    return np.clip(rotated, 0.0, 1.0)


@dataclass(frozen=True)
class Perturbation:
    """
    One perturbation kind at one intensity.

    Args:
        kind: brightness, contrast, gaussian-noise or rotation
        intensity: Delta, scale factor, noise std or angle in degrees
    """
    kind: str
    intensity: float

    def __post_init__(self):
        if self.kind not in PERTURBATION_KINDS:
            raise ValueError(f"Unknown perturbation: {self.kind}")
        if self.kind == "contrast" and self.intensity < 0:
            raise ValueError("Contrast factor must not be negative")
        if self.kind == "gaussian-noise" and self.intensity < 0:
            raise ValueError("Noise std must not be negative")

    @property
    def label(self) -> str:
        return f"{self.kind}({self.intensity:g})"

    def apply(
        self, pixels: np.ndarray, rng: Optional[np.random.Generator] = None
    ) -> np.ndarray:
        """
        Perturbs one image.

        Args:
            pixels: Image in [0, 1]
            rng: Noise source, required for gaussian-noise
        """
        if self.kind == "gaussian-noise":
            if rng is None:
                raise ValueError("Gaussian noise needs a random generator")
            return add_gaussian_noise(pixels, self.intensity, rng)
        handlers: Dict[str, Callable[[np.ndarray, float], np.ndarray]] = {
            "brightness": adjust_brightness,
            "contrast": adjust_contrast,
            "rotation": rotate_image,
        }
        return handlers[self.kind](pixels, self.intensity)


def identity_perturbation() -> Perturbation:
    return Perturbation("brightness", 0.0)


def perturbation_grid(config: EvalConfig) -> List[Perturbation]:
    """The configured intensity grid of all four kinds."""
    grid = [Perturbation("brightness", d) for d in config.brightness]
    grid += [Perturbation("contrast", f) for f in config.contrast]
    grid += [Perturbation("gaussian-noise", s) for s in config.noise]
    grid += [Perturbation("rotation", a) for a in config.rotation]
    return grid

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from maceexplain.src.checkpoint import load_archive, save_archive
from maceexplain.src.errors import CheckpointError, InputShapeError

# All tensors in the package are float64 so that finite-difference gradient
# checks and the 1e-6 path-consistency tolerances hold.
DTYPE = torch.float64

BLACKBOX_FORMAT = "mace-toy-blackbox"


@dataclass
class BlackBoxSpec:
    """
    Shape description of a classifier and its tap point.

    Args:
        num_classes: Number of classes K
        tap_height: Height H of the last convolutional activation
        tap_width: Width W of the last convolutional activation
        tap_depth: Channel depth D of the last convolutional activation
        dense_dim: Width L of the first dense layer
        input_height: Image height in pixels
        input_width: Image width in pixels
        input_channels: Image channel count
        class_names: One distinct label per class
    """
    num_classes: int
    tap_height: int
    tap_width: int
    tap_depth: int
    dense_dim: int
    input_height: int
    input_width: int
    input_channels: int
    class_names: List[str] = field(default_factory=list)

    def __post_init__(self):
        """Validates dimensions and class names"""
        if self.num_classes < 2:
            raise ValueError("A black box needs at least two classes")
        dims = (
            self.tap_height, self.tap_width, self.tap_depth, self.dense_dim,
            self.input_height, self.input_width, self.input_channels,
        )
        if any(d < 1 for d in dims):
            raise ValueError("All black box dimensions must be positive")
        if not self.class_names:
            self.class_names = [f"class-{k}" for k in range(self.num_classes)]
        if len(self.class_names) != self.num_classes:
            raise ValueError(
                f"Expected {self.num_classes} class names, "
                f"got {len(self.class_names)}"
            )
        if len(set(self.class_names)) != len(self.class_names):
            raise ValueError("Class names must be distinct")

    @property
    def tap_shape(self) -> Tuple[int, int, int]:
        return (self.tap_height, self.tap_width, self.tap_depth)

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return (self.input_height, self.input_width, self.input_channels)

    def class_index(self, name_or_index: str) -> int:
        """
        Resolves a class given by name or by its index as text.

        Raises:
            ValueError: If the class is unknown
        """
        if name_or_index in self.class_names:
            return self.class_names.index(name_or_index)
        try:
            index = int(name_or_index)
        except ValueError:
            raise ValueError(f"Unknown class: {name_or_index}")
        if not 0 <= index < self.num_classes:
            raise ValueError(f"Unknown class: {name_or_index}")
        return index

    def to_dict(self) -> Dict[str, Any]:
        return {
            "num_classes": self.num_classes,
            "tap_height": self.tap_height,
            "tap_width": self.tap_width,
            "tap_depth": self.tap_depth,
            "dense_dim": self.dense_dim,
            "input_height": self.input_height,
            "input_width": self.input_width,
            "input_channels": self.input_channels,
            "class_names": list(self.class_names),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "BlackBoxSpec":
        return cls(**data)


@dataclass
class TapOutput:
    """
    Activations of one forward pass.

    Args:
        x: Last convolutional activation, shape H x W x D
        z: First dense-layer output (post-activation), length L
        probs: Class probabilities, length K
    """
    x: np.ndarray
    z: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        """Validates that probs is a probability vector"""
        if np.any(self.probs < 0):
            raise ValueError("Probabilities must not be negative")
        if abs(float(self.probs.sum()) - 1.0) > 1e-6:
            raise ValueError("Probabilities must sum to 1")


@dataclass
class LabeledImage:
    """
    An image with its class label.

    Args:
        pixels: Array of shape height x width x channels, values in [0, 1]
        label: Class index
        image_id: Position of the image in its dataset
    """
    pixels: np.ndarray
    label: int
    image_id: int = 0

    def __post_init__(self):
        """Validates pixel range and label"""
        if self.pixels.ndim != 3:
            raise InputShapeError(
                "Image pixels must be height x width x channels"
            )
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("Pixel values must lie in [0, 1]")
        if self.label < 0:
            raise ValueError("Label must not be negative")


class BlackBox(ABC):
    """
    Uniform interface to a frozen pre-trained classifier.

    Implementations expose the activation x of the last convolutional layer,
    the output z of the first dense layer, and the continuation from z to
    class probabilities. Tensor methods work on batches and keep autograd
    intact with respect to their inputs; parameters are never trained here.
    """
    spec: BlackBoxSpec

    @abstractmethod
    def tap_tensors(
        self, pixels: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """
        Runs a batch through the classifier.

        Args:
            pixels: Tensor of shape N x height x width x channels

        Returns:
            Tuple (x of shape N x H x W x D, z of shape N x L,
            probs of shape N x K)
        """

    @abstractmethod
    def dense_from_tap(self, x: torch.Tensor) -> torch.Tensor:
        """Maps tap activations N x H x W x D to dense outputs N x L."""

    @abstractmethod
    def dense_probabilities(self, z: torch.Tensor) -> torch.Tensor:
        """Maps dense outputs ... x L to class probabilities ... x K."""

    def _check_image(self, pixels: np.ndarray) -> None:
        if tuple(pixels.shape[-3:]) != self.spec.input_shape:
            raise InputShapeError(
                f"Image shape {tuple(pixels.shape[-3:])} does not match "
                f"black box input {self.spec.input_shape}"
            )

    def forward_tap(self, image: LabeledImage) -> TapOutput:
        """
        Single forward pass returning x, z and the class probabilities.

        Raises:
            InputShapeError: If the image shape does not match the spec
        """
        self._check_image(image.pixels)
        pixels = torch.as_tensor(image.pixels, dtype=DTYPE).unsqueeze(0)
        with torch.no_grad():
            x, z, probs = self.tap_tensors(pixels)
        return TapOutput(
            x=x[0].numpy(), z=z[0].numpy(), probs=probs[0].numpy()
        )

    def forward_from_dense(self, z_hat: np.ndarray) -> np.ndarray:
        """
        Continues the forward pass from a dense-layer output.

        Raises:
            InputShapeError: If z_hat does not have length L
        """
        z_hat = np.asarray(z_hat, dtype=np.float64)
        if z_hat.shape != (self.spec.dense_dim,):
            raise InputShapeError(
                f"Dense vector must have length {self.spec.dense_dim}, "
                f"got shape {z_hat.shape}"
            )
        with torch.no_grad():
            probs = self.dense_probabilities(torch.as_tensor(z_hat))
        return probs.numpy()

    def predict_proba(
        self, pixels: np.ndarray, batch_size: int = 64
    ) -> np.ndarray:
        """Class probabilities for a batch N x height x width x channels."""
        return self.tap_batch(pixels, batch_size)[2]

    def tap_batch(
        self, pixels: np.ndarray, batch_size: int = 64
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Runs many images in chunks and returns (x, z, probs) as arrays.
        """
        self._check_image(pixels)
        xs, zs, ps = [], [], []
        with torch.no_grad():
            for start in range(0, len(pixels), batch_size):
                chunk = torch.as_tensor(
                    pixels[start:start + batch_size], dtype=DTYPE
                )
                x, z, probs = self.tap_tensors(chunk)
                xs.append(x.numpy())
                zs.append(z.numpy())
                ps.append(probs.numpy())
        return np.concatenate(xs), np.concatenate(zs), np.concatenate(ps)


class ToyClassifier(nn.Module):
    """
    Small convolutional classifier used as the reference black box.

    Three conv blocks with stride-2 downsampling and ReLU, one dense layer
    with ReLU, and a linear softmax head.
    """

    def __init__(
        self,
        num_classes: int,
        input_channels: int = 3,
        widths: Sequence[int] = (8, 16, 16),
        dense_dim: int = 64,
        tap_size: int = 8,
    ):
        super().__init__()
        layers: List[nn.Module] = []
        in_channels = input_channels
        for width in widths:
            layers.append(
                nn.Conv2d(in_channels, width, kernel_size=3, stride=2,
                          padding=1)
            )
            layers.append(nn.ReLU())
            in_channels = width
        self.features = nn.Sequential(*layers)
        self.dense = nn.Linear(in_channels * tap_size * tap_size, dense_dim)
        self.head = nn.Linear(dense_dim, num_classes)

    def dense_output(self, x_nchw: torch.Tensor) -> torch.Tensor:
        return torch.relu(self.dense(torch.flatten(x_nchw, start_dim=1)))

    def forward(self, pixels_nchw: torch.Tensor) -> torch.Tensor:
        return self.head(self.dense_output(self.features(pixels_nchw)))


class ToyBlackBox(BlackBox):
    """
    Adapter around a ToyClassifier.

    Args:
        network: The classifier; its parameters are frozen on construction
        spec: Matching shape description
        accuracy: Held-out accuracy recorded at training time
        seed: Seed the classifier was trained with
    """

    def __init__(
        self,
        network: ToyClassifier,
        spec: BlackBoxSpec,
        accuracy: Optional[float] = None,
        seed: Optional[int] = None,
    ):
        self.network = network.to(DTYPE).eval()
        for parameter in self.network.parameters():
            parameter.requires_grad_(False)
        self.spec = spec
        self.accuracy = accuracy
        self.seed = seed

    @classmethod
    def build(
        cls,
        num_classes: int,
        image_size: int = 64,
        input_channels: int = 3,
        dense_dim: int = 64,
        final_depth: int = 16,
        class_names: Optional[List[str]] = None,
    ) -> "ToyBlackBox":
        """Creates an untrained toy black box with matching spec."""
        if image_size % 8 != 0:
            raise ValueError("Image size must be divisible by 8")
        tap_size = image_size // 8
        network = ToyClassifier(
            num_classes=num_classes,
            input_channels=input_channels,
            widths=(8, final_depth, final_depth),
            dense_dim=dense_dim,
            tap_size=tap_size,
        )
        spec = BlackBoxSpec(
            num_classes=num_classes,
            tap_height=tap_size,
            tap_width=tap_size,
            tap_depth=final_depth,
            dense_dim=dense_dim,
            input_height=image_size,
            input_width=image_size,
            input_channels=input_channels,
            class_names=list(class_names or []),
        )
        return cls(network, spec)

    def tap_tensors(self, pixels):
        x_nchw = self.network.features(pixels.permute(0, 3, 1, 2))
        z = self.network.dense_output(x_nchw)
        probs = torch.softmax(self.network.head(z), dim=-1)
        return x_nchw.permute(0, 2, 3, 1), z, probs

    def dense_from_tap(self, x):
        return self.network.dense_output(x.permute(0, 3, 1, 2))

    def dense_probabilities(self, z):
        return torch.softmax(self.network.head(z), dim=-1)

    def head_weight(self) -> np.ndarray:
        """Weight matrix K x L of the layer following the dense tap."""
        return self.network.head.weight.detach().numpy().copy()

    def save(self, path: str) -> None:
        """Writes weights and manifest to a checkpoint archive."""
        arrays = {
            name: tensor.detach().numpy()
            for name, tensor in self.network.state_dict().items()
        }
        manifest = {
            "format": BLACKBOX_FORMAT,
            "spec": self.spec.to_dict(),
            "seed": self.seed,
            "accuracy": self.accuracy,
            "dense_tap": "post-activation",
        }
        save_archive(path, arrays, manifest)

    @classmethod
    def load(cls, path: str) -> "ToyBlackBox":
        """
        Reads a checkpoint written by save.

        Raises:
            CheckpointError: If the archive is not a toy black box
        """
        arrays, manifest = load_archive(path)
        if manifest.get("format") != BLACKBOX_FORMAT:
            raise CheckpointError(f"{path} is not a toy black box checkpoint")
        spec = BlackBoxSpec.from_dict(manifest["spec"])
        blackbox = cls.build(
            num_classes=spec.num_classes,
            image_size=spec.input_height,
            input_channels=spec.input_channels,
            dense_dim=spec.dense_dim,
            final_depth=spec.tap_depth,
            class_names=spec.class_names,
        )
        state = {name: torch.as_tensor(a) for name, a in arrays.items()}
        blackbox.network.load_state_dict(state)
        blackbox.accuracy = manifest.get("accuracy")
        blackbox.seed = manifest.get("seed")
        return blackbox

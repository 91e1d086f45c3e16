"""
Configuration of every command, stored as one JSON file.

Each section is a dataclass validated on construction. MaceConfig bundles
the sections and round-trips through JSON; the CLI applies flag overrides
on top and writes the effective configuration next to its outputs.
"""
import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, Optional, Tuple

from maceexplain.src.errors import ConfigurationError
from maceexplain.src.reconstruction import KLDirection
from maceexplain.src.relevance import RelevanceLossMode

LOSS_TERMS = ("embedding", "relevance", "reconstruction", "output")

# Learning rate and epochs per dataset and backbone
PRESETS: Dict[str, Dict[str, Any]] = {
    "awa2-vgg16": {"learning_rate": 1e-4, "epochs": 64},
    "places365-vgg16": {"learning_rate": 5e-4, "epochs": 32},
    "awa2-resnet50": {"learning_rate": 1e-3, "epochs": 128},
    "ablation": {"learning_rate": 1e-4, "epochs": 50},
}


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigurationError(message)


@dataclass
class DatasetConfig:
    num_classes: int = 4
    per_class: int = 200
    seed: int = 7
    image_size: int = 64
    held_out_fraction: float = 0.2

    def __post_init__(self):
        _require(self.num_classes >= 2, "num_classes must be at least 2")
        _require(self.per_class >= 1, "per_class must be positive")
        _require(self.image_size % 8 == 0, "image_size must be divisible by 8")
        _require(0 < self.held_out_fraction < 1,
                 "held_out_fraction must lie in (0, 1)")


@dataclass
class ToyConfig:
    epochs: int = 40
    learning_rate: float = 3e-3
    batch_size: int = 32
    seed: int = 0
    dense_dim: int = 64
    final_depth: int = 16
    min_accuracy: Optional[float] = 0.8

    def __post_init__(self):
        _require(self.epochs >= 0, "toy epochs must not be negative")
        _require(self.learning_rate > 0, "toy learning_rate must be positive")
        _require(self.batch_size >= 1, "toy batch_size must be positive")


@dataclass
class TrainConfig:
    """
    Hyperparameters of MACE training.

    Args:
        num_concepts: Concepts per class C
        embed_dim: Embedding width Q
        margin: Triplet margin alpha
        learning_rate: Adam learning rate
        epochs: Passes over the training split
        batch_size: Mini-batch size B
        seed: Seed for initialization, batching and mining
        use_lo: Include the output divergence L^O
        use_ld: Include the reconstruction loss L^D
        relevance_loss_mode: "full-bce" or "literal"
        kl_direction: Argument order of the output divergence
        loss_weights: Weight per loss term family, default all ones
        checkpoint_every: Write a checkpoint every N epochs, 0 disables
    """
    num_concepts: int = 10
    embed_dim: int = 32
    margin: float = 1.0
    learning_rate: float = 1e-3
    epochs: int = 64
    batch_size: int = 40
    seed: int = 0
    use_lo: bool = True
    use_ld: bool = True
    relevance_loss_mode: str = RelevanceLossMode.FULL_BCE.value
    kl_direction: str = KLDirection.RECONSTRUCTED_ORIGINAL.value
    loss_weights: Dict[str, float] = field(
        default_factory=lambda: {term: 1.0 for term in LOSS_TERMS}
    )
    checkpoint_every: int = 0

    def __post_init__(self):
        _require(self.num_concepts >= 1, "num_concepts must be positive")
        _require(self.embed_dim >= 1, "embed_dim must be positive")
        _require(self.batch_size >= 1, "batch_size must be positive")
        _require(self.learning_rate > 0, "learning_rate must be positive")
        _require(self.margin > 0, "margin must be positive")
        _require(self.epochs >= 0, "epochs must not be negative")
        _require(self.checkpoint_every >= 0,
                 "checkpoint_every must not be negative")
        try:
            RelevanceLossMode(self.relevance_loss_mode)
        except ValueError:
            raise ConfigurationError(
                f"Unknown relevance_loss_mode: {self.relevance_loss_mode}"
            )
        try:
            KLDirection(self.kl_direction)
        except ValueError:
            raise ConfigurationError(
                f"Unknown kl_direction: {self.kl_direction}"
            )
        unknown = set(self.loss_weights) - set(LOSS_TERMS)
        _require(not unknown, f"Unknown loss weight terms: {sorted(unknown)}")
        self.loss_weights = {
            term: float(self.loss_weights.get(term, 1.0))
            for term in LOSS_TERMS
        }

    @property
    def loss_mode(self) -> RelevanceLossMode:
        return RelevanceLossMode(self.relevance_loss_mode)

    @property
    def divergence_direction(self) -> KLDirection:
        return KLDirection(self.kl_direction)


@dataclass
class PruneConfig:
    top_t: int = 10
    mismatch_s: int = 5
    positive_fraction_max: float = 0.50
    mask_coverage_max: float = 0.95
    in_class_positive_min: float = 0.05
    mask_threshold: float = 0.5
    fine_tune_epochs: int = 8

    def __post_init__(self):
        _require(self.top_t >= self.mismatch_s >= 0,
                 "top_t must be at least mismatch_s")
        for name in ("positive_fraction_max", "mask_coverage_max",
                     "in_class_positive_min", "mask_threshold"):
            value = getattr(self, name)
            _require(0 < value < 1, f"{name} must lie in (0, 1)")
        _require(self.fine_tune_epochs >= 0,
                 "fine_tune_epochs must not be negative")


@dataclass
class EvalConfig:
    thresholds: Tuple[float, ...] = (0.3, 0.4, 0.5, 0.6, 0.7)
    fill: str = "zero"
    seeds: Tuple[int, ...] = (0, 1, 2)
    ablation_seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    brightness: Tuple[float, ...] = (-0.2, -0.1, 0.1, 0.2)
    contrast: Tuple[float, ...] = (0.8, 1.2)
    noise: Tuple[float, ...] = (0.02, 0.05)
    rotation: Tuple[float, ...] = (-15.0, -5.0, 5.0, 15.0)
    noise_seed: int = 0
    stability_images: int = 10
    stability_concepts: int = 5
    stability_class: Optional[int] = None
    rank_denominator: str = "positive"
    upscale_mode: str = "bilinear"
    max_images: Optional[int] = None

    def __post_init__(self):
        for name in ("thresholds", "seeds", "ablation_seeds", "brightness",
                     "contrast", "noise", "rotation"):
            setattr(self, name, tuple(getattr(self, name)))
        _require(all(0 < t < 1 for t in self.thresholds),
                 "thresholds must lie in (0, 1)")
        _require(self.fill in ("zero", "mean"), "fill must be zero or mean")
        _require(self.rank_denominator in ("positive", "all"),
                 "rank_denominator must be positive or all")
        _require(self.upscale_mode in ("bilinear", "nearest"),
                 "upscale_mode must be bilinear or nearest")
        _require(self.stability_images >= 2,
                 "stability_images must be at least 2")
        _require(self.stability_concepts >= 2,
                 "stability_concepts must be at least 2")


_SECTIONS = {
    "dataset": DatasetConfig,
    "toy": ToyConfig,
    "train": TrainConfig,
    "prune": PruneConfig,
    "eval": EvalConfig,
}


@dataclass
class MaceConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    toy: ToyConfig = field(default_factory=ToyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MaceConfig":
        """
        Builds a configuration from nested dictionaries.

        Raises:
            ConfigurationError: On unknown sections or keys
        """
        unknown = set(data) - set(_SECTIONS)
        _require(not unknown, f"Unknown config sections: {sorted(unknown)}")
        sections = {}
        for name, section_cls in _SECTIONS.items():
            values = data.get(name, {})
            allowed = {f.name for f in fields(section_cls)}
            extra = set(values) - allowed
            _require(not extra,
                     f"Unknown keys in section {name}: {sorted(extra)}")
            sections[name] = section_cls(**values)
        return cls(**sections)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json_file(cls, path: str) -> "MaceConfig":
        try:
            with open(path, "r") as f:
                data = json.load(f)
        except FileNotFoundError:
            raise ConfigurationError(f"Config file not found: {path}")
        except json.JSONDecodeError:
            raise ConfigurationError(f"Invalid JSON format in config: {path}")
        return cls.from_dict(data)

    def to_json_file(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    def with_overrides(self, section: str, **values: Any) -> "MaceConfig":
        """
        Returns a copy with fields of one section replaced.

        None values are ignored so unset CLI flags keep the file's values.
        """
        current = getattr(self, section)
        changes = {k: v for k, v in values.items() if v is not None}
        if not changes:
            return self
        return replace(self, **{section: replace(current, **changes)})

    def with_preset(self, preset: str) -> "MaceConfig":
        if preset not in PRESETS:
            raise ConfigurationError(
                f"Unknown preset {preset}; choose from {sorted(PRESETS)}"
            )
        return self.with_overrides("train", **PRESETS[preset])

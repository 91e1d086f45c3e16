import json

import pytest

from maceexplain.src.config import (
    PRESETS,
    DatasetConfig,
    EvalConfig,
    MaceConfig,
    PruneConfig,
    TrainConfig,
)
from maceexplain.src.errors import ConfigurationError


def test_default_hyperparameters():
    """
    Architecture and pruning defaults, with the training length and data
    size the end-to-end tests rely on.
    """
    config = MaceConfig()
    assert config.train.num_concepts == 10
    assert config.train.embed_dim == 32
    assert config.train.margin == 1.0
    assert config.train.batch_size == 40
    assert config.train.learning_rate == 1e-3
    assert config.train.epochs == 64
    assert config.dataset.per_class == 200
    assert config.toy.epochs == 40
    assert config.prune.top_t == 10 and config.prune.mismatch_s == 5
    assert config.eval.thresholds == (0.3, 0.4, 0.5, 0.6, 0.7)
    assert config.train.loss_weights == {
        "embedding": 1.0, "relevance": 1.0,
        "reconstruction": 1.0, "output": 1.0,
    }


def test_json_round_trip(tmp_path):
    """Tuples come back as tuples after passing through JSON lists."""
    path = str(tmp_path / "config.json")
    config = MaceConfig().with_overrides("train", epochs=3, use_lo=False)
    config.to_json_file(path)
    assert MaceConfig.from_json_file(path) == config


def test_partial_file_keeps_defaults(tmp_path):
    """Sections and keys missing from a file keep their defaults."""
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"train": {"epochs": 2}}))
    config = MaceConfig.from_json_file(str(path))
    assert config.train.epochs == 2
    assert config.train.learning_rate == 1e-3
    assert config.dataset == DatasetConfig()


def test_unknown_keys_are_rejected():
    """Misspelled keys and sections are errors, not silently ignored."""
    with pytest.raises(ConfigurationError, match="Unknown keys"):
        MaceConfig.from_dict({"train": {"epoch": 2}})
    with pytest.raises(ConfigurationError, match="Unknown config sections"):
        MaceConfig.from_dict({"training": {}})


def test_missing_and_invalid_files(tmp_path):
    """Missing files and broken JSON raise ConfigurationError."""
    with pytest.raises(ConfigurationError, match="not found"):
        MaceConfig.from_json_file(str(tmp_path / "missing.json"))
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ConfigurationError, match="Invalid JSON"):
        MaceConfig.from_json_file(str(broken))


def test_overrides_ignore_unset_values():
    """None overrides leave the value alone; the original is untouched."""
    config = MaceConfig()
    same = config.with_overrides("train", epochs=None, seed=None)
    assert same == config
    changed = config.with_overrides("train", epochs=5, seed=None)
    assert changed.train.epochs == 5
    assert changed.train.seed == config.train.seed
    assert config.train.epochs == 64


def test_presets_set_learning_rate_and_epochs():
    """Each preset sets its learning rate and epoch count."""
    for name, values in PRESETS.items():
        config = MaceConfig().with_preset(name)
        assert config.train.learning_rate == values["learning_rate"]
        assert config.train.epochs == values["epochs"]
    with pytest.raises(ConfigurationError, match="Unknown preset"):
        MaceConfig().with_preset("imagenet")


@pytest.mark.parametrize("section_cls, values", [
    (DatasetConfig, {"num_classes": 1}),
    (DatasetConfig, {"image_size": 20}),
    (TrainConfig, {"num_concepts": 0}),
    (TrainConfig, {"margin": 0.0}),
    (TrainConfig, {"relevance_loss_mode": "mse"}),
    (TrainConfig, {"kl_direction": "both"}),
    (TrainConfig, {"loss_weights": {"sparsity": 1.0}}),
    (PruneConfig, {"top_t": 3, "mismatch_s": 5}),
    (PruneConfig, {"mask_threshold": 1.0}),
    (EvalConfig, {"thresholds": (0.0, 0.5)}),
    (EvalConfig, {"fill": "noise"}),
    (EvalConfig, {"stability_images": 1}),
])
def test_invalid_values_raise(section_cls, values):
    """Out-of-range values fail on construction."""
    with pytest.raises(ConfigurationError):
        section_cls(**values)


def test_partial_loss_weights_are_completed():
    """Unspecified loss weights default to one."""
    config = TrainConfig(loss_weights={"output": 0.5})
    assert config.loss_weights["output"] == 0.5
    assert config.loss_weights["embedding"] == 1.0


def test_configuration_error_is_a_value_error():
    """The CLI reports configuration problems like any invalid value."""
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)

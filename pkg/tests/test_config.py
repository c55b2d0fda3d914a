"""
Tests for the configuration module.
"""

from pathlib import Path

import pytest
import yaml

from src.config import (
    ExperimentConfig,
    ModelConfig,
    config_from_dict,
    load_config,
    save_config,
    config_hash,
)
from src.errors import ConfigError

TOY_CONFIG = Path(__file__).parent.parent / "configs" / "toy.yaml"


class TestLoadConfig:
    """Config loading tests."""

    def test_defaults(self):
        """No path gives the documented defaults."""
        cfg = load_config(None)
        assert cfg.dsp.n_mels == 80
        assert cfg.dsp.hop_length == 256
        assert cfg.train.base_lr == 1e-3
        assert cfg.train.paralinguistic_lr == 1e-4
        assert cfg.model.prenet_dropout == 0.5
        assert cfg.ser.sweep_ns == [0, 2, 4, 8]

    def test_roundtrip(self, tmp_path):
        cfg = ExperimentConfig()
        cfg.quantizer.k = 50
        cfg.paths.manifest = "data/m.jsonl"
        path = tmp_path / "cfg.yaml"
        save_config(cfg, path)
        assert load_config(path) == cfg

    def test_toy_config(self):
        cfg = load_config(TOY_CONFIG)
        assert cfg.augment.balance is True
        assert cfg.model.style_channels % cfg.model.style_scale == 0

    def test_partial_file(self, tmp_path):
        """Missing keys take defaults; ints are accepted for floats."""
        path = tmp_path / "cfg.yaml"
        path.write_text(yaml.safe_dump({"train": {"base_lr": 1}}))
        cfg = load_config(path)
        assert cfg.train.base_lr == 1.0
        assert cfg.train.batch_size == 16

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "none.yaml")

    def test_invalid_yaml(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("train: [unclosed\n")
        with pytest.raises(ConfigError):
            load_config(path)


class TestValidation:
    """Field validation tests."""

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as exc:
            config_from_dict({"model": {"postnet_dim": 512}})
        assert exc.value.field == "model.postnet_dim"

    def test_wrong_type(self):
        with pytest.raises(ConfigError) as exc:
            config_from_dict({"train": {"batch_size": "16"}})
        assert exc.value.field == "train.batch_size"

    def test_bool_is_not_int(self):
        with pytest.raises(ConfigError):
            config_from_dict({"quantizer": {"k": True}})

    def test_section_not_mapping(self):
        with pytest.raises(ConfigError):
            config_from_dict({"dsp": [1, 2]})

    @pytest.mark.parametrize("data, field", [
        ({"quantizer": {"k": 1}}, "quantizer.k"),
        ({"model": {"style_channels": 100, "style_scale": 8}}, "model.style_channels"),
        ({"model": {"prenet_dropout": 1.0}}, "model.prenet_dropout"),
        ({"dsp": {"win_length": 2048}}, "dsp.win_length"),
        ({"dsp": {"fmax": 9000.0}}, "dsp.fmax"),
        ({"augment": {"n": -1}}, "augment.n"),
        ({"augment": {"pitch_semitones": [0.5]}}, "augment.pitch_semitones"),
        ({"ser": {"feature_source": "file"}}, "ser.feature_dir"),
        ({"train": {"val_fallback_fraction": 1.0}}, "train.val_fallback_fraction"),
    ])
    def test_out_of_range(self, data, field):
        with pytest.raises(ConfigError) as exc:
            config_from_dict(data)
        assert exc.value.field == field


class TestConfigHash:
    """Config hash tests."""

    def test_stable(self):
        assert config_hash(ExperimentConfig()) == config_hash(ExperimentConfig())
        assert len(config_hash(ExperimentConfig())) == 12

    def test_changes_with_content(self):
        assert config_hash(ExperimentConfig()) != config_hash(ExperimentConfig(model=ModelConfig(style_dim=64)))

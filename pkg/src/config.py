"""
Configuration module for the EmoAug toolkit.
Handles environment variables, constants and the experiment config file.
"""

import os
import json
import hashlib
import logging
import dataclasses
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Any, Optional, Union

import yaml
from dotenv import load_dotenv

from .errors import ConfigError

# =============================================================================
# LOGGING
# =============================================================================

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

# =============================================================================
# ENVIRONMENT
# =============================================================================

ENV_FILE = Path(__file__).parent.parent / ".env"
load_dotenv(ENV_FILE)

LOG_LEVEL = os.getenv("EMOAUG_LOG_LEVEL", "INFO")

# Torch device for training and decoding
DEVICE = os.getenv("EMOAUG_DEVICE", "cpu")

# Max concurrent workers for rendering and feature extraction
MAX_WORKERS = int(os.getenv("EMOAUG_WORKERS", "4"))

# Optional external neural vocoder, e.g. "my_vocoder --mel {mel} --out {wav}"
VOCODER_CMD = os.getenv("EMOAUG_VOCODER_CMD")

# Request timeout for the external vocoder in seconds
VOCODER_TIMEOUT = 300

# =============================================================================
# CACHE SETTINGS
# =============================================================================

# Feature matrices never change for a given file + analysis setting
CACHE_TTL_FEATURES = int(os.getenv("EMOAUG_FEATURE_CACHE_TTL", "3600"))

# =============================================================================
# CORPUS CONSTANTS
# =============================================================================

SAMPLE_RATE = 16000
EMOTIONS = ("angry", "happy", "neutral", "sad")

# Binary artifact header versions
CHECKPOINT_FORMAT_VERSION = 1
CODEBOOK_FORMAT_VERSION = 1
MANIFEST_FORMAT_VERSION = 1


# =============================================================================
# EXPERIMENT CONFIG
# =============================================================================

@dataclass
class DSPConfig:
    """Mel analysis and vocoder parameters (Tacotron2-family convention)."""
    sample_rate: int = SAMPLE_RATE
    n_fft: int = 1024
    win_length: int = 1024
    hop_length: int = 256
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    amplitude_floor: float = 1e-5
    griffin_lim_iters: int = 60
    resample: bool = True
    downmix: bool = True
    roundtrip_tolerance: float = 1.0

    def validate(self, prefix: str = "dsp") -> None:
        _positive(self, prefix, "sample_rate", "n_fft", "win_length", "hop_length",
                  "n_mels", "amplitude_floor", "griffin_lim_iters", "roundtrip_tolerance")
        if self.win_length > self.n_fft:
            raise ConfigError("must not exceed n_fft", f"{prefix}.win_length")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ConfigError("need 0 <= fmin < fmax <= sample_rate/2", f"{prefix}.fmax")


@dataclass
class QuantizerConfig:
    """K-means unit quantizer settings."""
    k: int = 200
    seed: int = 0
    max_iters: int = 100
    tol: float = 1e-4
    max_frames: int = 1_000_000
    feature_source: str = "mel"          # "mel" or "file"
    feature_dir: Optional[str] = None    # per-utterance <utt_id>.npy for "file"
    feature_dim: Optional[int] = None
    frame_rate: Optional[float] = None
    frame_norm: bool = False
    layer: Optional[int] = None          # informational: external model layer

    def validate(self, prefix: str = "quantizer") -> None:
        if self.k < 2:
            raise ConfigError("must be >= 2", f"{prefix}.k")
        _positive(self, prefix, "max_iters", "tol", "max_frames")
        if self.feature_source not in ("mel", "file"):
            raise ConfigError("must be 'mel' or 'file'", f"{prefix}.feature_source")
        if self.feature_source == "file" and (not self.feature_dir or not self.feature_dim):
            raise ConfigError("file features need feature_dir and feature_dim", f"{prefix}.feature_dir")


@dataclass
class ModelConfig:
    """Network dimensions for the three EmoAug networks."""
    # semantic encoder
    embedding_dim: int = 512
    encoder_channels: int = 512
    encoder_kernel_size: int = 5
    encoder_n_convs: int = 3
    encoder_lstm_dim: int = 256
    encoder_dropout: float = 0.1
    # paralinguistic encoder
    style_channels: int = 512
    style_scale: int = 8
    style_se_dim: int = 128
    style_kernel_size: int = 3
    style_dilations: list = field(default_factory=lambda: [2, 3, 4])
    style_attention_dim: int = 128
    style_dim: int = 192
    # decoder
    prenet_dim: int = 256
    prenet_dropout: float = 0.5
    attention_rnn_dim: int = 1024
    decoder_rnn_dim: int = 1024
    attention_dim: int = 128
    location_filters: int = 32
    location_kernel_size: int = 31
    attention_dropout: float = 0.1
    decoder_dropout: float = 0.1
    gate_threshold: float = 0.5
    max_decoder_ratio: int = 30

    def validate(self, prefix: str = "model") -> None:
        _positive(self, prefix, "embedding_dim", "encoder_channels", "encoder_kernel_size",
                  "encoder_n_convs", "encoder_lstm_dim", "style_channels", "style_scale",
                  "style_se_dim", "style_kernel_size", "style_attention_dim", "style_dim",
                  "prenet_dim", "attention_rnn_dim", "decoder_rnn_dim", "attention_dim",
                  "location_filters", "location_kernel_size", "max_decoder_ratio")
        if self.style_channels % self.style_scale:
            raise ConfigError("must be divisible by style_scale", f"{prefix}.style_channels")
        if self.encoder_kernel_size % 2 == 0 or self.location_kernel_size % 2 == 0:
            raise ConfigError("kernel sizes must be odd", f"{prefix}.encoder_kernel_size")
        for name in ("encoder_dropout", "prenet_dropout", "attention_dropout", "decoder_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError("must be in [0, 1)", f"{prefix}.{name}")


@dataclass
class TrainConfig:
    """Reconstruction training and fine-tuning schedule."""
    base_lr: float = 1e-3
    paralinguistic_lr: float = 1e-4
    finetune_lr: float = 1e-5
    weight_decay: float = 1e-6
    decay_factor: float = 0.9
    decay_every: int = 5000
    grad_clip: float = 1.0
    adam_betas: list = field(default_factory=lambda: [0.9, 0.999])
    adam_eps: float = 1e-8
    scheduled_sampling_max: float = 0.3
    scheduled_sampling_ramp: int = 50000
    early_stop_patience: int = 10
    batch_size: int = 16
    max_epochs: int = 200
    gate_pos_weight: float = 5.0
    gate_loss_weight: float = 1.0
    val_size: int = 1000
    val_fallback_fraction: float = 0.1
    seed: int = 0

    def validate(self, prefix: str = "train") -> None:
        _positive(self, prefix, "base_lr", "paralinguistic_lr", "finetune_lr", "decay_factor",
                  "decay_every", "grad_clip", "adam_eps", "early_stop_patience",
                  "batch_size", "max_epochs", "val_size")
        if self.weight_decay < 0:
            raise ConfigError("must be >= 0", f"{prefix}.weight_decay")
        if not 0.0 <= self.scheduled_sampling_max <= 1.0:
            raise ConfigError("must be in [0, 1]", f"{prefix}.scheduled_sampling_max")
        if not 0.0 < self.val_fallback_fraction < 1.0:
            raise ConfigError("must be in (0, 1)", f"{prefix}.val_fallback_fraction")


@dataclass
class AugmentConfig:
    """Style-transfer augmentation and baseline augmenter settings."""
    n: int = 8
    balance: bool = False
    seed: int = 0
    drop_truncated: bool = False
    speed_factors: list = field(default_factory=lambda: [0.9, 1.0, 1.1])
    pitch_semitones: list = field(default_factory=lambda: [-2, 2])

    def validate(self, prefix: str = "augment") -> None:
        if self.n < 0:
            raise ConfigError("must be >= 0", f"{prefix}.n")
        if any(f <= 0 for f in self.speed_factors):
            raise ConfigError("speed factors must be > 0", f"{prefix}.speed_factors")
        if any(int(s) != s for s in self.pitch_semitones):
            raise ConfigError("semitone offsets must be integers", f"{prefix}.pitch_semitones")


@dataclass
class SERConfig:
    """Downstream emotion classifier settings."""
    feature_source: str = "mel"          # "mel" (bundled) or "file" (external)
    feature_dir: Optional[str] = None
    feature_dim: Optional[int] = None
    freeze_backbone: bool = False       # frozen, the backbone stays a random projection
    backbone_dim: int = 256
    backbone_lr: float = 1e-5
    head_lr: float = 1e-4
    epochs: int = 300
    batch_size: int = 32
    sweep_ns: list = field(default_factory=lambda: [0, 2, 4, 8])
    seed: int = 0

    def validate(self, prefix: str = "ser") -> None:
        _positive(self, prefix, "backbone_dim", "backbone_lr", "head_lr", "epochs", "batch_size")
        if self.feature_source not in ("mel", "file"):
            raise ConfigError("must be 'mel' or 'file'", f"{prefix}.feature_source")
        if self.feature_source == "file" and (not self.feature_dir or not self.feature_dim):
            raise ConfigError("file features need feature_dir and feature_dim", f"{prefix}.feature_dir")


@dataclass
class PathsConfig:
    """Where inputs live and where runs are written."""
    work_dir: str = "runs"
    manifest: Optional[str] = None
    units: Optional[str] = None
    codebook: Optional[str] = None
    checkpoint: Optional[str] = None

    def validate(self, prefix: str = "paths") -> None:
        if not self.work_dir:
            raise ConfigError("must not be empty", f"{prefix}.work_dir")


@dataclass
class ExperimentConfig:
    """Complete experiment configuration, one YAML file on disk."""
    dsp: DSPConfig = field(default_factory=DSPConfig)
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    ser: SERConfig = field(default_factory=SERConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0

    def validate(self) -> "ExperimentConfig":
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                value.validate(f.name)
        return self


# =============================================================================
# LOADING
# =============================================================================

def _positive(obj: Any, prefix: str, *names: str) -> None:
    """Raise ConfigError for any named field that is not > 0."""
    for name in names:
        if getattr(obj, name) <= 0:
            raise ConfigError("must be > 0", f"{prefix}.{name}")


def _coerce(value: Any, default: Any, path: str) -> Any:
    """Check a raw YAML value against the type of the field default."""
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected bool, got {type(value).__name__}", path)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected int, got {type(value).__name__}", path)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected number, got {type(value).__name__}", path)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"expected string, got {type(value).__name__}", path)
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"expected list, got {type(value).__name__}", path)
        return value
    return value


def from_dict(cls: type, data: Any, path: str) -> Any:
    """Build a config dataclass from a mapping, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"expected mapping, got {type(data).__name__}", path or "<root>")

    defaults = cls()
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        field_path = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError("unknown key", field_path)
        default = getattr(defaults, key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = from_dict(type(default), value, field_path)
        else:
            kwargs[key] = _coerce(value, default, field_path)
    return cls(**kwargs)


def config_from_dict(data: Optional[dict]) -> ExperimentConfig:
    """
    Build and validate an ExperimentConfig from a plain mapping.

    Args:
        data: Nested mapping (e.g. parsed YAML); missing keys take defaults

    Returns:
        Validated ExperimentConfig

    Raises:
        ConfigError: Unknown key, wrong type or out-of-range value
    """
    return from_dict(ExperimentConfig, data, "").validate()


def load_config(path: Optional[Union[str, Path]] = None) -> ExperimentConfig:
    """
    Load the experiment config file. No path means all defaults.

    Args:
        path: YAML file path

    Returns:
        Validated ExperimentConfig
    """
    if path is None:
        return ExperimentConfig().validate()

    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML in {path}: {e}")

    cfg = config_from_dict(data)
    logger.info(f"Loaded config {path} (hash {config_hash(cfg)})")
    return cfg


def save_config(cfg: ExperimentConfig, path: Union[str, Path]) -> None:
    """Write the config back out as YAML."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(asdict(cfg), sort_keys=True))


def config_hash(cfg: ExperimentConfig) -> str:
    """
    Stable short hash of a config, recorded in every artifact.

    Args:
        cfg: Experiment config

    Returns:
        12 hex characters of the SHA-256 of the canonical JSON form
    """
    canonical = json.dumps(asdict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]

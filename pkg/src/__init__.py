"""
EmoAug

Unsupervised speaking-style transfer for speech emotion recognition data
augmentation. Public API exports for the pipeline stages.
"""

from .config import (
    SAMPLE_RATE,
    EMOTIONS,
    MAX_WORKERS,
    DSPConfig,
    QuantizerConfig,
    ModelConfig,
    TrainConfig,
    AugmentConfig,
    SERConfig,
    PathsConfig,
    ExperimentConfig,
    load_config,
    save_config,
    config_from_dict,
    config_hash,
)

from .errors import (
    EmoAugError,
    AudioIOError,
    AudioFormatError,
    LengthError,
    ParameterError,
    ConfigError,
    DataError,
    ContractError,
    ShapeError,
    DivergenceError,
)

from .cache import (
    cache_get,
    cache_set,
    cache_clear,
    cache_stats,
    cache_delete,
)

from .workers import (
    parallel_map,
    run_with_stats,
)

from .audio import (
    Waveform,
    MelSpectrogram,
    load_waveform,
    save_waveform,
    mel_spectrogram,
    mel_from_file,
    invert_mel,
    roundtrip_error,
    GriffinLimVocoder,
    ExternalVocoder,
    build_vocoder,
)

from .quantizer import (
    UnitSequence,
    KMeansCodebook,
    MelFeatureExtractor,
    FileFeatureExtractor,
    fit_codebook,
    quantize,
    deduplicate,
    unit_recovery_accuracy,
    save_codebook,
    load_codebook,
)

from .layers import (
    LayerSpec,
    build_layer,
    forward,
    grad_check,
    save_checkpoint,
    load_checkpoint,
)

from .semantic import (
    SemanticEncoder,
    encode_semantic,
)

from .paralinguistic import (
    ParalinguisticEncoder,
    encode_style,
    load_external_speaker_encoder,
)

from .decoder import (
    AttentionDecoder,
    alignment_monotonicity,
)

from .model import (
    EmoAugModel,
    build_model,
    save_model,
    load_model,
)

from .manifest import (
    UtteranceRecord,
    AugmentedRecord,
    read_corpus,
    read_augmented,
    write_manifest,
)

from .trainer import (
    lr_at,
    reconstruction_loss,
    train_step,
    fit,
    finetune,
)

from .augment import (
    build_plan,
    balance_quotas,
    transfer,
    render,
    evaluate_transfer,
)

from .baselines import (
    BaselineAugSpec,
    copypaste,
    speed_perturb,
    pitch_shift,
    render_baselines,
)

from .ser import (
    compute_metrics,
    make_folds,
    train_classifier,
    evaluate,
    report,
    augmentation_sweep,
)

from .toy import (
    ToyUtteranceSpec,
    synthesize,
    generate_corpus,
)

__all__ = [
    # Config
    "SAMPLE_RATE",
    "EMOTIONS",
    "MAX_WORKERS",
    "DSPConfig",
    "QuantizerConfig",
    "ModelConfig",
    "TrainConfig",
    "AugmentConfig",
    "SERConfig",
    "PathsConfig",
    "ExperimentConfig",
    "load_config",
    "save_config",
    "config_from_dict",
    "config_hash",
    # Errors
    "EmoAugError",
    "AudioIOError",
    "AudioFormatError",
    "LengthError",
    "ParameterError",
    "ConfigError",
    "DataError",
    "ContractError",
    "ShapeError",
    "DivergenceError",
    # Cache
    "cache_get",
    "cache_set",
    "cache_clear",
    "cache_stats",
    "cache_delete",
    # Workers
    "parallel_map",
    "run_with_stats",
    # Audio
    "Waveform",
    "MelSpectrogram",
    "load_waveform",
    "save_waveform",
    "mel_spectrogram",
    "mel_from_file",
    "invert_mel",
    "roundtrip_error",
    "GriffinLimVocoder",
    "ExternalVocoder",
    "build_vocoder",
    # Quantizer
    "UnitSequence",
    "KMeansCodebook",
    "MelFeatureExtractor",
    "FileFeatureExtractor",
    "fit_codebook",
    "quantize",
    "deduplicate",
    "unit_recovery_accuracy",
    "save_codebook",
    "load_codebook",
    # Layers
    "LayerSpec",
    "build_layer",
    "forward",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
    # Encoders and decoder
    "SemanticEncoder",
    "encode_semantic",
    "ParalinguisticEncoder",
    "encode_style",
    "load_external_speaker_encoder",
    "AttentionDecoder",
    "alignment_monotonicity",
    # Model
    "EmoAugModel",
    "build_model",
    "save_model",
    "load_model",
    # Manifests
    "UtteranceRecord",
    "AugmentedRecord",
    "read_corpus",
    "read_augmented",
    "write_manifest",
    # Trainer
    "lr_at",
    "reconstruction_loss",
    "train_step",
    "fit",
    "finetune",
    # Augmentation
    "build_plan",
    "balance_quotas",
    "transfer",
    "render",
    "evaluate_transfer",
    "BaselineAugSpec",
    "copypaste",
    "speed_perturb",
    "pitch_shift",
    "render_baselines",
    # SER
    "compute_metrics",
    "make_folds",
    "train_classifier",
    "evaluate",
    "report",
    "augmentation_sweep",
    # Toy corpus
    "ToyUtteranceSpec",
    "synthesize",
    "generate_corpus",
]

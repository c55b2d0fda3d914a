"""
Pytest fixtures and configuration for tests.
"""

import pytest
import numpy as np

from src.config import DSPConfig, ModelConfig, TrainConfig, SERConfig, SAMPLE_RATE
from src.audio import Waveform, save_waveform
from src.manifest import UtteranceRecord, write_manifest, manifest_header


# =============================================================================
# SIGNAL FIXTURES
# =============================================================================

def make_sine(freq: float = 440.0, seconds: float = 0.5, amplitude: float = 0.5,
              sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Pure tone helper shared by the signal tests."""
    t = np.arange(int(seconds * sample_rate)) / sample_rate
    return Waveform(amplitude * np.sin(2 * np.pi * freq * t), sample_rate)


@pytest.fixture
def sine_440():
    """Half a second of a 440 Hz tone at 16 kHz."""
    return make_sine(440.0, 0.5)


@pytest.fixture
def small_dsp():
    """Small analysis window so short test signals give plenty of frames."""
    return DSPConfig(n_fft=256, win_length=256, hop_length=64, n_mels=20, fmax=8000.0, griffin_lim_iters=8)


@pytest.fixture
def wav_file(tmp_path, sine_440):
    """A 16-bit PCM WAV of the 440 Hz tone."""
    return save_waveform(sine_440, tmp_path / "tone.wav")


# =============================================================================
# MODEL FIXTURES
# =============================================================================

@pytest.fixture
def tiny_model_config():
    """Network small enough for desk-fast tests."""
    return ModelConfig(
        embedding_dim=16,
        encoder_channels=16,
        encoder_kernel_size=3,
        encoder_n_convs=2,
        encoder_lstm_dim=8,
        style_channels=16,
        style_scale=4,
        style_se_dim=8,
        style_kernel_size=3,
        style_dilations=[2, 3],
        style_attention_dim=8,
        style_dim=8,
        prenet_dim=16,
        attention_rnn_dim=32,
        decoder_rnn_dim=32,
        attention_dim=16,
        location_filters=4,
        location_kernel_size=5,
        max_decoder_ratio=4,
    )


@pytest.fixture
def tiny_train_config():
    """Short schedule for trainer tests."""
    return TrainConfig(batch_size=4, max_epochs=3, early_stop_patience=2, val_size=4,
                       scheduled_sampling_ramp=100)


@pytest.fixture
def tiny_ser_config():
    """Few epochs, small backbone."""
    return SERConfig(backbone_dim=8, epochs=3, batch_size=8, head_lr=1e-2, backbone_lr=1e-3)


# =============================================================================
# CORPUS FIXTURES
# =============================================================================

@pytest.fixture
def corpus_records():
    """
    Two speakers x four emotions x three utterances, sessions 1..3 per cell,
    with no audio behind them. Speaker spk01 has a single sad utterance.
    """
    records = []
    for s in range(2):
        for emotion in ("angry", "happy", "neutral", "sad"):
            n = 1 if (s == 1 and emotion == "sad") else 3
            for j in range(n):
                utt_id = f"spk{s:02d}_{emotion}_{j:03d}"
                records.append(UtteranceRecord(utt_id, f"wavs/{utt_id}.wav", f"spk{s:02d}", emotion, j % 5 + 1, 1.0))
    return records


@pytest.fixture
def tone_corpus(tmp_path):
    """
    Tiny corpus on disk: one speaker, four emotions, five sessions.

    Emotion sets the tone frequency so the classes are separable.
    """
    freqs = {"angry": 300.0, "happy": 600.0, "neutral": 900.0, "sad": 1200.0}
    records = []
    for emotion, freq in freqs.items():
        for j in range(5):
            utt_id = f"spk00_{emotion}_{j:03d}"
            wav = make_sine(freq + 10.0 * j, 0.25, 0.3)
            save_waveform(wav, tmp_path / "wavs" / f"{utt_id}.wav")
            records.append(UtteranceRecord(utt_id, f"wavs/{utt_id}.wav", "spk00", emotion, j + 1, wav.duration))
    manifest = write_manifest(tmp_path / "manifest.jsonl", records, manifest_header("corpus", seed=0))
    return manifest, records


# =============================================================================
# CACHE FIXTURES
# =============================================================================

@pytest.fixture(autouse=True)
def clear_caches():
    """Clear all caches before each test."""
    # Import here to avoid circular imports
    from src.cache import cache_clear

    # Clear before test
    cache_clear()

    yield

    # Clear after test
    cache_clear()

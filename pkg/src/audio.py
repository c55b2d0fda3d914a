"""
Audio module for waveform I/O, mel analysis and mel inversion.
Provides the Waveform/MelSpectrogram types and the bundled Griffin-Lim vocoder.
"""

import shlex
import logging
import tempfile
import subprocess
from dataclasses import dataclass, asdict
from functools import lru_cache
from pathlib import Path
from typing import Optional, Union, Protocol

import numpy as np
import librosa
import soundfile as sf

from .config import DSPConfig, SAMPLE_RATE, VOCODER_CMD, VOCODER_TIMEOUT, CACHE_TTL_FEATURES
from .cache import cache_get, cache_set, feature_key
from .errors import AudioIOError, AudioFormatError, LengthError, ParameterError

logger = logging.getLogger(__name__)

# float32 storage of the log floor may round just below it
FLOOR_SLACK = 1e-4


# =============================================================================
# TYPES
# =============================================================================

@dataclass(frozen=True, eq=False)
class Waveform:
    """Mono PCM signal with amplitudes in [-1, 1]."""
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.ndim != 1:
            raise ParameterError(f"waveform must be 1-D, got shape {samples.shape}")
        if samples.size < 1:
            raise LengthError("waveform must contain at least one sample")
        if self.sample_rate <= 0:
            raise ParameterError(f"sample_rate must be > 0, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ParameterError("waveform contains non-finite samples")
        if np.max(np.abs(samples)) > 1.0 + 1e-6:
            raise ParameterError("waveform amplitudes must lie in [-1, 1]")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    @property
    def duration(self) -> float:
        """Length in seconds."""
        return len(self) / self.sample_rate

    @classmethod
    def from_array(cls, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> "Waveform":
        """Build a waveform, clipping amplitudes into [-1, 1]."""
        return cls(np.clip(np.asarray(samples, dtype=np.float32), -1.0, 1.0), sample_rate)


@dataclass(frozen=True, eq=False)
class MelSpectrogram:
    """T x M matrix of natural-log mel magnitudes, floor clamped."""
    frames: np.ndarray
    sample_rate: int = SAMPLE_RATE
    n_fft: int = 1024
    win_length: int = 1024
    hop_length: int = 256
    fmin: float = 0.0
    fmax: float = 8000.0
    amplitude_floor: float = 1e-5

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 2:
            raise ParameterError(f"mel frames must be 2-D (T x M), got shape {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ParameterError("mel spectrogram contains non-finite entries")
        floor = float(np.log(self.amplitude_floor))
        if frames.size and float(frames.min()) < floor - FLOOR_SLACK:
            raise ParameterError(f"mel entry {float(frames.min()):.4f} is below the log floor {floor:.4f}")
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def n_mels(self) -> int:
        return int(self.frames.shape[1])

    @property
    def log_floor(self) -> float:
        return float(np.log(self.amplitude_floor))

    def with_frames(self, frames: np.ndarray) -> "MelSpectrogram":
        """Same analysis parameters, new frame matrix."""
        params = {k: v for k, v in asdict(self).items() if k != "frames"}
        return MelSpectrogram(frames=frames, **params)


def num_frames(n_samples: int, win_length: int, hop_length: int) -> int:
    """Frame count under center-free framing: 1 + floor((n - win) / hop)."""
    if n_samples < win_length:
        return 0
    return 1 + (n_samples - win_length) // hop_length


# =============================================================================
# WAV I/O
# =============================================================================

def load_waveform(path: Union[str, Path], dsp: Optional[DSPConfig] = None) -> Waveform:
    """
    Load a 16-bit PCM WAV file as a mono waveform.

    Args:
        path: WAV file path
        dsp: Analysis config (sample rate, resample and downmix flags)

    Returns:
        Waveform at the configured sample rate, amplitudes in [-1, 1]

    Raises:
        AudioIOError: File missing or unreadable
        AudioFormatError: Not 16-bit PCM WAV, stereo without downmix,
            or wrong rate without resampling
    """
    dsp = dsp or DSPConfig()
    path = Path(path)
    if not path.exists():
        raise AudioIOError(f"audio file not found: {path}")

    try:
        info = sf.info(str(path))
        data, sr = sf.read(str(path), dtype="float32", always_2d=True)
    except RuntimeError as e:
        raise AudioIOError(f"cannot read {path}: {e}")

    if info.format != "WAV" or info.subtype != "PCM_16":
        raise AudioFormatError(f"{path}: expected 16-bit PCM WAV, got {info.format}/{info.subtype}")

    if data.shape[1] > 1:
        if not dsp.downmix:
            raise AudioFormatError(f"{path}: {data.shape[1]} channels and downmix disabled")
        samples = data.mean(axis=1)
    else:
        samples = data[:, 0]

    if sr != dsp.sample_rate:
        if not dsp.resample:
            raise AudioFormatError(f"{path}: sample rate {sr} != {dsp.sample_rate} and resampling disabled")
        logger.debug(f"Resampling {path.name} from {sr} to {dsp.sample_rate} Hz")
        samples = librosa.resample(samples, orig_sr=sr, target_sr=dsp.sample_rate)

    return Waveform.from_array(samples, dsp.sample_rate)


def save_waveform(x: Waveform, path: Union[str, Path]) -> Path:
    """
    Write a waveform as 16-bit PCM WAV.

    Args:
        x: Waveform to write
        path: Destination path (parents are created)

    Returns:
        The written path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(path), x.samples, x.sample_rate, subtype="PCM_16")
    return path


# =============================================================================
# MEL ANALYSIS
# =============================================================================

@lru_cache(maxsize=16)
def mel_basis(sample_rate: int, n_fft: int, n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """Slaney-normalized mel filterbank, shape (n_mels, 1 + n_fft // 2)."""
    return librosa.filters.mel(sr=sample_rate, n_fft=n_fft, n_mels=n_mels, fmin=fmin, fmax=fmax)


@lru_cache(maxsize=16)
def _mel_pinv(sample_rate: int, n_fft: int, n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    return np.linalg.pinv(mel_basis(sample_rate, n_fft, n_mels, fmin, fmax))


def mel_center_frequencies(dsp: DSPConfig) -> np.ndarray:
    """Center frequency in Hz of every mel bin."""
    return librosa.mel_frequencies(n_mels=dsp.n_mels + 2, fmin=dsp.fmin, fmax=dsp.fmax)[1:-1]


def mel_spectrogram(x: Waveform, dsp: Optional[DSPConfig] = None) -> MelSpectrogram:
    """
    Log-mel analysis with center-free framing.

    Args:
        x: Input waveform
        dsp: Analysis parameters

    Returns:
        MelSpectrogram with T = 1 + floor((len(x) - win_length) / hop_length)

    Raises:
        LengthError: Input shorter than one analysis window
    """
    dsp = dsp or DSPConfig()
    if len(x) < dsp.n_fft:
        raise LengthError(f"waveform of {len(x)} samples is shorter than one window ({dsp.n_fft})")

    spec = librosa.stft(
        x.samples.astype(np.float64),
        n_fft=dsp.n_fft,
        hop_length=dsp.hop_length,
        win_length=dsp.win_length,
        window="hann",
        center=False,
    )
    basis = mel_basis(dsp.sample_rate, dsp.n_fft, dsp.n_mels, dsp.fmin, dsp.fmax)
    mel = basis @ np.abs(spec)
    frames = np.log(np.maximum(mel, dsp.amplitude_floor)).T

    return MelSpectrogram(
        frames=frames,
        sample_rate=dsp.sample_rate,
        n_fft=dsp.n_fft,
        win_length=dsp.win_length,
        hop_length=dsp.hop_length,
        fmin=dsp.fmin,
        fmax=dsp.fmax,
        amplitude_floor=dsp.amplitude_floor,
    )


def dsp_tag(dsp: DSPConfig) -> str:
    """Short identifier of an analysis setting, used in cache keys."""
    return (f"mel:{dsp.sample_rate}:{dsp.n_fft}:{dsp.win_length}:{dsp.hop_length}:"
            f"{dsp.n_mels}:{dsp.fmin}:{dsp.fmax}:{dsp.amplitude_floor}")


def mel_from_file(path: Union[str, Path], dsp: Optional[DSPConfig] = None) -> MelSpectrogram:
    """
    Load a WAV file and analyse it, caching the result.

    Args:
        path: WAV file path
        dsp: Analysis parameters

    Returns:
        MelSpectrogram of the file
    """
    dsp = dsp or DSPConfig()
    key = feature_key(path, dsp_tag(dsp))
    cached = cache_get(key)
    if cached is not None:
        return cached

    mel = mel_spectrogram(load_waveform(path, dsp), dsp)
    cache_set(key, mel, CACHE_TTL_FEATURES)
    return mel


# =============================================================================
# MEL INVERSION
# =============================================================================

def invert_mel(m: MelSpectrogram, n_iters: int = 60, seed: int = 0) -> Waveform:
    """
    Griffin-Lim reconstruction of a waveform from a log-mel spectrogram.

    The mel magnitudes are mapped back to a linear spectrogram with the
    filterbank pseudo-inverse; entries at the floor carry no energy.

    Args:
        m: Log-mel spectrogram
        n_iters: Griffin-Lim iterations
        seed: Seed for the random initial phase

    Returns:
        Waveform of n_fft + hop_length * (T - 1) samples

    Raises:
        ParameterError: n_iters < 1
    """
    if n_iters < 1:
        raise ParameterError(f"n_iters must be >= 1, got {n_iters}")

    inverse = _mel_pinv(m.sample_rate, m.n_fft, m.n_mels, m.fmin, m.fmax)
    energies = np.maximum(np.exp(m.frames.astype(np.float64).T) - m.amplitude_floor, 0.0)
    magnitude = np.maximum(inverse @ energies, 0.0)

    samples = librosa.griffinlim(
        magnitude,
        n_iter=n_iters,
        hop_length=m.hop_length,
        win_length=m.win_length,
        window="hann",
        center=False,
        random_state=seed,
    )
    return Waveform.from_array(samples, m.sample_rate)


def roundtrip_error(m: MelSpectrogram, dsp: Optional[DSPConfig] = None, seed: int = 0) -> float:
    """
    Mean absolute log-mel difference between m and the analysis of its Griffin-Lim inversion.

    A warning is logged when the error exceeds dsp.roundtrip_tolerance.

    Args:
        m: Log-mel spectrogram
        dsp: Settings for the iteration count and tolerance; analysis parameters come from m
        seed: Seed for the random initial phase

    Returns:
        Per-entry mean absolute error over all T x M entries
    """
    dsp = dsp or DSPConfig()
    analysis = DSPConfig(sample_rate=m.sample_rate, n_fft=m.n_fft, win_length=m.win_length,
                         hop_length=m.hop_length, n_mels=m.n_mels, fmin=m.fmin, fmax=m.fmax,
                         amplitude_floor=m.amplitude_floor)
    rebuilt = mel_spectrogram(invert_mel(m, dsp.griffin_lim_iters, seed=seed), analysis)
    error = float(np.mean(np.abs(rebuilt.frames - m.frames)))
    if error > dsp.roundtrip_tolerance:
        logger.warning(f"Mel round-trip error {error:.3f} exceeds tolerance {dsp.roundtrip_tolerance}")
    return error


class Vocoder(Protocol):
    """Anything that turns a mel spectrogram into a waveform."""

    def __call__(self, mel: MelSpectrogram, seed: int = 0) -> Waveform: ...


class GriffinLimVocoder:
    """Bundled vocoder: pseudo-inverse mel + Griffin-Lim phase recovery."""

    def __init__(self, n_iters: int = 60):
        if n_iters < 1:
            raise ParameterError(f"n_iters must be >= 1, got {n_iters}")
        self.n_iters = n_iters

    def __call__(self, mel: MelSpectrogram, seed: int = 0) -> Waveform:
        return invert_mel(mel, self.n_iters, seed=seed)


class ExternalVocoder:
    """
    File-exchange hook to an external neural vocoder.

    The command template receives ``{mel}`` (a .npy of shape T x M) and
    ``{wav}`` (where the vocoder must write a 16-bit PCM WAV).
    """

    def __init__(self, command: Optional[str] = None, dsp: Optional[DSPConfig] = None,
                 timeout: int = VOCODER_TIMEOUT):
        command = command or VOCODER_CMD
        if not command or "{mel}" not in command or "{wav}" not in command:
            raise ParameterError("external vocoder command must contain {mel} and {wav}")
        self.command = command
        self.dsp = dsp or DSPConfig()
        self.timeout = timeout

    def __call__(self, mel: MelSpectrogram, seed: int = 0) -> Waveform:
        with tempfile.TemporaryDirectory() as tmp:
            mel_path = Path(tmp) / "mel.npy"
            wav_path = Path(tmp) / "out.wav"
            np.save(mel_path, mel.frames)
            args = shlex.split(self.command.format(mel=mel_path, wav=wav_path))
            try:
                subprocess.run(args, check=True, timeout=self.timeout, capture_output=True)
            except subprocess.TimeoutExpired:
                raise AudioIOError(f"external vocoder timed out after {self.timeout}s")
            except (OSError, subprocess.CalledProcessError) as e:
                raise AudioIOError(f"external vocoder failed: {e}")
            return load_waveform(wav_path, self.dsp)


def build_vocoder(dsp: DSPConfig, external: bool = False) -> Vocoder:
    """Pick the external vocoder when requested and configured, else Griffin-Lim."""
    if external:
        return ExternalVocoder(dsp=dsp)
    return GriffinLimVocoder(dsp.griffin_lim_iters)

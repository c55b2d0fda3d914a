"""
Toy corpus module.
Synthesizes utterances whose content (symbol sequence) and style (rate,
envelope, pitch) are known exactly, and writes them as a standard corpus.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.signal import windows

from .config import EMOTIONS, SAMPLE_RATE
from .audio import Waveform, save_waveform
from .manifest import UtteranceRecord, write_manifest, read_rows, manifest_header
from .workers import parallel_map
from .errors import ParameterError, DataError

logger = logging.getLogger(__name__)

# =============================================================================
# SYMBOLS AND STYLES
# =============================================================================

ALPHABET_SIZE = 12
BASE_DURATION = 0.2

MIN_RATE, MAX_RATE = 0.5, 2.0
MIN_PITCH, MAX_PITCH = 100.0, 250.0

ENVELOPES = ("flat", "rising", "falling", "tremolo")

# Harmonic amplitudes of each symbol's stack, fundamental first
HARMONIC_GAINS = (1.0, 0.5, 0.33)
VOICING_GAIN = 0.1
OUTPUT_GAIN = 0.4

CONTENT_LENGTHS = (3, 6)

# emotion -> (rate range, base pitch range, envelope)
EMOTION_STYLES = {
    "angry": ((1.3, 1.7), (200.0, 250.0), 3),
    "happy": ((1.1, 1.4), (180.0, 230.0), 1),
    "neutral": ((0.9, 1.1), (130.0, 170.0), 0),
    "sad": ((0.6, 0.8), (100.0, 130.0), 2),
}


def symbol_frequency(symbol: int) -> float:
    """Fundamental of a symbol's harmonic stack."""
    return 450.0 + 110.0 * symbol


@dataclass(frozen=True)
class ToyUtteranceSpec:
    """Content symbols plus the style that renders them."""
    content: tuple
    rate: float = 1.0
    envelope: int = 0
    base_pitch: float = 150.0
    speaker: str = "spk00"
    emotion: str = "neutral"

    def __post_init__(self):
        if not self.content:
            raise ParameterError("content must hold at least one symbol")
        if any(not 0 <= int(s) < ALPHABET_SIZE for s in self.content):
            raise ParameterError(f"symbols must lie in [0, {ALPHABET_SIZE})")
        if not MIN_RATE <= self.rate <= MAX_RATE:
            raise ParameterError(f"rate must lie in [{MIN_RATE}, {MAX_RATE}], got {self.rate}")
        if self.envelope not in range(len(ENVELOPES)):
            raise ParameterError(f"envelope must be one of 0..{len(ENVELOPES) - 1}")
        if not MIN_PITCH <= self.base_pitch <= MAX_PITCH:
            raise ParameterError(f"base_pitch must lie in [{MIN_PITCH}, {MAX_PITCH}]")
        if self.emotion not in EMOTIONS:
            raise ParameterError(f"unknown emotion {self.emotion!r}")
        object.__setattr__(self, "content", tuple(int(s) for s in self.content))


# =============================================================================
# SYNTHESIS
# =============================================================================

def segment_samples(rate: float, sample_rate: int = SAMPLE_RATE, base_dur: float = BASE_DURATION) -> int:
    """Samples per symbol: base_dur / rate seconds."""
    return int(round(base_dur * sample_rate / rate))


def envelope(kind: int, n: int, sample_rate: int) -> np.ndarray:
    """Utterance-level amplitude envelope in [0.4, 1]."""
    u = np.linspace(0.0, 1.0, n, endpoint=False)
    if kind == 1:
        return 0.4 + 0.6 * u
    if kind == 2:
        return 1.0 - 0.6 * u
    if kind == 3:
        t = np.arange(n) / sample_rate
        return 0.7 + 0.3 * np.sin(2 * np.pi * 6.0 * t)
    return np.ones(n)


def synthesize(spec: ToyUtteranceSpec, seed: int = 0, sample_rate: int = SAMPLE_RATE,
               base_dur: float = BASE_DURATION) -> tuple[Waveform, dict]:
    """
    Render a toy utterance.

    Each symbol is a harmonic stack (f, 2f, 3f) lasting base_dur / rate
    seconds with short tapered edges; a weak voicing tone at the base
    pitch runs underneath, and the whole utterance is shaped by the envelope.

    Args:
        spec: Content and style
        seed: Seed for the per-segment phases
        sample_rate: Output sample rate
        base_dur: Seconds per symbol at rate 1.0

    Returns:
        (waveform, ground truth dict with symbol boundaries and style)
    """
    rng = np.random.default_rng(seed)
    seg = segment_samples(spec.rate, sample_rate, base_dur)
    n = seg * len(spec.content)
    t_seg = np.arange(seg) / sample_rate
    taper = windows.tukey(seg, alpha=0.1)

    signal = np.zeros(n)
    boundaries = []
    for i, symbol in enumerate(spec.content):
        f0 = symbol_frequency(symbol)
        phases = rng.uniform(0, 2 * np.pi, size=len(HARMONIC_GAINS))
        stack = sum(g * np.sin(2 * np.pi * f0 * (h + 1) * t_seg + p)
                    for h, (g, p) in enumerate(zip(HARMONIC_GAINS, phases)))
        signal[i * seg:(i + 1) * seg] = stack * taper
        boundaries.append([i * seg, (i + 1) * seg])

    t = np.arange(n) / sample_rate
    signal += VOICING_GAIN * np.sin(2 * np.pi * spec.base_pitch * t)
    signal *= OUTPUT_GAIN * envelope(spec.envelope, n, sample_rate)

    truth = {
        "content": list(spec.content),
        "rate": spec.rate,
        "envelope": ENVELOPES[spec.envelope],
        "base_pitch": spec.base_pitch,
        "boundaries": boundaries,
        "sample_rate": sample_rate,
        "n_samples": n,
    }
    return Waveform.from_array(signal, sample_rate), truth


# =============================================================================
# CORPUS
# =============================================================================

def _content(seed: int, index: int) -> tuple:
    """Content shared by every speaker/emotion cell at position index; no adjacent repeats."""
    rng = np.random.default_rng([seed, 0, index])
    length = int(rng.integers(CONTENT_LENGTHS[0], CONTENT_LENGTHS[1] + 1))
    symbols = [int(rng.integers(ALPHABET_SIZE))]
    while len(symbols) < length:
        s = int(rng.integers(ALPHABET_SIZE))
        if s != symbols[-1]:
            symbols.append(s)
    return tuple(symbols)


def style_for(emotion: str, speaker_index: int, rng: np.random.Generator) -> tuple[float, float, int]:
    """Draw (rate, base_pitch, envelope) for an emotion; speakers shift pitch by up to +-10 Hz."""
    (rate_lo, rate_hi), (pitch_lo, pitch_hi), env = EMOTION_STYLES[emotion]
    rate = float(round(rng.uniform(rate_lo, rate_hi), 3))
    offset = (speaker_index % 5 - 2) * 5.0
    pitch = float(np.clip(round(rng.uniform(pitch_lo, pitch_hi) + offset, 1), MIN_PITCH, MAX_PITCH))
    return rate, pitch, env


def toy_utt_id(speaker_index: int, emotion: str, j: int) -> str:
    return f"spk{speaker_index:02d}_{emotion}_{j:03d}"


def generate_corpus(
    out_dir: Union[str, Path],
    n_speakers: int = 4,
    n_per_cell: int = 10,
    seed: int = 0,
    sample_rate: int = SAMPLE_RATE,
    base_dur: float = BASE_DURATION,
    max_workers: Optional[int] = None,
) -> Path:
    """
    Generate a factorial speakers x emotions x contents corpus.

    Writes wavs/<utt_id>.wav, manifest.jsonl and ground_truth.jsonl under
    out_dir. Utterance j of every cell shares content j and lands in
    session j % 5 + 1. Output is identical for a fixed seed.

    Args:
        out_dir: Corpus directory
        n_speakers: Number of speakers (>= 1)
        n_per_cell: Utterances per speaker/emotion cell (>= 1)
        seed: Corpus seed
        sample_rate: Output sample rate
        base_dur: Seconds per symbol at rate 1.0
        max_workers: Synthesis threads

    Returns:
        Path of the corpus manifest
    """
    if n_speakers < 1 or n_per_cell < 1:
        raise ParameterError("n_speakers and n_per_cell must be >= 1")
    out_dir = Path(out_dir)
    (out_dir / "wavs").mkdir(parents=True, exist_ok=True)

    contents = [_content(seed, j) for j in range(n_per_cell)]
    cells = [(s, e, j) for s in range(n_speakers) for e in EMOTIONS for j in range(n_per_cell)]

    def make(item: tuple[int, tuple[int, str, int]]) -> tuple[UtteranceRecord, dict]:
        idx, (s, emotion, j) = item
        rng = np.random.default_rng([seed, idx])
        rate, pitch, env = style_for(emotion, s, rng)
        spec = ToyUtteranceSpec(contents[j], rate, env, pitch, f"spk{s:02d}", emotion)
        wav, truth = synthesize(spec, seed=int(rng.integers(2**31)), sample_rate=sample_rate, base_dur=base_dur)
        utt_id = toy_utt_id(s, emotion, j)
        save_waveform(wav, out_dir / "wavs" / f"{utt_id}.wav")
        record = UtteranceRecord(utt_id, f"wavs/{utt_id}.wav", spec.speaker, emotion,
                                 j % 5 + 1, round(wav.duration, 6))
        return record, {"utt_id": utt_id, **truth}

    results = parallel_map(make, list(enumerate(cells)), max_workers, label="utterance")
    missing = [toy_utt_id(*cells[i]) for i, r in enumerate(results) if r is None]
    if missing:
        raise DataError(f"failed to synthesize {len(missing)} utterances, first {missing[0]}")

    header = manifest_header("corpus", seed=seed, generator="toy", n_speakers=n_speakers,
                             n_per_cell=n_per_cell, sample_rate=sample_rate, base_dur=base_dur)
    manifest = write_manifest(out_dir / "manifest.jsonl", [r for r, _ in results], header)
    write_manifest(out_dir / "ground_truth.jsonl", [t for _, t in results], manifest_header("ground_truth", seed=seed))
    logger.info(f"Toy corpus: {len(results)} utterances ({n_speakers} speakers x {len(EMOTIONS)} emotions "
                f"x {n_per_cell}) in {out_dir}")
    return manifest


def read_ground_truth(path: Union[str, Path]) -> dict[str, dict]:
    """utt_id -> ground-truth dict from a ground_truth.jsonl sidecar."""
    rows, _ = read_rows(path)
    return {row["utt_id"]: row for row in rows}

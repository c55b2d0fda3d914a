"""
Baseline augmenters: same-emotion concatenation (copypaste), speed
perturbation and pitch shifting, rendered into the shared augmented manifest.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import librosa

from .config import DSPConfig
from .audio import Waveform, load_waveform, save_waveform
from .manifest import UtteranceRecord, AugmentedRecord, ManifestWriter, resolve_path
from .workers import run_with_stats
from .errors import ContractError, ParameterError

logger = logging.getLogger(__name__)

METHODS = ("copypaste", "speed", "pitch")
MAX_SEMITONES = 12


@dataclass(frozen=True)
class BaselineAugSpec:
    """Which baseline to run and its parameters."""
    method: str
    speed_factors: tuple = (0.9, 1.0, 1.1)
    semitones: tuple = (-2, 2)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ParameterError(f"unknown baseline method {self.method!r}; expected one of {METHODS}")
        if any(f <= 0 for f in self.speed_factors):
            raise ParameterError("speed factors must be > 0")
        if any(int(s) != s or abs(s) > MAX_SEMITONES for s in self.semitones):
            raise ParameterError(f"semitone offsets must be integers within +-{MAX_SEMITONES}")


# =============================================================================
# SIGNAL OPERATIONS
# =============================================================================

def concat_waveforms(a: Waveform, b: Waveform) -> Waveform:
    """a followed by b with no gap."""
    if a.sample_rate != b.sample_rate:
        raise ContractError(f"sample rates differ: {a.sample_rate} vs {b.sample_rate}")
    return Waveform(np.concatenate([a.samples, b.samples]), a.sample_rate)


def copypaste(a: UtteranceRecord, b: UtteranceRecord, corpus_manifest: Union[str, Path],
              dsp: Optional[DSPConfig] = None) -> Waveform:
    """
    Concatenate two utterances that share an emotion label.

    Raises:
        ContractError: Emotions differ
    """
    if a.emotion != b.emotion:
        raise ContractError(f"copypaste needs matching emotions, got {a.emotion} and {b.emotion}")
    return concat_waveforms(load_waveform(resolve_path(a.path, corpus_manifest), dsp),
                            load_waveform(resolve_path(b.path, corpus_manifest), dsp))


def speed_perturb(x: Waveform, factor: float) -> Waveform:
    """
    Resampling-based speed change: duration scales by 1/factor, pitch moves with it.

    Args:
        x: Input waveform
        factor: Speed factor (> 0); 1.0 returns an identical copy

    Returns:
        Waveform of ceil(len(x) / factor) samples at the same sample rate
    """
    if factor <= 0:
        raise ParameterError(f"speed factor must be > 0, got {factor}")
    if factor == 1.0:
        return Waveform(x.samples.copy(), x.sample_rate)
    y = librosa.resample(x.samples.astype(np.float64), orig_sr=x.sample_rate,
                         target_sr=x.sample_rate / factor, res_type="fft")
    return Waveform.from_array(y, x.sample_rate)


def pitch_shift(x: Waveform, semitones: float) -> Waveform:
    """
    Shift pitch by a number of semitones, keeping the duration.

    Phase-vocoder time stretch followed by resampling.

    Args:
        x: Input waveform
        semitones: Shift in semitones, |semitones| <= 12; 0 returns a copy

    Returns:
        Waveform of the same length
    """
    if abs(semitones) > MAX_SEMITONES:
        raise ParameterError(f"|semitones| must be <= {MAX_SEMITONES}, got {semitones}")
    if semitones == 0:
        return Waveform(x.samples.copy(), x.sample_rate)
    y = librosa.effects.pitch_shift(x.samples.astype(np.float64), sr=x.sample_rate, n_steps=float(semitones))
    return Waveform.from_array(y, x.sample_rate)


# =============================================================================
# RENDERING
# =============================================================================

@dataclass
class _Job:
    source: UtteranceRecord
    partner: Optional[UtteranceRecord]
    out_id: str
    index: int
    parameter: float = field(default=0.0)


def _plan_jobs(records: Sequence[UtteranceRecord], spec: BaselineAugSpec, seed: int) -> list[_Job]:
    rng = np.random.default_rng(seed)
    jobs = []
    if spec.method == "speed":
        # factor 1.0 reproduces the original, which is already in the corpus
        factors = [f for f in spec.speed_factors if f != 1.0]
        for r in records:
            for j, f in enumerate(factors):
                jobs.append(_Job(r, None, f"{r.utt_id}__speed{j:03d}", j, f))
    elif spec.method == "pitch":
        for r in records:
            jobs.append(_Job(r, None, f"{r.utt_id}__pitch000", 0, float(rng.choice(spec.semitones))))
    else:
        # Partners share the emotion and, where possible, the session
        by_cell = defaultdict(list)
        by_emotion = defaultdict(list)
        for r in records:
            by_cell[(r.emotion, r.session)].append(r)
            by_emotion[r.emotion].append(r)
        for r in records:
            pool = [p for p in by_cell[(r.emotion, r.session)] if p.utt_id != r.utt_id]
            if not pool:
                pool = [p for p in by_emotion[r.emotion] if p.utt_id != r.utt_id]
            if not pool:
                logger.warning(f"Skipping {r.utt_id}: no other utterance with emotion {r.emotion}")
                continue
            partner = pool[int(rng.integers(len(pool)))]
            jobs.append(_Job(r, partner, f"{r.utt_id}__copypaste000", 0))
    return jobs


def render_baselines(
    records: Sequence[UtteranceRecord],
    spec: BaselineAugSpec,
    out_dir: Union[str, Path],
    manifest_path: Union[str, Path],
    corpus_manifest: Union[str, Path],
    dsp: Optional[DSPConfig] = None,
    seed: int = 0,
    header: Optional[dict] = None,
    max_workers: Optional[int] = None,
) -> tuple[list[AugmentedRecord], dict]:
    """
    Apply one baseline to the corpus and write WAVs plus a tagged manifest.

    Speed renders one copy per factor other than 1.0, pitch one copy per
    utterance with a randomly chosen offset, copypaste one concatenation
    per utterance with a random same-emotion partner.

    Returns:
        (augmented records, stats)
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = _plan_jobs(records, spec, seed)

    def render_job(job: _Job) -> AugmentedRecord:
        if spec.method == "copypaste":
            wav = copypaste(job.source, job.partner, corpus_manifest, dsp)
        else:
            x = load_waveform(resolve_path(job.source.path, corpus_manifest), dsp)
            wav = speed_perturb(x, job.parameter) if spec.method == "speed" else pitch_shift(x, job.parameter)
        wav_path = save_waveform(wav, out_dir / f"{job.out_id}.wav")
        return AugmentedRecord(
            out_id=job.out_id,
            path=str(wav_path.resolve()),
            speaker=job.source.speaker,
            emotion=job.source.emotion,
            session=job.source.session,
            source_id=job.source.utt_id,
            ref_id=job.partner.utt_id if job.partner else None,
            method=spec.method,
            aug_index=job.index,
            duration=wav.duration,
        )

    results, stats = run_with_stats(render_job, jobs, max_workers, label=spec.method)
    rendered = [r for r in results if r is not None]
    with ManifestWriter(manifest_path, header) as writer:
        for record in rendered:
            writer.append(record)
    logger.info(f"Baseline {spec.method}: wrote {len(rendered)} utterances to {out_dir}")
    return rendered, stats

"""
Style-transfer augmentation module.
Builds same-speaker/same-emotion transfer plans (optionally class
balancing), runs the transfer, renders WAVs and evaluates transfer quality.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .config import EMOTIONS, DSPConfig
from .audio import Waveform, MelSpectrogram, Vocoder, load_waveform, mel_spectrogram, save_waveform
from .quantizer import UnitSequence, FeatureExtractor, KMeansCodebook, quantize, deduplicate, unit_recovery_accuracy
from .manifest import UtteranceRecord, AugmentedRecord, ManifestWriter, class_counts, index_by_id, resolve_path
from .model import EmoAugModel, Generation
from .decoder import alignment_monotonicity
from .workers import run_with_stats
from .errors import ContractError, DataError

logger = logging.getLogger(__name__)


# =============================================================================
# PLAN
# =============================================================================

@dataclass(frozen=True)
class PlanRow:
    """One generation: source content in the style of reference."""
    source_id: str
    ref_id: str
    out_id: str
    aug_index: int
    with_replacement: bool = False
    balancing: bool = False


@dataclass
class AugmentationPlan:
    """Ordered transfer rows plus the settings that produced them."""
    rows: list
    n: int
    balance: bool
    seed: int
    quotas: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def n_with_replacement(self) -> int:
        return sum(1 for r in self.rows if r.with_replacement)


def output_id(source_id: str, index: int) -> str:
    return f"{source_id}__aug{index:03d}"


class _ReferenceSampler:
    """Draws references for one source: a shuffled pass without replacement, then with replacement."""

    def __init__(self, others: list, rng: np.random.Generator):
        self.others = others
        self.rng = rng
        self.queue = list(rng.permutation(len(others)))
        self.drawn = 0

    def next(self) -> tuple[str, bool]:
        self.drawn += 1
        if self.queue:
            return self.others[self.queue.pop(0)], False
        return self.others[int(self.rng.integers(len(self.others)))], True


def balance_quotas(counts: dict[str, int]) -> dict[str, int]:
    """
    Extra generations per class that raise every class to the largest count.

    Args:
        counts: emotion -> utterance count (after any N-times augmentation)

    Returns:
        emotion -> quota (0 for the largest class)
    """
    if not counts:
        return {}
    if any(c < 0 for c in counts.values()):
        raise DataError("class counts must be >= 0")
    target = max(counts.values())
    return {e: target - c for e, c in counts.items()}


def build_plan(records: Sequence[UtteranceRecord], n: int, balance: bool = False, seed: int = 0) -> AugmentationPlan:
    """
    Pair every utterance with references of the same speaker and emotion.

    Each source gets n references from its cell minus itself, drawn without
    replacement until the cell is exhausted and then with replacement
    (flagged). With balancing, per-emotion quotas computed on the totals
    after N-times augmentation are spread round-robin over that emotion's
    eligible sources. Utterances alone in their cell are skipped.

    Args:
        records: Corpus records
        n: References per source (>= 0)
        balance: Equalize class totals
        seed: Sampling seed

    Returns:
        AugmentationPlan, deterministic for fixed inputs and seed

    Raises:
        DataError: Negative n, unknown emotion or duplicate id
    """
    if n < 0:
        raise DataError(f"n must be >= 0, got {n}")
    for r in records:
        if r.emotion not in EMOTIONS:
            raise DataError(f"{r.utt_id}: unknown emotion {r.emotion!r}")
    if len(index_by_id(records)) != len(records):
        raise DataError("duplicate utt_id in corpus")

    cells = defaultdict(list)
    for r in records:
        cells[(r.speaker, r.emotion)].append(r.utt_id)

    rng = np.random.default_rng(seed)
    samplers: dict[str, _ReferenceSampler] = {}
    skipped = []
    for r in records:
        others = [u for u in cells[(r.speaker, r.emotion)] if u != r.utt_id]
        if others:
            samplers[r.utt_id] = _ReferenceSampler(others, rng)
        elif n > 0 or balance:
            skipped.append(r.utt_id)
            logger.warning(f"Skipping {r.utt_id}: only utterance of speaker {r.speaker} with emotion {r.emotion}")

    rows = []
    next_index = defaultdict(int)

    def add_row(source_id: str, balancing: bool) -> None:
        ref_id, replaced = samplers[source_id].next()
        j = next_index[source_id]
        next_index[source_id] += 1
        rows.append(PlanRow(source_id, ref_id, output_id(source_id, j), j, replaced, balancing))

    if n > 0:
        for r in records:
            if r.utt_id in samplers:
                for _ in range(n):
                    add_row(r.utt_id, False)

    quotas = {}
    if balance:
        totals = class_counts(records)
        by_id = index_by_id(records)
        for row in rows:
            totals[by_id[row.source_id].emotion] += 1
        quotas = balance_quotas(totals)
        for emotion in EMOTIONS:
            eligible = [r.utt_id for r in records if r.emotion == emotion and r.utt_id in samplers]
            if quotas[emotion] and not eligible:
                logger.warning(f"Cannot balance {emotion}: no utterance has a same-speaker partner")
                continue
            for i in range(quotas[emotion]):
                add_row(eligible[i % len(eligible)], True)

    plan = AugmentationPlan(rows=rows, n=n, balance=balance, seed=seed, quotas=quotas, skipped=skipped)
    if plan.n_with_replacement:
        logger.warning(f"{plan.n_with_replacement} references drawn with replacement (cells smaller than the demand)")
    logger.info(f"Built augmentation plan: {len(rows)} rows, n={n}, balance={balance}, {len(skipped)} skipped")
    return plan


def validate_plan(plan: AugmentationPlan, records: Sequence[UtteranceRecord]) -> bool:
    """
    Full scan: same speaker, same emotion, source != reference, unique output ids.

    Raises:
        ContractError: On the first violating row
    """
    by_id = index_by_id(records)
    seen = set()
    for row in plan.rows:
        src, ref = by_id.get(row.source_id), by_id.get(row.ref_id)
        if src is None or ref is None:
            raise ContractError(f"{row.out_id}: unknown source or reference")
        if row.source_id == row.ref_id:
            raise ContractError(f"{row.out_id}: reference equals source")
        if (src.speaker, src.emotion) != (ref.speaker, ref.emotion):
            raise ContractError(f"{row.out_id}: reference from another speaker/emotion cell")
        if row.out_id in seen:
            raise ContractError(f"{row.out_id}: duplicate output id")
        seen.add(row.out_id)
    return True


def plan_totals(plan: AugmentationPlan, records: Sequence[UtteranceRecord]) -> dict[str, int]:
    """Per-class totals of corpus plus planned generations."""
    totals = class_counts(records)
    by_id = index_by_id(records)
    for row in plan.rows:
        totals[by_id[row.source_id].emotion] += 1
    return totals


# =============================================================================
# TRANSFER
# =============================================================================

def transfer(x_units: UnitSequence, y_ref: Union[Waveform, MelSpectrogram], model: EmoAugModel,
             dsp: Optional[DSPConfig] = None, seed: int = 0, max_len: Optional[int] = None) -> Generation:
    """
    Generate the source's content in the reference's speaking style.

    Args:
        x_units: Source units (deduplicated here if raw)
        y_ref: Reference waveform (or its mel)
        model: Trained model (put in eval mode)
        dsp: Analysis parameters for the reference mel
        seed: Seed for the decoder's dropout draws
        max_len: Frame cap (default 30 x source length)

    Returns:
        Generation; truncated when the frame cap was hit
    """
    ref_mel = y_ref if isinstance(y_ref, MelSpectrogram) else mel_spectrogram(y_ref, dsp)
    generation = model.infer(deduplicate(x_units), ref_mel, seed=seed, max_len=max_len)
    if generation.truncated:
        logger.warning("Transfer output truncated at the decoder frame cap")
    return generation


def row_seed(seed: int, index: int) -> int:
    """Independent per-row seed so rendering order never changes outputs."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def render(
    plan: AugmentationPlan,
    records: Sequence[UtteranceRecord],
    units: dict[str, UnitSequence],
    model: EmoAugModel,
    vocoder: Vocoder,
    out_dir: Union[str, Path],
    manifest_path: Union[str, Path],
    corpus_manifest: Union[str, Path],
    dsp: Optional[DSPConfig] = None,
    header: Optional[dict] = None,
    drop_truncated: bool = False,
    max_workers: Optional[int] = None,
) -> tuple[list[AugmentedRecord], dict]:
    """
    Transfer, vocode and write every plan row.

    Rows render in parallel; per-row failures are logged and summarized.
    The manifest is written in plan order after collection.

    Args:
        plan: Validated plan
        records: Corpus records
        units: utt_id -> unit sequence
        model: Trained model
        vocoder: Mel-to-waveform backend
        out_dir: WAV output directory
        manifest_path: Output manifest path
        corpus_manifest: Corpus manifest (record paths are relative to it)
        dsp: Analysis parameters
        header: Manifest header (config hash, seed)
        drop_truncated: Leave truncated generations out of the manifest
        max_workers: Worker threads

    Returns:
        (augmented records, stats) with total/successful/failed/truncated
    """
    dsp = dsp or DSPConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_id = index_by_id(records)
    model.eval()

    def render_row(item: tuple[int, PlanRow]) -> AugmentedRecord:
        index, row = item
        source = by_id[row.source_id]
        if row.source_id not in units:
            raise DataError(f"no units for {row.source_id}")
        seed = row_seed(plan.seed, index)
        reference = load_waveform(resolve_path(by_id[row.ref_id].path, corpus_manifest), dsp)
        generation = transfer(units[row.source_id], reference, model, dsp, seed=seed)
        wav = vocoder(generation.mel, seed=seed)
        wav_path = save_waveform(wav, out_dir / f"{row.out_id}.wav")
        return AugmentedRecord(
            out_id=row.out_id,
            path=str(wav_path.resolve()),
            speaker=source.speaker,
            emotion=source.emotion,
            session=source.session,
            source_id=row.source_id,
            ref_id=row.ref_id,
            method="emoaug",
            aug_index=row.aug_index,
            truncated=generation.truncated,
            duration=wav.duration,
            balancing=row.balancing,
        )

    results, stats = run_with_stats(render_row, list(enumerate(plan.rows)), max_workers, label="render")
    rendered = [r for r in results if r is not None]
    stats["truncated"] = sum(1 for r in rendered if r.truncated)
    kept = max_truncation_filter(rendered, drop_truncated)
    stats["written"] = len(kept)

    with ManifestWriter(manifest_path, header) as writer:
        for record in kept:
            writer.append(record)
    logger.info(f"Rendered {stats['successful']}/{stats['total']} rows "
                f"({stats['truncated']} truncated, {stats['failed']} failed) to {out_dir}")
    return kept, stats


def max_truncation_filter(records: Sequence[AugmentedRecord], drop: bool = True) -> list[AugmentedRecord]:
    """Optionally drop generations that hit the decoder frame cap."""
    if not drop:
        return list(records)
    kept = [r for r in records if not r.truncated]
    if len(kept) < len(records):
        logger.warning(f"Dropped {len(records) - len(kept)} truncated generations")
    return kept


# =============================================================================
# TRANSFER EVALUATION
# =============================================================================

def duration_shift_fraction(source_frames: int, reference_frames: int, output_frames: int) -> Optional[float]:
    """
    How far the output length moved from the source toward the reference.

    Returns:
        (output - source) / (reference - source); None when they are equal
    """
    gap = reference_frames - source_frames
    if gap == 0:
        return None
    return (output_frames - source_frames) / gap


def evaluate_transfer(
    model: EmoAugModel,
    pairs: Sequence[tuple[UtteranceRecord, UtteranceRecord]],
    units: dict[str, UnitSequence],
    fe: FeatureExtractor,
    cb: KMeansCodebook,
    vocoder: Vocoder,
    corpus_manifest: Union[str, Path],
    dsp: Optional[DSPConfig] = None,
    seed: int = 0,
) -> dict:
    """
    Self-reconstruction recovery, duration shift and content preservation.

    For every (source, reference) pair the source is transferred twice: once
    with itself as reference and once with the reference. Outputs are
    vocoded, re-quantized and compared with the source's units.

    Returns:
        Dict with self_recovery, content_preservation, duration_shift (means)
        and per-pair rows
    """
    dsp = dsp or DSPConfig()
    model.eval()
    rows = []
    for i, (src, ref) in enumerate(pairs):
        source_units = deduplicate(units[src.utt_id])
        src_wav = load_waveform(resolve_path(src.path, corpus_manifest), dsp)
        ref_wav = load_waveform(resolve_path(ref.path, corpus_manifest), dsp)
        src_mel = mel_spectrogram(src_wav, dsp)
        ref_mel = mel_spectrogram(ref_wav, dsp)

        self_gen = transfer(source_units, src_mel, model, dsp, seed=row_seed(seed, 2 * i))
        ref_gen = transfer(source_units, ref_mel, model, dsp, seed=row_seed(seed, 2 * i + 1))

        def recovered(gen: Generation) -> float:
            wav = vocoder(gen.mel, seed=seed)
            hyp = deduplicate(quantize(wav, fe, cb, key=None))
            return unit_recovery_accuracy(source_units.units, hyp.units)

        rows.append({
            "source_id": src.utt_id,
            "ref_id": ref.utt_id,
            "self_recovery": recovered(self_gen),
            "content_preservation": recovered(ref_gen),
            "duration_shift": duration_shift_fraction(src_mel.n_frames, ref_mel.n_frames, ref_gen.mel.n_frames),
            "monotonicity_violations": alignment_monotonicity(ref_gen.alignment),
            "truncated": ref_gen.truncated,
        })

    def mean(key: str) -> Optional[float]:
        values = [r[key] for r in rows if r[key] is not None]
        return float(np.mean(values)) if values else None

    summary = {
        "pairs": len(rows),
        "self_recovery": mean("self_recovery"),
        "content_preservation": mean("content_preservation"),
        "duration_shift": mean("duration_shift"),
        "monotonicity_violations": mean("monotonicity_violations"),
        "rows": rows,
    }
    logger.info(f"Transfer evaluation on {len(rows)} pairs: self-recovery {summary['self_recovery']}, "
                f"content {summary['content_preservation']}, duration shift {summary['duration_shift']}")
    return summary

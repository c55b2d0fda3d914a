"""
Trainer module for reconstruction training and fine-tuning.
Two-group Adam with a shared step-decay schedule, gradient clipping,
scheduled sampling, masked MSE + stop-gate loss and early stopping.
"""

import copy
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
from torch import nn
from torch.nn import functional as F
from tqdm import tqdm

from .config import TrainConfig, DSPConfig
from .audio import MelSpectrogram, mel_from_file
from .quantizer import UnitSequence, deduplicate
from .manifest import UtteranceRecord, resolve_path
from .model import EmoAugModel, parameter_groups, save_model
from .errors import ContractError, DivergenceError, DataError

logger = logging.getLogger(__name__)

GROUPS = ("main", "paralinguistic")


# =============================================================================
# TYPES
# =============================================================================

@dataclass(eq=False)
class TrainingExample:
    """Deduplicated units and the mel frames they should reconstruct."""
    utt_id: str
    units: tuple
    mel: np.ndarray   # (T, M)

    def __len__(self) -> int:
        return int(self.mel.shape[0])


@dataclass
class Batch:
    """Zero-padded tensors for one training step."""
    utt_ids: list
    units: torch.Tensor         # (B, L)
    unit_lengths: torch.Tensor  # (B,)
    mels: torch.Tensor          # (B, T, M)
    mel_lengths: torch.Tensor   # (B,)
    gate_target: torch.Tensor   # (B, T), 1 from the last valid frame on
    mask: torch.Tensor          # (B, T), 1 on valid frames

    def to(self, device) -> "Batch":
        return Batch(self.utt_ids, self.units.to(device), self.unit_lengths, self.mels.to(device),
                     self.mel_lengths, self.gate_target.to(device), self.mask.to(device))


@dataclass
class LossTerms:
    total: torch.Tensor
    mse: torch.Tensor
    gate: torch.Tensor


@dataclass
class TrainState:
    """Progress of a training run."""
    iteration: int = 0
    epoch: int = 0
    lrs: dict = field(default_factory=dict)
    best_val_loss: float = float("inf")
    best_epoch: int = -1
    patience_counter: int = 0
    sampling_prob: float = 0.0
    stopped_early: bool = False
    history: list = field(default_factory=list)

    def to_meta(self) -> dict:
        meta = asdict(self)
        meta.pop("history")
        return meta


# =============================================================================
# SCHEDULES
# =============================================================================

def lr_at(iteration: int, cfg: TrainConfig, group: str = "main") -> float:
    """
    Closed-form step decay: base * decay_factor ** floor(iteration / decay_every).

    Args:
        iteration: Update count (>= 0)
        cfg: Training config
        group: "main" or "paralinguistic"

    Returns:
        Learning rate for the group
    """
    if iteration < 0:
        raise ContractError(f"iteration must be >= 0, got {iteration}")
    if group not in GROUPS:
        raise ContractError(f"unknown parameter group {group!r}")
    base = cfg.base_lr if group == "main" else cfg.paralinguistic_lr
    return base * cfg.decay_factor ** (iteration // cfg.decay_every)


def sampling_probability(iteration: int, cfg: TrainConfig) -> float:
    """Linear ramp from 0 to scheduled_sampling_max over scheduled_sampling_ramp iterations."""
    if cfg.scheduled_sampling_ramp <= 0:
        return cfg.scheduled_sampling_max
    return cfg.scheduled_sampling_max * min(1.0, iteration / cfg.scheduled_sampling_ramp)


# =============================================================================
# LOSS
# =============================================================================

def _frames(m: Union[MelSpectrogram, torch.Tensor, np.ndarray]) -> torch.Tensor:
    if isinstance(m, MelSpectrogram):
        return torch.from_numpy(m.frames)
    if isinstance(m, np.ndarray):
        return torch.from_numpy(m)
    return m


def reconstruction_loss(
    predicted: Union[MelSpectrogram, torch.Tensor],
    target: Union[MelSpectrogram, torch.Tensor],
    gate_logits: Optional[torch.Tensor] = None,
    gate_target: Optional[torch.Tensor] = None,
    mask: Optional[torch.Tensor] = None,
    gate_pos_weight: float = 5.0,
    gate_weight: float = 1.0,
) -> LossTerms:
    """
    Mean squared mel error over valid frames plus the weighted stop-gate BCE.

    Args:
        predicted: Generated frames (T, M) or (B, T, M)
        target: Ground-truth frames of the same shape
        gate_logits: Stop logits, (T,) or (B, T)
        gate_target: 1.0 at and after the last valid frame
        mask: 1.0 on valid frames; padded frames contribute nothing
        gate_pos_weight: BCE positive-class weight
        gate_weight: Weight of the gate term in the total

    Returns:
        LossTerms(total, mse, gate)

    Raises:
        ContractError: Shapes differ
    """
    predicted, target = _frames(predicted), _frames(target)
    if predicted.shape != target.shape:
        raise ContractError(f"prediction shape {tuple(predicted.shape)} != target shape {tuple(target.shape)}")

    squared = (predicted - target).pow(2)
    if mask is None:
        mse = squared.mean()
    else:
        weights = mask.unsqueeze(-1).to(squared.dtype)
        mse = (squared * weights).sum() / (weights.sum() * squared.shape[-1])

    gate = squared.new_zeros(())
    if gate_logits is not None and gate_target is not None:
        pos_weight = torch.tensor(gate_pos_weight, dtype=gate_logits.dtype, device=gate_logits.device)
        per_frame = F.binary_cross_entropy_with_logits(gate_logits, gate_target, pos_weight=pos_weight,
                                                       reduction="none")
        gate = per_frame.mean() if mask is None else (per_frame * mask).sum() / mask.sum()
    return LossTerms(total=mse + gate_weight * gate, mse=mse, gate=gate)


# =============================================================================
# DATA
# =============================================================================

def load_examples(records: Sequence[UtteranceRecord], units: dict[str, UnitSequence],
                  dsp: DSPConfig, manifest_path: Union[str, Path]) -> list[TrainingExample]:
    """
    Pair every record that has units with its mel frames.

    Records without units are skipped with a warning.
    """
    examples, missing = [], 0
    for record in records:
        u = units.get(record.utt_id)
        if u is None or len(u) == 0:
            missing += 1
            continue
        mel = mel_from_file(resolve_path(record.path, manifest_path), dsp)
        examples.append(TrainingExample(record.utt_id, deduplicate(u).units, mel.frames))
    if missing:
        logger.warning(f"{missing} records have no unit sequence and were skipped")
    return examples


def collate(examples: Sequence[TrainingExample]) -> Batch:
    """Zero-pad a list of examples into a Batch."""
    if not examples:
        raise DataError("cannot collate an empty batch")
    n_mels = examples[0].mel.shape[1]
    max_units = max(len(e.units) for e in examples)
    max_frames = max(len(e) for e in examples)
    b = len(examples)

    units = torch.zeros(b, max_units, dtype=torch.long)
    mels = torch.zeros(b, max_frames, n_mels)
    gate = torch.zeros(b, max_frames)
    mask = torch.zeros(b, max_frames)
    for i, e in enumerate(examples):
        units[i, :len(e.units)] = torch.tensor(e.units, dtype=torch.long)
        mels[i, :len(e)] = torch.from_numpy(np.asarray(e.mel, dtype=np.float32))
        gate[i, len(e) - 1:] = 1.0
        mask[i, :len(e)] = 1.0

    return Batch(
        utt_ids=[e.utt_id for e in examples],
        units=units,
        unit_lengths=torch.tensor([len(e.units) for e in examples], dtype=torch.long),
        mels=mels,
        mel_lengths=torch.tensor([len(e) for e in examples], dtype=torch.long),
        gate_target=gate,
        mask=mask,
    )


def bucket_batches(examples: Sequence[TrainingExample], batch_size: int, seed: int = 0,
                   shuffle: bool = True) -> list[Batch]:
    """
    Length-bucketed batches: sort by frame count, chunk, then shuffle chunk order.

    Args:
        examples: Training examples
        batch_size: Examples per batch
        seed: Shuffle seed (vary per epoch)
        shuffle: Shuffle the batch order

    Returns:
        List of collated batches
    """
    ordered = sorted(examples, key=lambda e: (len(e), e.utt_id))
    chunks = [ordered[i:i + batch_size] for i in range(0, len(ordered), batch_size)]
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(chunks))
        chunks = [chunks[i] for i in order]
    return [collate(c) for c in chunks]


def split_validation(items: Sequence, val_size: int = 1000, fallback_fraction: float = 0.1,
                     seed: int = 0) -> tuple[list, list]:
    """
    Random train/validation partition.

    When the corpus is smaller than val_size, a fraction of it is held
    out instead (at least one item) and a warning is logged. The bound is
    inclusive: a corpus of exactly val_size items also falls back.

    Returns:
        (train, val), disjoint and together covering the input
    """
    items = list(items)
    if len(items) < 2:
        raise DataError(f"need at least 2 items to split, got {len(items)}")
    n_val = val_size
    if len(items) <= val_size:
        n_val = max(1, int(round(len(items) * fallback_fraction)))
        logger.warning(f"Corpus of {len(items)} items is not larger than val_size={val_size}; "
                       f"holding out {n_val} ({fallback_fraction:.0%}) for validation")
    order = np.random.default_rng(seed).permutation(len(items))
    val_idx = set(order[:n_val].tolist())
    train = [item for i, item in enumerate(items) if i not in val_idx]
    val = [item for i, item in enumerate(items) if i in val_idx]
    return train, val


# =============================================================================
# OPTIMIZATION
# =============================================================================

def build_optimizer(model: EmoAugModel, cfg: TrainConfig, flat_lr: Optional[float] = None) -> torch.optim.Adam:
    """
    Adam with exactly two named parameter groups.

    Args:
        model: Model to optimize
        cfg: Training config
        flat_lr: Same rate for both groups (fine-tuning); None uses the schedule

    Returns:
        Optimizer with groups "main" and "paralinguistic"
    """
    groups = parameter_groups(model)
    return torch.optim.Adam(
        [
            {"params": groups["main"], "name": "main",
             "lr": flat_lr if flat_lr is not None else lr_at(0, cfg, "main")},
            {"params": groups["paralinguistic"], "name": "paralinguistic",
             "lr": flat_lr if flat_lr is not None else lr_at(0, cfg, "paralinguistic")},
        ],
        betas=tuple(cfg.adam_betas),
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )


def set_learning_rates(optimizer: torch.optim.Optimizer, state: TrainState, cfg: TrainConfig,
                       flat_lr: Optional[float] = None) -> dict:
    """Apply the schedule (or the flat rate) for the current iteration."""
    for group in optimizer.param_groups:
        group["lr"] = flat_lr if flat_lr is not None else lr_at(state.iteration, cfg, group["name"])
        state.lrs[group["name"]] = group["lr"]
    return state.lrs


def train_step(model: EmoAugModel, optimizer: torch.optim.Optimizer, batch: Batch, state: TrainState,
               cfg: TrainConfig, flat_lr: Optional[float] = None) -> dict:
    """
    One update: forward with scheduled sampling, loss, clip, Adam step.

    Returns:
        Dict with loss terms and the pre-clip gradient norm

    Raises:
        DivergenceError: Non-finite loss (parameters are left untouched)
    """
    model.train()
    set_learning_rates(optimizer, state, cfg, flat_lr)
    state.sampling_prob = sampling_probability(state.iteration, cfg)

    device = next(model.parameters()).device
    batch = batch.to(device)
    out = model(batch.units, batch.unit_lengths, batch.mels, batch.mel_lengths,
                sampling_prob=state.sampling_prob)
    loss = reconstruction_loss(out.mels, batch.mels, out.gate_logits, batch.gate_target, batch.mask,
                               cfg.gate_pos_weight, cfg.gate_loss_weight)
    if not torch.isfinite(loss.total):
        raise DivergenceError(f"non-finite loss at iteration {state.iteration}")

    optimizer.zero_grad()
    loss.total.backward()
    grad_norm = float(nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip))
    optimizer.step()
    state.iteration += 1
    return {"loss": float(loss.total), "mse": float(loss.mse), "gate": float(loss.gate), "grad_norm": grad_norm}


def evaluate_loss(model: EmoAugModel, batches: Sequence[Batch], cfg: TrainConfig) -> float:
    """Mean teacher-forced validation loss (eval mode, no sampling)."""
    model.eval()
    device = next(model.parameters()).device
    total, count = 0.0, 0
    with torch.no_grad():
        for batch in batches:
            batch = batch.to(device)
            out = model(batch.units, batch.unit_lengths, batch.mels, batch.mel_lengths)
            loss = reconstruction_loss(out.mels, batch.mels, out.gate_logits, batch.gate_target, batch.mask,
                                       cfg.gate_pos_weight, cfg.gate_loss_weight)
            total += float(loss.total) * len(batch.utt_ids)
            count += len(batch.utt_ids)
    return total / max(count, 1)


def train_epoch(model: EmoAugModel, optimizer: torch.optim.Optimizer, batches: Sequence[Batch],
                state: TrainState, cfg: TrainConfig, val_batches: Optional[Sequence[Batch]] = None,
                flat_lr: Optional[float] = None, checkpoint_path: Optional[Union[str, Path]] = None,
                meta: Optional[dict] = None) -> TrainState:
    """
    One pass over the training batches, then validation and early-stop bookkeeping.

    On a non-finite loss the current (last good) parameters are written to
    ``<checkpoint_path>.diverged`` before the error propagates.

    Returns:
        Updated state (same object)
    """
    losses = []
    for batch in tqdm(batches, desc=f"epoch {state.epoch}", leave=False, disable=len(batches) < 2):
        try:
            step = train_step(model, optimizer, batch, state, cfg, flat_lr)
        except DivergenceError:
            if checkpoint_path:
                rescue = Path(str(checkpoint_path) + ".diverged")
                save_model(model, rescue, {**(meta or {}), "train_state": state.to_meta()})
                logger.error(f"Training diverged; last good parameters saved to {rescue}")
            raise
        losses.append(step["loss"])

    train_loss = float(np.mean(losses)) if losses else float("nan")
    val_loss = evaluate_loss(model, val_batches, cfg) if val_batches else train_loss

    if val_loss < state.best_val_loss:
        state.best_val_loss = val_loss
        state.best_epoch = state.epoch
        state.patience_counter = 0
    else:
        state.patience_counter += 1

    state.history.append({
        "epoch": state.epoch,
        "iteration": state.iteration,
        "train_loss": train_loss,
        "val_loss": val_loss,
        "lr_main": state.lrs.get("main"),
        "lr_paralinguistic": state.lrs.get("paralinguistic"),
        "sampling_prob": state.sampling_prob,
    })
    logger.info(f"Epoch {state.epoch}: train {train_loss:.4f}, val {val_loss:.4f}, "
                f"iter {state.iteration}, lr {state.lrs.get('main', 0):.2e}")
    state.epoch += 1
    return state


def fit(
    model: EmoAugModel,
    train: Sequence[TrainingExample],
    val: Sequence[TrainingExample],
    cfg: TrainConfig,
    max_epochs: Optional[int] = None,
    flat_lr: Optional[float] = None,
    checkpoint_path: Optional[Union[str, Path]] = None,
    curve_path: Optional[Union[str, Path]] = None,
    meta: Optional[dict] = None,
) -> TrainState:
    """
    Train until early stop (patience epochs without improvement) or max_epochs.

    The best-validation parameters are restored at the end and, when a
    path is given, checkpointed atomically every time they improve.

    Args:
        model: Model to train in place
        train: Training examples
        val: Validation examples
        cfg: Training config
        max_epochs: Overrides cfg.max_epochs
        flat_lr: Flat learning rate for all groups (fine-tuning)
        checkpoint_path: Best-model checkpoint destination
        curve_path: CSV training curve destination
        meta: Extra checkpoint metadata (config hash, seed)

    Returns:
        Final TrainState
    """
    if not train:
        raise DataError("no training examples")
    torch.manual_seed(cfg.seed)
    optimizer = build_optimizer(model, cfg, flat_lr)
    state = TrainState()
    val_batches = bucket_batches(val, cfg.batch_size, shuffle=False) if val else None
    best_params = copy.deepcopy(model.state_dict())
    epochs = max_epochs or cfg.max_epochs

    for _ in range(epochs):
        batches = bucket_batches(train, cfg.batch_size, seed=cfg.seed + state.epoch)
        improved_before = state.best_val_loss
        train_epoch(model, optimizer, batches, state, cfg, val_batches, flat_lr, checkpoint_path, meta)

        if state.best_val_loss < improved_before:
            best_params = copy.deepcopy(model.state_dict())
            if checkpoint_path:
                save_model(model, checkpoint_path, {**(meta or {}), "train_state": state.to_meta()})
        if curve_path:
            write_curve(state, curve_path)
        if state.patience_counter >= cfg.early_stop_patience:
            state.stopped_early = True
            logger.info(f"Early stop after epoch {state.epoch - 1} (best epoch {state.best_epoch})")
            break

    model.load_state_dict(best_params)
    return state


def finetune(
    model: EmoAugModel,
    examples: Sequence[TrainingExample],
    cfg: TrainConfig,
    val_size: Optional[int] = None,
    **kwargs,
) -> TrainState:
    """
    Fine-tune a pretrained model with the flat fine-tuning rate on all groups.

    A random validation split of val_size (default cfg.val_size) drives
    early stopping; small corpora fall back to a fraction with a warning.
    """
    train, val = split_validation(examples, val_size or cfg.val_size, cfg.val_fallback_fraction, cfg.seed)
    logger.info(f"Fine-tuning on {len(train)} utterances, validating on {len(val)}")
    return fit(model, train, val, cfg, flat_lr=cfg.finetune_lr, **kwargs)


def write_curve(state: TrainState, path: Union[str, Path]) -> Path:
    """Write the per-epoch training curve as CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(state.history).to_csv(path, index=False)
    return path

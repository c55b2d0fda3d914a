"""
Attention decoder module.
Location-aware attention and the autoregressive mel decoder conditioned
on a style vector.
"""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .config import ModelConfig
from .semantic import SemanticEncoding
from .paralinguistic import StyleEmbedding
from .layers import conv1d, linear, lstm_cell, check_finite
from .errors import ShapeError, ContractError

logger = logging.getLogger(__name__)


# =============================================================================
# TYPES
# =============================================================================

@dataclass
class DecoderState:
    """Recurrent state carried between decode steps (batched)."""
    attention_hidden: torch.Tensor
    attention_cell: torch.Tensor
    decoder_hidden: torch.Tensor
    decoder_cell: torch.Tensor
    attention_weights: torch.Tensor
    attention_weights_cum: torch.Tensor
    attention_context: torch.Tensor
    prev_frame: torch.Tensor
    memory: torch.Tensor
    processed_memory: torch.Tensor
    mask: Optional[torch.Tensor] = None


@dataclass
class AttentionContext:
    """Context vector and the alignment it was built from."""
    context: torch.Tensor
    alignment: torch.Tensor


@dataclass
class DecoderOutput:
    """Result of decoding a batch."""
    mels: torch.Tensor            # (B, T, M)
    gate_logits: torch.Tensor     # (B, T)
    alignments: torch.Tensor      # (B, T, L)
    lengths: torch.Tensor         # (B,) valid output frames
    truncated: list               # per item, free-running only


# =============================================================================
# CONDITIONING
# =============================================================================

def condition(sem: Union[SemanticEncoding, torch.Tensor],
              style: Union[StyleEmbedding, torch.Tensor]) -> torch.Tensor:
    """
    Append the style vector to every encoder step.

    Args:
        sem: (L, E) or batched (B, L, E) encodings
        style: (D,) or batched (B, D) style vectors

    Returns:
        (L, E + D) or (B, L, E + D) memory
    """
    sem = sem.matrix if isinstance(sem, SemanticEncoding) else sem
    style = style.vector if isinstance(style, StyleEmbedding) else style
    if sem.dim() == 2:
        return torch.cat([sem, style.unsqueeze(0).expand(sem.shape[0], -1)], dim=-1)
    if style.dim() != 2 or style.shape[0] != sem.shape[0]:
        raise ShapeError("style batch does not match encodings", (sem.shape[0], None), tuple(style.shape))
    return torch.cat([sem, style.unsqueeze(1).expand(-1, sem.shape[1], -1)], dim=-1)


def context_from_alignment(alignment: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
    """Alignment-weighted sum of memory rows: (B, L) x (B, L, E) -> (B, E)."""
    return torch.bmm(alignment.unsqueeze(1), memory).squeeze(1)


# =============================================================================
# ATTENTION
# =============================================================================

class LocationLayer(nn.Module):
    """Convolution over previous and cumulative alignments, projected to energy space."""

    def __init__(self, n_filters: int, kernel_size: int, attention_dim: int):
        super().__init__()
        self.location_conv = conv1d(2, n_filters, kernel_size, bias=False)
        self.location_dense = linear(n_filters, attention_dim, bias=False)

    def forward(self, weights_cat: torch.Tensor) -> torch.Tensor:
        return self.location_dense(self.location_conv(weights_cat).transpose(1, 2))


class LocationAwareAttention(nn.Module):
    """
    Energies e_j = v . tanh(W q + V h_j + U f_j) where f is the location
    feature of the previous and cumulative alignments.
    """

    def __init__(self, query_dim: int, memory_dim: int, attention_dim: int,
                 n_filters: int, kernel_size: int):
        super().__init__()
        self.query_layer = linear(query_dim, attention_dim, bias=False)
        self.memory_layer = linear(memory_dim, attention_dim, bias=False)
        self.v = linear(attention_dim, 1, bias=False)
        self.location_layer = LocationLayer(n_filters, kernel_size, attention_dim)

    def energies(self, query: torch.Tensor, processed_memory: torch.Tensor,
                 weights_cat: torch.Tensor) -> torch.Tensor:
        """(B, L) unnormalized scores."""
        processed_query = self.query_layer(query).unsqueeze(1)
        location = self.location_layer(weights_cat)
        return self.v(torch.tanh(processed_query + processed_memory + location)).squeeze(2)

    def forward(self, query: torch.Tensor, memory: torch.Tensor, processed_memory: torch.Tensor,
                weights_cat: torch.Tensor, mask: Optional[torch.Tensor] = None) -> AttentionContext:
        scores = self.energies(query, processed_memory, weights_cat)
        if mask is not None:
            scores = scores.masked_fill(~mask, float("-inf"))
        alignment = F.softmax(scores, dim=1)
        return AttentionContext(context=context_from_alignment(alignment, memory), alignment=alignment)


class Prenet(nn.Module):
    """
    Two FC+ReLU layers with dropout that stays active at inference.

    A torch.Generator may be passed to draw the dropout masks, making
    inference deterministic per seed without touching global RNG state.
    """

    def __init__(self, in_dim: int, sizes: list[int], dropout: float = 0.5):
        super().__init__()
        in_sizes = [in_dim] + sizes[:-1]
        self.layers = nn.ModuleList([linear(i, o, bias=False) for i, o in zip(in_sizes, sizes)])
        self.dropout = dropout

    def forward(self, x: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        for layer in self.layers:
            x = F.relu(layer(x))
            if self.dropout > 0:
                keep = torch.full(x.shape, 1.0 - self.dropout, dtype=x.dtype)
                mask = torch.bernoulli(keep, generator=generator).to(x.device)
                x = x * mask / (1.0 - self.dropout)
        return x


# =============================================================================
# DECODER
# =============================================================================

class AttentionDecoder(nn.Module):
    """
    Autoregressive mel decoder: prenet, attention LSTM, location-aware
    attention, decoder LSTM, linear projection to one frame plus a stop gate.

    Args:
        n_mels: Output frame size M
        memory_dim: Conditioned memory width (encoder width + style dim)
        cfg: Model dimensions
    """

    def __init__(self, n_mels: int, memory_dim: int, cfg: Optional[ModelConfig] = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.n_mels = n_mels
        self.memory_dim = memory_dim
        self.attention_rnn_dim = cfg.attention_rnn_dim
        self.decoder_rnn_dim = cfg.decoder_rnn_dim
        self.attention_dropout = cfg.attention_dropout
        self.decoder_dropout = cfg.decoder_dropout
        self.gate_threshold = cfg.gate_threshold
        self.max_decoder_ratio = cfg.max_decoder_ratio

        self.prenet = Prenet(n_mels, [cfg.prenet_dim, cfg.prenet_dim], cfg.prenet_dropout)
        self.attention_rnn = lstm_cell(cfg.prenet_dim + memory_dim, cfg.attention_rnn_dim)
        self.attention_layer = LocationAwareAttention(
            cfg.attention_rnn_dim, memory_dim, cfg.attention_dim,
            cfg.location_filters, cfg.location_kernel_size)
        self.decoder_rnn = lstm_cell(cfg.attention_rnn_dim + memory_dim, cfg.decoder_rnn_dim)
        self.linear_projection = linear(cfg.decoder_rnn_dim + memory_dim, n_mels)
        self.gate_layer = linear(cfg.decoder_rnn_dim + memory_dim, 1)

    def init_state(self, memory: torch.Tensor, memory_lengths: Optional[torch.Tensor] = None) -> DecoderState:
        """Zero recurrent state, zero alignments and the all-zero go frame."""
        if memory.dim() != 3 or memory.shape[2] != self.memory_dim or memory.shape[1] == 0:
            raise ShapeError("decoder memory", (None, None, self.memory_dim), tuple(memory.shape))
        batch, max_len = memory.shape[:2]

        def zeros(*shape):
            return memory.new_zeros(*shape)

        mask = None
        if memory_lengths is not None:
            steps = torch.arange(max_len, device=memory.device)
            mask = steps[None, :] < memory_lengths.to(memory.device)[:, None]

        return DecoderState(
            attention_hidden=zeros(batch, self.attention_rnn_dim),
            attention_cell=zeros(batch, self.attention_rnn_dim),
            decoder_hidden=zeros(batch, self.decoder_rnn_dim),
            decoder_cell=zeros(batch, self.decoder_rnn_dim),
            attention_weights=zeros(batch, max_len),
            attention_weights_cum=zeros(batch, max_len),
            attention_context=zeros(batch, self.memory_dim),
            prev_frame=zeros(batch, self.n_mels),
            memory=memory,
            processed_memory=self.attention_layer.memory_layer(memory),
            mask=mask,
        )

    def attend(self, state: DecoderState, query: Optional[torch.Tensor] = None) -> AttentionContext:
        """Attention over the state's memory, queried by the attention LSTM output."""
        query = state.attention_hidden if query is None else query
        weights_cat = torch.stack([state.attention_weights, state.attention_weights_cum], dim=1)
        return self.attention_layer(query, state.memory, state.processed_memory, weights_cat, state.mask)

    def decode_step(self, state: DecoderState, prev_frame: torch.Tensor,
                    generator: Optional[torch.Generator] = None) -> tuple[torch.Tensor, torch.Tensor, DecoderState]:
        """
        One autoregressive step.

        Args:
            state: Current state (holds the previous context)
            prev_frame: (B, M) previous frame, zeros at t=0
            generator: RNG for prenet dropout masks

        Returns:
            (frame (B, M), gate logit (B,), new state)

        Raises:
            DivergenceError: Non-finite frame or gate
        """
        if prev_frame.shape != (state.memory.shape[0], self.n_mels):
            raise ShapeError("decoder input frame", (state.memory.shape[0], self.n_mels), tuple(prev_frame.shape))

        x = self.prenet(prev_frame, generator)
        attention_hidden, attention_cell = self.attention_rnn(
            torch.cat([x, state.attention_context], dim=-1),
            (state.attention_hidden, state.attention_cell))
        attention_hidden = F.dropout(attention_hidden, self.attention_dropout, self.training)

        attended = self.attend(replace(state, attention_hidden=attention_hidden))

        decoder_hidden, decoder_cell = self.decoder_rnn(
            torch.cat([attention_hidden, attended.context], dim=-1),
            (state.decoder_hidden, state.decoder_cell))
        decoder_hidden = F.dropout(decoder_hidden, self.decoder_dropout, self.training)

        projected_in = torch.cat([decoder_hidden, attended.context], dim=-1)
        frame = check_finite(self.linear_projection(projected_in), "decoder frame")
        gate = check_finite(self.gate_layer(projected_in).squeeze(1), "decoder gate")

        new_state = replace(
            state,
            attention_hidden=attention_hidden,
            attention_cell=attention_cell,
            decoder_hidden=decoder_hidden,
            decoder_cell=decoder_cell,
            attention_weights=attended.alignment,
            attention_weights_cum=state.attention_weights_cum + attended.alignment,
            attention_context=attended.context,
            prev_frame=frame,
        )
        return frame, gate, new_state

    def decode_sequence(
        self,
        memory: torch.Tensor,
        memory_lengths: Optional[torch.Tensor] = None,
        target: Optional[torch.Tensor] = None,
        max_len: Optional[int] = None,
        sampling_prob: float = 0.0,
        generator: Optional[torch.Generator] = None,
    ) -> DecoderOutput:
        """
        Decode a batch, teacher forced when a target is given, else free running.

        Teacher forcing feeds ground-truth frame t-1; with sampling_prob > 0
        each item's input is replaced by the model's own previous frame with
        that probability (scheduled sampling). Free running stops an item
        once sigmoid(gate) exceeds the threshold, or at max_len frames
        (default max_decoder_ratio x its memory length), flagging truncation.

        Args:
            memory: (B, L, E + D) conditioned memory
            memory_lengths: (B,) valid memory rows
            target: (B, T, M) ground-truth frames for teacher forcing
            max_len: Free-running frame cap
            sampling_prob: Scheduled sampling probability
            generator: RNG for prenet dropout and sampling draws

        Returns:
            DecoderOutput
        """
        batch, steps_in = memory.shape[:2]
        if memory_lengths is None:
            memory_lengths = torch.full((batch,), steps_in, dtype=torch.long)
        state = self.init_state(memory, memory_lengths)
        prev = state.prev_frame

        frames, gates, alignments = [], [], []
        if target is not None:
            if target.dim() != 3 or target.shape[0] != batch or target.shape[2] != self.n_mels:
                raise ShapeError("teacher-forcing target", (batch, None, self.n_mels), tuple(target.shape))
            for t in range(target.shape[1]):
                if t > 0:
                    prev = target[:, t - 1]
                    if sampling_prob > 0:
                        draws = torch.rand(batch, generator=generator).to(memory.device)
                        use_model = (draws < sampling_prob).unsqueeze(1)
                        prev = torch.where(use_model, frames[-1].detach(), prev)
                frame, gate, state = self.decode_step(state, prev, generator)
                frames.append(frame)
                gates.append(gate)
                alignments.append(state.attention_weights)
            lengths = torch.full((batch,), target.shape[1], dtype=torch.long)
            truncated = [False] * batch
        else:
            limits = memory_lengths.cpu() * self.max_decoder_ratio
            if max_len is not None:
                limits = torch.clamp(limits, max=max_len)
            lengths = limits.clone()
            done = torch.zeros(batch, dtype=torch.bool)
            stopped = torch.zeros(batch, dtype=torch.bool)
            for t in range(int(limits.max())):
                frame, gate, state = self.decode_step(state, prev, generator)
                frames.append(frame)
                gates.append(gate)
                alignments.append(state.attention_weights)
                prev = frame

                stop = (torch.sigmoid(gate.cpu()) > self.gate_threshold) & ~done
                lengths[stop] = t + 1
                stopped |= stop
                done |= stop | (limits <= t + 1)
                if bool(done.all()):
                    break
            truncated = [not bool(s) for s in stopped]
            for i, flag in enumerate(truncated):
                if flag:
                    logger.warning(f"Free-running decode hit the {int(limits[i])}-frame cap (item {i})")

        return DecoderOutput(
            mels=torch.stack(frames, dim=1),
            gate_logits=torch.stack(gates, dim=1),
            alignments=torch.stack(alignments, dim=1),
            lengths=lengths,
            truncated=truncated,
        )


# =============================================================================
# ALIGNMENT DIAGNOSTICS
# =============================================================================

def alignment_monotonicity(alignment: Union[np.ndarray, torch.Tensor], tol: float = 1e-6) -> float:
    """
    Fraction of decoder steps whose expected attention position moves backwards.

    Args:
        alignment: (T, L) alignment matrix of one utterance
        tol: Decreases smaller than this are ignored

    Returns:
        Violation fraction in [0, 1]; 0.0 for fewer than 2 steps
    """
    a = alignment.detach().cpu().numpy() if isinstance(alignment, torch.Tensor) else np.asarray(alignment)
    if a.ndim != 2:
        raise ContractError(f"alignment must be (T x L), got shape {a.shape}")
    if a.shape[0] < 2:
        return 0.0
    position = a @ np.arange(a.shape[1], dtype=np.float64)
    return float(np.mean(np.diff(position) < -tol))


def save_alignment(alignment: Union[np.ndarray, torch.Tensor], path: Union[str, Path]) -> tuple[Path, Path]:
    """
    Export an alignment as .npy and a PNG image.

    Args:
        alignment: (T, L) matrix
        path: Output path without suffix

    Returns:
        (npy path, png path)
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    a = alignment.detach().cpu().numpy() if isinstance(alignment, torch.Tensor) else np.asarray(alignment)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    npy_path = path.with_suffix(".npy")
    png_path = path.with_suffix(".png")
    np.save(npy_path, a)

    fig, ax = plt.subplots(figsize=(6, 4))
    im = ax.imshow(a.T, aspect="auto", origin="lower", interpolation="none")
    ax.set_xlabel("decoder step")
    ax.set_ylabel("encoder step")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(png_path)
    plt.close(fig)
    return npy_path, png_path

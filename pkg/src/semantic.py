"""
Semantic encoder module.
Maps deduplicated unit sequences to contextual content representations.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn
from torch.nn import functional as F

from .config import ModelConfig
from .quantizer import UnitSequence
from .layers import conv1d, lstm, check_finite, time_mask, masked, MaskedBatchNorm1d
from .errors import ContractError, LengthError

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class SemanticEncoding:
    """L x (2 * lstm dim) content matrix for one deduplicated sequence."""
    matrix: torch.Tensor
    source_units: UnitSequence

    def __len__(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])


class SemanticEncoder(nn.Module):
    """
    Unit embedding, a conv stack and a bidirectional LSTM.

    Each conv keeps the time length ("same" padding) and is followed by
    BatchNorm, ReLU and dropout. Padded positions are zeroed before every
    conv and left out of the BatchNorm statistics, so a sequence encodes the
    same alone as inside a padded batch.

    Args:
        n_units: Codebook size k (embedding table rows)
        cfg: Model dimensions
    """

    def __init__(self, n_units: int, cfg: Optional[ModelConfig] = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.n_units = n_units
        self.dropout = cfg.encoder_dropout

        self.embedding = nn.Embedding(n_units, cfg.embedding_dim)
        nn.init.xavier_uniform_(self.embedding.weight)

        channels = [cfg.embedding_dim] + [cfg.encoder_channels] * cfg.encoder_n_convs
        self.convolutions = nn.ModuleList([
            nn.Sequential(
                conv1d(c_in, c_out, cfg.encoder_kernel_size),
                MaskedBatchNorm1d(c_out),
            )
            for c_in, c_out in zip(channels[:-1], channels[1:])
        ])
        self.lstm = lstm(cfg.encoder_channels, cfg.encoder_lstm_dim, bidirectional=True)
        self.output_dim = 2 * cfg.encoder_lstm_dim

    def forward(self, units: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """
        Encode a padded batch.

        Args:
            units: (B, L) integer labels, zero padded
            lengths: (B,) true lengths

        Returns:
            (B, L, 2 * lstm dim) encodings; padded rows are zero
        """
        mask = time_mask(lengths.to(units.device), units.shape[1], self.embedding.weight.dtype)
        x = masked(self.embedding(units).transpose(1, 2), mask)
        for conv, norm in self.convolutions:
            x = masked(F.dropout(F.relu(norm(conv(x), mask)), self.dropout, self.training), mask)
        x = x.transpose(1, 2)

        packed = nn.utils.rnn.pack_padded_sequence(
            x, lengths.cpu(), batch_first=True, enforce_sorted=False)
        outputs, _ = self.lstm(packed)
        outputs, _ = nn.utils.rnn.pad_packed_sequence(
            outputs, batch_first=True, total_length=units.shape[1])
        return check_finite(outputs, "semantic encoder")


def encode_semantic(u: UnitSequence, encoder: SemanticEncoder) -> SemanticEncoding:
    """
    Encode one deduplicated unit sequence.

    Put the encoder in eval mode for deterministic output.

    Args:
        u: Deduplicated, non-empty unit sequence
        encoder: Semantic encoder

    Returns:
        SemanticEncoding with one row per unit

    Raises:
        ContractError: Sequence not deduplicated or labels outside the table
        LengthError: Empty sequence
    """
    if not u.deduped:
        raise ContractError("semantic encoder expects a deduplicated unit sequence")
    if len(u) == 0:
        raise LengthError("cannot encode an empty unit sequence")
    if u.k > encoder.n_units:
        raise ContractError(f"sequence vocabulary k={u.k} exceeds embedding table size {encoder.n_units}")

    device = next(encoder.parameters()).device
    units = torch.tensor([u.units], dtype=torch.long, device=device)
    lengths = torch.tensor([len(u)], dtype=torch.long)
    with torch.no_grad():
        matrix = encoder(units, lengths)[0]
    return SemanticEncoding(matrix=matrix, source_units=u)

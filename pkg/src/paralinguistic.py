"""
Paralinguistic encoder module.
ECAPA-style network mapping a mel spectrogram to a fixed-size style vector.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import torch
from torch import nn
from torch.nn import functional as F

from .config import ModelConfig
from .audio import MelSpectrogram
from .layers import (
    conv1d, linear, check_finite, load_checkpoint, apply_parameters, time_mask, masked, MaskedBatchNorm1d,
)
from .errors import LengthError, ParameterError, DataError

logger = logging.getLogger(__name__)

# Variance floor inside the pooling square root
POOLING_EPS = 1e-10


@dataclass(eq=False)
class StyleEmbedding:
    """Utterance-level style vector of fixed dimension."""
    vector: torch.Tensor
    utt_id: Optional[str] = None

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])


# =============================================================================
# BUILDING BLOCKS
# =============================================================================

class SEModule(nn.Module):
    """Squeeze-excitation over channels with a bottleneck."""

    def __init__(self, channels: int, bottleneck: int):
        super().__init__()
        self.down = conv1d(channels, bottleneck, 1)
        self.up = conv1d(bottleneck, channels, 1)

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        if mask is None:
            s = x.mean(dim=2, keepdim=True)
        else:
            s = (x * mask).sum(dim=2, keepdim=True) / mask.sum(dim=2, keepdim=True)
        s = torch.sigmoid(self.up(F.relu(self.down(s))))
        return x * s


class Res2Conv1d(nn.Module):
    """
    Res2Net-style multi-scale dilated convolution.

    The channels are split into ``scale`` groups; group i>0 is convolved
    after adding the previous group's output, group 0 passes through.
    """

    def __init__(self, channels: int, kernel_size: int, dilation: int, scale: int):
        super().__init__()
        if channels % scale:
            raise ParameterError(f"channels {channels} not divisible by scale {scale}")
        self.scale = scale
        width = channels // scale
        self.convs = nn.ModuleList([conv1d(width, width, kernel_size, dilation=dilation)
                                    for _ in range(scale - 1)])
        self.norms = nn.ModuleList([MaskedBatchNorm1d(width) for _ in range(scale - 1)])

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        chunks = torch.chunk(x, self.scale, dim=1)
        outputs = [chunks[0]]
        y = None
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms), start=1):
            inp = chunks[i] if y is None else chunks[i] + y
            y = norm(F.relu(conv(masked(inp, mask))), mask)
            outputs.append(y)
        return torch.cat(outputs, dim=1)


class SERes2Block(nn.Module):
    """1x1 conv, Res2 conv, 1x1 conv and SE with a residual connection."""

    def __init__(self, channels: int, kernel_size: int, dilation: int, scale: int, se_dim: int):
        super().__init__()
        self.conv_in = conv1d(channels, channels, 1)
        self.norm_in = MaskedBatchNorm1d(channels)
        self.res2 = Res2Conv1d(channels, kernel_size, dilation, scale)
        self.conv_out = conv1d(channels, channels, 1)
        self.norm_out = MaskedBatchNorm1d(channels)
        self.se = SEModule(channels, se_dim)

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        y = self.norm_in(F.relu(self.conv_in(x)), mask)
        y = self.res2(y, mask)
        y = self.norm_out(F.relu(self.conv_out(y)), mask)
        return self.se(masked(y, mask), mask) + x


def weighted_statistics(x: torch.Tensor, weights: torch.Tensor,
                        eps: float = POOLING_EPS) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Attention-weighted mean and standard deviation over time.

    Statistics are taken around the first frame, so a constant input
    gives sigma exactly 0 and mu exactly the constant.

    Args:
        x: (B, C, T) features
        weights: (B, C, T) non-negative weights summing to 1 over T
        eps: Variance floor; sigma = sqrt(var + eps) - sqrt(eps)

    Returns:
        (mu, sigma), each (B, C)
    """
    shift = x[:, :, :1]
    centered = x - shift
    mean_c = (weights * centered).sum(dim=2)
    var = (weights * centered.pow(2)).sum(dim=2) - mean_c.pow(2)
    sigma = torch.sqrt(var.clamp(min=0.0) + eps) - eps ** 0.5
    return mean_c + shift[:, :, 0], sigma


class AttentiveStatisticsPooling(nn.Module):
    """Conv1D+Tanh+Conv1D+Softmax attention over time, per channel, then [mu; sigma]."""

    def __init__(self, channels: int, attention_dim: int):
        super().__init__()
        self.attention = nn.Sequential(
            conv1d(channels, attention_dim, 1),
            nn.Tanh(),
            conv1d(attention_dim, channels, 1),
        )

    def attention_weights(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """(B, C, T) softmax weights over time; padded frames get zero weight."""
        scores = self.attention(x)
        if mask is not None:
            scores = scores.masked_fill(mask == 0, float("-inf"))
        return F.softmax(scores, dim=2)

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        mu, sigma = weighted_statistics(x, self.attention_weights(x, mask))
        return torch.cat([mu, sigma], dim=1)


# =============================================================================
# ENCODER
# =============================================================================

class ParalinguisticEncoder(nn.Module):
    """
    Conv+ReLU+BN front, SE-Res2 blocks, concatenating aggregation, pooling, FC.

    With lengths given, padded frames are zeroed before every time-mixing
    conv and excluded from BatchNorm, SE and pooling statistics, so an
    utterance gets the same style vector alone as inside a padded batch.

    Args:
        n_mels: Mel bins M of the input
        cfg: Model dimensions
    """

    def __init__(self, n_mels: int, cfg: Optional[ModelConfig] = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        c = cfg.style_channels
        self.conv_in = conv1d(n_mels, c, 5)
        self.norm_in = MaskedBatchNorm1d(c)
        self.blocks = nn.ModuleList([
            SERes2Block(c, cfg.style_kernel_size, d, cfg.style_scale, cfg.style_se_dim)
            for d in cfg.style_dilations
        ])
        aggregate = c * len(cfg.style_dilations)
        self.aggregate = conv1d(aggregate, aggregate, 1)
        self.pooling = AttentiveStatisticsPooling(aggregate, cfg.style_attention_dim)
        self.fc = linear(2 * aggregate, cfg.style_dim)
        self.output_dim = cfg.style_dim

    def forward(self, mels: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> torch.Tensor:
        """
        Args:
            mels: (B, T, M) padded log-mel frames
            lengths: (B,) valid frame counts, None for unpadded input

        Returns:
            (B, D) style vectors
        """
        x = mels.transpose(1, 2)
        mask = None if lengths is None else time_mask(lengths.to(x.device), x.shape[2], x.dtype)

        x = self.norm_in(F.relu(self.conv_in(masked(x, mask))), mask)
        outputs = []
        for block in self.blocks:
            x = block(x, mask)
            outputs.append(x)
        x = F.relu(self.aggregate(torch.cat(outputs, dim=1)))
        pooled = self.pooling(x, mask)
        return check_finite(self.fc(pooled), "paralinguistic encoder")


def encode_style(m: MelSpectrogram, encoder: ParalinguisticEncoder,
                 utt_id: Optional[str] = None) -> StyleEmbedding:
    """
    Style vector of one utterance. Put the encoder in eval mode first.

    Args:
        m: Log-mel spectrogram with at least 2 frames
        encoder: Paralinguistic encoder
        utt_id: Source utterance id to record

    Returns:
        StyleEmbedding

    Raises:
        LengthError: Fewer than 2 frames
    """
    if m.n_frames < 2:
        raise LengthError(f"style encoding needs >= 2 frames, got {m.n_frames}")
    device = next(encoder.parameters()).device
    mels = torch.from_numpy(m.frames).unsqueeze(0).to(device)
    with torch.no_grad():
        vector = encoder(mels)[0]
    return StyleEmbedding(vector=vector, utt_id=utt_id)


def load_external_speaker_encoder(path: Union[str, Path], encoder: ParalinguisticEncoder,
                                  prefix: str = "") -> dict:
    """
    Initialize the encoder from an external named-parameter map.

    Accepts the project checkpoint format or a plain torch state dict.

    Args:
        path: Checkpoint file
        encoder: Encoder to initialize in place
        prefix: Name prefix of the encoder inside the file (stripped)

    Returns:
        Dict with "loaded", "missing" and "unexpected" name lists
    """
    path = Path(path)
    try:
        parameters = load_checkpoint(path)["parameters"]
    except DataError:
        if not path.exists():
            raise
        parameters = torch.load(path, map_location="cpu", weights_only=True)
        if not isinstance(parameters, dict):
            raise DataError(f"{path}: expected a named parameter map")

    missing, unexpected = apply_parameters(encoder, parameters, prefix)
    if missing:
        logger.warning(f"Speaker encoder import: {len(missing)} parameters missing from {path}")
    if unexpected:
        logger.warning(f"Speaker encoder import: {len(unexpected)} unexpected names in {path}")
    own = set(encoder.state_dict())
    loaded = sorted(own - set(missing))
    logger.info(f"Imported {len(loaded)} speaker-encoder tensors from {path}")
    return {"loaded": loaded, "missing": missing, "unexpected": unexpected}

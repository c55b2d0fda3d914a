"""
Model module.
Ties the semantic encoder, paralinguistic encoder and attention decoder
into the reconstruction network and handles its checkpoints.
"""

import logging
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
from torch import nn

from .config import ModelConfig, DEVICE, from_dict
from .audio import MelSpectrogram
from .quantizer import UnitSequence
from .semantic import SemanticEncoder, encode_semantic
from .paralinguistic import ParalinguisticEncoder, encode_style
from .decoder import AttentionDecoder, DecoderOutput, condition
from .layers import save_checkpoint, load_checkpoint, apply_parameters
from .errors import ContractError, DataError

logger = logging.getLogger(__name__)


@dataclass
class Generation:
    """Free-running output for one utterance."""
    mel: MelSpectrogram
    alignment: np.ndarray      # (T, L)
    truncated: bool


class EmoAugModel(nn.Module):
    """
    Reconstruction network: mel = Dec(Att(Sem(units), Par(mel))).

    Args:
        n_units: Codebook size k
        n_mels: Mel bins M
        cfg: Model dimensions
    """

    def __init__(self, n_units: int, n_mels: int, cfg: Optional[ModelConfig] = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.n_units = n_units
        self.n_mels = n_mels
        self.semantic = SemanticEncoder(n_units, self.cfg)
        self.paralinguistic = ParalinguisticEncoder(n_mels, self.cfg)
        self.decoder = AttentionDecoder(n_mels, self.semantic.output_dim + self.paralinguistic.output_dim, self.cfg)

    def forward(
        self,
        units: torch.Tensor,
        unit_lengths: torch.Tensor,
        mels: torch.Tensor,
        mel_lengths: torch.Tensor,
        sampling_prob: float = 0.0,
        generator: Optional[torch.Generator] = None,
    ) -> DecoderOutput:
        """
        Teacher-forced reconstruction where each utterance is its own style source.

        Args:
            units: (B, L) padded deduplicated units
            unit_lengths: (B,)
            mels: (B, T, M) padded target frames
            mel_lengths: (B,)
            sampling_prob: Scheduled sampling probability
            generator: RNG for prenet dropout and sampling

        Returns:
            DecoderOutput aligned with the target frames
        """
        sem = self.semantic(units, unit_lengths)
        style = self.paralinguistic(mels, mel_lengths)
        memory = condition(sem, style)
        return self.decoder.decode_sequence(memory, unit_lengths, target=mels,
                                            sampling_prob=sampling_prob, generator=generator)

    def infer(self, units: UnitSequence, reference: MelSpectrogram, seed: int = 0,
              max_len: Optional[int] = None) -> Generation:
        """
        Free-running generation of the units in the reference's style.

        Call in eval mode. Prenet dropout draws from a generator seeded
        with ``seed``, so equal inputs and seeds give equal outputs. The
        generated frames are clamped to the reference's log floor.
        """
        if reference.n_mels != self.n_mels:
            raise ContractError(f"reference has {reference.n_mels} mel bins, model expects {self.n_mels}")
        sem = encode_semantic(units, self.semantic)
        style = encode_style(reference, self.paralinguistic)
        memory = condition(sem, style).unsqueeze(0)
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            out = self.decoder.decode_sequence(memory, max_len=max_len, generator=generator)
        n = int(out.lengths[0])
        return Generation(
            mel=reference.with_frames(np.maximum(out.mels[0, :n].cpu().numpy(), reference.log_floor)),
            alignment=out.alignments[0, :n].cpu().numpy(),
            truncated=out.truncated[0],
        )


def build_model(n_units: int, n_mels: int, cfg: Optional[ModelConfig] = None,
                device: Optional[str] = None) -> EmoAugModel:
    """Fresh model on the configured device."""
    model = EmoAugModel(n_units, n_mels, cfg).to(device or DEVICE)
    n_params = sum(p.numel() for p in model.parameters())
    logger.info(f"Built model: k={n_units}, M={n_mels}, {n_params:,} parameters")
    return model


def parameter_groups(model: EmoAugModel) -> dict[str, list]:
    """
    Split parameters into the "main" and "paralinguistic" groups.

    Every paralinguistic-encoder parameter is in its group and nowhere else.
    """
    style_ids = {id(p) for p in model.paralinguistic.parameters()}
    return {
        "main": [p for p in model.parameters() if id(p) not in style_ids],
        "paralinguistic": list(model.paralinguistic.parameters()),
    }


def save_model(model: EmoAugModel, path: Union[str, Path], meta: Optional[dict] = None) -> Path:
    """Checkpoint the model with the dimensions needed to rebuild it."""
    header = {
        "n_units": model.n_units,
        "n_mels": model.n_mels,
        "model_config": asdict(model.cfg),
    }
    header.update(meta or {})
    return save_checkpoint(path, model.state_dict(), header)


def load_model(path: Union[str, Path], device: Optional[str] = None) -> tuple[EmoAugModel, dict]:
    """
    Rebuild a model from a checkpoint written by save_model.

    Returns:
        (model in eval mode, checkpoint meta)
    """
    payload = load_checkpoint(path)
    meta = payload["meta"]
    try:
        cfg = from_dict(ModelConfig, meta["model_config"], "model")
        model = EmoAugModel(int(meta["n_units"]), int(meta["n_mels"]), cfg)
    except KeyError as e:
        raise DataError(f"{path}: checkpoint is missing model header field {e}")
    missing, unexpected = apply_parameters(model, payload["parameters"])
    if missing or unexpected:
        raise DataError(f"{path}: parameter mismatch (missing {missing[:3]}, unexpected {unexpected[:3]})")
    model.to(device or DEVICE).eval()
    return model, meta

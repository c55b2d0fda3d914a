"""
Tests for the paralinguistic encoder module.
"""

import numpy as np
import pytest
import torch

from src.audio import MelSpectrogram, mel_spectrogram
from src.layers import save_checkpoint
from src.paralinguistic import (
    ParalinguisticEncoder,
    Res2Conv1d,
    StyleEmbedding,
    AttentiveStatisticsPooling,
    weighted_statistics,
    encode_style,
    load_external_speaker_encoder,
)
from src.errors import LengthError, ParameterError, DataError
from tests.conftest import make_sine


@pytest.fixture
def encoder(tiny_model_config):
    torch.manual_seed(0)
    return ParalinguisticEncoder(80, tiny_model_config).eval()


class TestWeightedStatistics:
    """Attentive pooling statistics tests."""

    def test_constant_input(self):
        """A constant sequence pools to mu = constant and sigma = 0 exactly."""
        x = torch.full((1, 3, 10), 2.5)
        weights = torch.full((1, 3, 10), 0.1)
        mu, sigma = weighted_statistics(x, weights)
        assert torch.all(mu == 2.5)
        assert torch.all(sigma == 0.0)

    def test_two_values(self):
        """Equal weights on 1 and 3 give mean 2 and deviation 1."""
        x = torch.tensor([[[1.0, 3.0]]])
        mu, sigma = weighted_statistics(x, torch.full((1, 1, 2), 0.5))
        assert mu.item() == pytest.approx(2.0)
        assert sigma.item() == pytest.approx(1.0, abs=1e-4)

    def test_masked_frames_get_no_weight(self):
        """Padded frames receive zero attention weight."""
        pooling = AttentiveStatisticsPooling(4, 3)
        mask = torch.tensor([[[1.0, 1.0, 1.0, 0.0, 0.0]]])
        weights = pooling.attention_weights(torch.randn(1, 4, 5), mask)
        assert torch.all(weights[:, :, 3:] == 0)
        assert torch.allclose(weights.sum(dim=2), torch.ones(1, 4))


class TestEncodeStyle:
    """Utterance-level style vector tests."""

    def test_fixed_dimension(self, encoder, sine_440):
        """Any length of input maps to a style_dim vector."""
        short = encode_style(mel_spectrogram(make_sine(440.0, 0.1)), encoder, "short")
        long = encode_style(mel_spectrogram(sine_440), encoder)
        assert isinstance(short, StyleEmbedding)
        assert short.dim == long.dim == 8
        assert short.utt_id == "short"

    def test_two_frames_minimum(self, encoder):
        """Fewer than two frames is a LengthError."""
        with pytest.raises(LengthError):
            encode_style(MelSpectrogram(np.zeros((1, 80))), encoder)
        assert encode_style(MelSpectrogram(np.zeros((2, 80))), encoder).dim == 8

    def test_deterministic(self, encoder, sine_440):
        m = mel_spectrogram(sine_440)
        assert torch.equal(encode_style(m, encoder).vector, encode_style(m, encoder).vector)

    def test_padded_batch_shape(self, encoder):
        """Batched input with lengths gives one vector per item."""
        with torch.no_grad():
            out = encoder(torch.randn(3, 12, 80), torch.tensor([12, 7, 4]))
        assert out.shape == (3, 8)
        assert torch.isfinite(out).all()

    def test_padded_batch_matches_single(self, encoder):
        """An utterance padded inside a batch gets the same style vector as alone."""
        torch.manual_seed(1)
        long = torch.randn(1, 12, 80)
        short = torch.randn(1, 7, 80)
        batch = torch.cat([long, torch.cat([short, torch.zeros(1, 5, 80)], dim=1)])
        with torch.no_grad():
            batched = encoder(batch, torch.tensor([12, 7]))
            alone = encoder(short)
            alone_long = encoder(long)
        assert torch.allclose(batched[1], alone[0], atol=1e-5)
        assert torch.allclose(batched[0], alone_long[0], atol=1e-5)

    def test_padding_value_ignored(self, encoder):
        """Padding with the log floor or with zeros gives the same vector."""
        torch.manual_seed(2)
        x = torch.randn(2, 10, 80)
        lengths = torch.tensor([10, 6])
        floored = x.clone()
        floored[1, 6:] = -11.5
        zeroed = x.clone()
        zeroed[1, 6:] = 0.0
        with torch.no_grad():
            assert torch.allclose(encoder(floored, lengths), encoder(zeroed, lengths), atol=1e-5)


class TestBlocks:
    """Building block tests."""

    def test_res2_keeps_shape(self):
        block = Res2Conv1d(16, 3, dilation=2, scale=4)
        assert block(torch.randn(2, 16, 9)).shape == (2, 16, 9)

    def test_res2_scale_must_divide(self):
        with pytest.raises(ParameterError):
            Res2Conv1d(10, 3, dilation=2, scale=4)


class TestExternalSpeakerEncoder:
    """Speaker-encoder initialization tests."""

    def test_plain_state_dict(self, tmp_path, tiny_model_config):
        """A plain torch state dict initializes every tensor."""
        source = ParalinguisticEncoder(80, tiny_model_config)
        path = tmp_path / "speaker.pt"
        torch.save(source.state_dict(), path)

        target = ParalinguisticEncoder(80, tiny_model_config)
        result = load_external_speaker_encoder(path, target)
        assert result["missing"] == []
        assert torch.equal(target.fc.weight, source.fc.weight)

    def test_prefixed_checkpoint(self, tmp_path, tiny_model_config):
        """A project checkpoint with the encoder under a prefix loads after stripping it."""
        source = ParalinguisticEncoder(80, tiny_model_config)
        parameters = {f"speaker.{k}": v for k, v in source.state_dict().items()}
        parameters["classifier.weight"] = torch.zeros(3, 8)
        path = save_checkpoint(tmp_path / "speaker.pt", parameters)

        target = ParalinguisticEncoder(80, tiny_model_config)
        result = load_external_speaker_encoder(path, target, prefix="speaker.")
        assert result["unexpected"] == []
        assert len(result["loaded"]) == len(target.state_dict())
        assert torch.equal(target.conv_in.weight, source.conv_in.weight)

    def test_missing_file(self, tmp_path, tiny_model_config):
        with pytest.raises(DataError):
            load_external_speaker_encoder(tmp_path / "none.pt", ParalinguisticEncoder(80, tiny_model_config))

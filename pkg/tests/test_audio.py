"""
Tests for the audio module.
"""

import subprocess
import numpy as np
import pytest
import soundfile as sf
from unittest.mock import patch

from src.config import DSPConfig
from src.audio import (
    Waveform,
    MelSpectrogram,
    num_frames,
    load_waveform,
    save_waveform,
    mel_spectrogram,
    mel_center_frequencies,
    mel_from_file,
    invert_mel,
    roundtrip_error,
    GriffinLimVocoder,
    ExternalVocoder,
    build_vocoder,
)
from src.cache import cache_stats
from src.errors import AudioIOError, AudioFormatError, LengthError, ParameterError
from tests.conftest import make_sine


class TestWaveform:
    """Waveform validation tests."""

    def test_rejects_out_of_range_amplitude(self):
        """Amplitudes above 1 are refused by the constructor."""
        with pytest.raises(ParameterError):
            Waveform(np.array([0.0, 1.5, 0.0]))

    def test_from_array_clips(self):
        """from_array clips into [-1, 1]."""
        x = Waveform.from_array(np.array([-3.0, 0.25, 2.0]))
        assert x.samples.tolist() == [-1.0, 0.25, 1.0]

    def test_rejects_empty_and_2d(self):
        """Empty and multi-channel arrays are refused."""
        with pytest.raises(LengthError):
            Waveform(np.array([]))
        with pytest.raises(ParameterError):
            Waveform(np.zeros((2, 10)))

    def test_duration(self, sine_440):
        """Duration is samples over rate."""
        assert sine_440.duration == pytest.approx(0.5)


class TestLoadWaveform:
    """WAV loading tests."""

    def test_silence_roundtrip(self, tmp_path):
        """1 s of 16 kHz silence loads as 16000 zero samples."""
        path = save_waveform(Waveform(np.zeros(16000)), tmp_path / "silence.wav")
        x = load_waveform(path)
        assert len(x) == 16000
        assert x.sample_rate == 16000
        assert np.all(x.samples == 0.0)

    def test_stereo_downmix(self, tmp_path):
        """Stereo files are averaged to mono when downmix is on."""
        data = np.stack([np.full(1600, 0.5), np.full(1600, -0.25)], axis=1)
        path = tmp_path / "stereo.wav"
        sf.write(str(path), data, 16000, subtype="PCM_16")

        x = load_waveform(path, DSPConfig(downmix=True))
        assert np.allclose(x.samples, 0.125, atol=1e-4)

    def test_stereo_rejected_without_downmix(self, tmp_path):
        """Stereo files are an error when downmix is off."""
        path = tmp_path / "stereo.wav"
        sf.write(str(path), np.zeros((1600, 2)), 16000, subtype="PCM_16")
        with pytest.raises(AudioFormatError):
            load_waveform(path, DSPConfig(downmix=False))

    def test_resample_8k(self, tmp_path):
        """An 8 kHz file comes back at 16 kHz when resampling is on."""
        path = tmp_path / "narrow.wav"
        sf.write(str(path), make_sine(440.0, 1.0, 0.3, 8000).samples, 8000, subtype="PCM_16")

        x = load_waveform(path)
        assert x.sample_rate == 16000
        assert len(x) == 16000

    def test_wrong_rate_without_resample(self, tmp_path):
        """Rate mismatch is an error when resampling is off."""
        path = tmp_path / "narrow.wav"
        sf.write(str(path), np.zeros(800), 8000, subtype="PCM_16")
        with pytest.raises(AudioFormatError):
            load_waveform(path, DSPConfig(resample=False))

    def test_float_wav_rejected(self, tmp_path):
        """Only 16-bit PCM is accepted."""
        path = tmp_path / "float.wav"
        sf.write(str(path), np.zeros(1600), 16000, subtype="FLOAT")
        with pytest.raises(AudioFormatError):
            load_waveform(path)

    def test_missing_file(self, tmp_path):
        """Missing files raise AudioIOError."""
        with pytest.raises(AudioIOError):
            load_waveform(tmp_path / "nope.wav")


class TestMelSpectrogram:
    """Log-mel analysis tests."""

    def test_frame_count(self):
        """16000 samples, win 1024, hop 256 gives 59 frames."""
        assert num_frames(16000, 1024, 256) == 59
        m = mel_spectrogram(Waveform(np.zeros(16000)))
        assert m.n_frames == 59
        assert m.n_mels == 80

    def test_silence_is_floor(self):
        """Silence maps every entry to the log floor."""
        m = mel_spectrogram(Waveform(np.zeros(4096)))
        assert np.allclose(m.frames, m.log_floor)

    def test_sine_peak_bin(self, sine_440):
        """A 440 Hz tone peaks in the bin whose center is nearest 440 Hz."""
        dsp = DSPConfig()
        m = mel_spectrogram(sine_440, dsp)
        expected = int(np.argmin(np.abs(mel_center_frequencies(dsp) - 440.0)))
        peaks = m.frames.argmax(axis=1)
        assert np.all(np.abs(peaks - expected) <= 1)
        assert np.bincount(peaks).argmax() == expected

    def test_too_short(self):
        """Inputs shorter than one window raise LengthError."""
        with pytest.raises(LengthError):
            mel_spectrogram(Waveform(np.zeros(1000)))

    def test_too_short_reports_fft_size(self):
        """The error names n_fft, the samples one frame needs."""
        dsp = DSPConfig(n_fft=512, win_length=256, hop_length=128)
        with pytest.raises(LengthError, match=r"\(512\)"):
            mel_spectrogram(Waveform(np.zeros(400)), dsp)
        assert mel_spectrogram(Waveform(np.zeros(512)), dsp).n_frames == 1

    def test_rejects_entries_below_floor(self):
        """Entries under log(amplitude_floor) are refused."""
        frames = np.zeros((3, 80))
        frames[1, 4] = np.log(1e-5) - 1.0
        with pytest.raises(ParameterError, match="below the log floor"):
            MelSpectrogram(frames)
        assert MelSpectrogram(np.full((3, 80), np.log(1e-5))).n_frames == 3

    def test_with_frames_keeps_parameters(self, sine_440, small_dsp):
        """with_frames swaps only the matrix."""
        m = mel_spectrogram(sine_440, small_dsp)
        other = m.with_frames(np.zeros((3, small_dsp.n_mels)))
        assert other.n_frames == 3
        assert other.hop_length == small_dsp.hop_length


class TestMelFromFile:
    """Cached analysis tests."""

    def test_cached_second_call(self, wav_file):
        """The second analysis of the same file is served from the cache."""
        first = mel_from_file(wav_file)
        second = mel_from_file(wav_file)
        assert second is first
        assert cache_stats()["valid_entries"] == 1

    def test_dsp_change_misses_cache(self, wav_file, small_dsp):
        """A different analysis setting is a different cache entry."""
        mel_from_file(wav_file)
        m = mel_from_file(wav_file, small_dsp)
        assert m.n_mels == small_dsp.n_mels
        assert cache_stats()["valid_entries"] == 2


class TestInvertMel:
    """Griffin-Lim inversion tests."""

    def test_sine_peak_preserved(self, sine_440):
        """Reconstruction of a 440 Hz tone peaks within one mel bin of the original."""
        dsp = DSPConfig()
        m = mel_spectrogram(sine_440, dsp)
        y = invert_mel(m, n_iters=60, seed=0)
        assert len(y) == dsp.n_fft + dsp.hop_length * (m.n_frames - 1)

        original = np.bincount(m.frames.argmax(axis=1)).argmax()
        rebuilt = np.bincount(mel_spectrogram(y, dsp).frames.argmax(axis=1)).argmax()
        assert abs(int(original) - int(rebuilt)) <= 1

    def test_floor_is_silent(self):
        """An all-floor mel inverts to near silence."""
        m = MelSpectrogram(np.full((20, 80), np.log(1e-5)))
        y = invert_mel(m, n_iters=10)
        assert np.sqrt(np.mean(y.samples ** 2)) < 1e-3

    def test_invalid_iterations(self, sine_440):
        """n_iters must be positive."""
        with pytest.raises(ParameterError):
            invert_mel(mel_spectrogram(sine_440), n_iters=0)

    def test_roundtrip_within_tolerance(self):
        """Re-analysing the inversion of broadband noise stays within the configured tolerance."""
        dsp = DSPConfig()
        noise = np.random.default_rng(0).normal(0.0, 0.1, 8000)
        m = mel_spectrogram(Waveform.from_array(noise), dsp)
        assert roundtrip_error(m, dsp) <= dsp.roundtrip_tolerance

    def test_roundtrip_warns_over_tolerance(self, sine_440, small_dsp, caplog):
        """An error above the tolerance is logged as a warning."""
        strict = DSPConfig(n_fft=256, win_length=256, hop_length=64, n_mels=20,
                           griffin_lim_iters=2, roundtrip_tolerance=1e-9)
        error = roundtrip_error(mel_spectrogram(sine_440, small_dsp), strict)
        assert error > 0.0
        assert "exceeds tolerance" in caplog.text

    def test_seed_determinism(self, sine_440, small_dsp):
        """Same seed, same waveform."""
        m = mel_spectrogram(sine_440, small_dsp)
        a = invert_mel(m, n_iters=5, seed=3)
        b = invert_mel(m, n_iters=5, seed=3)
        assert np.array_equal(a.samples, b.samples)


class TestVocoders:
    """Vocoder interface tests."""

    def test_build_default_is_griffin_lim(self):
        """Without the external flag the bundled vocoder is used."""
        vocoder = build_vocoder(DSPConfig(griffin_lim_iters=7))
        assert isinstance(vocoder, GriffinLimVocoder)
        assert vocoder.n_iters == 7

    def test_external_requires_placeholders(self):
        """The command template must name both files."""
        with pytest.raises(ParameterError):
            ExternalVocoder("vocode --in {mel}")

    def test_external_exchange(self, sine_440):
        """The external command receives the mel path and its WAV is read back."""
        m = mel_spectrogram(sine_440)

        def fake_run(args, **kwargs):
            assert np.load(args[1]).shape == m.frames.shape
            save_waveform(Waveform(np.full(1600, 0.1)), args[2])

        with patch("src.audio.subprocess.run", side_effect=fake_run) as mock_run:
            y = ExternalVocoder("vocode {mel} {wav}")(m)

        mock_run.assert_called_once()
        assert len(y) == 1600

    def test_external_timeout(self, sine_440):
        """A hung vocoder surfaces as AudioIOError."""
        with patch("src.audio.subprocess.run", side_effect=subprocess.TimeoutExpired("vocode", 1)):
            with pytest.raises(AudioIOError):
                ExternalVocoder("vocode {mel} {wav}", timeout=1)(mel_spectrogram(sine_440))

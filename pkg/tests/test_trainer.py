"""
Tests for the trainer module.
"""

import numpy as np
import pandas as pd
import pytest
import torch
from unittest.mock import patch

from src.config import TrainConfig, DSPConfig
from src.quantizer import UnitSequence
from src.model import EmoAugModel, load_model
from src.trainer import (
    TrainingExample,
    lr_at,
    sampling_probability,
    reconstruction_loss,
    load_examples,
    collate,
    bucket_batches,
    split_validation,
    build_optimizer,
    fit,
    finetune,
)
from src.errors import ContractError, DataError, DivergenceError

N_MELS = 6


def synthetic_examples(n: int = 8, seed: int = 0) -> list[TrainingExample]:
    rng = np.random.default_rng(seed)
    examples = []
    for i in range(n):
        n_units = 3 + i % 3
        units = tuple(int(u) for u in (np.arange(n_units) * 3 + i) % 20)
        mel = rng.normal(size=(6 + i % 5, N_MELS)).astype(np.float32)
        examples.append(TrainingExample(f"utt{i:02d}", units, mel))
    return examples


@pytest.fixture
def model(tiny_model_config):
    torch.manual_seed(0)
    return EmoAugModel(20, N_MELS, tiny_model_config)


class TestSchedules:
    """Learning-rate and sampling schedule tests."""

    def test_step_decay(self):
        """At iteration 12000 the main rate is 1e-3 * 0.9^2."""
        cfg = TrainConfig()
        assert lr_at(12000, cfg) == pytest.approx(8.1e-4)
        assert lr_at(12000, cfg, "paralinguistic") == pytest.approx(8.1e-5)

    def test_rate_constant_within_interval(self):
        cfg = TrainConfig()
        assert lr_at(0, cfg) == lr_at(4999, cfg) == 1e-3
        assert lr_at(5000, cfg) == pytest.approx(9e-4)

    def test_invalid_arguments(self):
        with pytest.raises(ContractError):
            lr_at(-1, TrainConfig())
        with pytest.raises(ContractError):
            lr_at(0, TrainConfig(), "decoder")

    def test_sampling_ramp(self):
        """Scheduled sampling ramps linearly and then holds its maximum."""
        cfg = TrainConfig()
        assert sampling_probability(0, cfg) == 0.0
        assert sampling_probability(25000, cfg) == pytest.approx(0.15)
        assert sampling_probability(100000, cfg) == pytest.approx(0.3)


class TestReconstructionLoss:
    """Masked MSE and gate loss tests."""

    def test_mean_squared_error(self):
        """Squared errors 1 and 4 over four entries average to 5/4."""
        predicted = torch.zeros(2, 2)
        target = torch.tensor([[1.0, 2.0], [0.0, 0.0]])
        loss = reconstruction_loss(predicted, target)
        assert loss.mse.item() == pytest.approx(1.25)
        assert loss.total.item() == pytest.approx(1.25)

    def test_padded_frames_ignored(self):
        """Garbage in padded frames does not change the loss."""
        target = torch.zeros(1, 3, 2)
        predicted = torch.tensor([[[1.0, 1.0], [1.0, 1.0], [100.0, -100.0]]])
        mask = torch.tensor([[1.0, 1.0, 0.0]])
        assert reconstruction_loss(predicted, target, mask=mask).mse.item() == pytest.approx(1.0)

    def test_gate_term(self):
        """The gate BCE is added with its weight."""
        predicted = target = torch.zeros(1, 2, 2)
        logits = torch.zeros(1, 2)
        gate_target = torch.tensor([[0.0, 1.0]])
        loss = reconstruction_loss(predicted, target, logits, gate_target, gate_pos_weight=1.0, gate_weight=2.0)
        assert loss.gate.item() == pytest.approx(np.log(2.0), rel=1e-5)
        assert loss.total.item() == pytest.approx(2 * np.log(2.0), rel=1e-5)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            reconstruction_loss(torch.zeros(3, 2), torch.zeros(4, 2))


class TestData:
    """Batching and splitting tests."""

    def test_collate_masks_and_gate(self):
        """Gate targets switch on at each item's last valid frame."""
        batch = collate([
            TrainingExample("a", (1, 2), np.ones((3, N_MELS), dtype=np.float32)),
            TrainingExample("b", (4, 5, 6), np.ones((5, N_MELS), dtype=np.float32)),
        ])
        assert batch.units.tolist() == [[1, 2, 0], [4, 5, 6]]
        assert batch.mask.tolist() == [[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]]
        assert batch.gate_target.tolist() == [[0, 0, 1, 1, 1], [0, 0, 0, 0, 1]]
        assert torch.all(batch.mels[0, 3:] == 0)

    def test_collate_empty(self):
        with pytest.raises(DataError):
            collate([])

    def test_bucket_batches_cover_all(self):
        """Every example lands in exactly one batch."""
        examples = synthetic_examples(10)
        batches = bucket_batches(examples, batch_size=4, seed=1)
        ids = [u for b in batches for u in b.utt_ids]
        assert sorted(ids) == sorted(e.utt_id for e in examples)
        assert [len(b.utt_ids) for b in sorted(batches, key=lambda b: len(b.utt_ids))] == [2, 4, 4]

    def test_split_fallback(self):
        """200 items with val_size 1000 hold out 10%."""
        train, val = split_validation(range(200), val_size=1000)
        assert len(val) == 20
        assert len(train) == 180
        assert set(train) | set(val) == set(range(200))
        assert not set(train) & set(val)

    def test_split_fixed_size(self):
        train, val = split_validation(range(50), val_size=5, seed=2)
        assert len(val) == 5
        assert split_validation(range(50), val_size=5, seed=2) == (train, val)

    def test_split_exact_size_falls_back(self, caplog):
        """A corpus of exactly val_size items keeps most of it for training."""
        train, val = split_validation(range(10), val_size=10)
        assert len(val) == 1
        assert len(train) == 9
        assert "not larger than val_size=10" in caplog.text
        train, val = split_validation(range(11), val_size=10)
        assert (len(train), len(val)) == (1, 10)

    def test_split_too_small(self):
        with pytest.raises(DataError):
            split_validation([1], val_size=1)

    def test_load_examples(self, tone_corpus):
        """Records get mel frames; those without units are skipped."""
        manifest, records = tone_corpus
        units = {r.utt_id: UnitSequence((1, 1, 2), k=10) for r in records[:3]}
        examples = load_examples(records, units, DSPConfig(), manifest)
        assert [e.utt_id for e in examples] == [r.utt_id for r in records[:3]]
        assert examples[0].units == (1, 2)
        assert examples[0].mel.shape[1] == 80


class TestOptimizer:
    """Two-group optimizer tests."""

    def test_two_named_groups(self, model):
        optimizer = build_optimizer(model, TrainConfig())
        assert [g["name"] for g in optimizer.param_groups] == ["main", "paralinguistic"]
        assert [g["lr"] for g in optimizer.param_groups] == [1e-3, 1e-4]

    def test_flat_rate(self, model):
        optimizer = build_optimizer(model, TrainConfig(), flat_lr=1e-5)
        assert {g["lr"] for g in optimizer.param_groups} == {1e-5}


class TestFit:
    """Training loop tests."""

    def test_fit_writes_checkpoint_and_curve(self, model, tiny_train_config, tmp_path):
        """A short run leaves a loadable best checkpoint and one curve row per epoch."""
        examples = synthetic_examples(8)
        state = fit(model, examples[:6], examples[6:], tiny_train_config,
                    checkpoint_path=tmp_path / "best.pt", curve_path=tmp_path / "curve.csv",
                    meta={"seed": 0})
        assert state.iteration > 0
        assert state.best_epoch >= 0
        curve = pd.read_csv(tmp_path / "curve.csv")
        assert len(curve) == state.epoch
        assert {"train_loss", "val_loss", "lr_main", "lr_paralinguistic"} <= set(curve.columns)

        loaded, meta = load_model(tmp_path / "best.pt", device="cpu")
        assert meta["seed"] == 0
        assert meta["train_state"]["best_epoch"] == state.best_epoch

    def test_early_stop(self, model, tiny_train_config):
        """Validation that only gets worse stops after patience epochs."""
        tiny_train_config.early_stop_patience = 1
        examples = synthetic_examples(6)
        with patch("src.trainer.evaluate_loss", side_effect=[1.0, 2.0, 3.0, 4.0]):
            state = fit(model, examples[:4], examples[4:], tiny_train_config, max_epochs=4)
        assert state.stopped_early
        assert state.best_epoch == 0
        assert state.epoch == 2

    def test_divergence_saves_last_good(self, model, tiny_train_config, tmp_path):
        """A non-finite loss writes the rescue checkpoint and propagates."""
        with patch("src.trainer.train_step", side_effect=DivergenceError("non-finite loss")):
            with pytest.raises(DivergenceError):
                fit(model, synthetic_examples(4), [], tiny_train_config, checkpoint_path=tmp_path / "best.pt")
        assert (tmp_path / "best.pt.diverged").exists()
        assert not (tmp_path / "best.pt").exists()

    def test_no_training_data(self, model, tiny_train_config):
        with pytest.raises(DataError):
            fit(model, [], [], tiny_train_config)


class TestFinetune:
    """Fine-tuning tests."""

    def test_flat_finetune_rate(self, model, tiny_train_config):
        """Both groups run at the fine-tuning rate."""
        state = finetune(model, synthetic_examples(8), tiny_train_config, max_epochs=1)
        assert state.lrs == {"main": 1e-5, "paralinguistic": 1e-5}

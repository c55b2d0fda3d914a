"""
Tests for the SER harness module.
"""

import json

import numpy as np
import pandas as pd
import pytest
import torch

from src.config import DSPConfig, SERConfig
from src.manifest import AugmentedRecord, index_by_id
from src.ser import (
    ConfusionMatrix,
    FoldSpec,
    FoldResult,
    confusion_matrix,
    compute_metrics,
    make_folds,
    corpus_sessions,
    leakage_guard,
    build_feature_fn,
    SERClassifier,
    train_classifier,
    predict,
    cross_validate,
    recall_deltas,
    report,
    write_predictions,
    results_from_predictions,
    induce_imbalance,
    subset_augmentation,
    augmentation_sweep,
)
from src.errors import ConfigError, DataError


def labelled(angry_correct=8, angry_total=10, happy_correct=15, happy_total=30):
    y_true = ["angry"] * angry_total + ["happy"] * happy_total
    y_pred = (["angry"] * angry_correct + ["sad"] * (angry_total - angry_correct)
              + ["happy"] * happy_correct + ["neutral"] * (happy_total - happy_correct))
    return y_true, y_pred


def aug_row(out_id, source, session=3, ref=None, method="emoaug", index=0, emotion="angry", path="x.wav"):
    return AugmentedRecord(out_id, path, "spk00", emotion, session, source, ref_id=ref,
                           method=method, aug_index=index)


class TestMetrics:
    """WA/UA and confusion matrix tests."""

    def test_weighted_and_unweighted(self):
        """8/10 and 15/30 correct give WA 0.575 and UA 0.65."""
        m = compute_metrics(*labelled())
        assert m["wa"] == pytest.approx(0.575)
        assert m["ua"] == pytest.approx(0.65)
        assert m["ua_partial"]

    def test_row_sums_are_support(self):
        cm = confusion_matrix(*labelled())
        assert cm.support.tolist() == [10, 30, 0, 0]
        assert cm.total == 40

    def test_absent_class_recall_is_nan(self):
        recalls = confusion_matrix(*labelled()).recalls
        assert np.isnan(recalls[2]) and np.isnan(recalls[3])

    def test_full_split_not_partial(self):
        y = ["angry", "happy", "neutral", "sad"]
        m = compute_metrics(y, y)
        assert m["wa"] == m["ua"] == 1.0
        assert not m["ua_partial"]

    def test_empty_and_mismatch(self):
        with pytest.raises(DataError):
            compute_metrics([], [])
        with pytest.raises(DataError):
            compute_metrics(["sad"], [])

    def test_sum_of_matrices(self):
        a = confusion_matrix(["sad"], ["sad"])
        b = confusion_matrix(["sad"], ["happy"])
        assert (a + b).counts[3].tolist() == [0, 1, 0, 1]

    def test_invalid_counts(self):
        with pytest.raises(DataError):
            ConfusionMatrix(np.zeros((3, 3)))
        with pytest.raises(DataError):
            ConfusionMatrix(-np.eye(4))


class TestFolds:
    """Leave-one-session-out fold tests."""

    def test_five_folds(self):
        """Each fold tests one session and validates on the next."""
        folds = make_folds([1, 2, 3, 4, 5])
        assert folds[0] == FoldSpec(test=1, val=2, train=(3, 4, 5))
        assert folds[4] == FoldSpec(test=5, val=1, train=(2, 3, 4))
        for f in folds:
            assert len({f.test, f.val, *f.train}) == 5

    def test_every_session_tested_once(self):
        assert sorted(f.test for f in make_folds([1, 2, 3, 4, 5])) == [1, 2, 3, 4, 5]

    def test_wrong_session_count(self):
        with pytest.raises(ConfigError):
            make_folds([1, 2, 3, 4])
        with pytest.raises(ConfigError):
            make_folds([1, 2, 3, 4, 4])

    def test_corpus_sessions(self, corpus_records):
        assert corpus_sessions(corpus_records) == [1, 2, 3]


class TestLeakageGuard:
    """Augmentation leakage tests."""

    def test_drops_rows_from_held_out_sessions(self, corpus_records):
        """Rows whose content comes from test or validation sessions are dropped."""
        corpus = index_by_id(corpus_records)
        fold = FoldSpec(test=1, val=2, train=(3, 4, 5))
        rows = [
            aug_row("a", "spk00_angry_002"),                                       # session 3
            aug_row("b", "spk00_angry_000"),                                       # session 1
            aug_row("c", "spk00_angry_001"),                                       # session 2
            aug_row("d", "spk00_angry_002", ref="spk00_angry_000", method="copypaste"),
            aug_row("e", "missing_utt"),
        ]
        kept, dropped = leakage_guard(rows, fold, corpus)
        assert [r.out_id for r in kept] == ["a"]
        assert [r.out_id for r in dropped] == ["b", "c", "d", "e"]


class TestClassifier:
    """Classifier training tests."""

    def test_pooling_ignores_padding(self):
        """Padded frames do not change the pooled representation."""
        torch.manual_seed(0)
        clf = SERClassifier(3, 4)
        frames = torch.randn(1, 5, 3)
        padded = torch.cat([frames, torch.full((1, 3, 3), 50.0)], dim=1)
        a = clf.pooled(frames, torch.tensor([5]))
        b = clf.pooled(padded, torch.tensor([5]))
        assert torch.allclose(a, b)

    def test_frozen_backbone_unchanged(self, tone_corpus, tiny_ser_config, caplog):
        """With a frozen backbone only the head moves, and the random projection is flagged."""
        manifest, records = tone_corpus
        tiny_ser_config.freeze_backbone = True
        features, dim = build_feature_fn(tiny_ser_config, DSPConfig(), manifest)
        fold = make_folds(corpus_sessions(records))[0]

        torch.manual_seed(tiny_ser_config.seed)
        initial = SERClassifier(dim, tiny_ser_config.backbone_dim)
        clf = train_classifier(records, features, dim, fold, tiny_ser_config)
        assert torch.equal(clf.model.backbone[0].weight, initial.backbone[0].weight)
        assert not torch.equal(clf.model.head.weight, initial.head.weight)
        assert clf.train_size == 12
        assert "random projection" in caplog.text

    def test_unfrozen_backbone_moves(self, tone_corpus, tiny_ser_config):
        """The backbone trains by default."""
        manifest, records = tone_corpus
        assert tiny_ser_config.freeze_backbone is False
        features, dim = build_feature_fn(tiny_ser_config, DSPConfig(), manifest)
        fold = make_folds(corpus_sessions(records))[0]

        torch.manual_seed(tiny_ser_config.seed)
        initial = SERClassifier(dim, tiny_ser_config.backbone_dim)
        clf = train_classifier(records, features, dim, fold, tiny_ser_config)
        assert not torch.equal(clf.model.backbone[0].weight, initial.backbone[0].weight)

    def test_augmented_rows_counted(self, tone_corpus, tiny_ser_config):
        """Guarded augmentation joins the training rows."""
        manifest, records = tone_corpus
        features, dim = build_feature_fn(tiny_ser_config, DSPConfig(), manifest)
        fold = make_folds(corpus_sessions(records))[0]
        aug = [aug_row(f"{r.utt_id}__aug000", r.utt_id, r.session, emotion=r.emotion, path=r.path)
               for r in records]
        clf = train_classifier(records, features, dim, fold, tiny_ser_config, aug)
        assert clf.n_augmented == 12
        assert clf.n_dropped == 8

    def test_file_features(self, tmp_path, tone_corpus, tiny_ser_config):
        """External features are read per utterance id."""
        _, records = tone_corpus
        for r in records:
            np.save(tmp_path / f"{r.utt_id}.npy", np.full((4, 6), float(r.session)))
        cfg = SERConfig(feature_source="file", feature_dir=str(tmp_path), feature_dim=6)
        features, dim = build_feature_fn(cfg, DSPConfig(), tmp_path / "manifest.jsonl")
        assert dim == 6
        assert features(records[0]).shape == (4, 6)

    def test_predict_labels(self, tone_corpus, tiny_ser_config):
        manifest, records = tone_corpus
        features, dim = build_feature_fn(tiny_ser_config, DSPConfig(), manifest)
        preds = predict(SERClassifier(dim, 8), records[:3], features)
        assert len(preds) == 3
        assert set(preds) <= {"angry", "happy", "neutral", "sad"}


class TestCrossValidation:
    """Five-fold evaluation and reporting tests."""

    def test_cross_validate_and_report(self, tmp_path, tone_corpus, tiny_ser_config):
        """All five folds run; the report and predictions round-trip."""
        manifest, records = tone_corpus
        features, dim = build_feature_fn(tiny_ser_config, DSPConfig(), manifest)
        results = cross_validate(records, features, dim, tiny_ser_config)
        assert [r.fold.test for r in results] == [1, 2, 3, 4, 5]
        assert all(r.confusion.total == 4 for r in results)

        summary = report(results, tmp_path / "report", run_info={"command": "ser-train"})
        assert summary["n_folds"] == 5
        assert summary["wa_mean"] == pytest.approx(np.mean([r.wa for r in results]))
        assert sum(map(sum, summary["confusion"])) == 20
        for name in ("folds.csv", "confusion.csv", "confusion.png", "run_report.json"):
            assert (tmp_path / "report" / name).exists()
        assert json.loads((tmp_path / "report" / "run_report.json").read_text())["command"] == "ser-train"

        rebuilt = results_from_predictions(write_predictions(results, tmp_path / "predictions.csv"))
        assert [r.wa for r in rebuilt] == pytest.approx([r.wa for r in results])

    def test_mean_over_folds(self, tmp_path):
        """Fold WAs 0.70, 0.71, 0.69, 0.72, 0.70 average to 0.704."""
        results = []
        for i, wa in enumerate([0.70, 0.71, 0.69, 0.72, 0.70]):
            cm = confusion_matrix(["sad"], ["sad"])
            results.append(FoldResult(FoldSpec(i + 1, (i + 1) % 5 + 1, ()), wa, wa, cm, 0, 0))
        summary = report(results, tmp_path)
        assert summary["wa_mean"] == pytest.approx(0.704)

    def test_recall_deltas(self, tmp_path):
        """A baseline run adds per-class recall changes."""
        base = confusion_matrix(["angry", "angry", "sad", "sad"], ["angry", "sad", "sad", "sad"])
        aug = confusion_matrix(["angry", "angry", "sad", "sad"], ["angry", "angry", "sad", "happy"])
        deltas = recall_deltas(base, aug).set_index("class")
        assert deltas.loc["angry", "delta"] == pytest.approx(0.5)
        assert deltas.loc["sad", "delta"] == pytest.approx(-0.5)

        results = [FoldResult(FoldSpec(1, 2, ()), 0.75, 0.75, aug, 0, 0)]
        summary = report(results, tmp_path, baseline=base)
        assert len(summary["recall_deltas"]) == 4
        assert (tmp_path / "recall_deltas.csv").exists()

    def test_empty_report(self, tmp_path):
        with pytest.raises(DataError):
            report([], tmp_path)


class TestAugmentationSweep:
    """Imbalance and sweep tests."""

    def test_induce_imbalance(self, corpus_records):
        subset = induce_imbalance(corpus_records, {"angry": 0.5}, seed=0)
        counts = pd.Series([r.emotion for r in subset]).value_counts()
        assert counts["angry"] == 3
        assert counts["sad"] == 4

    def test_invalid_fraction(self, corpus_records):
        with pytest.raises(DataError):
            induce_imbalance(corpus_records, {"angry": 1.5})

    def test_subset_by_index(self):
        rows = [aug_row(f"o{i}", "u", index=i % 4) for i in range(8)]
        assert len(subset_augmentation(rows, 2)) == 4
        assert subset_augmentation(rows, 0) == []

    def test_subset_leaves_out_balancing_rows(self):
        """Balancing rows start at index 0 in a balance-only manifest but belong to no n-times run."""
        regular = [aug_row(f"o{i}", "u", index=i) for i in range(2)]
        extra = AugmentedRecord("b0", "b.wav", "spk00", "sad", 3, "v", aug_index=0, balancing=True)
        rows = regular + [extra]
        assert subset_augmentation(rows, 1) == regular[:1]
        assert subset_augmentation(rows, 2) == regular
        assert subset_augmentation(rows, 0, balance=True) == [extra]
        assert subset_augmentation(rows, 2, balance=True) == rows

    def test_sweep_table(self, tmp_path, tone_corpus, tiny_ser_config):
        """One row per n with the minority-class recall."""
        manifest, records = tone_corpus
        subset = induce_imbalance(records, {"sad": 0.6}, seed=0)
        features, dim = build_feature_fn(tiny_ser_config, DSPConfig(), manifest)
        aug = [aug_row(f"{r.utt_id}__aug{j:03d}", r.utt_id, r.session, index=j, emotion=r.emotion, path=r.path)
               for r in subset for j in range(2)]
        table = augmentation_sweep(subset, aug, features, dim, tiny_ser_config, ns=[0, 2],
                                   out_path=tmp_path / "sweep.csv")
        assert table["n"].tolist() == [0, 2]
        assert set(table["minority_class"]) == {"sad"}
        assert table["minority_recall"].between(0.0, 1.0).all()
        assert (tmp_path / "sweep.csv").exists()

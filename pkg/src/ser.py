"""
SER harness module.
Leave-one-session-out folds, the pooled-feature classifier with two
learning-rate groups, WA/UA metrics, reports and the augmentation sweep.
"""

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
from torch import nn
from torch.nn import functional as F
from sklearn.metrics import confusion_matrix as sk_confusion_matrix

from .config import EMOTIONS, SERConfig, DSPConfig
from .audio import mel_from_file
from .quantizer import FileFeatureExtractor
from .manifest import UtteranceRecord, AugmentedRecord, index_by_id, resolve_path
from .layers import linear
from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

N_SESSIONS = 5


# =============================================================================
# METRICS
# =============================================================================

@dataclass(eq=False)
class ConfusionMatrix:
    """C x C counts, rows = true class, columns = predicted, class order fixed."""
    counts: np.ndarray
    classes: tuple = EMOTIONS

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        c = len(self.classes)
        if self.counts.shape != (c, c):
            raise DataError(f"confusion matrix must be {c}x{c}, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise DataError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def present(self) -> np.ndarray:
        return self.support > 0

    @property
    def recalls(self) -> np.ndarray:
        """Per-class recall; NaN for classes absent from the split."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.present, np.diag(self.counts) / np.maximum(self.support, 1), np.nan)

    @property
    def wa(self) -> float:
        if self.total == 0:
            raise DataError("empty confusion matrix")
        return float(np.trace(self.counts) / self.total)

    @property
    def ua(self) -> float:
        if self.total == 0:
            raise DataError("empty confusion matrix")
        return float(np.nanmean(self.recalls))

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts, self.classes)


def confusion_matrix(y_true: Sequence, y_pred: Sequence, classes: tuple = EMOTIONS) -> ConfusionMatrix:
    """Confusion counts from label sequences (class names or indices)."""
    index = {c: i for i, c in enumerate(classes)}
    t = [index.get(y, y) for y in y_true]
    p = [index.get(y, y) for y in y_pred]
    counts = sk_confusion_matrix(t, p, labels=list(range(len(classes))))
    return ConfusionMatrix(counts, classes)


def compute_metrics(y_true: Sequence, y_pred: Sequence, classes: tuple = EMOTIONS) -> dict:
    """
    WA, UA and the confusion matrix of one split.

    UA averages recall over the classes present; ``ua_partial`` flags a
    split missing some class.

    Raises:
        DataError: Empty split or length mismatch
    """
    if len(y_true) == 0:
        raise DataError("cannot evaluate an empty split")
    if len(y_true) != len(y_pred):
        raise DataError(f"{len(y_true)} labels but {len(y_pred)} predictions")
    cm = confusion_matrix(y_true, y_pred, classes)
    partial = not bool(cm.present.all())
    if partial:
        missing = [c for c, p in zip(classes, cm.present) if not p]
        logger.warning(f"UA computed over present classes only; missing {missing}")
    return {"wa": cm.wa, "ua": cm.ua, "confusion": cm, "ua_partial": partial}


# =============================================================================
# FOLDS
# =============================================================================

@dataclass(frozen=True)
class FoldSpec:
    """Test session, validation session and the three training sessions."""
    test: int
    val: int
    train: tuple


def make_folds(sessions: Sequence[int]) -> list[FoldSpec]:
    """
    Leave-one-session-out folds: fold i tests session i and validates on
    the next session (cyclically); the other three train.

    Raises:
        ConfigError: Not exactly 5 distinct sessions
    """
    ordered = list(sessions)
    if len(ordered) != N_SESSIONS or len(set(ordered)) != N_SESSIONS:
        raise ConfigError(f"need exactly {N_SESSIONS} distinct sessions, got {ordered}", "sessions")
    folds = []
    for i, test in enumerate(ordered):
        val = ordered[(i + 1) % N_SESSIONS]
        folds.append(FoldSpec(test=test, val=val, train=tuple(s for s in ordered if s not in (test, val))))
    return folds


def corpus_sessions(records: Sequence[UtteranceRecord]) -> list[int]:
    return sorted({r.session for r in records})


def leakage_guard(aug_records: Sequence[AugmentedRecord], fold: FoldSpec,
                  corpus: dict[str, UtteranceRecord]) -> tuple[list, list]:
    """
    Keep augmented rows whose content comes only from the fold's train sessions.

    Returns:
        (kept, dropped)
    """
    train = set(fold.train)
    kept, dropped = [], []
    for row in aug_records:
        sources = [corpus.get(i) for i in row.content_ids]
        if all(s is not None and s.session in train for s in sources):
            kept.append(row)
        else:
            dropped.append(row)
    if dropped:
        logger.warning(f"Fold test={fold.test}: leakage guard dropped {len(dropped)} augmented rows")
    return kept, dropped


# =============================================================================
# FEATURES
# =============================================================================

FeatureFn = Callable[[Union[UtteranceRecord, AugmentedRecord]], np.ndarray]


def build_feature_fn(cfg: SERConfig, dsp: DSPConfig, corpus_manifest: Union[str, Path]) -> tuple[FeatureFn, int]:
    """
    Frame-level representation source.

    "mel" uses the bundled log-mel frames; "file" reads external
    self-supervised features named after each row's id.

    Returns:
        (record -> (frames x dim) matrix, dim)
    """
    if cfg.feature_source == "file":
        fe = FileFeatureExtractor(cfg.feature_dir, cfg.feature_dim)
        return (lambda r: fe.extract(key=r.utt_id)), cfg.feature_dim

    def mel_frames(r) -> np.ndarray:
        return mel_from_file(resolve_path(r.path, corpus_manifest), dsp).frames

    return mel_frames, dsp.n_mels


# =============================================================================
# CLASSIFIER
# =============================================================================

class SERClassifier(nn.Module):
    """
    Frame-wise backbone projection, masked temporal mean pooling, one FC head.

    Input frames are standardized with statistics of the training split.
    """

    def __init__(self, feature_dim: int, backbone_dim: int = 256, n_classes: int = len(EMOTIONS)):
        super().__init__()
        self.register_buffer("feature_mean", torch.zeros(feature_dim))
        self.register_buffer("feature_std", torch.ones(feature_dim))
        self.backbone = nn.Sequential(linear(feature_dim, backbone_dim), nn.ReLU())
        self.head = linear(backbone_dim, n_classes)

    def pooled(self, frames: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        x = self.backbone((frames - self.feature_mean) / self.feature_std)
        mask = (torch.arange(frames.shape[1])[None, :] < lengths[:, None]).unsqueeze(-1).to(x.dtype)
        return (x * mask).sum(dim=1) / mask.sum(dim=1)

    def forward(self, frames: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        return self.head(self.pooled(frames, lengths))


@dataclass
class TrainedClassifier:
    model: SERClassifier
    fold: FoldSpec
    train_size: int
    n_augmented: int
    n_dropped: int
    best_epoch: int
    history: list = field(default_factory=list)


def _pad(matrices: Sequence[np.ndarray]) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([m.shape[0] for m in matrices], dtype=torch.long)
    out = torch.zeros(len(matrices), int(lengths.max()), matrices[0].shape[1])
    for i, m in enumerate(matrices):
        out[i, :m.shape[0]] = torch.from_numpy(np.asarray(m, dtype=np.float32))
    return out, lengths


def _labels(rows: Sequence) -> torch.Tensor:
    return torch.tensor([EMOTIONS.index(r.emotion) for r in rows], dtype=torch.long)


def predict(clf: Union[TrainedClassifier, SERClassifier], rows: Sequence, features: FeatureFn,
            batch_size: int = 64) -> list[str]:
    """Predicted emotion names for the rows."""
    model = clf.model if isinstance(clf, TrainedClassifier) else clf
    model.eval()
    preds = []
    with torch.no_grad():
        for start in range(0, len(rows), batch_size):
            frames, lengths = _pad([features(r) for r in rows[start:start + batch_size]])
            preds.extend(model(frames, lengths).argmax(dim=1).tolist())
    return [EMOTIONS[p] for p in preds]


def train_classifier(
    records: Sequence[UtteranceRecord],
    features: FeatureFn,
    feature_dim: int,
    fold: FoldSpec,
    cfg: SERConfig,
    aug_records: Optional[Sequence[AugmentedRecord]] = None,
) -> TrainedClassifier:
    """
    Train the classifier on the fold's train sessions (plus guarded augmentation).

    The backbone gets backbone_lr unless frozen, the head gets head_lr;
    the epoch with the best validation UA is kept.

    Returns:
        TrainedClassifier
    """
    corpus = index_by_id(records)
    train_rows = [r for r in records if r.session in fold.train]
    val_rows = [r for r in records if r.session == fold.val]
    kept, dropped = leakage_guard(aug_records or [], fold, corpus)
    train_rows = train_rows + kept
    if not train_rows:
        raise DataError(f"fold test={fold.test}: no training rows")

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = SERClassifier(feature_dim, cfg.backbone_dim)

    train_feats = [features(r) for r in train_rows]
    stacked = np.concatenate(train_feats, axis=0)
    model.feature_mean.copy_(torch.from_numpy(stacked.mean(axis=0).astype(np.float32)))
    model.feature_std.copy_(torch.from_numpy(np.maximum(stacked.std(axis=0), 1e-5).astype(np.float32)))
    labels = _labels(train_rows)

    groups = [{"params": model.head.parameters(), "lr": cfg.head_lr, "name": "head"}]
    if cfg.freeze_backbone:
        logger.warning("Backbone frozen without pretrained weights; it stays a random projection")
        for p in model.backbone.parameters():
            p.requires_grad_(False)
    else:
        groups.append({"params": model.backbone.parameters(), "lr": cfg.backbone_lr, "name": "backbone"})
    optimizer = torch.optim.Adam(groups)

    best_ua, best_epoch, best_state = -1.0, -1, copy.deepcopy(model.state_dict())
    history = []
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(len(train_rows))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            frames, lengths = _pad([train_feats[i] for i in idx])
            loss = F.cross_entropy(model(frames, lengths), labels[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss))

        val_ua = None
        if val_rows:
            val_ua = compute_metrics([r.emotion for r in val_rows], predict(model, val_rows, features))["ua"]
        score = val_ua if val_ua is not None else -float(np.mean(losses))
        if score > best_ua:
            best_ua, best_epoch, best_state = score, epoch, copy.deepcopy(model.state_dict())
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_ua": val_ua})

    model.load_state_dict(best_state)
    logger.info(f"Fold test={fold.test}: {len(train_rows)} train rows ({len(kept)} augmented), "
                f"best epoch {best_epoch}")
    return TrainedClassifier(model, fold, len(train_rows), len(kept), len(dropped), best_epoch, history)


def evaluate(clf: TrainedClassifier, rows: Sequence, features: FeatureFn) -> dict:
    """WA, UA and confusion matrix on a split."""
    if not rows:
        raise DataError("cannot evaluate an empty split")
    preds = predict(clf, rows, features)
    metrics = compute_metrics([r.emotion for r in rows], preds)
    metrics["predictions"] = [(r.utt_id, r.emotion, p) for r, p in zip(rows, preds)]
    return metrics


@dataclass
class FoldResult:
    fold: FoldSpec
    wa: float
    ua: float
    confusion: ConfusionMatrix
    train_size: int
    n_augmented: int
    predictions: list = field(default_factory=list)


def cross_validate(records: Sequence[UtteranceRecord], features: FeatureFn, feature_dim: int, cfg: SERConfig,
                   aug_records: Optional[Sequence[AugmentedRecord]] = None) -> list[FoldResult]:
    """Train and test all five leave-one-session-out folds."""
    results = []
    for fold in make_folds(corpus_sessions(records)):
        clf = train_classifier(records, features, feature_dim, fold, cfg, aug_records)
        test_rows = [r for r in records if r.session == fold.test]
        m = evaluate(clf, test_rows, features)
        results.append(FoldResult(fold, m["wa"], m["ua"], m["confusion"], clf.train_size,
                                  clf.n_augmented, m["predictions"]))
        logger.info(f"Fold test={fold.test}: WA {m['wa']:.4f}, UA {m['ua']:.4f}")
    return results


# =============================================================================
# REPORTING
# =============================================================================

def recall_deltas(baseline: ConfusionMatrix, augmented: ConfusionMatrix) -> pd.DataFrame:
    """Per-class recall of two runs and the change."""
    return pd.DataFrame({
        "class": list(baseline.classes),
        "baseline_recall": baseline.recalls,
        "augmented_recall": augmented.recalls,
        "delta": augmented.recalls - baseline.recalls,
    })


def save_confusion(cm: ConfusionMatrix, path: Union[str, Path], title: str = "") -> tuple[Path, Path]:
    """Write a confusion matrix as CSV and as a heatmap PNG."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    csv_path, png_path = path.with_suffix(".csv"), path.with_suffix(".png")
    pd.DataFrame(cm.counts, index=list(cm.classes), columns=list(cm.classes)).to_csv(csv_path)

    rates = cm.counts / np.maximum(cm.support[:, None], 1)
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(rates, cmap="Blues", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(len(cm.classes)), labels=list(cm.classes))
    ax.set_yticks(range(len(cm.classes)), labels=list(cm.classes))
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(len(cm.classes)):
        for j in range(len(cm.classes)):
            ax.text(j, i, f"{rates[i, j]:.1%}", ha="center", va="center", fontsize=8)
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(png_path)
    plt.close(fig)
    return csv_path, png_path


def report(results: Sequence[FoldResult], out_dir: Union[str, Path],
           baseline: Optional[ConfusionMatrix] = None, run_info: Optional[dict] = None) -> dict:
    """
    Per-fold and mean WA/UA, aggregate confusion matrix, optional recall deltas.

    Writes folds.csv, confusion.csv/png, recall_deltas.csv (with a baseline)
    and run_report.json into out_dir.

    Returns:
        Summary dict
    """
    if not results:
        raise DataError("no fold results to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    folds = pd.DataFrame([{"test_session": r.fold.test, "val_session": r.fold.val, "wa": r.wa, "ua": r.ua,
                           "train_size": r.train_size, "n_augmented": r.n_augmented} for r in results])
    folds.to_csv(out_dir / "folds.csv", index=False)

    aggregate = results[0].confusion
    for r in results[1:]:
        aggregate = aggregate + r.confusion
    save_confusion(aggregate, out_dir / "confusion")

    summary = {
        "n_folds": len(results),
        "wa_mean": float(folds["wa"].mean()),
        "ua_mean": float(folds["ua"].mean()),
        "wa_per_fold": folds["wa"].tolist(),
        "ua_per_fold": folds["ua"].tolist(),
        "confusion": aggregate.counts.tolist(),
        "recalls": dict(zip(aggregate.classes, [None if np.isnan(v) else float(v) for v in aggregate.recalls])),
    }
    if baseline is not None:
        deltas = recall_deltas(baseline, aggregate)
        deltas.to_csv(out_dir / "recall_deltas.csv", index=False)
        summary["recall_deltas"] = deltas.to_dict(orient="records")

    (out_dir / "run_report.json").write_text(json.dumps({**(run_info or {}), "summary": summary}, indent=2))
    logger.info(f"SER report: WA {summary['wa_mean']:.4f}, UA {summary['ua_mean']:.4f} over {len(results)} folds")
    return summary


def write_predictions(results: Sequence[FoldResult], path: Union[str, Path]) -> Path:
    """One CSV row per test utterance: fold, utt_id, true, predicted."""
    rows = [{"test_session": r.fold.test, "val_session": r.fold.val, "utt_id": u, "true": t, "pred": p}
            for r in results for (u, t, p) in r.predictions]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows).to_csv(path, index=False)
    return path


def results_from_predictions(path: Union[str, Path]) -> list[FoldResult]:
    """Rebuild fold results (metrics and confusion) from a predictions CSV."""
    df = pd.read_csv(path)
    if df.empty:
        raise DataError(f"{path}: no predictions")
    results = []
    for (test, val), group in df.groupby(["test_session", "val_session"], sort=True):
        m = compute_metrics(group["true"].tolist(), group["pred"].tolist())
        fold = FoldSpec(int(test), int(val), ())
        results.append(FoldResult(fold, m["wa"], m["ua"], m["confusion"], 0, 0,
                                  list(zip(group["utt_id"], group["true"], group["pred"]))))
    return results


# =============================================================================
# AUGMENTATION SWEEP
# =============================================================================

def induce_imbalance(records: Sequence[UtteranceRecord], keep: dict[str, float], seed: int = 0) -> list:
    """
    Subsample classes to create imbalance.

    Args:
        records: Corpus
        keep: emotion -> fraction kept (missing emotions are kept whole)
        seed: Sampling seed

    Returns:
        Subset in the original order
    """
    rng = np.random.default_rng(seed)
    dropped = set()
    for emotion, fraction in keep.items():
        if not 0.0 <= fraction <= 1.0:
            raise DataError(f"keep fraction for {emotion} must be in [0, 1]")
        ids = [r.utt_id for r in records if r.emotion == emotion]
        n_drop = len(ids) - int(round(len(ids) * fraction))
        dropped.update(rng.choice(ids, size=n_drop, replace=False).tolist() if n_drop else [])
    return [r for r in records if r.utt_id not in dropped]


def subset_augmentation(aug_records: Sequence[AugmentedRecord], n: int,
                        balance: bool = False) -> list[AugmentedRecord]:
    """
    Rows of an N-times manifest that an n-times run (n <= N) would contain.

    Args:
        aug_records: Rows of the largest-N manifest
        n: Augmentation times to keep
        balance: Keep the class-balancing rows as well

    Returns:
        Regular rows with aug_index < n, plus balancing rows when requested
    """
    return [r for r in aug_records if (balance if r.balancing else r.aug_index < n)]


def augmentation_sweep(
    records: Sequence[UtteranceRecord],
    aug_records: Sequence[AugmentedRecord],
    features: FeatureFn,
    feature_dim: int,
    cfg: SERConfig,
    ns: Optional[Sequence[int]] = None,
    out_path: Optional[Union[str, Path]] = None,
    balance: bool = False,
) -> pd.DataFrame:
    """
    Cross-validated WA/UA and minority-class recall for several augmentation times.

    The rows for each n are taken from one largest-n manifest by aug index.
    Class-balancing rows are left out unless ``balance`` is set.

    Returns:
        DataFrame with n, wa_mean, ua_mean, minority_class, minority_recall
    """
    ns = list(ns if ns is not None else cfg.sweep_ns)
    counts = {e: sum(1 for r in records if r.emotion == e) for e in EMOTIONS}
    present = {e: c for e, c in counts.items() if c > 0}
    minority = min(present, key=present.get)
    minority_idx = EMOTIONS.index(minority)

    rows = []
    for n in ns:
        results = cross_validate(records, features, feature_dim, cfg, subset_augmentation(aug_records, n, balance))
        aggregate = results[0].confusion
        for r in results[1:]:
            aggregate = aggregate + r.confusion
        rows.append({
            "n": n,
            "wa_mean": float(np.mean([r.wa for r in results])),
            "ua_mean": float(np.mean([r.ua for r in results])),
            "minority_class": minority,
            "minority_recall": float(aggregate.recalls[minority_idx]),
        })
        logger.info(f"Sweep n={n}: UA {rows[-1]['ua_mean']:.4f}")

    table = pd.DataFrame(rows)
    if out_path:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(out_path, index=False)
    return table

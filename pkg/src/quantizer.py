"""
Unit quantizer module.
Maps waveforms to frame features, fits/applies a K-means codebook and
collapses repeated units into content sequences.
"""

import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence, Union

import numpy as np
from sklearn.cluster import kmeans_plusplus

from .config import DSPConfig, QuantizerConfig, CODEBOOK_FORMAT_VERSION, CACHE_TTL_FEATURES
from .audio import Waveform, mel_spectrogram
from .cache import cache_get, cache_set, feature_key
from .errors import ConfigError, ContractError, DataError

logger = logging.getLogger(__name__)

# Upper bound on elements of the (frames x k x dim) difference tensor per chunk
_ASSIGN_CHUNK_ELEMENTS = 4_000_000


# =============================================================================
# FEATURE EXTRACTORS
# =============================================================================

class FeatureExtractor(Protocol):
    """Frame-level feature front-end feeding the codebook."""
    frame_rate: float
    dim: int

    def extract(self, x: Waveform, key: Optional[str] = None) -> np.ndarray:
        """Return a (frames x dim) matrix for one utterance."""
        ...


class MelFeatureExtractor:
    """
    Default front-end: log-mel frames from the audio module.

    Args:
        dsp: Analysis parameters
        frame_norm: Subtract each frame's mean log energy so that pure gain
            changes leave the features unchanged
    """

    def __init__(self, dsp: Optional[DSPConfig] = None, frame_norm: bool = False):
        self.dsp = dsp or DSPConfig()
        self.frame_norm = frame_norm

    @property
    def dim(self) -> int:
        return self.dsp.n_mels

    @property
    def frame_rate(self) -> float:
        return self.dsp.sample_rate / self.dsp.hop_length

    def extract(self, x: Waveform, key: Optional[str] = None) -> np.ndarray:
        frames = mel_spectrogram(x, self.dsp).frames.astype(np.float64)
        if self.frame_norm:
            frames = frames - frames.mean(axis=1, keepdims=True)
        return frames


class FileFeatureExtractor:
    """
    Adapter for features computed by an external self-supervised model.

    Reads ``<feature_dir>/<key>.npy`` holding a (frames x dim) matrix.

    Args:
        feature_dir: Directory with one .npy per utterance id
        dim: Expected feature dimension
        frame_rate: Frames per second of the external model
    """

    def __init__(self, feature_dir: Union[str, Path], dim: int, frame_rate: float = 50.0):
        self.feature_dir = Path(feature_dir)
        self.dim = dim
        self.frame_rate = frame_rate

    def extract(self, x: Optional[Waveform] = None, key: Optional[str] = None) -> np.ndarray:
        if key is None:
            raise DataError("file features need an utterance id")
        path = self.feature_dir / f"{key}.npy"
        if not path.exists():
            raise DataError(f"feature file not found: {path}")

        cache_key = feature_key(path, "npy")
        cached = cache_get(cache_key)
        if cached is not None:
            return cached

        frames = np.load(path).astype(np.float64)
        if frames.ndim != 2 or frames.shape[1] != self.dim:
            raise DataError(f"{path}: expected (frames x {self.dim}), got {frames.shape}")
        cache_set(cache_key, frames, CACHE_TTL_FEATURES)
        return frames


def build_feature_extractor(qcfg: QuantizerConfig, dsp: DSPConfig) -> FeatureExtractor:
    """Front-end named by the quantizer config."""
    if qcfg.feature_source == "file":
        return FileFeatureExtractor(qcfg.feature_dir, qcfg.feature_dim, qcfg.frame_rate or 50.0)
    return MelFeatureExtractor(dsp, frame_norm=qcfg.frame_norm)


# =============================================================================
# TYPES
# =============================================================================

@dataclass(frozen=True)
class UnitSequence:
    """Cluster labels of one utterance, raw or with repeats collapsed."""
    units: tuple
    k: int
    deduped: bool = False

    def __post_init__(self):
        units = tuple(int(u) for u in self.units)
        if any(u < 0 or u >= self.k for u in units):
            raise ContractError(f"unit labels must lie in [0, {self.k})")
        if self.deduped and any(a == b for a, b in zip(units, units[1:])):
            raise ContractError("deduped sequence has adjacent repeats")
        object.__setattr__(self, "units", units)

    def __len__(self) -> int:
        return len(self.units)

    def to_list(self) -> list[int]:
        return list(self.units)


@dataclass(eq=False)
class KMeansCodebook:
    """k x dim centroid matrix plus fit provenance."""
    centroids: np.ndarray
    seed: int = 0
    inertia_history: list = field(default_factory=list)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2:
            raise DataError(f"centroids must be 2-D, got shape {self.centroids.shape}")
        if self.k < 2:
            raise DataError(f"codebook needs k >= 2, got {self.k}")
        if not np.all(np.isfinite(self.centroids)):
            raise DataError("codebook contains non-finite centroids")
        if len(np.unique(self.centroids, axis=0)) != self.k:
            raise DataError("codebook contains identical centroids")

    @property
    def k(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.centroids.shape[1])


# =============================================================================
# K-MEANS
# =============================================================================

def nearest_centroids(frames: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Brute-force Euclidean nearest centroid for every frame.

    Ties resolve to the lowest centroid index.

    Args:
        frames: (n x dim) features
        centroids: (k x dim) centroids

    Returns:
        (labels, squared distances) both of length n
    """
    frames = np.asarray(frames, dtype=np.float64)
    k, dim = centroids.shape
    chunk = max(1, _ASSIGN_CHUNK_ELEMENTS // max(1, k * dim))

    labels = np.empty(len(frames), dtype=np.int64)
    dists = np.empty(len(frames), dtype=np.float64)
    for start in range(0, len(frames), chunk):
        block = frames[start:start + chunk]
        d2 = ((block[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
        idx = np.argmin(d2, axis=1)
        labels[start:start + chunk] = idx
        dists[start:start + chunk] = d2[np.arange(len(block)), idx]
    return labels, dists


def fit_codebook(
    features: Union[np.ndarray, Sequence[np.ndarray]],
    k: int = 200,
    seed: int = 0,
    max_iters: int = 100,
    tol: float = 1e-4,
    max_frames: Optional[int] = None,
) -> KMeansCodebook:
    """
    Fit a K-means codebook with k-means++ seeding and Lloyd iterations.

    Args:
        features: (n x dim) matrix or a list of per-utterance matrices
        k: Number of clusters
        seed: Random seed (init and sub-sampling)
        max_iters: Lloyd iteration cap
        tol: Stop once the largest centroid shift is below this
        max_frames: Sub-sample to at most this many frames

    Returns:
        KMeansCodebook with the inertia recorded after every assignment step

    Raises:
        DataError: Fewer distinct frames than k
    """
    if isinstance(features, np.ndarray):
        frames = np.asarray(features, dtype=np.float64)
    else:
        frames = np.concatenate([np.asarray(f, dtype=np.float64) for f in features], axis=0)
    if frames.ndim != 2:
        raise DataError(f"features must be 2-D, got shape {frames.shape}")

    if max_frames and len(frames) > max_frames:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(frames), size=max_frames, replace=False))
        logger.info(f"Sub-sampling {len(frames)} frames to {max_frames}")
        frames = frames[keep]

    n_distinct = len(np.unique(frames, axis=0))
    if n_distinct < k:
        raise DataError(f"need at least k={k} distinct frames, got {n_distinct}")

    centroids, _ = kmeans_plusplus(frames, n_clusters=k, random_state=seed)
    centroids = centroids.astype(np.float64)

    history = []
    for iteration in range(max_iters):
        labels, d2 = nearest_centroids(frames, centroids)
        history.append(float(d2.sum()))

        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, frames)
        updated = centroids.copy()
        filled = counts > 0
        # Empty clusters keep their previous centroid
        updated[filled] = sums[filled] / counts[filled, None]

        shift = float(np.sqrt(((updated - centroids) ** 2).sum(axis=1)).max())
        centroids = updated
        if shift < tol:
            logger.info(f"K-means converged after {iteration + 1} iterations (shift {shift:.2e})")
            break
    else:
        logger.info(f"K-means stopped at max_iters={max_iters}")

    _, d2 = nearest_centroids(frames, centroids)
    history.append(float(d2.sum()))
    return KMeansCodebook(centroids=centroids, seed=seed, inertia_history=history)


def fit_codebook_from_config(features: Sequence[np.ndarray], qcfg: QuantizerConfig) -> KMeansCodebook:
    """fit_codebook with every knob taken from the quantizer config."""
    return fit_codebook(features, k=qcfg.k, seed=qcfg.seed, max_iters=qcfg.max_iters,
                        tol=qcfg.tol, max_frames=qcfg.max_frames)


# =============================================================================
# QUANTIZATION
# =============================================================================

def quantize(
    x: Optional[Waveform],
    fe: FeatureExtractor,
    cb: KMeansCodebook,
    key: Optional[str] = None,
) -> UnitSequence:
    """
    Label every feature frame with its nearest centroid.

    Args:
        x: Input waveform (may be None for file features)
        fe: Feature front-end
        cb: Fitted codebook
        key: Utterance id, required by file-backed extractors

    Returns:
        Raw (not deduplicated) UnitSequence

    Raises:
        ConfigError: Front-end and codebook dimensions differ
    """
    if fe.dim != cb.feature_dim:
        raise ConfigError(f"feature dim {fe.dim} != codebook dim {cb.feature_dim}", "quantizer.feature_dim")
    return quantize_frames(fe.extract(x, key=key), cb)


def quantize_frames(frames: np.ndarray, cb: KMeansCodebook) -> UnitSequence:
    """Quantize an already extracted feature matrix."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != cb.feature_dim:
        raise ConfigError(f"feature shape {frames.shape} does not match codebook dim {cb.feature_dim}",
                          "quantizer.feature_dim")
    labels, _ = nearest_centroids(frames, cb.centroids)
    return UnitSequence(units=tuple(labels.tolist()), k=cb.k, deduped=False)


def deduplicate(u: UnitSequence) -> UnitSequence:
    """
    Collapse runs of identical adjacent labels, dropping tempo information.

    An already deduplicated sequence is returned unchanged.

    Args:
        u: Unit sequence

    Returns:
        Deduplicated UnitSequence in the original order
    """
    if u.deduped:
        return u
    collapsed = tuple(label for label, _ in itertools.groupby(u.units))
    return UnitSequence(units=collapsed, k=u.k, deduped=True)


def unit_recovery_accuracy(reference: Sequence[int], hypothesis: Sequence[int]) -> float:
    """
    1 - edit distance / len(reference), clipped at 0.

    Args:
        reference: Expected unit labels
        hypothesis: Recovered unit labels

    Returns:
        Accuracy in [0, 1]; 1.0 when both are empty
    """
    ref = list(reference)
    hyp = list(hypothesis)
    if not ref:
        return 1.0 if not hyp else 0.0

    # Levenshtein distance, one row at a time
    previous = np.arange(len(hyp) + 1)
    for i, r in enumerate(ref, 1):
        current = np.empty_like(previous)
        current[0] = i
        for j, h in enumerate(hyp, 1):
            current[j] = min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + (r != h))
        previous = current
    return max(0.0, 1.0 - float(previous[-1]) / len(ref))


# =============================================================================
# PERSISTENCE
# =============================================================================

def save_codebook(cb: KMeansCodebook, path: Union[str, Path]) -> Path:
    """
    Save a codebook as .npz with a (version, k, dim, seed) header.

    Args:
        cb: Codebook
        path: Destination (".npz" is appended by numpy if missing)

    Returns:
        Path written
    """
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_suffix(".npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    header = np.array([CODEBOOK_FORMAT_VERSION, cb.k, cb.feature_dim, cb.seed], dtype=np.int64)
    np.savez(path, header=header, centroids=cb.centroids, inertia=np.asarray(cb.inertia_history))
    logger.info(f"Saved codebook k={cb.k} dim={cb.feature_dim} to {path}")
    return path


def load_codebook(path: Union[str, Path]) -> KMeansCodebook:
    """Load a codebook written by save_codebook."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"codebook not found: {path}")
    with np.load(path) as data:
        version, k, dim, seed = (int(v) for v in data["header"])
        if version != CODEBOOK_FORMAT_VERSION:
            raise DataError(f"{path}: unsupported codebook format version {version}")
        centroids = data["centroids"]
        inertia = data["inertia"].tolist()
    if centroids.shape != (k, dim):
        raise DataError(f"{path}: header says ({k}, {dim}) but centroids are {centroids.shape}")
    return KMeansCodebook(centroids=centroids, seed=seed, inertia_history=inertia)

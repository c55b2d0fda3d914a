"""
Manifest module for corpus and augmented-corpus records.
Line-delimited JSON files with a versioned header line, plus the unit store.
"""

import json
import logging
import threading
from dataclasses import dataclass, asdict, fields
from pathlib import Path
from typing import Iterable, Optional, Union

from .config import EMOTIONS, MANIFEST_FORMAT_VERSION
from .quantizer import UnitSequence
from .errors import DataError

logger = logging.getLogger(__name__)

HEADER_KEY = "_header"


# =============================================================================
# RECORDS
# =============================================================================

@dataclass(frozen=True)
class UtteranceRecord:
    """One corpus utterance with its labels."""
    utt_id: str
    path: str
    speaker: str
    emotion: str
    session: int
    duration: float = 0.0

    def __post_init__(self):
        if self.emotion not in EMOTIONS:
            raise DataError(f"{self.utt_id}: unknown emotion {self.emotion!r}")


@dataclass(frozen=True)
class AugmentedRecord:
    """
    One generated utterance.

    Speaker, emotion and session are inherited from the source. For
    copypaste rows ``ref_id`` is the second concatenated utterance.
    ``balancing`` marks rows generated to fill a class quota.
    """
    out_id: str
    path: str
    speaker: str
    emotion: str
    session: int
    source_id: str
    ref_id: Optional[str] = None
    method: str = "emoaug"
    aug_index: int = 0
    truncated: bool = False
    duration: float = 0.0
    balancing: bool = False

    def __post_init__(self):
        if self.emotion not in EMOTIONS:
            raise DataError(f"{self.out_id}: unknown emotion {self.emotion!r}")

    @property
    def utt_id(self) -> str:
        return self.out_id

    @property
    def content_ids(self) -> tuple:
        """Corpus utterances whose content ends up in this row."""
        if self.method == "copypaste" and self.ref_id:
            return (self.source_id, self.ref_id)
        return (self.source_id,)


# =============================================================================
# JSONL I/O
# =============================================================================

def manifest_header(kind: str, config_hash: Optional[str] = None, seed: Optional[int] = None, **extra) -> dict:
    """Header line embedded at the top of every manifest."""
    header = {"format_version": MANIFEST_FORMAT_VERSION, "kind": kind,
              "config_hash": config_hash, "seed": seed}
    header.update(extra)
    return header


def _dump(row: dict) -> str:
    return json.dumps(row, sort_keys=True, ensure_ascii=False)


def write_manifest(path: Union[str, Path], records: Iterable, header: Optional[dict] = None) -> Path:
    """
    Write records (dataclasses or dicts) as JSON lines under a header line.

    Args:
        path: Destination .jsonl
        records: Rows to write, in order
        header: Header dict (see manifest_header)

    Returns:
        Path written
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(_dump({HEADER_KEY: header or manifest_header("records")}) + "\n")
        for record in records:
            f.write(_dump(asdict(record) if hasattr(record, "__dataclass_fields__") else record) + "\n")
    return path


def read_rows(path: Union[str, Path]) -> tuple[list[dict], dict]:
    """
    Read raw rows and the header of a manifest.

    Returns:
        (rows, header); header is {} for header-less files
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    rows, header = [], {}
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{line_no}: invalid JSON ({e})")
            if HEADER_KEY in row:
                header = row[HEADER_KEY]
                version = header.get("format_version")
                if version != MANIFEST_FORMAT_VERSION:
                    raise DataError(f"{path}: unsupported manifest format version {version}")
                continue
            rows.append(row)
    return rows, header


def _build(cls: type, row: dict, path: Path):
    names = {f.name for f in fields(cls)}
    try:
        return cls(**{k: v for k, v in row.items() if k in names})
    except TypeError as e:
        raise DataError(f"{path}: malformed {cls.__name__} row {row}: {e}")


def read_corpus(path: Union[str, Path]) -> list[UtteranceRecord]:
    """
    Load a corpus manifest.

    Raises:
        DataError: Missing fields, unknown emotion or duplicate utt_id
    """
    rows, _ = read_rows(path)
    records = [_build(UtteranceRecord, row, Path(path)) for row in rows]
    seen = set()
    for r in records:
        if r.utt_id in seen:
            raise DataError(f"{path}: duplicate utt_id {r.utt_id}")
        seen.add(r.utt_id)
    return records


def read_augmented(path: Union[str, Path]) -> list[AugmentedRecord]:
    """Load an augmented-corpus manifest."""
    rows, _ = read_rows(path)
    return [_build(AugmentedRecord, row, Path(path)) for row in rows]


class ManifestWriter:
    """
    Append-only manifest writer; appends from several threads are serialized.

    Usage:
        with ManifestWriter(path, header) as writer:
            writer.append(record)
    """

    def __init__(self, path: Union[str, Path], header: Optional[dict] = None):
        self.path = Path(path)
        self.header = header or manifest_header("records")
        self._lock = threading.Lock()
        self._file = None
        self.count = 0

    def __enter__(self) -> "ManifestWriter":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(self.path, "w", encoding="utf-8")
        self._file.write(_dump({HEADER_KEY: self.header}) + "\n")
        return self

    def append(self, record) -> None:
        line = _dump(asdict(record) if hasattr(record, "__dataclass_fields__") else record)
        with self._lock:
            self._file.write(line + "\n")
            self.count += 1

    def __exit__(self, *exc) -> None:
        self._file.close()
        self._file = None


# =============================================================================
# CORPUS HELPERS
# =============================================================================

def index_by_id(records: Iterable) -> dict:
    """utt_id -> record."""
    return {r.utt_id: r for r in records}


def class_counts(records: Iterable) -> dict[str, int]:
    """Per-emotion counts in the fixed class order."""
    counts = {e: 0 for e in EMOTIONS}
    for r in records:
        counts[r.emotion] += 1
    return counts


def resolve_path(record_path: str, manifest_path: Union[str, Path]) -> Path:
    """Record paths are relative to the manifest's directory unless absolute."""
    p = Path(record_path)
    return p if p.is_absolute() else Path(manifest_path).parent / p


# =============================================================================
# UNIT STORE
# =============================================================================

def write_units(path: Union[str, Path], units: dict[str, UnitSequence], header: Optional[dict] = None) -> Path:
    """Write utt_id -> UnitSequence as JSON lines."""
    rows = [{"utt_id": utt_id, "units": u.to_list(), "k": u.k, "deduped": u.deduped}
            for utt_id, u in units.items()]
    return write_manifest(path, rows, header or manifest_header("units"))


def read_units(path: Union[str, Path]) -> dict[str, UnitSequence]:
    """Load a unit store written by write_units."""
    rows, _ = read_rows(path)
    try:
        return {row["utt_id"]: UnitSequence(tuple(row["units"]), int(row["k"]), bool(row["deduped"]))
                for row in rows}
    except KeyError as e:
        raise DataError(f"{path}: unit row missing field {e}")

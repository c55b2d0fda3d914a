"""
Tests for the manifest module.
"""

import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import pytest

from src.quantizer import UnitSequence
from src.manifest import (
    HEADER_KEY,
    UtteranceRecord,
    AugmentedRecord,
    manifest_header,
    write_manifest,
    read_rows,
    read_corpus,
    read_augmented,
    ManifestWriter,
    class_counts,
    resolve_path,
    write_units,
    read_units,
)
from src.errors import DataError


class TestRecords:
    """Record validation tests."""

    def test_unknown_emotion(self):
        with pytest.raises(DataError):
            UtteranceRecord("u1", "u1.wav", "spk00", "bored", 1)

    def test_content_ids(self):
        """Copypaste rows carry both concatenated utterances; style transfer only the source."""
        emoaug = AugmentedRecord("o1", "o1.wav", "spk00", "sad", 1, "u1", ref_id="u2")
        paste = AugmentedRecord("o2", "o2.wav", "spk00", "sad", 1, "u1", ref_id="u3", method="copypaste")
        assert emoaug.content_ids == ("u1",)
        assert paste.content_ids == ("u1", "u3")
        assert paste.utt_id == "o2"


class TestManifestIO:
    """JSON lines manifest tests."""

    def test_corpus_roundtrip(self, tmp_path, corpus_records):
        """Written records and header read back unchanged."""
        header = manifest_header("corpus", config_hash="abc", seed=3)
        path = write_manifest(tmp_path / "manifest.jsonl", corpus_records, header)
        assert read_corpus(path) == corpus_records
        _, read_header = read_rows(path)
        assert read_header == header

    def test_header_is_first_line(self, tmp_path, corpus_records):
        path = write_manifest(tmp_path / "m.jsonl", corpus_records[:1])
        first = json.loads(path.read_text().splitlines()[0])
        assert HEADER_KEY in first

    def test_duplicate_ids(self, tmp_path):
        record = UtteranceRecord("u1", "u1.wav", "spk00", "sad", 1)
        path = write_manifest(tmp_path / "m.jsonl", [record, record])
        with pytest.raises(DataError):
            read_corpus(path)

    def test_unknown_emotion_in_file(self, tmp_path):
        path = write_manifest(tmp_path / "m.jsonl", [{"utt_id": "u1", "path": "u1.wav", "speaker": "s",
                                                      "emotion": "bored", "session": 1}])
        with pytest.raises(DataError):
            read_corpus(path)

    def test_missing_field(self, tmp_path):
        path = write_manifest(tmp_path / "m.jsonl", [{"utt_id": "u1", "emotion": "sad"}])
        with pytest.raises(DataError):
            read_corpus(path)

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text(json.dumps({HEADER_KEY: {"format_version": 99}}) + "\n")
        with pytest.raises(DataError):
            read_rows(path)

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text("{not json\n")
        with pytest.raises(DataError):
            read_rows(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            read_rows(tmp_path / "none.jsonl")


class TestManifestWriter:
    """Serialized append tests."""

    def test_concurrent_appends(self, tmp_path):
        """Appends from several threads all land as whole lines."""
        records = [AugmentedRecord(f"o{i}", f"o{i}.wav", "spk00", "happy", 1, "u1", ref_id="u2", aug_index=i)
                   for i in range(50)]
        path = tmp_path / "aug.jsonl"
        with ManifestWriter(path, manifest_header("augmented")) as writer:
            with ThreadPoolExecutor(max_workers=4) as pool:
                list(pool.map(writer.append, records))
        assert writer.count == 50
        loaded = read_augmented(path)
        assert sorted(r.aug_index for r in loaded) == list(range(50))


class TestHelpers:
    """Corpus helper tests."""

    def test_class_counts(self, corpus_records):
        """Counts come back in the fixed class order."""
        counts = class_counts(corpus_records)
        assert list(counts) == ["angry", "happy", "neutral", "sad"]
        assert counts == {"angry": 6, "happy": 6, "neutral": 6, "sad": 4}

    def test_resolve_path(self, tmp_path):
        manifest = tmp_path / "data" / "manifest.jsonl"
        assert resolve_path("wavs/a.wav", manifest) == tmp_path / "data" / "wavs" / "a.wav"
        assert resolve_path("/abs/a.wav", manifest) == Path("/abs/a.wav")

    def test_units_roundtrip(self, tmp_path):
        units = {"u1": UnitSequence((3, 1, 3), k=10, deduped=True), "u2": UnitSequence((2, 2), k=10)}
        path = write_units(tmp_path / "units.jsonl", units)
        assert read_units(path) == units

    def test_units_missing_field(self, tmp_path):
        path = write_manifest(tmp_path / "units.jsonl", [{"utt_id": "u1", "units": [1]}])
        with pytest.raises(DataError):
            read_units(path)

"""On-disk formats: JSON-lines corpus + manifest, and versioned checkpoints."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .sequence_model import N_FEATURES, N_FRAMES, FeatureSegment, ModelConfig, ModelParams
from .structured import DEFAULT_VOCAB, SLOTS, EventTuple, SlotVocabulary

CHECKPOINT_FORMAT = "hoicrf-checkpoint"
CHECKPOINT_VERSION = 1
TRAIN_FILE, TEST_FILE, MANIFEST_FILE = "train.jsonl", "test.jsonl", "manifest.json"


class SchemaError(ValueError):
    """A corpus or segment file does not follow the expected layout."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}".strip())
        self.line = line
        self.path = path


class VersionError(ValueError):
    """Checkpoint was written by an unsupported format version."""


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# segments


def segment_record(seg: FeatureSegment, vocab: SlotVocabulary = DEFAULT_VOCAB) -> dict:
    rec = {
        "session_id": seg.session_id,
        "segment_index": seg.segment_index,
        "start_frame": seg.start_frame,
        "frames": seg.frames.tolist(),
    }
    if seg.gold is not None:
        rec["label"] = seg.gold.labels(vocab)
    return rec


def parse_frames(raw, line: int | None = None, path: str | None = None) -> np.ndarray:
    try:
        arr = np.asarray(raw, dtype=np.float64)
    except (TypeError, ValueError):
        raise SchemaError("frames must be a numeric matrix", line, path) from None
    if arr.shape != (N_FRAMES, N_FEATURES):
        raise SchemaError(
            f"frames must be {N_FRAMES}x{N_FEATURES}, got shape {arr.shape}", line, path
        )
    if not np.all(np.isfinite(arr)):
        raise SchemaError("frames contain non-finite values", line, path)
    return arr


def segment_from_record(
    rec, vocab: SlotVocabulary = DEFAULT_VOCAB, line: int | None = None, path: str | None = None
) -> FeatureSegment:
    if not isinstance(rec, dict):
        raise SchemaError("record must be a JSON object", line, path)
    for key in ("session_id", "segment_index", "start_frame", "frames"):
        if key not in rec:
            raise SchemaError(f"missing field {key!r}", line, path)
    frames = parse_frames(rec["frames"], line, path)
    gold = None
    if "label" in rec:
        lab = rec["label"]
        if not isinstance(lab, dict) or set(lab) != set(SLOTS):
            raise SchemaError(f"label must have exactly the fields {list(SLOTS)}", line, path)
        try:
            gold = EventTuple.from_labels(vocab, **lab)
        except ValueError as e:
            raise SchemaError(str(e), line, path) from None
    return FeatureSegment(
        frames, gold, str(rec["session_id"]), int(rec["segment_index"]), int(rec["start_frame"])
    )


def write_jsonl(path: str | Path, segments: Iterable[FeatureSegment], vocab: SlotVocabulary = DEFAULT_VOCAB) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for seg in segments:
            fh.write(dumps(segment_record(seg, vocab)))
            fh.write("\n")


def read_jsonl(path: str | Path, vocab: SlotVocabulary = DEFAULT_VOCAB) -> list[FeatureSegment]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                rec = json.loads(text)
            except json.JSONDecodeError as e:
                raise SchemaError(f"invalid JSON ({e.msg})", lineno, str(path)) from None
            out.append(segment_from_record(rec, vocab, lineno, str(path)))
    return out


def write_corpus(out_dir: str | Path, train, test, manifest: dict, vocab: SlotVocabulary = DEFAULT_VOCAB) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / TRAIN_FILE, train, vocab)
    write_jsonl(out / TEST_FILE, test, vocab)
    manifest = dict(manifest)
    manifest["vocabulary"] = vocab.to_dict()
    manifest["files"] = {
        TRAIN_FILE: sha256_file(out / TRAIN_FILE),
        TEST_FILE: sha256_file(out / TEST_FILE),
    }
    (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_corpus(corpus_dir: str | Path, vocab: SlotVocabulary | None = None):
    """Returns ``(train, test, manifest)``; the manifest's vocabulary wins when present."""
    d = Path(corpus_dir)
    manifest = json.loads((d / MANIFEST_FILE).read_text()) if (d / MANIFEST_FILE).exists() else {}
    if vocab is None:
        vocab = SlotVocabulary.from_dict(manifest["vocabulary"]) if "vocabulary" in manifest else DEFAULT_VOCAB
    train = read_jsonl(d / TRAIN_FILE, vocab) if (d / TRAIN_FILE).exists() else []
    test = read_jsonl(d / TEST_FILE, vocab) if (d / TEST_FILE).exists() else []
    return train, test, manifest


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    variant: str
    vocab: SlotVocabulary
    train_config: dict
    params: ModelParams | None = None
    baseline: dict | None = None  # {"tuple": labels, "frequency": f}


def _tensor_record(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}


def _tensor_from(rec: dict) -> np.ndarray:
    return np.asarray(rec["data"], dtype=np.float64).reshape(rec["shape"])


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "variant": ckpt.variant,
        "vocabulary": ckpt.vocab.to_dict(),
        "config": ckpt.train_config,
    }
    if ckpt.params is not None:
        p = ckpt.params
        doc["model_config"] = vars(p.config).copy()
        doc["params"] = {k: _tensor_record(v) for k, v in p.state().items()}
        if p.input_mean is not None:
            doc["normalizer"] = {"mean": _tensor_record(p.input_mean), "scale": _tensor_record(p.input_scale)}
    if ckpt.baseline is not None:
        doc["baseline"] = ckpt.baseline
    Path(path).write_text(dumps(doc) + "\n")


def load_checkpoint(path: str | Path) -> Checkpoint:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise VersionError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise VersionError(
            f"{path}: checkpoint version {doc.get('version')!r} unsupported (expected {CHECKPOINT_VERSION})"
        )
    vocab = SlotVocabulary.from_dict(doc["vocabulary"])
    params = None
    if "params" in doc:
        cfg = ModelConfig(**doc["model_config"])
        params = ModelParams.from_state(cfg, vocab, {k: _tensor_from(v) for k, v in doc["params"].items()})
        if "normalizer" in doc:
            params.input_mean = _tensor_from(doc["normalizer"]["mean"])
            params.input_scale = _tensor_from(doc["normalizer"]["scale"])
    return Checkpoint(doc["variant"], vocab, doc.get("config", {}), params, doc.get("baseline"))

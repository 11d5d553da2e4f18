"""
File formats: dataset JSON-lines, binary prediction container, training
embeddings, CSV result tables and run manifests.

Dataset (.jsonl)
    line 1: {"format": "rg-dataset", "version": 1, "D": 4096, "cap": 256}
    then one object per instance:
        {"id": str, "true_index": int, "candidates": [base64, ...], "meta": {...}}
    Each candidate is the base64 of ceil(D/8) bytes, bits packed LSB-first.

Predictions (.rgp)
    b"RGPRED01", then u32 LE: count, D, S, flags (bit0 = embeddings), d_h
    per record: u16 LE id length, UTF-8 id, S*D float32 LE (row-major),
    and d_h float32 LE when bit0 is set.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import json
import logging
import os
import struct
import threading
from collections.abc import Mapping
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Union

import numpy as np
import pandas as pd

from .config import (
    DATASET_FORMAT,
    DATASET_VERSION,
    DEFAULT_CANDIDATE_CAP,
    PREDICTION_MAGIC,
    TOOL_NAME,
    TOOL_VERSION,
)
from .errors import DomainError, FormatError, StorageError
from .retrieval import Instance, PredictionBundle, validate_bundle, validate_instance

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

_HEADER = struct.Struct("<8sIIIII")
_ID_LENGTH = struct.Struct("<H")
_FLAG_EMBEDDINGS = 1



# INTERNAL HELPERS


def _require_file(path: PathLike, description: str = "") -> Path:
    """
    Check an input file exists, with a helpful error message if it doesn't.
    """
    path = Path(path)
    if not path.is_file():
        msg = (
            f"Input file not found: {path}\n"
            f"Description: {description}\n\n"
            f"Check the path (or generate test data with the 'simulate' command) and try again."
        )
        raise FileNotFoundError(msg)
    return path


def _load_csv(path: PathLike, description: str = "") -> pd.DataFrame:
    """
    CSV loader with a helpful error message if the file is missing.

    Parameters
    ----------
    path : Path
        Full path to the CSV file.
    description : str
        Short text describing what this file is used for (shown in error).
    """
    return pd.read_csv(_require_file(path, description), float_precision="round_trip")


def _json_default(value: Any):
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")



# FINGERPRINT ENCODING


def encode_fingerprint(bits: np.ndarray) -> str:
    """0/1 vector -> base64 of its LSB-first packed bytes."""
    packed = np.packbits(np.asarray(bits, dtype=np.uint8), bitorder="little")
    return base64.b64encode(packed.tobytes()).decode("ascii")


def decode_fingerprint(text: str, num_bits: int) -> np.ndarray:
    """
    Inverse of encode_fingerprint.

    Raises
    ------
    ValueError
        Bad base64, wrong byte count or padding bits set; the caller adds
        file context.
    """
    try:
        raw = base64.b64decode(text, validate=True)
    except (binascii.Error, TypeError, ValueError):
        raise ValueError("not valid base64")
    expected = (num_bits + 7) // 8
    if len(raw) != expected:
        raise ValueError(f"decodes to {len(raw)} bytes, expected {expected} for D={num_bits}")
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")
    if bits[num_bits:].any():
        raise ValueError(f"padding bits beyond D={num_bits} are set")
    return bits[:num_bits].copy()



# DATASET FILES


def read_dataset_header(path: PathLike) -> Dict[str, int]:
    path = _require_file(path, "Dataset file (JSON lines with candidate fingerprints).")
    with open(path, "r", encoding="utf-8") as handle:
        first = handle.readline()
    return _parse_header(path, first)


def _parse_header(path: Path, line: str) -> Dict[str, int]:
    try:
        header = json.loads(line)
    except json.JSONDecodeError as e:
        raise FormatError(path, f"header is not valid JSON ({e.msg})", line=1)
    if not isinstance(header, dict) or header.get("format") != DATASET_FORMAT:
        raise FormatError(path, f"first line must be a '{DATASET_FORMAT}' header", line=1)
    if header.get("version") != DATASET_VERSION:
        raise FormatError(path, f"unsupported version {header.get('version')!r}", line=1)
    for key in ("D", "cap"):
        value = header.get(key)
        if not isinstance(value, int) or isinstance(value, bool) or value < 1:
            raise FormatError(path, f"header field '{key}' must be a positive integer", line=1)
    return {"D": header["D"], "cap": header["cap"]}


def _parse_instance(path: Path, lineno: int, text: str, num_bits: int, cap: Optional[int]) -> Instance:
    try:
        record = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(path, f"malformed JSON ({e.msg})", line=lineno)
    if not isinstance(record, dict):
        raise FormatError(path, "expected a JSON object", line=lineno)

    instance_id = record.get("id")
    if not isinstance(instance_id, str) or not instance_id:
        raise FormatError(path, "missing or non-string 'id'", line=lineno)

    encoded = record.get("candidates")
    if not isinstance(encoded, list) or not encoded:
        raise FormatError(path, "'candidates' must be a non-empty list", line=lineno, record=instance_id)

    candidates = np.empty((len(encoded), num_bits), dtype=np.uint8)
    for j, text_j in enumerate(encoded):
        if not isinstance(text_j, str):
            raise FormatError(path, f"candidate {j} is not a string", line=lineno, record=instance_id)
        try:
            candidates[j] = decode_fingerprint(text_j, num_bits)
        except ValueError as e:
            raise FormatError(path, f"candidate {j} {e}", line=lineno, record=instance_id)

    true_index = record.get("true_index")
    if not isinstance(true_index, int) or isinstance(true_index, bool):
        raise FormatError(path, "'true_index' must be an integer", line=lineno, record=instance_id)

    meta = record.get("meta", {})
    if meta is None:
        meta = {}
    if not isinstance(meta, dict):
        raise FormatError(path, "'meta' must be an object", line=lineno, record=instance_id)

    instance = Instance(id=instance_id, candidates=candidates, true_index=true_index, meta=meta)
    try:
        validate_instance(instance, num_bits=num_bits, cap=cap)
    except DomainError as e:
        hint = " (use --allow-uncapped to accept)" if cap is not None and len(encoded) > cap else ""
        raise FormatError(path, f"{e}{hint}", line=lineno, record=instance_id)
    return instance


def iter_dataset(
    path: PathLike,
    allow_uncapped: bool = False,
    cap: Optional[int] = None,
) -> Iterator[Instance]:
    """
    Stream instances one line at a time.

    The cap from the header applies unless ``cap`` overrides it or
    ``allow_uncapped`` disables it. Blank lines are skipped.
    """
    path = _require_file(path, "Dataset file (JSON lines with candidate fingerprints).")
    seen = set()
    with open(path, "r", encoding="utf-8") as handle:
        header = _parse_header(path, handle.readline())
        limit = None if allow_uncapped else (cap if cap is not None else header["cap"])
        for lineno, line in enumerate(handle, start=2):
            if not line.strip():
                continue
            instance = _parse_instance(path, lineno, line, header["D"], limit)
            if instance.id in seen:
                raise FormatError(path, "duplicate instance id", line=lineno, record=instance.id)
            seen.add(instance.id)
            yield instance


def load_dataset(path: PathLike, allow_uncapped: bool = False, cap: Optional[int] = None) -> List[Instance]:
    instances = list(iter_dataset(path, allow_uncapped=allow_uncapped, cap=cap))
    logger.info(f"Loaded {len(instances)} instance(s) from {path}.")
    return instances


def write_dataset(
    path: PathLike,
    instances: Iterable[Instance],
    num_bits: int,
    cap: int = DEFAULT_CANDIDATE_CAP,
) -> int:
    """
    Write instances as a dataset file (streaming). Returns the record count.
    """
    path = Path(path)
    header = {"format": DATASET_FORMAT, "version": DATASET_VERSION, "D": int(num_bits), "cap": int(cap)}
    count = 0
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(json.dumps(header, separators=(",", ":")) + "\n")
            for inst in instances:
                validate_instance(inst, num_bits=num_bits, cap=cap)
                record = {
                    "id": inst.id,
                    "true_index": int(inst.true_index),
                    "candidates": [encode_fingerprint(c) for c in inst.candidates],
                    "meta": inst.meta or {},
                }
                handle.write(json.dumps(record, separators=(",", ":"), default=_json_default) + "\n")
                count += 1
    except OSError as e:
        raise StorageError(path, f"cannot write dataset: {e}")
    return count



# PREDICTION FILES


class PredictionWriter:
    """
    Streaming writer for the binary prediction container.

    The record count in the header is patched on close, so bundles can be
    written as they are produced.
    """

    def __init__(self, path: PathLike, num_bits: int, num_samples: int, embedding_dim: int = 0):
        if num_bits < 1 or num_samples < 1 or embedding_dim < 0:
            raise DomainError(
                f"Invalid prediction dimensions D={num_bits}, S={num_samples}, d_h={embedding_dim}."
            )
        self.path = Path(path)
        self.num_bits = int(num_bits)
        self.num_samples = int(num_samples)
        self.embedding_dim = int(embedding_dim)
        self.count = 0
        try:
            self._handle = open(self.path, "wb")
            self._handle.write(self._header())
        except OSError as e:
            raise StorageError(self.path, f"cannot write predictions: {e}")

    def _header(self) -> bytes:
        flags = _FLAG_EMBEDDINGS if self.embedding_dim > 0 else 0
        return _HEADER.pack(
            PREDICTION_MAGIC, self.count, self.num_bits, self.num_samples, flags, self.embedding_dim
        )

    def write(self, bundle: PredictionBundle) -> None:
        validate_bundle(bundle, num_bits=self.num_bits)
        samples = np.asarray(bundle.samples)
        if samples.shape != (self.num_samples, self.num_bits):
            raise DomainError(
                f"Bundle '{bundle.instance_id}' has samples {samples.shape}, "
                f"file expects ({self.num_samples}, {self.num_bits})."
            )
        key = bundle.instance_id.encode("utf-8")
        if len(key) > 0xFFFF:
            raise DomainError(f"Instance id of {len(key)} bytes is too long for the prediction file.")

        parts = [_ID_LENGTH.pack(len(key)), key, samples.astype("<f4").tobytes()]
        if self.embedding_dim > 0:
            if bundle.embedding is None or np.asarray(bundle.embedding).shape != (self.embedding_dim,):
                raise DomainError(
                    f"Bundle '{bundle.instance_id}' needs a length-{self.embedding_dim} embedding."
                )
            parts.append(np.asarray(bundle.embedding).astype("<f4").tobytes())
        try:
            self._handle.write(b"".join(parts))
        except OSError as e:
            raise StorageError(self.path, f"cannot write predictions: {e}")
        self.count += 1

    def close(self) -> None:
        if self._handle.closed:
            return
        try:
            self._handle.seek(0)
            self._handle.write(self._header())
        finally:
            self._handle.close()

    def __enter__(self) -> "PredictionWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def write_predictions(
    path: PathLike,
    bundles: Iterable[PredictionBundle],
    num_bits: Optional[int] = None,
    num_samples: Optional[int] = None,
    embedding_dim: Optional[int] = None,
) -> int:
    """
    Write bundles to a prediction file. Dimensions default to those of the
    first bundle; an empty file needs them given explicitly.
    """
    bundles = list(bundles)
    if bundles:
        first = bundles[0]
        num_bits = first.num_bits if num_bits is None else num_bits
        num_samples = first.num_samples if num_samples is None else num_samples
        if embedding_dim is None:
            embedding_dim = 0 if first.embedding is None else int(np.asarray(first.embedding).shape[0])
    if num_bits is None or num_samples is None:
        raise DomainError("An empty prediction file needs num_bits and num_samples.")

    with PredictionWriter(path, num_bits, num_samples, embedding_dim or 0) as writer:
        for bundle in bundles:
            writer.write(bundle)
    return writer.count


class PredictionReader(Mapping):
    """
    Read-only mapping instance_id -> PredictionBundle over a prediction file.

    Opening scans the file once and keeps only record offsets; bundles are
    read and validated on access. Safe to share between threads.
    """

    def __init__(self, path: PathLike):
        self.path = _require_file(path, "Prediction file (binary posterior samples, RGPRED01).")
        self._lock = threading.Lock()
        try:
            self._handle = open(self.path, "rb")
        except OSError as e:
            raise StorageError(self.path, f"cannot open predictions: {e}")
        try:
            self._read_header()
            self._offsets = self._index()
        except Exception:
            self._handle.close()
            raise

    def _read_header(self) -> None:
        raw = self._handle.read(_HEADER.size)
        if len(raw) < len(PREDICTION_MAGIC) or raw[: len(PREDICTION_MAGIC)] != PREDICTION_MAGIC:
            raise FormatError(self.path, f"bad magic, expected {PREDICTION_MAGIC!r}")
        if len(raw) < _HEADER.size:
            raise FormatError(self.path, "truncated header")
        _, count, num_bits, num_samples, flags, dim = _HEADER.unpack(raw)
        if flags & ~_FLAG_EMBEDDINGS:
            raise FormatError(self.path, f"unknown flag bits {flags:#x}")
        if count and (num_bits < 1 or num_samples < 1):
            raise FormatError(self.path, f"invalid dimensions D={num_bits}, S={num_samples}")
        has_embeddings = bool(flags & _FLAG_EMBEDDINGS)
        if has_embeddings and dim < 1:
            raise FormatError(self.path, "embedding flag set but d_h is 0")

        self.count = count
        self.num_bits = num_bits
        self.num_samples = num_samples
        self.embedding_dim = dim if has_embeddings else 0
        self._payload = 4 * (num_bits * num_samples + self.embedding_dim)

    def _index(self) -> Dict[str, int]:
        size = os.fstat(self._handle.fileno()).st_size
        offsets: Dict[str, int] = {}
        position = _HEADER.size
        for n in range(self.count):
            self._handle.seek(position)
            raw = self._handle.read(_ID_LENGTH.size)
            if len(raw) < _ID_LENGTH.size:
                raise FormatError(self.path, f"truncated: header declares {self.count} records, found {n}")
            (length,) = _ID_LENGTH.unpack(raw)
            key = self._handle.read(length)
            if len(key) < length:
                raise FormatError(self.path, f"truncated inside the id of record {n}")
            try:
                instance_id = key.decode("utf-8")
            except UnicodeDecodeError:
                raise FormatError(self.path, f"record {n} id is not valid UTF-8")
            if instance_id in offsets:
                raise FormatError(self.path, "duplicate record id", record=instance_id)
            start = position + _ID_LENGTH.size + length
            if start + self._payload > size:
                raise FormatError(self.path, "truncated payload", record=instance_id)
            offsets[instance_id] = start
            position = start + self._payload
        if position != size:
            raise FormatError(self.path, f"{size - position} trailing byte(s) after the last record")
        return offsets

    def __getitem__(self, instance_id: str) -> PredictionBundle:
        start = self._offsets[instance_id]
        with self._lock:
            self._handle.seek(start)
            raw = self._handle.read(self._payload)

        values = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        split = self.num_samples * self.num_bits
        samples = values[:split].reshape(self.num_samples, self.num_bits)
        embedding = values[split:] if self.embedding_dim else None
        bundle = PredictionBundle(instance_id=instance_id, samples=samples, embedding=embedding)
        try:
            validate_bundle(bundle, num_bits=self.num_bits)
        except DomainError as e:
            raise FormatError(self.path, str(e), record=instance_id)
        return bundle

    def __iter__(self) -> Iterator[str]:
        return iter(self._offsets)

    def __len__(self) -> int:
        return len(self._offsets)

    def close(self) -> None:
        self._handle.close()

    def __enter__(self) -> "PredictionReader":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def load_predictions(path: PathLike) -> List[PredictionBundle]:
    """Read and validate every bundle, in file order."""
    with PredictionReader(path) as reader:
        bundles = [reader[key] for key in reader]
    logger.info(f"Loaded {len(bundles)} prediction bundle(s) from {path}.")
    return bundles



# TRAINING EMBEDDINGS


def load_train_embeddings(path: PathLike) -> np.ndarray:
    """(N, d_h) float matrix from a .npy file."""
    path = _require_file(path, "Training embeddings (.npy, one row per training spectrum).")
    try:
        matrix = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as e:
        raise FormatError(path, f"not a readable .npy array ({e})")
    if matrix.ndim != 2 or matrix.shape[0] < 1 or matrix.shape[1] < 1:
        raise FormatError(path, f"expected a non-empty 2-D array, got shape {matrix.shape}")
    return matrix.astype(np.float64)



# RESULT TABLES


def _repr_float(value) -> str:
    return repr(float(value))


def write_table(frame: pd.DataFrame, path: PathLike) -> Path:
    """
    CSV with header, LF endings and shortest round-trip float text.
    NaN is written as ``nan`` and infinities as ``inf`` / ``-inf``.
    """
    path = Path(path)
    out = frame.copy()
    for column in out.columns:
        if pd.api.types.is_float_dtype(out[column]):
            out[column] = out[column].map(_repr_float)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        out.to_csv(path, index=False, lineterminator="\n", encoding="utf-8")
    except OSError as e:
        raise StorageError(path, f"cannot write table: {e}")
    logger.info(f"Wrote {len(frame)} row(s) to {path}.")
    return path


def write_results(table, path: PathLike) -> Path:
    """Per-instance score table (ScoreTable or DataFrame)."""
    frame = table.frame if hasattr(table, "frame") else table
    return write_table(frame, path)


def write_curve(curve, path: PathLike) -> Path:
    return write_table(curve.to_frame(), path)


def load_table(path: PathLike, description: str = "Result table (CSV).") -> pd.DataFrame:
    return _load_csv(path, description)



# MANIFEST


def file_digest(path: PathLike) -> str:
    """SHA-256 hex digest of a file."""
    digest = hashlib.sha256()
    try:
        with open(path, "rb") as handle:
            for chunk in iter(lambda: handle.read(1 << 20), b""):
                digest.update(chunk)
    except OSError as e:
        raise StorageError(path, f"cannot read for digest: {e}")
    return digest.hexdigest()


def write_manifest(
    path: PathLike,
    config: Dict[str, Any],
    inputs: Optional[Dict[str, PathLike]] = None,
    outputs: Iterable[PathLike] = (),
    complete: bool = True,
    error: Optional[str] = None,
) -> Path:
    """
    Run manifest: tool version, config (incl. seeds), input and output
    digests, and whether the run finished. No timestamps, so identical runs
    give identical manifests.
    """
    path = Path(path)
    manifest = {
        "tool": TOOL_NAME,
        "version": TOOL_VERSION,
        "complete": bool(complete),
        "config": config,
        "inputs": {
            name: {"path": str(p), "sha256": file_digest(p)}
            for name, p in sorted((inputs or {}).items())
            if p is not None and Path(p).is_file()
        },
        "outputs": {
            Path(p).name: file_digest(p) for p in sorted(map(str, outputs)) if Path(p).is_file()
        },
    }
    if error is not None:
        manifest["error"] = error
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            json.dump(manifest, handle, indent=2, sort_keys=True, default=_json_default)
            handle.write("\n")
    except OSError as e:
        raise StorageError(path, f"cannot write manifest: {e}")
    return path

"""On-disk formats: raw recordings, segment batches, corpus manifests, checkpoints, reports.

Every binary file starts with an 8-byte magic followed by a little-endian
``u32`` header length and a UTF-8 JSON header; the payload follows directly.
Numbers on disk are little-endian regardless of the host.
"""
from __future__ import annotations

import contextlib
import csv
import fcntl
import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .preprocess import Recording, SegmentBatch

RAW_MAGIC = b"PDEEGRAW"
SEG_MAGIC = b"PDSEGBAT"
CKPT_MAGIC = b"PDHCKPT1"
RAW_VERSION = 1
SEG_VERSION = 1
CKPT_VERSION = 1
MANIFEST_VERSION = 1


class FormatError(ValueError):
    """A file does not match its declared format."""


@contextlib.contextmanager
def locked_writer(path: str | os.PathLike):
    """Open ``path`` for binary writing under an exclusive advisory lock."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            yield fh
            fh.flush()
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def _dump_header(obj: dict) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _pack(magic: bytes, header: dict, payload: bytes) -> bytes:
    h = _dump_header(header)
    return magic + struct.pack("<I", len(h)) + h + payload


def _unpack(blob: bytes, magic: bytes, what: str) -> tuple[dict, memoryview]:
    if len(blob) < 12 or blob[:8] != magic:
        raise FormatError(f"{what}: bad magic {bytes(blob[:8])!r}, expected {magic!r}")
    (hlen,) = struct.unpack_from("<I", blob, 8)
    if len(blob) < 12 + hlen:
        raise FormatError(f"{what}: header truncated (expected {hlen} bytes)")
    try:
        header = json.loads(bytes(blob[12:12 + hlen]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{what}: header is not valid JSON: {exc}") from None
    return header, memoryview(blob)[12 + hlen:]


# ----------------------------------------------------------------------------
# raw recordings


def encode_recording(rec: Recording) -> bytes:
    header = {
        "format_version": RAW_VERSION,
        "subject_id": rec.subject_id,
        "label": rec.label,
        "medication": rec.medication,
        "fs_hz": float(rec.fs_hz),
        "n_channels": int(rec.samples.shape[0]),
        "n_samples": int(rec.samples.shape[1]),
        "channel_labels": list(rec.channel_labels),
        "byte_order": "little",
        "dtype": "f32",
        "layout": "channel-major",
    }
    return _pack(RAW_MAGIC, header, rec.samples.astype("<f4").tobytes())


def decode_recording(blob: bytes, what: str = "recording") -> Recording:
    header, payload = _unpack(blob, RAW_MAGIC, what)
    if header.get("format_version") != RAW_VERSION:
        raise FormatError(f"{what}: unsupported format_version {header.get('format_version')!r}")
    if header.get("byte_order") != "little" or header.get("dtype") != "f32" \
            or header.get("layout") != "channel-major":
        raise FormatError(f"{what}: unsupported encoding {header.get('byte_order')}/"
                          f"{header.get('dtype')}/{header.get('layout')}")
    nc, ns = int(header["n_channels"]), int(header["n_samples"])
    labels = header["channel_labels"]
    if len(labels) != nc:
        raise FormatError(f"{what}: header lists {len(labels)} channel labels but n_channels={nc}")
    expected = 4 * nc * ns
    if len(payload) != expected:
        raise FormatError(f"{what}: payload is {len(payload)} bytes, expected {expected}")
    samples = np.frombuffer(payload, dtype="<f4").reshape(nc, ns).astype(np.float64)
    try:
        return Recording(header["subject_id"], header["label"], header["medication"],
                         header["fs_hz"], labels, samples)
    except ValueError as exc:
        raise FormatError(f"{what}: {exc}") from None


def write_recording(rec: Recording, path) -> bytes:
    blob = encode_recording(rec)
    with locked_writer(path) as fh:
        fh.write(blob)
    return blob


def read_recording(path) -> Recording:
    return decode_recording(Path(path).read_bytes(), str(path))


def import_csv(path, fs_hz: float, subject_id: str, label: str, medication: str = "n/a") -> Recording:
    """Read a channel-per-column CSV with a header row of channel labels."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise FormatError(f"{path}: empty CSV")
    header = [c.strip() for c in rows[0]]
    if len(rows) < 2:
        raise FormatError(f"{path}: header row only, no samples")
    values = np.empty((len(rows) - 1, len(header)))
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise FormatError(f"{path}: row {i} has {len(row)} cells, expected {len(header)}")
        try:
            values[i - 2] = [float(c) for c in row]
        except ValueError:
            raise FormatError(f"{path}: row {i} has a non-numeric cell") from None
    if not np.all(np.isfinite(values)):
        raise FormatError(f"{path}: non-finite value in samples")
    return Recording(subject_id, label, medication, fs_hz, header, values.T)


# ----------------------------------------------------------------------------
# segment batches


def encode_segments(batch: SegmentBatch) -> bytes:
    header = {
        "format_version": SEG_VERSION,
        "n_segments": len(batch),
        "n_channels": 32,
        "n_samples": 512,
        "byte_order": "little",
        "dtype": "f32",
        "labels": [int(x) for x in batch.labels],
        "subject_ids": [str(x) for x in batch.subject_ids],
        "medication": [str(x) for x in batch.medication],
    }
    return _pack(SEG_MAGIC, header, np.asarray(batch.data).astype("<f4").tobytes())


def write_segments(batch: SegmentBatch, path) -> None:
    with locked_writer(path) as fh:
        fh.write(encode_segments(batch))


def read_segments(path) -> SegmentBatch:
    header, payload = _unpack(Path(path).read_bytes(), SEG_MAGIC, str(path))
    if header.get("format_version") != SEG_VERSION:
        raise FormatError(f"{path}: unsupported format_version {header.get('format_version')!r}")
    n = int(header["n_segments"])
    expected = 4 * n * 32 * 512
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(n, 32, 512).astype(np.float64)
    return SegmentBatch(data, header["labels"], header["subject_ids"], header["medication"])


# ----------------------------------------------------------------------------
# corpus manifests


@dataclass
class CorpusManifest:
    root: Path
    montage: str
    entries: list[dict]
    content_hash: str

    @property
    def paths(self) -> list[Path]:
        return [self.root / e["path"] for e in self.entries]

    def to_json(self) -> dict:
        return {"schema_version": MANIFEST_VERSION, "montage": self.montage,
                "recordings": self.entries, "content_hash": self.content_hash}


def corpus_hash(blobs) -> str:
    h = hashlib.sha256()
    for b in blobs:
        h.update(struct.pack("<Q", len(b)))
        h.update(b)
    return h.hexdigest()


def build_manifest(root, files: list[tuple[str, bytes, Recording]], montage: str) -> CorpusManifest:
    entries = []
    for rel, blob, rec in files:
        entries.append({
            "path": rel, "subject_id": rec.subject_id, "label": rec.label,
            "medication": rec.medication, "fs_hz": float(rec.fs_hz),
            "n_channels": int(rec.samples.shape[0]), "n_samples": int(rec.samples.shape[1]),
            "sha256": hashlib.sha256(blob).hexdigest(),
        })
    return CorpusManifest(Path(root), montage, entries, corpus_hash(b for _, b, _ in files))


def write_manifest(manifest: CorpusManifest, path=None) -> Path:
    path = Path(path) if path else manifest.root / "manifest.json"
    text = json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n"
    with locked_writer(path) as fh:
        fh.write(text.encode("utf-8"))
    return path


def read_manifest(path, verify: bool = True) -> CorpusManifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    if doc.get("schema_version") != MANIFEST_VERSION:
        raise FormatError(f"{path}: unsupported manifest schema {doc.get('schema_version')!r}")
    m = CorpusManifest(path.parent, doc["montage"], doc["recordings"], doc["content_hash"])
    if verify:
        blobs = []
        for e, p in zip(m.entries, m.paths):
            if not p.exists():
                raise FileNotFoundError(f"manifest entry missing on disk: {p}")
            b = p.read_bytes()
            if hashlib.sha256(b).hexdigest() != e["sha256"]:
                raise FormatError(f"{p}: sha256 does not match manifest")
            blobs.append(b)
        if corpus_hash(blobs) != m.content_hash:
            raise FormatError(f"{path}: corpus content hash mismatch")
    return m


# ----------------------------------------------------------------------------
# checkpoints

_DTYPES = {"f8": np.dtype("<f8"), "f4": np.dtype("<f4")}


def encode_checkpoint(model, extra: dict | None = None) -> bytes:
    """Serialize parameters and buffers as shape-tagged little-endian records."""
    records = io.BytesIO()
    index = []
    items = [("param", k, v.data) for k, v in model.params.items()] + \
            [("buffer", k, v) for k, v in model.buffers.items()]
    for kind, name, arr in items:
        code = "f8" if arr.dtype == np.float64 else "f4"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        nb = name.encode("utf-8")
        rec_head = struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim) + \
            struct.pack(f"<{arr.ndim}Q", *arr.shape) + code.encode("ascii")
        index.append({"name": name, "kind": kind, "shape": list(arr.shape), "dtype": code,
                      "offset": records.tell() + len(rec_head), "nbytes": len(raw)})
        records.write(rec_head)
        records.write(raw)
    header = {"format_version": CKPT_VERSION, "byte_order": "little",
              "config": model.config.to_dict(), "tensors": index, "extra": extra or {}}
    return _pack(CKPT_MAGIC, header, records.getvalue())


def decode_checkpoint(blob: bytes, what: str = "checkpoint"):
    from .autodiff import Tensor
    from .model import HybridConfig, HybridModel, param_shapes

    header, payload = _unpack(blob, CKPT_MAGIC, what)
    if header.get("format_version") != CKPT_VERSION:
        raise FormatError(f"{what}: unsupported format_version {header.get('format_version')!r}")
    config = HybridConfig.from_dict(header["config"])
    shapes = param_shapes(config)
    params, buffers = {}, {}
    for t in header["tensors"]:
        end = t["offset"] + t["nbytes"]
        if end > len(payload):
            raise FormatError(f"{what}: tensor {t['name']} truncated")
        arr = np.frombuffer(payload[t["offset"]:end], dtype=_DTYPES[t["dtype"]])
        arr = arr.reshape(t["shape"]).astype(_DTYPES[t["dtype"]].newbyteorder("="), copy=True)
        if t["kind"] == "param":
            if tuple(t["shape"]) != shapes.get(t["name"]):
                raise FormatError(f"{what}: tensor {t['name']} shape {t['shape']} does not match config")
            params[t["name"]] = Tensor(arr, requires_grad=True, name=t["name"])
        else:
            buffers[t["name"]] = arr
    if set(params) != set(shapes):
        raise FormatError(f"{what}: parameter set does not match config")
    return HybridModel(config, params, buffers), header.get("extra", {})


def save_checkpoint(model, path, extra: dict | None = None) -> None:
    with locked_writer(path) as fh:
        fh.write(encode_checkpoint(model, extra))


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes(), str(path))


# ----------------------------------------------------------------------------
# reports


def write_json(obj, path) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"
    with locked_writer(path) as fh:
        fh.write(text.encode("utf-8"))


def write_csv(rows: list[list], header: list[str], path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(c) for c in r])
    with locked_writer(path) as fh:
        fh.write(buf.getvalue().encode("utf-8"))


def _fmt(c):
    if isinstance(c, float):
        return repr(c)
    return c

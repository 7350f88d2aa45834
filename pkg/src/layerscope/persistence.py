"""Binary checkpoints, binary hidden-state traces and JSONL datasets.

Checkpoint layout (all integers little-endian)::

    b"LWCK" | u16 version | u32 n | n bytes UTF-8 JSON config
    | u32 n_tensors | per tensor: u16 name_len, name, u8 ndim, u32 dims..., f64 payload
    | u32 CRC32 of every preceding byte

Trace layout::

    b"LWT1" | u32 n_layers+1 | u32 seq_len | u32 d_model | u8 roles[seq_len]
    | u32 token_ids[seq_len] | f32 layers[n_layers+1][seq_len][d_model] | u32 CRC32
"""
from __future__ import annotations

import io
import json
import struct
import zlib
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .encoder import ROLE_CODE, ROLES, EncodedInput, Encoder, HiddenStateTrace, ModelConfig

CKPT_MAGIC = b"LWCK"
CKPT_VERSION = 1
TRACE_MAGIC = b"LWT1"


class CorruptFileError(ValueError):
    pass


class VersionError(CorruptFileError):
    pass


class JsonlError(ValueError):
    def __init__(self, errors: list[tuple[int, str]]):
        self.errors = errors
        super().__init__("; ".join(f"line {n}: {msg}" for n, msg in errors))


def _crc_ok(blob: bytes) -> bytes:
    if len(blob) < 8:
        raise CorruptFileError("file too short")
    body, tail = blob[:-4], blob[-4:]
    if struct.unpack("<I", tail)[0] != zlib.crc32(body):
        raise CorruptFileError("CRC mismatch (truncated or corrupted file)")
    return body


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


# -- checkpoints --------------------------------------------------------------

def checkpoint_bytes(model: Encoder, meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<H", CKPT_VERSION))
    cfg = json.dumps({"model": model.config.to_dict(), "meta": meta or {}}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    names = sorted(model.params)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: Encoder, path, meta: dict | None = None) -> None:
    _atomic_write(path, checkpoint_bytes(model, meta))


def parse_checkpoint(blob: bytes) -> tuple[Encoder, dict]:
    if blob[:4] != CKPT_MAGIC:
        raise CorruptFileError(f"bad magic {blob[:4]!r}, expected {CKPT_MAGIC!r}")
    if len(blob) >= 6:
        (version,) = struct.unpack_from("<H", blob, 4)
        if version != CKPT_VERSION:
            raise VersionError(f"checkpoint version {version} not supported (reader version {CKPT_VERSION})")
    body = _crc_ok(blob)
    try:
        off = 6
        (n,) = struct.unpack_from("<I", body, off)
        off += 4
        head = json.loads(body[off:off + n].decode("utf-8"))
        off += n
        (count,) = struct.unpack_from("<I", body, off)
        off += 4
        params = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + ln].decode("utf-8")
            off += ln
            (ndim,) = struct.unpack_from("<B", body, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", body, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            params[name] = np.frombuffer(body, dtype="<f8", count=size, offset=off).astype(np.float64).reshape(shape)
            off += 8 * size
        if off != len(body):
            raise CorruptFileError("trailing bytes after tensors")
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, ValueError) as exc:
        if isinstance(exc, CorruptFileError):
            raise
        raise CorruptFileError(f"malformed checkpoint: {exc}") from exc
    return Encoder(ModelConfig.from_dict(head["model"]), params), head.get("meta", {})


def load_checkpoint(path) -> tuple[Encoder, dict]:
    return parse_checkpoint(Path(path).read_bytes())


# -- traces -------------------------------------------------------------------

def trace_bytes(trace: HiddenStateTrace) -> bytes:
    """Serialize the non-pad rows of ``trace``."""
    tr = trace.non_pad()
    n_layers = len(tr.layers)
    seq, d = tr.layers[0].shape
    buf = io.BytesIO()
    buf.write(TRACE_MAGIC)
    buf.write(struct.pack("<III", n_layers, seq, d))
    buf.write(bytes(ROLE_CODE[r] for r in tr.input.roles))
    buf.write(np.asarray(tr.input.token_ids, dtype="<u4").tobytes())
    for h in tr.layers:
        buf.write(np.ascontiguousarray(h, dtype="<f4").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def dump_trace(trace: HiddenStateTrace, path) -> None:
    _atomic_write(path, trace_bytes(trace))


def parse_trace(blob: bytes, tokens: list[str] | None = None,
                sentence_ids: list[int] | None = None,
                segment_ids: list[int] | None = None) -> HiddenStateTrace:
    if blob[:4] != TRACE_MAGIC:
        raise CorruptFileError(f"bad magic {blob[:4]!r}, expected {TRACE_MAGIC!r}")
    body = _crc_ok(blob)
    try:
        n_layers, seq, d = struct.unpack_from("<III", body, 4)
        off = 16
        roles = [ROLES[c] for c in body[off:off + seq]]
        off += seq
        ids = np.frombuffer(body, dtype="<u4", count=seq, offset=off).tolist()
        off += 4 * seq
        layers = []
        for _ in range(n_layers):
            a = np.frombuffer(body, dtype="<f4", count=seq * d, offset=off)
            layers.append(a.astype(np.float64).reshape(seq, d))
            off += 4 * seq * d
        if off != len(body):
            raise CorruptFileError("trailing bytes after layers")
    except (struct.error, ValueError, IndexError) as exc:
        if isinstance(exc, CorruptFileError):
            raise
        raise CorruptFileError(f"malformed trace: {exc}") from exc
    inp = EncodedInput(ids, segment_ids or [0] * seq, [1] * seq, roles, tokens or [], sentence_ids or [])
    return HiddenStateTrace(layers, inp)


def load_trace(path, **meta) -> HiddenStateTrace:
    return parse_trace(Path(path).read_bytes(), **meta)


# -- JSONL --------------------------------------------------------------------

def write_jsonl(records: Iterable[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r, ensure_ascii=False, sort_keys=True))
            fh.write("\n")


def iter_jsonl(path) -> Iterator[tuple[int, dict | None, str | None]]:
    """Yield (line_number, record, error) per non-blank line; LF or CRLF endings."""
    offset = 0
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            start = offset
            offset += len(raw)
            line = raw.rstrip(b"\r\n")
            if not line.strip():
                continue
            try:
                text = line.decode("utf-8")
            except UnicodeDecodeError as exc:
                yield lineno, None, f"invalid UTF-8 at byte offset {start + exc.start}"
                continue
            try:
                rec = json.loads(text)
            except json.JSONDecodeError as exc:
                yield lineno, None, f"malformed JSON: {exc.msg} (column {exc.colno})"
                continue
            if not isinstance(rec, dict):
                yield lineno, None, "record is not a JSON object"
                continue
            yield lineno, rec, None


def read_jsonl(path) -> list[dict]:
    records, errors = [], []
    for lineno, rec, err in iter_jsonl(path):
        if err:
            errors.append((lineno, err))
        else:
            records.append(rec)
    if errors:
        raise JsonlError(errors)
    return records

"""TNSR tensor dumps and the parameter checkpoint container.

TNSR: magic b"TNSR\\0\\0\\0\\1", u32 LE rank, rank x u64 LE extents, row-major f64 LE payload.

Checkpoint: magic b"DTCKPT\\0\\1", u32 LE header length, JSON header, then the
concatenated TNSR blobs; header offsets count from the first blob.
"""
import io
import json
import struct
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np

from .errors import DataError

TNSR_MAGIC = b"TNSR\x00\x00\x00\x01"
CKPT_MAGIC = b"DTCKPT\x00\x01"

PathLike = Union[str, Path]


def encode_tnsr(array: np.ndarray) -> bytes:
    array = np.asarray(array, dtype="<f8")
    out = io.BytesIO()
    out.write(TNSR_MAGIC)
    out.write(struct.pack("<I", array.ndim))
    out.write(struct.pack(f"<{array.ndim}Q", *array.shape))
    out.write(np.ascontiguousarray(array).tobytes(order="C"))
    return out.getvalue()


def decode_tnsr(blob: bytes) -> Tuple[np.ndarray, int]:
    """Decode one TNSR record from the start of `blob`; returns (array, bytes used)."""
    if blob[:8] != TNSR_MAGIC:
        raise DataError("not a TNSR record (bad magic)")
    if len(blob) < 12:
        raise DataError("truncated TNSR header")
    (rank,) = struct.unpack_from("<I", blob, 8)
    header = 12 + 8 * rank
    if len(blob) < header:
        raise DataError("truncated TNSR extents")
    shape = struct.unpack_from(f"<{rank}Q", blob, 12)
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    end = header + 8 * count
    if len(blob) < end:
        raise DataError(f"truncated TNSR payload: need {end} bytes, have {len(blob)}")
    data = np.frombuffer(blob, dtype="<f8", count=count, offset=header)
    return data.astype(np.float64).reshape(shape), end


def write_tnsr(path: PathLike, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_tnsr(array))


def read_tnsr(path: PathLike) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    array, _ = decode_tnsr(blob)
    return array


def save_checkpoint(path: PathLike, state: Dict[str, np.ndarray], model_config: Dict[str, Any],
                    meta: Dict[str, Any] = None) -> Path:
    blobs = []
    tensors = {}
    offset = 0
    for name, array in state.items():
        blob = encode_tnsr(array)
        tensors[name] = {"offset": offset, "length": len(blob)}
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"model": model_config, "tensors": tensors, "meta": meta or {}},
                        sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)
    tmp.replace(path)
    return path


def load_checkpoint(path: PathLike) -> Tuple[Dict[str, np.ndarray], Dict[str, Any], Dict[str, Any]]:
    """Returns (state, model_config dict, meta)."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != CKPT_MAGIC:
        raise DataError(f"{path} is not a densetok checkpoint")
    try:
        (length,) = struct.unpack_from("<I", raw, 8)
    except struct.error as exc:
        raise DataError(f"truncated checkpoint header in {path}") from exc
    if len(raw) < 12 + length:
        raise DataError(f"truncated checkpoint header in {path}")
    try:
        header = json.loads(raw[12:12 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt checkpoint header in {path}") from exc
    payload = raw[12 + length:]
    state = {}
    try:
        for name, entry in header["tensors"].items():
            start = entry["offset"]
            array, used = decode_tnsr(payload[start:start + entry["length"]])
            if used != entry["length"]:
                raise DataError(f"checkpoint entry {name} has inconsistent length")
            state[name] = array
        return state, header["model"], header.get("meta", {})
    except (KeyError, TypeError, AttributeError) as exc:
        raise DataError(f"malformed checkpoint header in {path}: {exc!r}") from exc

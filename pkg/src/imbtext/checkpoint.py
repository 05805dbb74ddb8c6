"""Tensor archive: b"IMB1" | u64 LE header length | UTF-8 JSON header | raw f32 LE bytes.

Header maps tensor name -> {"dtype", "shape", "offset", "len"} with offsets
relative to the start of the data section, plus a "meta" entry.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"IMB1"
_LEN = struct.Struct("<Q")


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict
    vocab: list[str]
    label_map: dict[str, int]
    step: int = 0
    extra: dict = field(default_factory=dict)

    def to_32bit(self) -> "Checkpoint":
        """Copy with every tensor rounded through float32 (the stored precision)."""
        return Checkpoint(
            {k: v.astype("<f4").astype(np.float64) for k, v in self.tensors.items()},
            json.loads(json.dumps(self.config)),
            list(self.vocab),
            dict(self.label_map),
            self.step,
            json.loads(json.dumps(self.extra)),
        )

    def meta(self) -> dict:
        return {"config": self.config, "vocab": self.vocab, "label_map": self.label_map, "step": self.step, "extra": self.extra}


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    header: dict = {}
    blobs = []
    offset = 0
    for name, arr in ckpt.tensors.items():
        if name == "meta":
            raise CheckpointError("'meta' is reserved and cannot name a tensor")
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        header[name] = {"dtype": "f32", "shape": list(arr.shape), "offset": offset, "len": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    header["meta"] = ckpt.meta()
    head = json.dumps(header, ensure_ascii=False, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_LEN.pack(len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 4 + _LEN.size:
        raise CheckpointError(f"{path}: truncated before header length")
    (hlen,) = _LEN.unpack_from(blob, 4)
    start = 4 + _LEN.size
    if start + hlen > len(blob):
        raise CheckpointError(f"{path}: truncated header ({hlen} bytes declared)")
    try:
        header = json.loads(blob[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: header is not valid JSON ({exc})") from None
    if not isinstance(header, dict) or not isinstance(header.get("meta"), dict):
        raise CheckpointError(f"{path}: header lacks a 'meta' object")
    data = memoryview(blob)[start + hlen :]
    tensors = {}
    for name, info in header.items():
        if name == "meta":
            continue
        try:
            dtype, shape, off, n = info["dtype"], tuple(info["shape"]), int(info["offset"]), int(info["len"])
        except (KeyError, TypeError, ValueError):
            raise CheckpointError(f"{path}: malformed entry for tensor {name!r}") from None
        if dtype != "f32":
            raise CheckpointError(f"{path}: tensor {name!r} has unsupported dtype {dtype!r}")
        if n != 4 * int(np.prod(shape, dtype=np.int64)) or off < 0 or off + n > len(data):
            raise CheckpointError(f"{path}: tensor {name!r} is truncated or inconsistent with its shape")
        tensors[name] = np.frombuffer(data[off : off + n], dtype="<f4").astype(np.float64).reshape(shape)
    meta = header["meta"]
    try:
        return Checkpoint(
            tensors,
            meta["config"],
            list(meta["vocab"]),
            {str(k): int(v) for k, v in meta["label_map"].items()},
            int(meta.get("step", 0)),
            meta.get("extra", {}),
        )
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise CheckpointError(f"{path}: incomplete meta ({exc})") from None

"""Binary tensor container, checkpoints and content-addressed caches.

LFTN record layout (little endian)::

    b"LFTN0001" | u32 rank | rank x u32 dims | prod(dims) x f32

A checkpoint is ``b"LFCK0001" | u32 header_len | header JSON`` followed by one
``u32 name_len | name | LFTN record`` per tensor, in header order.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from pathlib import Path
from typing import BinaryIO, Dict, Iterable, Mapping, Tuple

import numpy as np

MAGIC = b"LFTN0001"
CKPT_MAGIC = b"LFCK0001"


class FormatError(ValueError):
    pass


def write_tensor(fh: BinaryIO, arr: np.ndarray) -> int:
    arr = np.asarray(arr, dtype="<f4", order="C")  # ascontiguousarray promotes 0-d to 1-d
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    fh.write(header)
    fh.write(arr.tobytes(order="C"))
    return len(header) + arr.nbytes


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(8)
    if magic != MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
    count = int(np.prod(dims)) if dims else 1
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise FormatError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


def tensor_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# checkpoints -------------------------------------------------------------------

def save_checkpoint(path, tensors: Mapping[str, np.ndarray], header: Mapping) -> str:
    """Write a checkpoint and return its sha256 content hash."""
    names = list(tensors)
    head = dict(header)
    head["tensors"] = names
    blob = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<I", len(blob)) + blob)
        for name in names:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)) + nb)
            write_tensor(fh, tensors[name])
    os.replace(tmp, path)
    return file_sha256(path)


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        if fh.read(8) != CKPT_MAGIC:
            raise FormatError(f"{path} is not a checkpoint")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n).decode("utf-8"))
        tensors: Dict[str, np.ndarray] = {}
        for expected in header["tensors"]:
            (ln,) = struct.unpack("<I", fh.read(4))
            name = fh.read(ln).decode("utf-8")
            if name != expected:
                raise FormatError(f"checkpoint tensor order mismatch: {name} != {expected}")
            tensors[name] = read_tensor(fh)
    return tensors, header


# content-addressed pack caches ---------------------------------------------------

class PackCache:
    """Append-only pack of LFTN records with a JSON-lines index.

    Entries are addressed by a content key; ``put`` of a key already present
    writes nothing.
    """

    def __init__(self, directory, kind: str):
        self.dir = Path(directory)
        self.kind = kind
        self.pack_path = self.dir / f"{kind}.lftn"
        self.index_path = self.dir / f"{kind}.index.jsonl"
        self._index: Dict[str, dict] = {}
        self._by_id: Dict[str, dict] = {}
        if self.index_path.exists():
            for line in self.index_path.read_text().splitlines():
                if line.strip():
                    rec = json.loads(line)
                    self._index[rec["key"]] = rec
                    self._by_id[rec["id"]] = rec

    def __contains__(self, key: str) -> bool:
        return key in self._index

    def __len__(self) -> int:
        return len(self._by_id)

    def put(self, entry_id: str, key: str, arr: np.ndarray) -> bool:
        """Store ``arr``; returns False (and writes nothing) when the key exists."""
        if key in self._index:
            if entry_id not in self._by_id:
                rec = dict(self._index[key], id=entry_id)
                self._append_index(rec)
            return False
        self.dir.mkdir(parents=True, exist_ok=True)
        offset = self.pack_path.stat().st_size if self.pack_path.exists() else 0
        with open(self.pack_path, "ab") as fh:
            write_tensor(fh, arr)
        self._append_index({"id": entry_id, "key": key, "offset": offset})
        return True

    def _append_index(self, rec: dict) -> None:
        with open(self.index_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        self._index.setdefault(rec["key"], rec)
        self._by_id[rec["id"]] = rec

    def get(self, entry_id: str) -> np.ndarray:
        rec = self._by_id[entry_id]
        with open(self.pack_path, "rb") as fh:
            fh.seek(rec["offset"])
            return read_tensor(fh)

    def ids(self) -> Iterable[str]:
        return list(self._by_id)

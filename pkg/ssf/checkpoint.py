"""Named-tensor checkpoints and the ``SSFCKPT1`` on-disk format.

Layout::

    b"SSFCKPT1" | u64 LE manifest length | UTF-8 JSON manifest | zero pad to 64
    | tensor 0 data, zero pad to 64 | tensor 1 data, ...

Manifest entries carry ``name, dtype, shape, frozen, offset, nbytes`` with
offsets relative to the first (64-byte aligned) data byte. Tensor data is
little-endian, row-major. The manifest is written with sorted keys and fixed
separators, so save -> load -> save reproduces a file byte for byte.
"""
import copy
import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass
from typing import Any, Dict, Iterable, Iterator, List, Optional, Tuple

import numpy as np

from core.errors import CheckpointFormatError
from .tensor import Tensor, dtype_tag, resolve_dtype

logger = logging.getLogger(__name__)

MAGIC = b"SSFCKPT1"
FORMAT_VERSION = 1
ALIGN = 64
_DISK_DTYPES = {"f32": "<f4", "f64": "<f8"}


def _pad(n: int) -> int:
    return (-n) % ALIGN


@dataclass
class CheckpointEntry:
    tensor: Tensor
    frozen: bool = False


class Checkpoint:
    """Ordered map name -> (tensor, frozen flag) plus JSON-able metadata"""

    def __init__(self, entries: Optional[Dict[str, CheckpointEntry]] = None,
                 metadata: Optional[Dict[str, Any]] = None):
        self.entries: Dict[str, CheckpointEntry] = dict(entries or {})
        self.metadata: Dict[str, Any] = dict(metadata or {})

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name].tensor

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> List[str]:
        return list(self.entries)

    def items(self) -> Iterable[Tuple[str, CheckpointEntry]]:
        return self.entries.items()

    def add(self, name: str, tensor: Tensor, frozen: bool = False) -> None:
        tensor.name = name
        self.entries[name] = CheckpointEntry(tensor, frozen)

    def remove(self, name: str) -> None:
        del self.entries[name]

    def is_frozen(self, name: str) -> bool:
        return self.entries[name].frozen

    def set_trainable(self, names: Iterable[str]) -> None:
        """Freeze everything except ``names``; trainable tensors require grads"""
        trainable = set(names)
        missing = trainable - set(self.entries)
        if missing:
            raise KeyError(f"Unknown tensors: {sorted(missing)}")
        for name, entry in self.entries.items():
            entry.frozen = name not in trainable
            entry.tensor.requires_grad = not entry.frozen

    def trainable_names(self) -> List[str]:
        return [n for n, e in self.entries.items() if not e.frozen]

    def frozen_names(self) -> List[str]:
        return [n for n, e in self.entries.items() if e.frozen]

    def num_params(self, names: Optional[Iterable[str]] = None) -> int:
        selected = self.entries if names is None else names
        return int(sum(self.entries[n].tensor.size for n in selected))

    def tensor_hash(self, name: str) -> str:
        return hashlib.sha256(self.entries[name].tensor.data.tobytes()).hexdigest()

    def hashes(self, names: Optional[Iterable[str]] = None) -> Dict[str, str]:
        return {n: self.tensor_hash(n) for n in (self.entries if names is None else names)}

    def digest(self, names: Optional[Iterable[str]] = None) -> str:
        """Single SHA-256 over the named tensors, in name order"""
        h = hashlib.sha256()
        for name in sorted(self.entries if names is None else names):
            h.update(name.encode("utf-8"))
            h.update(self.entries[name].tensor.data.tobytes())
        return h.hexdigest()

    def copy(self) -> "Checkpoint":
        entries = {n: CheckpointEntry(Tensor(e.tensor.data, requires_grad=e.tensor.requires_grad, name=n), e.frozen)
                   for n, e in self.entries.items()}
        return Checkpoint(entries, copy.deepcopy(self.metadata))

    def astype(self, dtype: str) -> "Checkpoint":
        target = resolve_dtype(dtype)
        entries = {n: CheckpointEntry(Tensor(e.tensor.data.astype(target), requires_grad=e.tensor.requires_grad, name=n),
                                      e.frozen)
                   for n, e in self.entries.items()}
        return Checkpoint(entries, copy.deepcopy(self.metadata))

    # Serialization

    def to_bytes(self) -> bytes:
        manifest = []
        offset = 0
        blobs = []
        for name, entry in self.entries.items():
            tag = dtype_tag(entry.tensor.dtype)
            raw = entry.tensor.data.astype(_DISK_DTYPES[tag], copy=False).tobytes(order="C")
            manifest.append({
                "name": name,
                "dtype": tag,
                "shape": list(entry.tensor.shape),
                "frozen": bool(entry.frozen),
                "offset": offset,
                "nbytes": len(raw),
            })
            blobs.append(raw + b"\0" * _pad(len(raw)))
            offset += len(raw) + _pad(len(raw))

        header = json.dumps({"format_version": FORMAT_VERSION, "metadata": self.metadata, "tensors": manifest},
                            sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
        prefix = MAGIC + struct.pack("<Q", len(header)) + header
        return prefix + b"\0" * _pad(len(prefix)) + b"".join(blobs)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if len(blob) < len(MAGIC) + 8 or blob[:len(MAGIC)] != MAGIC:
            raise CheckpointFormatError("Bad magic bytes, not an SSFCKPT1 file")
        (length,) = struct.unpack("<Q", blob[len(MAGIC):len(MAGIC) + 8])
        start = len(MAGIC) + 8
        if start + length > len(blob):
            raise CheckpointFormatError("Manifest runs past end of file")
        try:
            manifest = json.loads(blob[start:start + length].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointFormatError(f"Unreadable manifest: {e}")
        if not isinstance(manifest, dict):
            raise CheckpointFormatError(f"Manifest is a {type(manifest).__name__}, expected an object")
        if manifest.get("format_version") != FORMAT_VERSION:
            raise CheckpointFormatError(f"Unsupported format version: {manifest.get('format_version')}")

        data_start = start + length + _pad(start + length)
        entries: Dict[str, CheckpointEntry] = {}
        try:
            for item in manifest.get("tensors", []):
                name, entry = _read_entry(blob, item, data_start)
                if name in entries:
                    raise CheckpointFormatError(f"Duplicate tensor name: {name}")
                entries[name] = entry
            metadata = dict(manifest.get("metadata", {}))
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            logger.error(f"Malformed checkpoint manifest: {e!r}")
            raise CheckpointFormatError(f"Malformed manifest entry: {e!r}")
        return cls(entries, metadata)

    def save(self, path: str) -> None:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        blob = self.to_bytes()
        with open(path, "wb") as f:
            f.write(blob)
        logger.info(f"Checkpoint saved to: {path} ({len(self)} tensors, {len(blob)} bytes)")

    @classmethod
    def load(cls, path: str) -> "Checkpoint":
        try:
            with open(path, "rb") as f:
                blob = f.read()
        except OSError as e:
            logger.error(f"Failed to read checkpoint {path}: {e}")
            raise CheckpointFormatError(f"Cannot read {path}: {e}")
        return cls.from_bytes(blob)


def _read_entry(blob: bytes, item: Dict, data_start: int) -> Tuple[str, CheckpointEntry]:
    name, tag, shape = item["name"], item["dtype"], tuple(int(s) for s in item["shape"])
    if tag not in _DISK_DTYPES:
        raise CheckpointFormatError(f"{name}: unsupported dtype {tag}")
    if item["offset"] % ALIGN:
        raise CheckpointFormatError(f"{name}: offset {item['offset']} is not {ALIGN}-byte aligned")
    itemsize = np.dtype(_DISK_DTYPES[tag]).itemsize
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    if item["nbytes"] != count * itemsize:
        raise CheckpointFormatError(f"{name}: nbytes {item['nbytes']} does not match shape {list(shape)}")
    lo = data_start + item["offset"]
    if lo < data_start or lo + item["nbytes"] > len(blob):
        raise CheckpointFormatError(f"{name}: data runs past end of file")
    arr = np.frombuffer(blob, dtype=_DISK_DTYPES[tag], count=count, offset=lo).reshape(shape)
    frozen = bool(item["frozen"])
    return name, CheckpointEntry(Tensor(arr.astype(resolve_dtype(tag)), requires_grad=not frozen, name=name), frozen)


def save_tensor(path: str, tensor: Tensor, name: str = "tensor") -> None:
    """Single-tensor file (``.ssft``) in the checkpoint encoding"""
    ckpt = Checkpoint()
    ckpt.add(name, Tensor(tensor.data), frozen=True)
    with open(path, "wb") as f:
        f.write(ckpt.to_bytes())


def load_tensor(path: str) -> Tensor:
    ckpt = Checkpoint.load(path)
    if len(ckpt) != 1:
        raise CheckpointFormatError(f"{path}: expected a single tensor, found {len(ckpt)}")
    return ckpt[ckpt.names()[0]]

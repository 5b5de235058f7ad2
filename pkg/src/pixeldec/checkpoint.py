"""Single-file checkpoint archive.

Layout (all integers little-endian):

    bytes 0..7    magic  b"PXDECKPT"
    bytes 8..39   sha256 over everything after this field
    bytes 40..43  format version (uint32)
    bytes 44..51  manifest length in bytes (uint64)
    bytes 52..59  payload length in bytes (uint64)
    manifest      UTF-8 JSON (human-readable, indented)
    payload       raw little-endian tensor data at the offsets listed
                  in the manifest

The manifest carries the tensor index (name, dtype, shape, byte_offset),
a config snapshot, the training step, the EMA flag and a digest of the
payload alone. Loads are all-or-nothing: any single-bit corruption flips
the outer digest and raises :class:`IntegrityError`.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import torch

from .errors import CheckpointError, IntegrityError, VersionError

MAGIC = b"PXDECKPT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8s32sIQQ")

_DTYPES = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "i64": np.dtype("<i8"),
    "i32": np.dtype("<i4"),
    "u8": np.dtype("<u1"),
}
_DTYPE_NAMES = {v: k for k, v in _DTYPES.items()}


@dataclass
class CheckpointManifest:
    """Index and metadata stored alongside the raw tensor payload."""

    format_version: int = FORMAT_VERSION
    tensor_index: list[dict] = field(default_factory=list)
    config_snapshot: dict = field(default_factory=dict)
    step: int = 0
    ema: bool = False
    content_digest: str = ""

    def to_json(self) -> str:
        return json.dumps(
            {
                "format_version": self.format_version,
                "tensor_index": self.tensor_index,
                "config_snapshot": self.config_snapshot,
                "step": self.step,
                "ema": self.ema,
                "content_digest": self.content_digest,
            },
            indent=1,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "CheckpointManifest":
        raw = json.loads(text)
        return cls(
            format_version=int(raw["format_version"]),
            tensor_index=list(raw["tensor_index"]),
            config_snapshot=dict(raw.get("config_snapshot", {})),
            step=int(raw.get("step", 0)),
            ema=bool(raw.get("ema", False)),
            content_digest=str(raw.get("content_digest", "")),
        )


def _to_numpy(value) -> np.ndarray:
    if torch.is_tensor(value):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    arr_le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    if arr_le.dtype not in _DTYPE_NAMES:
        raise CheckpointError(f"unsupported dtype {arr.dtype}")
    return np.ascontiguousarray(arr_le)


def save_checkpoint(
    tensors: Mapping[str, torch.Tensor | np.ndarray],
    meta: dict | None = None,
    path: str | os.PathLike = "checkpoint.ckpt",
    *,
    step: int = 0,
    ema: bool = False,
    config_snapshot: dict | None = None,
) -> CheckpointManifest:
    """Write tensors plus metadata atomically (temp file + rename)."""
    index = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = _to_numpy(tensors[name])
        data = arr.tobytes()
        index.append(
            {
                "name": name,
                "dtype": _DTYPE_NAMES[arr.dtype],
                "shape": list(arr.shape),
                "byte_offset": offset,
            }
        )
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)

    snapshot = dict(config_snapshot or {})
    if meta:
        snapshot.setdefault("meta", meta)
    manifest = CheckpointManifest(
        tensor_index=index,
        config_snapshot=snapshot,
        step=step,
        ema=ema,
        content_digest=hashlib.sha256(payload).hexdigest(),
    )
    manifest_bytes = manifest.to_json().encode("utf-8")

    tail = (
        struct.pack("<IQQ", FORMAT_VERSION, len(manifest_bytes), len(payload))
        + manifest_bytes
        + payload
    )
    digest = hashlib.sha256(tail).digest()
    blob = MAGIC + digest + tail

    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return manifest


def load_checkpoint(
    path: str | os.PathLike,
) -> tuple[dict[str, torch.Tensor], CheckpointManifest]:
    """Read an archive back; bit-exact inverse of :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise IntegrityError("archive truncated: header incomplete")
    magic, digest, version, manifest_len, payload_len = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    tail = blob[len(MAGIC) + 32 :]  # version field onward, the digest's domain
    if hashlib.sha256(tail).digest() != digest:
        raise IntegrityError("archive digest mismatch")
    if version > FORMAT_VERSION:
        raise VersionError(f"archive version {version} is newer than reader {FORMAT_VERSION}")
    start = _HEADER.size
    manifest_bytes = blob[start : start + manifest_len]
    payload = blob[start + manifest_len : start + manifest_len + payload_len]
    if len(manifest_bytes) != manifest_len or len(payload) != payload_len:
        raise IntegrityError("archive truncated: body incomplete")
    manifest = CheckpointManifest.from_json(manifest_bytes.decode("utf-8"))
    if manifest.content_digest != hashlib.sha256(payload).hexdigest():
        raise IntegrityError("payload digest mismatch")

    prev_end = 0
    tensors: dict[str, torch.Tensor] = {}
    for entry in manifest.tensor_index:
        dtype = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        offset = int(entry["byte_offset"])
        if offset < prev_end:
            raise IntegrityError(f"overlapping tensor regions at {entry['name']}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=offset).reshape(shape).copy()
        tensors[entry["name"]] = torch.from_numpy(arr)
        prev_end = offset + count * dtype.itemsize
    return tensors, manifest


def file_digest(path: str | os.PathLike) -> str:
    """sha256 of a file, used for run manifests."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_state_dict(module: torch.nn.Module, path, **kwargs) -> CheckpointManifest:
    """Convenience wrapper storing a module's state dict under its own names."""
    return save_checkpoint({k: v for k, v in module.state_dict().items()}, path=path, **kwargs)


def load_state_dict(module: torch.nn.Module, path) -> CheckpointManifest:
    tensors, manifest = load_checkpoint(path)
    module.load_state_dict({k: v.to(next(module.parameters()).dtype) if v.is_floating_point() else v for k, v in tensors.items()})
    return manifest

"""Binary checkpoint container and parameter-space merge operations.

Container layout (fixed little-endian):

    magic "CAPE" | version 0x01 | u64 header length | header JSON | data | metadata JSON

The header is a JSON array of ``{name, shape, offset, length}`` sorted by
name; ``offset`` is a byte offset into the data section, ``length`` an element
count, and offsets must be monotone and gap-free. The data section holds raw
little-endian float32 values, tensors contiguous in header order. Metadata is
a JSON object of string-to-string pairs occupying the rest of the file.

Equal checkpoints serialize to identical bytes: entries are written in
lexicographic name order and JSON is emitted in canonical compact form.
"""

from __future__ import annotations

import json
import math
import struct
from typing import Iterable, Mapping

import numpy as np

MAGIC = b"CAPE"
VERSION = 1
_PREFIX = struct.Struct("<Q")


class CheckpointError(Exception):
    """Base class for checkpoint container and merge errors."""


class MalformedHeaderError(CheckpointError):
    """Magic, version, header JSON, or header structure is invalid."""


class TruncatedDataError(CheckpointError):
    """The data section ends before the header-declared extent."""


class DuplicateNameError(CheckpointError):
    """The header declares the same tensor name more than once."""


class ShapeMismatchError(CheckpointError):
    """A header entry's length disagrees with the product of its shape."""


class MalformedMetadataError(CheckpointError):
    """The trailing metadata section is not a JSON string-to-string object."""


class IncompatibleCheckpointsError(CheckpointError):
    """Merge inputs differ in name sets or tensor shapes."""


class InvalidTensorError(CheckpointError):
    """A tensor violates its invariants (non-finite values)."""


class Checkpoint:
    """Ordered map from parameter name to a float32 tensor, plus metadata.

    Iteration order is lexicographic by name regardless of insertion order;
    that order is canonical for serialization and merging. Treat instances as
    immutable values: merges and loads always build fresh ones.
    """

    def __init__(self, entries: Mapping[str, np.ndarray], metadata: Mapping[str, str] | None = None):
        canon: dict[str, np.ndarray] = {}
        for name in sorted(entries):
            if not isinstance(name, str) or not name:
                raise ValueError(f"tensor name must be a non-empty string, got {name!r}")
            arr = np.ascontiguousarray(entries[name], dtype=np.float32)
            canon[name] = arr
        self._entries = canon
        self.metadata: dict[str, str] = {str(k): str(v) for k, v in (metadata or {}).items()}

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self._entries)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if self.names != other.names or self.metadata != other.metadata:
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for (_, a), (_, b) in zip(self.items(), other.items())
        )

    def allclose(self, other: "Checkpoint", atol: float = 1e-6) -> bool:
        """Elementwise comparison at an absolute tolerance, shapes exact."""
        if self.names != other.names:
            return False
        return all(
            a.shape == other[n].shape and np.allclose(a, other[n], rtol=0.0, atol=atol)
            for n, a in self.items()
        )

    def __repr__(self) -> str:
        return f"Checkpoint({len(self)} tensors, metadata={self.metadata!r})"


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def save(ckpt: Checkpoint, path) -> None:
    """Write the container; equal checkpoints produce byte-identical files."""
    header = []
    blobs = []
    offset = 0
    for name, arr in ckpt.items():
        if not np.all(np.isfinite(arr)):
            raise InvalidTensorError(f"tensor {name!r} contains non-finite values")
        data = arr.astype("<f4", copy=False).tobytes(order="C")
        header.append({"name": name, "shape": list(arr.shape), "offset": offset, "length": int(arr.size)})
        blobs.append(data)
        offset += len(data)
    header_bytes = _canonical_json(header)
    meta_bytes = _canonical_json(ckpt.metadata)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([VERSION]))
        fh.write(_PREFIX.pack(len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)
        fh.write(meta_bytes)


def load(path) -> Checkpoint:
    """Read a container written by :func:`save`; inverse of it bit for bit."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 1 + _PREFIX.size:
        raise MalformedHeaderError("file too short for magic, version and header length")
    if raw[: len(MAGIC)] != MAGIC:
        raise MalformedHeaderError(f"bad magic {raw[:len(MAGIC)]!r}")
    if raw[len(MAGIC)] != VERSION:
        raise MalformedHeaderError(f"unsupported container version {raw[len(MAGIC)]}")
    pos = len(MAGIC) + 1
    (header_len,) = _PREFIX.unpack_from(raw, pos)
    pos += _PREFIX.size
    if pos + header_len > len(raw):
        raise MalformedHeaderError("declared header length extends past end of file")
    try:
        header = json.loads(raw[pos : pos + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"header is not valid JSON: {exc}") from exc
    pos += header_len
    if not isinstance(header, list):
        raise MalformedHeaderError("header must be a JSON array")

    entries = []
    expected_offset = 0
    seen: set[str] = set()
    for i, ent in enumerate(header):
        if not isinstance(ent, dict) or set(ent) != {"name", "shape", "offset", "length"}:
            raise MalformedHeaderError(f"header entry {i} must have exactly name/shape/offset/length")
        name, shape, offset, length = ent["name"], ent["shape"], ent["offset"], ent["length"]
        if not isinstance(name, str) or not name:
            raise MalformedHeaderError(f"header entry {i} has an invalid name")
        if (
            not isinstance(shape, list)
            or not all(isinstance(d, int) and not isinstance(d, bool) and d >= 0 for d in shape)
        ):
            raise MalformedHeaderError(f"tensor {name!r} has an invalid shape")
        if not isinstance(offset, int) or not isinstance(length, int) or offset < 0 or length < 0:
            raise MalformedHeaderError(f"tensor {name!r} has invalid offset/length")
        if name in seen:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        seen.add(name)
        if length != math.prod(shape):
            raise ShapeMismatchError(
                f"tensor {name!r}: declared length {length} != product of shape {shape}"
            )
        if offset != expected_offset:
            raise MalformedHeaderError(
                f"tensor {name!r}: offset {offset} breaks monotone gap-free layout (expected {expected_offset})"
            )
        expected_offset += 4 * length
        entries.append((name, shape, length))
    names_in_order = [e[0] for e in entries]
    if names_in_order != sorted(names_in_order):
        raise MalformedHeaderError("header entries are not sorted by name")

    data_end = pos + expected_offset
    if data_end > len(raw):
        raise TruncatedDataError(
            f"data section truncated: need {expected_offset} bytes, have {len(raw) - pos}"
        )
    tensors: dict[str, np.ndarray] = {}
    cursor = pos
    for name, shape, length in entries:
        arr = np.frombuffer(raw, dtype="<f4", count=length, offset=cursor).reshape(shape)
        tensors[name] = arr.copy()
        cursor += 4 * length

    try:
        metadata = json.loads(raw[data_end:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedMetadataError(f"metadata is not valid JSON: {exc}") from exc
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise MalformedMetadataError("metadata must be a JSON object of strings")
    return Checkpoint(tensors, metadata)


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not math.isfinite(alpha):
        raise ValueError(f"mixing coefficient must be finite, got {alpha}")
    return alpha


def _check_compatible(ref: Checkpoint, other: Checkpoint, role: str) -> None:
    if ref.names != other.names:
        missing = sorted(set(ref.names) ^ set(other.names))
        raise IncompatibleCheckpointsError(f"{role}: tensor name sets differ (first offender {missing[0]!r})")
    for name, arr in ref.items():
        if arr.shape != other[name].shape:
            raise IncompatibleCheckpointsError(
                f"{role}: tensor {name!r} shape {other[name].shape} != {arr.shape}"
            )


def _merge_metadata(base: Checkpoint, strategy: str, **extra: str) -> dict[str, str]:
    # Carry the base model's descriptors (vocabulary sizes etc) so merged
    # checkpoints stay decodable; merge provenance overrides on top.
    meta = dict(base.metadata)
    meta.pop("name", None)
    meta["merge"] = strategy
    meta.update(extra)
    return meta


def cape_merge(base: Checkpoint, expert: Checkpoint, anti: Checkpoint, alpha: float) -> Checkpoint:
    """Contrastive merge: base plus alpha times (expert minus anti-expert).

    alpha == 0 short-circuits to an exact copy of the base tensors.
    Accumulation happens in float64 and rounds back to float32.
    """
    alpha = _check_alpha(alpha)
    _check_compatible(base, expert, "expert")
    _check_compatible(base, anti, "anti-expert")
    out: dict[str, np.ndarray] = {}
    for name, b in base.items():
        if alpha == 0.0:
            out[name] = b.copy()
        else:
            merged = b.astype(np.float64) + alpha * (
                expert[name].astype(np.float64) - anti[name].astype(np.float64)
            )
            out[name] = merged.astype(np.float32)
    meta = _merge_metadata(
        base,
        "cape",
        alpha=repr(alpha),
        **{
            "parent.base": base.metadata.get("name", ""),
            "parent.expert": expert.metadata.get("name", ""),
            "parent.anti": anti.metadata.get("name", ""),
        },
    )
    return Checkpoint(out, meta)


def wise_ft_merge(base: Checkpoint, expert: Checkpoint, alpha: float) -> Checkpoint:
    """Interpolation merge: (1 - alpha) * base + alpha * expert."""
    alpha = _check_alpha(alpha)
    _check_compatible(base, expert, "expert")
    out: dict[str, np.ndarray] = {}
    for name, b in base.items():
        merged = (1.0 - alpha) * b.astype(np.float64) + alpha * expert[name].astype(np.float64)
        out[name] = merged.astype(np.float32)
    meta = _merge_metadata(
        base,
        "wiseft",
        alpha=repr(alpha),
        **{
            "parent.base": base.metadata.get("name", ""),
            "parent.expert": expert.metadata.get("name", ""),
        },
    )
    return Checkpoint(out, meta)


def average_merge(ckpts: Iterable[Checkpoint]) -> Checkpoint:
    """Elementwise arithmetic mean of a nonempty list of checkpoints."""
    ckpts = list(ckpts)
    if not ckpts:
        raise ValueError("average_merge needs at least one checkpoint")
    first = ckpts[0]
    for i, other in enumerate(ckpts[1:], start=1):
        _check_compatible(first, other, f"input {i}")
    out: dict[str, np.ndarray] = {}
    for name, arr in first.items():
        acc = np.zeros(arr.shape, dtype=np.float64)
        for ck in ckpts:
            acc += ck[name].astype(np.float64)
        out[name] = (acc / len(ckpts)).astype(np.float32)
    parents = {f"parent.{i}": ck.metadata.get("name", "") for i, ck in enumerate(ckpts)}
    meta = _merge_metadata(first, "average", count=str(len(ckpts)), **parents)
    return Checkpoint(out, meta)


def diff_norm(a: Checkpoint, b: Checkpoint) -> float:
    """Euclidean norm of all elementwise differences, reduced in name order."""
    _check_compatible(a, b, "diff")
    total = 0.0
    for name, arr in a.items():
        d = arr.astype(np.float64) - b[name].astype(np.float64)
        total += float(np.sum(d * d))
    return math.sqrt(total)

"""Named-tensor checkpoint container.

Layout: 8-byte little-endian header length ``N``, ``N`` bytes of a JSON
object mapping tensor name to ``{"dtype", "shape", "data_offsets"}`` (plus an
optional ``__metadata__`` string table), then the raw little-endian data
block. Files written here load unmodified in other readers of the same
container and vice versa.
"""
from __future__ import annotations

import enum
import json
import math
import mmap
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

__all__ = [
    "DType",
    "TensorSpec",
    "NamedTensorMap",
    "AlignmentReport",
    "CheckpointFormatError",
    "CheckpointInvariantError",
    "CheckpointWriter",
    "load_checkpoint",
    "save_checkpoint",
    "validate_alignment",
    "widen",
    "narrow",
]

METADATA_KEY = "__metadata__"
_HEADER_ALIGN = 8


class DType(enum.Enum):
    F32 = "F32"
    F16 = "F16"
    BF16 = "BF16"

    @property
    def itemsize(self) -> int:
        return 4 if self is DType.F32 else 2

    @property
    def storage(self) -> np.dtype:
        """numpy dtype of the stored bits (BF16 is kept as raw ``uint16``)."""
        return _STORAGE[self]

    @classmethod
    def parse(cls, tag: str) -> "DType":
        try:
            return cls(tag.upper())
        except (ValueError, AttributeError):
            raise ValueError(f"unknown dtype {tag!r}") from None


_STORAGE = {
    DType.F32: np.dtype("<f4"),
    DType.F16: np.dtype("<f2"),
    DType.BF16: np.dtype("<u2"),
}


class CheckpointFormatError(ValueError):
    """Malformed container; ``offset`` is the absolute byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class CheckpointInvariantError(ValueError):
    pass


@dataclass(frozen=True)
class TensorSpec:
    name: str
    dtype: DType
    shape: tuple[int, ...]
    byte_range: tuple[int, int]

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.numel * self.dtype.itemsize


def widen(stored: np.ndarray, dtype: DType) -> np.ndarray:
    """Lossless conversion of stored values to a fresh float32 array."""
    if dtype is DType.BF16:
        return (stored.astype(np.uint32) << 16).view(np.float32)
    return stored.astype(np.float32)


def narrow(values: np.ndarray, dtype: DType) -> np.ndarray:
    """float32 -> storage representation, round-to-nearest-even."""
    values = np.ascontiguousarray(values, dtype=np.float32)
    if dtype is DType.F32:
        return values.astype("<f4", copy=False)
    if dtype is DType.F16:
        return values.astype("<f2")
    bits = values.view(np.uint32)
    nan = np.isnan(values)
    safe = np.where(nan, np.uint32(0), bits)
    out = ((safe + (np.uint32(0x7FFF) + ((safe >> 16) & np.uint32(1)))) >> 16).astype("<u2")
    if nan.any():
        out[nan] = ((bits[nan] >> 16) | 0x0040).astype("<u2")
    return out


class NamedTensorMap:
    """Ordered name -> tensor mapping backed by one contiguous byte block.

    ``specs`` are kept in storage order. Instances are immutable; arithmetic
    elsewhere always builds new maps.
    """

    def __init__(
        self,
        specs: Iterable[TensorSpec],
        data: bytes | bytearray | memoryview = b"",
        metadata: Mapping[str, str] | None = None,
    ):
        self.specs: tuple[TensorSpec, ...] = tuple(specs)
        self.data = memoryview(data).cast("B")
        self.metadata: dict[str, str] = dict(metadata or {})
        self._index = {s.name: i for i, s in enumerate(self.specs)}
        self.validate()

    def validate(self) -> None:
        _check_invariants(self.specs, len(self.data), self.metadata)

    @classmethod
    def from_arrays(
        cls,
        tensors: Mapping[str, np.ndarray | tuple[np.ndarray, DType]],
        metadata: Mapping[str, str] | None = None,
    ) -> "NamedTensorMap":
        """Pack arrays in mapping order.

        A bare float32/float16 array keeps its own dtype; ``(array, dtype)``
        narrows float values to ``dtype`` (a ``uint16`` array with BF16 is
        taken as raw bits).
        """
        specs, chunks, offset = [], [], 0
        for name, value in tensors.items():
            if isinstance(value, tuple):
                arr, dtype = value
                arr = np.asarray(arr)
                if not (dtype is DType.BF16 and arr.dtype == np.uint16):
                    arr = narrow(arr.astype(np.float32), dtype)
            else:
                arr = np.asarray(value)
                dtype = _infer_dtype(arr)
            raw = np.ascontiguousarray(arr, dtype=dtype.storage).tobytes()
            specs.append(TensorSpec(name, dtype, tuple(int(d) for d in arr.shape), (offset, offset + len(raw))))
            chunks.append(raw)
            offset += len(raw)
        return cls(specs, b"".join(chunks), metadata)

    def __len__(self) -> int:
        return len(self.specs)

    def __iter__(self) -> Iterator[str]:
        return (s.name for s in self.specs)

    def __contains__(self, name: object) -> bool:
        return name in self._index

    def names(self) -> list[str]:
        return [s.name for s in self.specs]

    def spec(self, name: str) -> TensorSpec:
        try:
            return self.specs[self._index[name]]
        except KeyError:
            raise KeyError(f"no tensor named {name!r}") from None

    def raw(self, name: str) -> memoryview:
        begin, end = self.spec(name).byte_range
        return self.data[begin:end]

    def array(self, name: str) -> np.ndarray:
        """Read-only view of the stored values (BF16 as raw uint16 bits)."""
        spec = self.spec(name)
        arr = np.frombuffer(self.raw(name), dtype=spec.dtype.storage)
        return arr.reshape(spec.shape)

    def to_f32(self, name: str) -> np.ndarray:
        spec = self.spec(name)
        return widen(self.array(name), spec.dtype)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, NamedTensorMap):
            return NotImplemented
        if self.metadata != other.metadata or len(self) != len(other):
            return False
        for a, b in zip(self.specs, other.specs):
            if (a.name, a.dtype, a.shape) != (b.name, b.dtype, b.shape):
                return False
            if self.raw(a.name) != other.raw(b.name):
                return False
        return True

    def __repr__(self) -> str:
        return f"NamedTensorMap({len(self)} tensors, {len(self.data)} bytes)"


def _check_invariants(specs, data_len: int, metadata: Mapping[str, str]) -> None:
    for key, value in metadata.items():
        if not isinstance(key, str) or not isinstance(value, str):
            raise CheckpointInvariantError("metadata must map strings to strings")
    seen = set()
    spans = []
    for spec in specs:
        if spec.name in seen:
            raise CheckpointInvariantError(f"duplicate tensor name {spec.name!r}")
        seen.add(spec.name)
        if spec.name == METADATA_KEY:
            raise CheckpointInvariantError(f"{METADATA_KEY!r} is reserved")
        if any((not isinstance(d, int)) or d < 0 for d in spec.shape):
            raise CheckpointInvariantError(f"{spec.name}: invalid shape {spec.shape}")
        begin, end = spec.byte_range
        if end - begin != spec.nbytes:
            raise CheckpointInvariantError(
                f"{spec.name}: byte range {spec.byte_range} does not hold shape {list(spec.shape)}"
                f" of {spec.dtype.value}"
            )
        if begin < 0 or end > data_len:
            raise CheckpointInvariantError(f"{spec.name}: byte range outside the data block")
        spans.append((begin, end, spec.name))
    spans.sort()
    for (_, e0, n0), (b1, _, n1) in zip(spans, spans[1:]):
        if b1 < e0:
            raise CheckpointInvariantError(f"byte ranges of {n0!r} and {n1!r} overlap")


def _infer_dtype(arr: np.ndarray) -> DType:
    if arr.dtype == np.float32:
        return DType.F32
    if arr.dtype == np.float16:
        return DType.F16
    raise CheckpointInvariantError(f"cannot infer container dtype from {arr.dtype}; pass (array, DType)")


# --------------------------------------------------------------------------- reading


def _header_pairs_hook(pairs):
    seen = {}
    for key, value in pairs:
        if key in seen:
            raise _DuplicateKey(key)
        seen[key] = value
    return seen


class _DuplicateKey(Exception):
    pass


def parse_header(header_bytes: bytes, data_len: int) -> tuple[list[TensorSpec], dict[str, str]]:
    """Parse and validate a header; offsets in errors are absolute file offsets."""
    base = 8
    try:
        text = header_bytes.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointFormatError("header is not valid UTF-8", base + exc.start) from None
    try:
        obj = json.loads(text, object_pairs_hook=_header_pairs_hook)
    except _DuplicateKey as exc:
        raise CheckpointFormatError(f"duplicate tensor name {exc.args[0]!r}", base + _locate(text, exc.args[0]))
    except json.JSONDecodeError as exc:
        raise CheckpointFormatError(f"malformed header JSON: {exc.msg}", base + len(text[: exc.pos].encode()))
    if not isinstance(obj, dict):
        raise CheckpointFormatError("header is not a JSON object", base)

    metadata = obj.pop(METADATA_KEY, None) or {}
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise CheckpointFormatError("__metadata__ must map strings to strings", base + _locate(text, METADATA_KEY))

    data_start = base + len(header_bytes)
    specs = []
    for name, entry in obj.items():
        at = base + _locate(text, name)
        if not isinstance(entry, dict) or not {"dtype", "shape", "data_offsets"} <= entry.keys():
            raise CheckpointFormatError(f"tensor {name!r}: entry needs dtype, shape, data_offsets", at)
        try:
            dtype = DType.parse(entry["dtype"])
        except ValueError:
            raise CheckpointFormatError(f"tensor {name!r}: unknown dtype {entry['dtype']!r}", at) from None
        shape, offsets = entry["shape"], entry["data_offsets"]
        if not isinstance(shape, list) or not all(isinstance(d, int) and d >= 0 for d in shape):
            raise CheckpointFormatError(f"tensor {name!r}: invalid shape {shape!r}", at)
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(isinstance(o, int) for o in offsets)
            or not 0 <= offsets[0] <= offsets[1]
        ):
            raise CheckpointFormatError(f"tensor {name!r}: invalid data_offsets {offsets!r}", at)
        begin, end = offsets
        if end > data_len:
            raise CheckpointFormatError(
                f"tensor {name!r}: data ends at {end} but the data block holds {data_len} bytes (truncated?)",
                data_start + min(begin, data_len),
            )
        spec = TensorSpec(name, dtype, tuple(shape), (begin, end))
        if spec.nbytes != end - begin:
            raise CheckpointFormatError(
                f"tensor {name!r}: {end - begin} bytes cannot hold shape {shape} of {dtype.value}",
                data_start + begin,
            )
        specs.append(spec)

    specs.sort(key=lambda s: (s.byte_range[0], s.byte_range[1]))
    for prev, cur in zip(specs, specs[1:]):
        if cur.byte_range[0] < prev.byte_range[1]:
            raise CheckpointFormatError(
                f"tensors {prev.name!r} and {cur.name!r} have overlapping byte ranges",
                data_start + cur.byte_range[0],
            )
    return specs, metadata


def _locate(text: str, name: str) -> int:
    pos = text.find(json.dumps(name))
    return len(text[:pos].encode()) if pos >= 0 else 0


def load_checkpoint(path: str | os.PathLike, *, use_mmap: bool = True) -> NamedTensorMap:
    """Load a container; tensor bytes are memory-mapped rather than read eagerly."""
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as fh:
        prefix = fh.read(8)
        if len(prefix) < 8:
            raise CheckpointFormatError("file too short for the 8-byte header length", len(prefix))
        (n,) = struct.unpack("<Q", prefix)
        if n > size - 8:
            raise CheckpointFormatError(
                f"header length {n} runs past end of file ({size} bytes); file truncated", 0
            )
        header = fh.read(n)
        data_len = size - 8 - n
        specs, metadata = parse_header(header, data_len)
        if data_len == 0:
            data: memoryview = memoryview(b"")
        elif use_mmap:
            mm = mmap.mmap(fh.fileno(), 0, access=mmap.ACCESS_READ)
            data = memoryview(mm)[8 + n :]
        else:
            data = memoryview(fh.read())
    return NamedTensorMap(specs, data, metadata)


# --------------------------------------------------------------------------- writing


class CheckpointWriter:
    """Stream tensors to a container in a fixed order, then rename into place.

    The layout (names, dtypes, shapes) is declared up front so the header can
    be written first and each tensor appended as soon as it is computed; peak
    memory stays at one tensor.
    """

    def __init__(
        self,
        path: str | os.PathLike,
        layout: Iterable[tuple[str, DType, tuple[int, ...]]],
        metadata: Mapping[str, str] | None = None,
    ):
        self.path = Path(path)
        self.specs: list[TensorSpec] = []
        offset = 0
        for name, dtype, shape in layout:
            nbytes = math.prod(shape) * dtype.itemsize
            self.specs.append(TensorSpec(name, dtype, tuple(int(d) for d in shape), (offset, offset + nbytes)))
            offset += nbytes
        # refuse bad layouts before anything touches disk
        _check_invariants(self.specs, offset, metadata or {})
        self.metadata = dict(metadata or {})
        self._next = 0
        self._fh = None
        self._tmp: str | None = None

    def header_bytes(self) -> bytes:
        header: dict = {}
        if self.metadata:
            header[METADATA_KEY] = self.metadata
        for spec in self.specs:
            header[spec.name] = {
                "dtype": spec.dtype.value,
                "shape": list(spec.shape),
                "data_offsets": list(spec.byte_range),
            }
        raw = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
        return raw + b" " * (-len(raw) % _HEADER_ALIGN)

    def __enter__(self) -> "CheckpointWriter":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fd, self._tmp = tempfile.mkstemp(prefix=f".{self.path.name}.", suffix=".tmp", dir=self.path.parent)
        self._fh = os.fdopen(fd, "wb")
        header = self.header_bytes()
        self._fh.write(struct.pack("<Q", len(header)))
        self._fh.write(header)
        return self

    def write(self, name: str, payload: bytes | memoryview | np.ndarray) -> None:
        if self._next >= len(self.specs):
            raise CheckpointInvariantError(f"unexpected tensor {name!r}: layout already complete")
        spec = self.specs[self._next]
        if name != spec.name:
            raise CheckpointInvariantError(f"expected tensor {spec.name!r} next, got {name!r}")
        if isinstance(payload, np.ndarray):
            payload = np.ascontiguousarray(payload, dtype=spec.dtype.storage).tobytes()
        if len(payload) != spec.nbytes:
            raise CheckpointInvariantError(f"{name}: got {len(payload)} bytes, expected {spec.nbytes}")
        self._fh.write(payload)
        self._next += 1

    def __exit__(self, exc_type, exc, tb) -> None:
        fh, tmp = self._fh, self._tmp
        self._fh = self._tmp = None
        try:
            if exc_type is None and self._next != len(self.specs):
                missing = [s.name for s in self.specs[self._next :]]
                raise CheckpointInvariantError(f"tensors never written: {missing}")
            if exc_type is None:
                fh.flush()
                os.fsync(fh.fileno())
        finally:
            fh.close()
            if exc_type is not None or self._next != len(self.specs):
                os.unlink(tmp)
        if exc_type is None:
            os.replace(tmp, self.path)


def save_checkpoint(m: NamedTensorMap, path: str | os.PathLike) -> None:
    """Write ``m`` atomically (temp file + rename), repacking tensors contiguously."""
    m.validate()
    layout = [(s.name, s.dtype, s.shape) for s in m.specs]
    with CheckpointWriter(path, layout, m.metadata) as writer:
        for spec in m.specs:
            writer.write(spec.name, m.raw(spec.name))


# --------------------------------------------------------------------------- alignment


@dataclass
class AlignmentReport:
    only_in_a: list[str] = field(default_factory=list)
    only_in_b: list[str] = field(default_factory=list)
    shape_mismatch: list[tuple[str, tuple[int, ...], tuple[int, ...]]] = field(default_factory=list)
    dtype_mismatch: list[tuple[str, str, str]] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not (self.only_in_a or self.only_in_b or self.shape_mismatch or self.dtype_mismatch)

    @property
    def elementwise_compatible(self) -> bool:
        # dtype differences are fine for arithmetic: everything is widened to F32
        return not (self.only_in_a or self.only_in_b or self.shape_mismatch)

    def swapped(self) -> "AlignmentReport":
        return AlignmentReport(
            list(self.only_in_b),
            list(self.only_in_a),
            [(n, sb, sa) for n, sa, sb in self.shape_mismatch],
            [(n, db, da) for n, da, db in self.dtype_mismatch],
        )

    def to_dict(self) -> dict:
        return {
            "only_in_a": self.only_in_a,
            "only_in_b": self.only_in_b,
            "shape_mismatch": [{"name": n, "a": list(a), "b": list(b)} for n, a, b in self.shape_mismatch],
            "dtype_mismatch": [{"name": n, "a": a, "b": b} for n, a, b in self.dtype_mismatch],
        }

    def __str__(self) -> str:
        if self.empty:
            return "checkpoints are aligned"
        lines = []
        lines += [f"only in a: {n}" for n in self.only_in_a]
        lines += [f"only in b: {n}" for n in self.only_in_b]
        lines += [f"shape mismatch: {n} {list(a)} vs {list(b)}" for n, a, b in self.shape_mismatch]
        lines += [f"dtype mismatch: {n} {a} vs {b}" for n, a, b in self.dtype_mismatch]
        return "\n".join(lines)


def validate_alignment(a: NamedTensorMap, b: NamedTensorMap) -> AlignmentReport:
    report = AlignmentReport()
    report.only_in_a = [n for n in a if n not in b]
    report.only_in_b = [n for n in b if n not in a]
    for name in a:
        if name not in b:
            continue
        sa, sb = a.spec(name), b.spec(name)
        if sa.shape != sb.shape:
            report.shape_mismatch.append((name, sa.shape, sb.shape))
        if sa.dtype is not sb.dtype:
            report.dtype_mismatch.append((name, sa.dtype.value, sb.dtype.value))
    return report

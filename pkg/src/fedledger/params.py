"""Named parameter tensors, their canonical byte encoding, and vector arithmetic.

A :class:`ParameterSet` is the unit exchanged between clients, the server
and the ledger. Entry order is the model's construction order and is part
of the schema; two sets can only be combined when their schemas match.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

_U64 = struct.Struct("<Q")


class SchemaMismatchError(ValueError):
    """Two parameter sets do not share the same ordered name/shape schema."""


class SerializationError(ValueError):
    """Parameter values cannot be canonically encoded (non-finite values)."""


def encode_u64(value: int) -> bytes:
    return _U64.pack(value)


def encode_text(text: str) -> bytes:
    raw = text.encode("utf-8")
    return encode_u64(len(raw)) + raw


class ParameterSet:
    """Immutable ordered mapping of parameter name to float64 array."""

    __slots__ = ("_entries",)

    def __init__(self, entries: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]] = ()):
        items = entries.items() if isinstance(entries, Mapping) else entries
        store: dict[str, np.ndarray] = {}
        for name, values in items:
            if not isinstance(name, str):
                raise TypeError(f"parameter name must be str, got {type(name).__name__}")
            if name in store:
                raise ValueError(f"duplicate parameter name {name!r}")
            arr = np.array(values, dtype=np.float64, copy=True)
            if any(d < 1 for d in arr.shape):
                raise ValueError(f"entry {name!r} has non-positive dimension in shape {arr.shape}")
            arr.setflags(write=False)
            store[name] = arr
        self._entries = store

    @classmethod
    def _from_owned(cls, entries: dict[str, np.ndarray]) -> "ParameterSet":
        # caller hands over freshly computed float64 arrays; skips the defensive copy
        obj = cls.__new__(cls)
        for arr in entries.values():
            arr.setflags(write=False)
        obj._entries = entries
        return obj

    @classmethod
    def from_flat(cls, schema: Sequence[tuple[str, tuple[int, ...]]], values: Sequence[Sequence[float]]) -> "ParameterSet":
        """Build from ``(name, shape)`` pairs and flat row-major value lists."""
        entries = []
        for (name, shape), vals in zip(schema, values, strict=True):
            arr = np.asarray(vals, dtype=np.float64)
            if arr.size != int(np.prod(shape, dtype=np.int64)):
                raise ValueError(f"entry {name!r}: {arr.size} values do not fill shape {tuple(shape)}")
            entries.append((name, arr.reshape(tuple(shape))))
        return cls(entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __contains__(self, name: object) -> bool:
        return name in self._entries

    def items(self):
        return self._entries.items()

    def names(self) -> list[str]:
        return list(self._entries)

    @property
    def schema(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        return tuple((name, arr.shape) for name, arr in self._entries.items())

    @property
    def size(self) -> int:
        return sum(arr.size for arr in self._entries.values())

    def __eq__(self, other: object) -> bool:
        # bitwise equality; 0.0 and -0.0 compare unequal, NaN payloads compare equal
        if not isinstance(other, ParameterSet):
            return NotImplemented
        if self.schema != other.schema:
            return False
        return all(
            a.tobytes() == other._entries[name].tobytes() for name, a in self._entries.items()
        )

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        inner = ", ".join(f"{n}{tuple(a.shape)}" for n, a in self._entries.items())
        return f"ParameterSet({inner})"

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self._entries.values())

    def flatten(self) -> np.ndarray:
        """All values concatenated in entry order as one float64 vector."""
        if not self._entries:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in self._entries.values()])

    def unflatten(self, vector: np.ndarray) -> "ParameterSet":
        """Inverse of :meth:`flatten` using this set's schema."""
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.size,):
            raise ValueError(f"expected vector of length {self.size}, got shape {vector.shape}")
        out, offset = [], 0
        for name, arr in self._entries.items():
            out.append((name, vector[offset:offset + arr.size].reshape(arr.shape)))
            offset += arr.size
        return ParameterSet(out)

    def map(self, fn) -> "ParameterSet":
        return ParameterSet((name, fn(arr)) for name, arr in self._entries.items())

    def zeros_like(self) -> "ParameterSet":
        return self.map(np.zeros_like)

    def canonical_bytes(self) -> bytes:
        return canonical_bytes(self)

    def digest(self) -> bytes:
        return digest(self)

    def to_json(self) -> list[dict]:
        """Debug export; not the digest input."""
        return [
            {"name": name, "shape": list(arr.shape), "values": arr.ravel().tolist()}
            for name, arr in self._entries.items()
        ]

    @classmethod
    def from_json(cls, obj: list[dict]) -> "ParameterSet":
        return cls.from_flat(
            [(e["name"], tuple(e["shape"])) for e in obj], [e["values"] for e in obj]
        )


def canonical_bytes(p: ParameterSet) -> bytes:
    """Platform-independent little-endian encoding of ``p``.

    Per entry: u64 name length, UTF-8 name, u64 rank, u64 per dimension,
    then every value as an IEEE-754 binary64 in row-major order.
    """
    chunks = []
    for name, arr in p.items():
        if not np.isfinite(arr).all():
            raise SerializationError(f"entry {name!r} contains non-finite values")
        chunks.append(encode_text(name))
        chunks.append(encode_u64(arr.ndim))
        chunks.extend(encode_u64(d) for d in arr.shape)
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(chunks)


def from_canonical_bytes(data: bytes) -> ParameterSet:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise SerializationError("truncated canonical parameter bytes")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    entries = []
    while pos < len(view):
        (name_len,) = _U64.unpack(take(8))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = _U64.unpack(take(8))
        shape = tuple(_U64.unpack(take(8))[0] for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64)
        entries.append((name, values.reshape(shape)))
    return ParameterSet(entries)


def digest(p: ParameterSet) -> bytes:
    """SHA-256 of the canonical encoding (32 bytes)."""
    return hashlib.sha256(canonical_bytes(p)).digest()


def check_schema(x: ParameterSet, y: ParameterSet) -> None:
    if x.schema == y.schema:
        return
    for (nx, sx), (ny, sy) in zip(x.schema, y.schema):
        if nx != ny or sx != sy:
            raise SchemaMismatchError(f"schema mismatch at entry {nx!r}{sx} vs {ny!r}{sy}")
    longer = x if len(x) > len(y) else y
    extra = longer.schema[min(len(x), len(y))][0]
    raise SchemaMismatchError(f"schema mismatch: entry {extra!r} present in only one set")


def axpy(a: float, x: ParameterSet, y: ParameterSet) -> ParameterSet:
    """Elementwise ``a * x + y``."""
    check_schema(x, y)
    return ParameterSet((name, a * arr + y[name]) for name, arr in x.items())


def scale(a: float, x: ParameterSet) -> ParameterSet:
    return x.map(lambda arr: a * arr)


def add(x: ParameterSet, y: ParameterSet) -> ParameterSet:
    check_schema(x, y)
    return ParameterSet((name, arr + y[name]) for name, arr in x.items())


def sub(x: ParameterSet, y: ParameterSet) -> ParameterSet:
    check_schema(x, y)
    return ParameterSet((name, arr - y[name]) for name, arr in x.items())


def l2_distance_sq(x: ParameterSet, y: ParameterSet) -> float:
    check_schema(x, y)
    total = 0.0
    for name, arr in x.items():
        diff = arr - y[name]
        total += float(np.dot(diff.ravel(), diff.ravel()))
    return total

"""Serializable optimistic key-value store holding all filesystem metadata.

Values live in named spaces and are either opaque blobs or lists of opaque
elements with an auxiliary ``end`` integer (a region's end offset). Every
successful mutation of a key bumps its version by one; deleted keys keep
their version so a later re-create can't be mistaken for the value a
transaction read earlier.

Transactions buffer mutations client-side (``TxnContext``) and are
validated in one step by ``MetaStore.commit``: first committer wins.
"""

from __future__ import annotations

import os
import struct
import threading
import zlib
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Optional

from .encoding import Reader, blob32, str16, u8, u32, u64
from .errors import Conflict, InvalidArgument, NotFound, TypeMismatch, UseAfterClose

BLOB = "blob"
LIST = "list"

PUT = 1
DELETE = 2
APPEND = 3
SETLIST = 4
COND_APPEND = 5
EXTEND = 6


@dataclass(frozen=True)
class VersionedValue:
    value: object  # bytes, tuple of bytes, or None when absent
    version: int
    end: int = 0

    @property
    def exists(self) -> bool:
        return self.value is not None

    @property
    def items(self) -> tuple:
        if self.value is None:
            return ()
        if not isinstance(self.value, tuple):
            raise TypeMismatch("value is not a list")
        return self.value


ABSENT = VersionedValue(None, 0, 0)


@dataclass(frozen=True)
class Mutation:
    kind: int
    space: str
    key: bytes
    value: object = b""
    end: int = 0
    length: int = 0
    limit: int = 0


@dataclass(frozen=True)
class CondResult:
    applied: bool
    prior_end: int
    version: int


def apply_mutation(cur: VersionedValue, m: Mutation) -> Optional[VersionedValue]:
    """Pure state transition; returns None when a conditional append's guard fails."""
    v = cur.version + 1
    if m.kind == PUT:
        return VersionedValue(m.value, v, 0)
    if m.kind == DELETE:
        return VersionedValue(None, v, 0)
    if m.kind == SETLIST:
        return VersionedValue(tuple(m.value), v, m.end)
    if cur.value is not None and not isinstance(cur.value, tuple):
        raise TypeMismatch("list operation on a blob value")
    items = cur.value or ()
    if m.kind == APPEND:
        return VersionedValue(items + (m.value,), v, max(cur.end, m.end))
    if m.kind == EXTEND:
        return VersionedValue(items + tuple(m.value), v, max(cur.end, m.end))
    if m.kind == COND_APPEND:
        if cur.end + m.length > m.limit:
            return None
        return VersionedValue(items + (m.value,), v, cur.end + m.length)
    raise InvalidArgument(f"unknown mutation kind {m.kind}")


def encode_mutation(m: Mutation) -> bytes:
    head = u8(m.kind) + str16(m.space) + blob32(m.key)
    if m.kind == PUT:
        return head + blob32(m.value)
    if m.kind == DELETE:
        return head
    if m.kind == APPEND:
        return head + blob32(m.value) + u64(m.end)
    if m.kind in (SETLIST, EXTEND):
        return head + u32(len(m.value)) + b"".join(blob32(x) for x in m.value) + u64(m.end)
    if m.kind == COND_APPEND:
        return head + blob32(m.value) + u64(m.length) + u64(m.limit)
    raise InvalidArgument(f"unknown mutation kind {m.kind}")


def read_mutation(r: Reader) -> Mutation:
    kind = r.u8()
    space = r.str16()
    key = r.blob32()
    if kind == PUT:
        return Mutation(kind, space, key, r.blob32())
    if kind == DELETE:
        return Mutation(kind, space, key)
    if kind == APPEND:
        val = r.blob32()
        return Mutation(kind, space, key, val, end=r.u64())
    if kind in (SETLIST, EXTEND):
        items = tuple(r.blob32() for _ in range(r.u32()))
        return Mutation(kind, space, key, items, end=r.u64())
    if kind == COND_APPEND:
        val = r.blob32()
        return Mutation(kind, space, key, val, length=r.u64(), limit=r.u64())
    raise InvalidArgument(f"unknown mutation kind {kind}")


_WAL_HEAD = struct.Struct(">II")


class _Wal:
    """Append-only log of applied mutations: (crc32, length, version + mutation)."""

    def __init__(self, path: str, fsync: bool = False):
        self.path = path
        self.fsync = fsync
        self.f = open(path, "ab")

    def append(self, records: list) -> None:
        chunks = []
        for version, m in records:
            payload = u64(version) + encode_mutation(m)
            chunks.append(_WAL_HEAD.pack(zlib.crc32(payload), len(payload)) + payload)
        self.f.write(b"".join(chunks))
        self.f.flush()
        if self.fsync:
            os.fsync(self.f.fileno())

    @staticmethod
    def replay(path: str):
        if not os.path.exists(path):
            return
        with open(path, "rb") as f:
            data = f.read()
        pos = 0
        while pos + _WAL_HEAD.size <= len(data):
            crc, n = _WAL_HEAD.unpack_from(data, pos)
            payload = data[pos + _WAL_HEAD.size: pos + _WAL_HEAD.size + n]
            if len(payload) < n or zlib.crc32(payload) != crc:
                break  # torn tail from a crash mid-append
            r = Reader(payload)
            version = r.u64()
            yield version, read_mutation(r)
            pos += _WAL_HEAD.size + n

    def close(self):
        self.f.close()


class MetaStore:
    def __init__(self, wal_path: Optional[str] = None, fsync: bool = False):
        self._spaces: dict[str, dict[bytes, VersionedValue]] = {}
        self._lock = threading.Lock()
        self.counters = Counter()
        self._wal = None
        if wal_path:
            for version, m in _Wal.replay(wal_path):
                space = self._spaces.setdefault(m.space, {})
                cur = space.get(m.key, ABSENT)
                nxt = apply_mutation(cur, m)
                space[m.key] = VersionedValue(nxt.value, version, nxt.end)
            self._wal = _Wal(wal_path, fsync)

    def close(self):
        if self._wal:
            self._wal.close()

    # -- single-key operations -------------------------------------------------

    def read(self, space: str, key: bytes) -> VersionedValue:
        """Current value and version; ``value`` is None for absent keys."""
        with self._lock:
            self.counters["get"] += 1
            return self._spaces.get(space, {}).get(key, ABSENT)

    def get(self, space: str, key: bytes) -> VersionedValue:
        vv = self.read(space, key)
        if vv.value is None:
            raise NotFound(f"{space}/{key.hex()}")
        return vv

    def put(self, space: str, key: bytes, value: bytes) -> int:
        return self._single(Mutation(PUT, space, key, value), "put").version

    def delete(self, space: str, key: bytes) -> int:
        return self._single(Mutation(DELETE, space, key), "delete").version

    def list_append(self, space: str, key: bytes, element: bytes, end: int = 0) -> int:
        return self._single(Mutation(APPEND, space, key, element, end=end), "list_append").version

    def list_extend(self, space: str, key: bytes, elements, end: int = 0) -> int:
        return self._single(Mutation(EXTEND, space, key, tuple(elements), end=end), "list_append").version

    def cond_list_append(self, space: str, key: bytes, element: bytes, length: int, limit: int) -> CondResult:
        """Append iff ``end + length <= limit``; on success ``end`` advances by ``length``."""
        m = Mutation(COND_APPEND, space, key, element, length=length, limit=limit)
        with self._lock:
            self.counters["cond_list_append"] += 1
            cur = self._spaces.get(space, {}).get(key, ABSENT)
            nxt = apply_mutation(cur, m)
            if nxt is None:
                return CondResult(False, cur.end, cur.version)
            self._install([(m, nxt)])
            return CondResult(True, cur.end, nxt.version)

    def _single(self, m: Mutation, counter: str) -> VersionedValue:
        with self._lock:
            self.counters[counter] += 1
            cur = self._spaces.get(m.space, {}).get(m.key, ABSENT)
            nxt = apply_mutation(cur, m)
            self._install([(m, nxt)])
            return nxt

    def _install(self, applied):
        if self._wal:
            self._wal.append([(nxt.version, m) for m, nxt in applied])
        for m, nxt in applied:
            self._spaces.setdefault(m.space, {})[m.key] = nxt

    def scan(self, space: str) -> list[tuple[bytes, VersionedValue]]:
        with self._lock:
            self.counters["scan"] += 1
            return [(k, v) for k, v in self._spaces.get(space, {}).items() if v.value is not None]

    # -- transactions -------------------------------------------------------------

    def begin(self) -> "TxnContext":
        return TxnContext(self)

    def commit(self, read_set: dict, mutations: Iterable[Mutation]) -> bool:
        """Validate ``read_set`` versions and apply ``mutations`` atomically.

        Returns False (and changes nothing) when any read version moved or a
        buffered conditional append's guard no longer holds.
        """
        mutations = list(mutations)
        with self._lock:
            self.counters["commit"] += 1
            for (space, key), version in read_set.items():
                if self._spaces.get(space, {}).get(key, ABSENT).version != version:
                    self.counters["conflict"] += 1
                    return False
            staged: dict = {}
            applied = []
            for m in mutations:
                k = (m.space, m.key)
                cur = staged.get(k) or self._spaces.get(m.space, {}).get(m.key, ABSENT)
                try:
                    nxt = apply_mutation(cur, m)
                except TypeMismatch:
                    self.counters["conflict"] += 1
                    return False
                if nxt is None:
                    self.counters["conflict"] += 1
                    return False
                if m.kind == COND_APPEND:
                    m = Mutation(APPEND, m.space, m.key, m.value, end=nxt.end)
                staged[k] = nxt
                applied.append((m, nxt))
            if applied:
                self._install(applied)
            return True

    def counter_snapshot(self) -> dict:
        with self._lock:
            return dict(self.counters)


class TxnContext:
    """Client-side transaction: read set plus buffered mutations.

    Works against anything exposing ``read`` and ``commit`` with MetaStore's
    signatures, so the same class drives the embedded and networked store.
    """

    def __init__(self, store):
        self.store = store
        self.read_set: dict = {}
        self._base: dict = {}
        self._pending: dict = {}
        self.mutations: list[Mutation] = []
        self.status = "open"

    def _check_open(self):
        if self.status != "open":
            raise UseAfterClose(f"transaction is {self.status}")

    def get(self, space: str, key: bytes) -> Optional[VersionedValue]:
        """Value as this transaction sees it (own writes included), or None."""
        self._check_open()
        k = (space, key)
        base = self._base.get(k)
        if base is None:
            base = self.store.read(space, key)
            self._base[k] = base
            self.read_set[k] = base.version
        cur = base
        for m in self._pending.get(k, ()):
            nxt = apply_mutation(cur, m)
            if nxt is not None:
                cur = nxt
        return cur if cur.value is not None else None

    def _buffer(self, m: Mutation):
        self._check_open()
        self._pending.setdefault((m.space, m.key), []).append(m)
        self.mutations.append(m)

    def put(self, space: str, key: bytes, value: bytes):
        self._buffer(Mutation(PUT, space, key, value))

    def delete(self, space: str, key: bytes):
        self._buffer(Mutation(DELETE, space, key))

    def list_append(self, space: str, key: bytes, element: bytes, end: int = 0):
        self._buffer(Mutation(APPEND, space, key, element, end=end))

    def list_extend(self, space: str, key: bytes, elements, end: int = 0):
        """Append several elements as one mutation (one version bump)."""
        self._buffer(Mutation(EXTEND, space, key, tuple(elements), end=end))

    def set_list(self, space: str, key: bytes, items, end: int):
        self._buffer(Mutation(SETLIST, space, key, tuple(items), end=end))

    def cond_list_append(self, space: str, key: bytes, element: bytes, length: int, limit: int):
        """Buffered guarded append; a guard failing at commit time is a Conflict."""
        self._buffer(Mutation(COND_APPEND, space, key, element, length=length, limit=limit))

    def has_pending(self, space: str, key: bytes) -> bool:
        return bool(self._pending.get((space, key)))

    def savepoint(self) -> int:
        return len(self.mutations)

    def rollback(self, savepoint: int) -> None:
        """Drop mutations buffered after ``savepoint``; reads stay in the read set."""
        del self.mutations[savepoint:]
        self._pending = {}
        for m in self.mutations:
            self._pending.setdefault((m.space, m.key), []).append(m)

    @property
    def is_read_only(self) -> bool:
        return not self.mutations

    def commit(self) -> bool:
        self._check_open()
        ok = self.store.commit(self.read_set, self.mutations)
        self.status = "committed" if ok else "aborted"
        return ok

    def commit_or_raise(self):
        if not self.commit():
            raise Conflict("read set invalidated")

    def abort(self):
        if self.status == "open":
            self.status = "aborted"

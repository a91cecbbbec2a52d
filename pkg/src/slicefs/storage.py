"""Slice storage daemon: create and read slices, plus the local GC executor.

The server knows nothing about files, offsets or replication. Slices are
appended to one of several backing files chosen by hashing the writer's
region hint, and a slice pointer is the only index to them.
"""

from __future__ import annotations

import json
import os
import secrets
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

from . import intervals
from .encoding import InUseList
from .errors import InvalidArgument, IoFailure, NotFound, OutOfSpace, StaleScan, WrongServer
from .placement import FILE_SALT, HashRing, region_token
from .slices import SlicePointer

DEFAULT_BACKING_FILES = 8
DEFAULT_MAX_SLICE = 64 * 1024 * 1024
_COPY_CHUNK = 4 * 1024 * 1024


@dataclass
class GcReport:
    server_id: int
    scan_id: int
    candidates: list = field(default_factory=list)  # (backing_file, collectible bytes), most garbage first
    total_bytes: int = 0

    @property
    def garbage_bytes(self) -> int:
        return sum(n for _, n in self.candidates)

    @property
    def garbage_fraction(self) -> float:
        return self.garbage_bytes / self.total_bytes if self.total_bytes else 0.0


class _BackingFile:
    def __init__(self, name: str, path: Optional[str]):
        self.name = name
        self.path = path
        self.lock = threading.RLock()
        self.reclaimed: list = []
        if path is None:
            self.buf = bytearray()
            self.fd = None
            self.size = 0
        else:
            self.buf = None
            self.fd = os.open(path, os.O_RDWR | os.O_CREAT, 0o644)
            self.size = os.fstat(self.fd).st_size
            holes = path + ".holes"
            if os.path.exists(holes):
                with open(holes) as f:
                    self.reclaimed = [tuple(x) for x in json.load(f)]

    def append(self, data: bytes, fsync: bool) -> int:
        off = self.size
        if self.fd is None:
            self.buf += data
        else:
            n = os.pwrite(self.fd, data, off)
            if n != len(data):
                raise IoFailure(f"short write to {self.name}")
            if fsync:
                os.fsync(self.fd)
        self.size = off + len(data)
        return off

    def pread(self, off: int, n: int) -> bytes:
        if self.fd is None:
            return bytes(self.buf[off:off + n])
        return os.pread(self.fd, n, off)

    def physical(self) -> int:
        if self.fd is None:
            return self.size - intervals.total(self.reclaimed)
        return os.fstat(self.fd).st_blocks * 512

    def save_holes(self):
        if self.path is not None:
            tmp = self.path + ".holes.tmp"
            with open(tmp, "w") as f:
                json.dump(self.reclaimed, f)
            os.replace(tmp, self.path + ".holes")

    def close(self):
        if self.fd is not None:
            os.close(self.fd)
            self.fd = None


class StorageServer:
    """Stores slices in ``backing_files`` local files (in memory when ``data_dir`` is None)."""

    def __init__(self, server_id: Optional[int] = None, data_dir: Optional[str] = None,
                 backing_files: int = DEFAULT_BACKING_FILES, fsync: bool = False,
                 max_slice: int = DEFAULT_MAX_SLICE, capacity: Optional[int] = None):
        self.data_dir = data_dir
        self.fsync = fsync
        self.max_slice = max_slice
        self.capacity = capacity
        self.counters = Counter()
        self._lock = threading.Lock()
        if data_dir is not None:
            os.makedirs(data_dir, exist_ok=True)
            ident = os.path.join(data_dir, "server_id")
            if server_id is None and os.path.exists(ident):
                with open(ident) as f:
                    server_id = int(f.read().strip())
        self.server_id = server_id if server_id is not None else (secrets.randbits(63) or 1)
        if data_dir is not None:
            self._save_identity()
        names = [f"b{i}" for i in range(backing_files)]
        self._files = {
            n: _BackingFile(n, None if data_dir is None else os.path.join(data_dir, n)) for n in names
        }
        self._ring = HashRing(names, salt=FILE_SALT)
        self._watermarks: dict[int, dict[str, int]] = {}
        self._last_scan: Optional[int] = None
        self._prev_refs: Optional[dict] = None
        self._collectible: dict[str, list] = {}

    def _save_identity(self):
        with open(os.path.join(self.data_dir, "server_id"), "w") as f:
            f.write(str(self.server_id))

    def set_server_id(self, server_id: int):
        self.server_id = server_id
        if self.data_dir is not None:
            self._save_identity()

    def close(self):
        for bf in self._files.values():
            bf.close()

    @property
    def backing_files(self) -> list[str]:
        return list(self._files)

    def backing_file_for(self, file_id: int, region_index: int) -> str:
        return self._ring.lookup(region_token(file_id, region_index))

    # -- the two data-path calls ---------------------------------------------------

    def create_slice(self, file_id: int, region_index: int, data: bytes) -> SlicePointer:
        n = len(data)
        if n == 0:
            raise InvalidArgument("empty slice")
        if n > self.max_slice:
            raise InvalidArgument(f"slice of {n} bytes exceeds limit {self.max_slice}")
        if self.capacity is not None and self.logical_bytes() + n > self.capacity:
            raise OutOfSpace(f"server {self.server_id} full")
        bf = self._files[self.backing_file_for(file_id, region_index)]
        with bf.lock:
            off = bf.append(data, self.fsync)
        with self._lock:
            self.counters["creates"] += 1
            self.counters["bytes_written"] += n
        return SlicePointer(self.server_id, bf.name, off, n)

    def read_slice(self, p: SlicePointer) -> bytes:
        if p.server_id != self.server_id:
            raise WrongServer(f"pointer for server {p.server_id} sent to {self.server_id}")
        bf = self._files.get(p.backing_file)
        if bf is None:
            raise NotFound(f"no backing file {p.backing_file}")
        with bf.lock:
            if p.end > bf.size or intervals.overlaps(bf.reclaimed, p.file_offset, p.end):
                with self._lock:
                    self.counters["read_misses"] += 1
                raise NotFound(f"{p.backing_file}[{p.file_offset}, {p.end}) not stored")
            data = bf.pread(p.file_offset, p.length)
        with self._lock:
            self.counters["reads"] += 1
            self.counters["bytes_read"] += len(data)
        return data

    # -- garbage collection ----------------------------------------------------------

    def mark_scan(self, scan_id: int) -> None:
        """Record each backing file's size as scan ``scan_id`` starts walking metadata."""
        marks = {}
        for bf in self._files.values():
            with bf.lock:
                marks[bf.name] = bf.size
        with self._lock:
            self._watermarks[scan_id] = marks

    def apply_in_use_list(self, l: InUseList) -> GcReport:
        """Fold in a scan's in-use list and report what has become collectible.

        An extent is collectible iff it is unreferenced in this scan and the
        previous one, and it was written before the previous scan started.
        """
        if l.server_id != self.server_id:
            raise WrongServer(f"in-use list for {l.server_id} sent to {self.server_id}")
        with self._lock:
            if self._last_scan is not None and l.scan_id <= self._last_scan:
                raise StaleScan(f"scan {l.scan_id} <= last applied {self._last_scan}")
            refs: dict[str, list] = {}
            for name, off, n in l.extents:
                refs.setdefault(name, []).append((off, off + n))
            refs = {k: intervals.normalize(v) for k, v in refs.items()}
            prev_marks = self._watermarks.get(self._last_scan) if self._last_scan is not None else None
            collectible: dict[str, list] = {}
            if self._prev_refs is not None and prev_marks is not None:
                for name, bf in self._files.items():
                    cand = [(0, prev_marks.get(name, 0))]
                    cand = intervals.subtract(cand, self._prev_refs.get(name, []))
                    cand = intervals.subtract(cand, refs.get(name, []))
                    with bf.lock:
                        cand = intervals.subtract(cand, bf.reclaimed)
                    if cand:
                        collectible[name] = cand
            self._collectible = collectible
            self._prev_refs = refs
            self._last_scan = l.scan_id
            for sid in [s for s in self._watermarks if s < l.scan_id]:
                del self._watermarks[sid]
            return self._report()

    def _report(self) -> GcReport:
        cands = [(name, intervals.total(c)) for name, c in self._collectible.items() if c]
        cands.sort(key=lambda x: (-x[1], x[0]))
        return GcReport(self.server_id, self._last_scan or 0, cands, self.logical_bytes())

    def gc_report(self) -> GcReport:
        with self._lock:
            return self._report()

    def collect_backing_file(self, name: str) -> int:
        """Rewrite ``name`` keeping live bytes at their offsets; returns bytes reclaimed."""
        bf = self._files.get(name)
        if bf is None:
            raise NotFound(name)
        with self._lock:
            garbage = self._collectible.get(name, [])
        with bf.lock:
            garbage = intervals.subtract(garbage, bf.reclaimed)
            if not garbage:
                return 0
            dead = intervals.union(bf.reclaimed, garbage)
            live = intervals.subtract([(0, bf.size)], dead)
            written = self._rewrite(bf, live, garbage)
            bf.reclaimed = dead
            bf.save_holes()
        freed = intervals.total(garbage)
        with self._lock:
            self._collectible[name] = []
            self.counters["gc_bytes_written"] += written
            self.counters["gc_bytes_reclaimed"] += freed
            self.counters["gc_files_collected"] += 1
        return freed

    def _rewrite(self, bf: _BackingFile, live: list, garbage: list) -> int:
        if bf.fd is None:
            for a, b in garbage:
                bf.buf[a:b] = bytes(b - a)
            return 0
        tmp = bf.path + ".gc"
        fd2 = os.open(tmp, os.O_RDWR | os.O_CREAT | os.O_TRUNC, 0o644)
        written = 0
        try:
            for a, b in live:
                pos = a
                while pos < b:
                    n = min(_COPY_CHUNK, b - pos)
                    chunk = os.pread(bf.fd, n, pos)
                    os.pwrite(fd2, chunk, pos)
                    written += len(chunk)
                    pos += n
            os.ftruncate(fd2, bf.size)
            if self.fsync:
                os.fsync(fd2)
            os.replace(tmp, bf.path)
        except BaseException:
            os.close(fd2)
            raise
        os.close(bf.fd)
        bf.fd = fd2
        return written

    # -- accounting ------------------------------------------------------------------------

    def logical_bytes(self) -> int:
        return sum(bf.size for bf in self._files.values())

    def usage(self) -> dict:
        files = {}
        for bf in self._files.values():
            with bf.lock:
                files[bf.name] = {
                    "size": bf.size,
                    "physical": bf.physical(),
                    "reclaimed": intervals.total(bf.reclaimed),
                }
        return {
            "logical": sum(f["size"] for f in files.values()),
            "physical": sum(f["physical"] for f in files.values()),
            "reclaimed": sum(f["reclaimed"] for f in files.values()),
            "files": files,
        }

    def counter_snapshot(self) -> dict:
        with self._lock:
            return dict(self.counters)

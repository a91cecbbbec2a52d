"""Distributed sort benchmark: conventional copy-based sort vs. slice-based sort.

Both modes run the same three stages over fixed-size records whose first
``keylen`` bytes are the sort key:

1. bucket: each worker reads its share of the input and routes every record
   to one of ``workers`` key-range partitions (one part file per worker and
   partition);
2. sort: worker ``b`` reads the part files of partition ``b``, sorts the
   records by key and produces ``sorted_b``;
3. merge: the sorted partitions are joined, in order, into the output.

The conventional mode moves bytes at every stage (3x read, 3x write). The
slicing mode reads record data only where keys must be inspected (stages 1
and 2) and builds every output by pasting yanked slice pointers, so no data
is rewritten.
"""

from __future__ import annotations

import hashlib
import random
import threading
import time
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Optional

from .cluster import LocalCluster
from .config import FsConfig
from .errors import VerificationFailed
from .slices import SliceEntry

MiB = 1024 * 1024


@dataclass
class SortReport:
    mode: str
    input_bytes: int
    records: int
    workers: int
    stage_seconds: dict = field(default_factory=dict)
    stage_read: dict = field(default_factory=dict)
    stage_write: dict = field(default_factory=dict)
    bytes_read: int = 0
    bytes_written: int = 0
    verified: bool = False

    @property
    def seconds(self) -> float:
        return sum(self.stage_seconds.values())

    @property
    def read_factor(self) -> float:
        return self.bytes_read / self.input_bytes

    @property
    def write_factor(self) -> float:
        return self.bytes_written / self.input_bytes

    def summary(self) -> str:
        stages = " ".join(f"{k}={v:.2f}s" for k, v in self.stage_seconds.items())
        return (f"{self.mode:12s} {self.seconds:7.2f}s  read {self.read_factor:.3f}x  "
                f"write {self.write_factor:.3f}x  [{stages}] verified={self.verified}")


def cut(entries: list[SliceEntry], starts: list[int], start: int, length: int, base: int) -> list[SliceEntry]:
    """Entries covering ``[start, start+length)`` of a yanked list, placed from ``base``."""
    out = []
    i = max(bisect_right(starts, start) - 1, 0)
    stop = start + length
    while i < len(entries) and starts[i] < stop:
        e = entries[i]
        a, b = max(start, e.offset), min(stop, e.offset + e.length)
        if b > a:
            out.append(e.sub(a - e.offset, b - a, base + a - start))
        i += 1
    return out


def _parallel(fn, n: int):
    errors = []

    def run(i):
        try:
            fn(i)
        except BaseException as e:  # reported by the caller
            errors.append(e)

    threads = [threading.Thread(target=run, args=(i,)) for i in range(n)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]


class SortJob:
    def __init__(self, cluster: LocalCluster, size: int, record: int, keylen: int, workers: int, seed: int = 0):
        if size % record:
            raise ValueError("input size must be a whole number of records")
        self.cluster = cluster
        self.size, self.record, self.keylen, self.workers = size, record, keylen, workers
        self.n = size // record
        self.seed = seed
        self.clients = [cluster.client(seed=seed + i) for i in range(workers)]
        self.fs = self.clients[0]

    def bucket_of(self, key: bytes) -> int:
        return int.from_bytes(key[:4], "big") * self.workers >> 32

    def share(self, w: int) -> range:
        lo = self.n * w // self.workers
        return range(lo, self.n * (w + 1) // self.workers)

    def part(self, w: int, b: int) -> str:
        return f"/sort/part-{w}-{b}"

    def setup(self) -> bytes:
        """Write the input and pre-create every file the stages touch."""
        fs = self.fs
        fs.makedirs("/sort")
        data = random.Random(self.seed).randbytes(self.size)
        fs.write_file("/sort/input", data)
        for w in range(self.workers):
            for b in range(self.workers):
                fs.create(self.part(w, b))
        for b in range(self.workers):
            fs.create(f"/sort/sorted-{b}")
        fs.create("/sort/output")
        return data

    def _keys(self, data: bytes):
        r, k = self.record, self.keylen
        return [data[i:i + k] for i in range(0, len(data), r)]

    # -- conventional --------------------------------------------------------------------

    def conv_bucket(self, w: int):
        fs = self.clients[w]
        rng = self.share(w)
        h = fs.open("/sort/input")
        h.seek(rng.start * self.record)
        data = h.read(len(rng) * self.record)
        outs = [bytearray() for _ in range(self.workers)]
        for i in range(0, len(data), self.record):
            outs[self.bucket_of(data[i:i + self.keylen])] += data[i:i + self.record]
        for b, buf in enumerate(outs):
            if buf:
                fs.open(self.part(w, b), "rw").write(bytes(buf))

    def conv_sort(self, b: int):
        fs = self.clients[b]
        data = b"".join(fs.read_file(self.part(w, b)) for w in range(self.workers))
        r = self.record
        recs = sorted(range(0, len(data), r), key=lambda i: data[i:i + self.keylen])
        if recs:
            fs.open(f"/sort/sorted-{b}", "rw").write(b"".join(data[i:i + r] for i in recs))

    def conv_merge(self):
        h = self.fs.open("/sort/output", "rw")
        for b in range(self.workers):
            chunk = self.fs.read_file(f"/sort/sorted-{b}")
            if chunk:
                h.write(chunk)

    # -- slicing -------------------------------------------------------------------------

    def slice_bucket(self, w: int):
        fs = self.clients[w]
        rng = self.share(w)
        if not len(rng):
            return
        h = fs.open("/sort/input")
        h.seek(rng.start * self.record)
        entries, data = h.yank(len(rng) * self.record, with_data=True)
        starts = [e.offset for e in entries]
        outs: list[list] = [[] for _ in range(self.workers)]
        pos = [0] * self.workers
        for i in range(0, len(data), self.record):
            b = self.bucket_of(data[i:i + self.keylen])
            outs[b].extend(cut(entries, starts, i, self.record, pos[b]))
            pos[b] += self.record
        for b, ents in enumerate(outs):
            if ents:
                fs.open(self.part(w, b), "rw").paste(ents)

    def slice_sort(self, b: int):
        fs = self.clients[b]
        r = self.record
        recs = []  # (key, worker, offset, entries, starts)
        for w in range(self.workers):
            h = fs.open(self.part(w, b))
            n = h.length()
            if not n:
                continue
            entries, data = h.yank(n, with_data=True)
            starts = [e.offset for e in entries]
            for i in range(0, n, r):
                recs.append((data[i:i + self.keylen], w, i, entries, starts))
        recs.sort(key=lambda t: t[:3])
        out = []
        for j, (_, _, i, entries, starts) in enumerate(recs):
            out.extend(cut(entries, starts, i, r, j * r))
        if out:
            fs.open(f"/sort/sorted-{b}", "rw").paste(out)

    def slice_merge(self):
        self.fs.concat([f"/sort/sorted-{b}" for b in range(self.workers)], "/sort/output", overwrite=True)

    # -- driver ------------------------------------------------------------------------------

    def run(self, mode: str, verify: bool = True) -> SortReport:
        if mode not in ("conventional", "slicing"):
            raise ValueError(f"unknown mode {mode!r}")
        data = self.setup()
        rep = SortReport(mode, self.size, self.n, self.workers)
        c = self.cluster
        p = "conv" if mode == "conventional" else "slice"
        stages = (
            ("bucket", lambda: _parallel(getattr(self, p + "_bucket"), self.workers)),
            ("sort", lambda: _parallel(getattr(self, p + "_sort"), self.workers)),
            ("merge", getattr(self, p + "_merge")),
        )
        for name, fn in stages:
            r0, w0 = c.storage_total("bytes_read"), c.storage_total("bytes_written")
            t0 = time.perf_counter()
            fn()
            rep.stage_seconds[name] = time.perf_counter() - t0
            rep.stage_read[name] = c.storage_total("bytes_read") - r0
            rep.stage_write[name] = c.storage_total("bytes_written") - w0
        rep.bytes_read = sum(rep.stage_read.values())
        rep.bytes_written = sum(rep.stage_write.values())
        if verify:
            self.verify(data)
            rep.verified = True
        return rep

    def verify(self, data: bytes):
        out = self.fs.read_file("/sort/output")
        if len(out) != len(data):
            raise VerificationFailed(f"output has {len(out)} bytes, input {len(data)}")
        keys = self._keys(out)
        if any(keys[i] > keys[i + 1] for i in range(len(keys) - 1)):
            raise VerificationFailed("output keys are not sorted")
        r = self.record

        def digest(buf):
            return sorted(hashlib.blake2b(buf[i:i + r], digest_size=16).digest() for i in range(0, len(buf), r))

        if digest(out) != digest(data):
            raise VerificationFailed("output records differ from input records")


def bench_sort(size: int = 64 * MiB, record: int = 64 * 1024, keylen: int = 10, mode: str = "slicing",
               workers: int = 4, seed: int = 0, region_size: int = 64 * MiB,
               data_dir: Optional[str] = None, verify: bool = True) -> SortReport:
    """Run one sort on a fresh ``workers``-server cluster with single-replica files."""
    cfg = FsConfig(region_size=region_size, replication=1)
    with LocalCluster(workers, data_dir=data_dir, config=cfg, seed=seed) as cluster:
        return SortJob(cluster, size, record, keylen, workers, seed).run(mode, verify)

"""Independent reference models used by the test-suite.

Nothing here imports the overlay machinery: the painter replays entries onto
a plain bytearray one byte range at a time.
"""

import hashlib
from functools import lru_cache

from slicefs.slices import SliceEntry, SlicePointer


@lru_cache(maxsize=None)
def _seed(server_id, backing_file):
    return hashlib.blake2b(f"{server_id}/{backing_file}".encode(), digest_size=1).digest()[0]


def virtual_byte(server_id, backing_file, offset):
    return (_seed(server_id, backing_file) * 131 + offset * 7 + offset // 251) % 256


def virtual_bytes(p: SlicePointer) -> bytes:
    h = _seed(p.server_id, p.backing_file) * 131
    return bytes((h + o * 7 + o // 251) % 256 for o in range(p.file_offset, p.end))


def paint(entries, region_size, fill_of=None):
    """Paint entries onto a zeroed array in order; returns (array, end)."""
    fill_of = fill_of or (lambda e: virtual_bytes(e.replicas[0]))
    buf = bytearray(region_size)
    end = 0
    for e in entries:
        off = end if e.offset is None else e.offset
        assert off + e.length <= region_size
        buf[off:off + e.length] = bytes(e.length) if e.is_hole else fill_of(e)
        end = max(end, off + e.length)
    return buf, end


def materialize(extents, size, fetch=virtual_bytes):
    buf = bytearray(size)
    for ext in extents:
        if ext.entry is None:
            continue
        p = ext.entry.replicas[0]
        data = fetch(SlicePointer(p.server_id, p.backing_file, p.file_offset + ext.inner_offset, ext.length))
        buf[ext.region_offset:ext.end] = data
    return buf


def materialize_entries(entries, size, fetch=virtual_bytes):
    buf = bytearray(size)
    for e in entries:
        if e.is_hole:
            buf[e.offset:e.offset + e.length] = bytes(e.length)
        else:
            buf[e.offset:e.offset + e.length] = fetch(e.replicas[0])
    return buf


class FileModel:
    """In-memory byte-array model of a slicefs file for oracle comparisons."""

    def __init__(self):
        self.data = bytearray()

    def _grow(self, n):
        if len(self.data) < n:
            self.data.extend(bytes(n - len(self.data)))

    def pwrite(self, off, payload):
        self._grow(off + len(payload))
        self.data[off:off + len(payload)] = payload

    def punch(self, off, n):
        self._grow(off + n)
        self.data[off:off + n] = bytes(n)

    def append(self, payload):
        off = len(self.data)
        self.data.extend(payload)
        return off

    def read(self, off, n):
        return bytes(self.data[off:off + n])

    def __len__(self):
        return len(self.data)


def mib(n):
    return n * 1024 * 1024


def fig2_entries(region_mib=1):
    """The five writes of the overlay figure: A@[0,2) B@[2,4) C@[1,3) D@[2,3) E@[2,3) (MiB)."""
    m = mib(region_mib)
    A = SliceEntry(0, 2 * m, (SlicePointer(0, "f1", 0, 2 * m),))
    B = SliceEntry(2 * m, 2 * m, (SlicePointer(1, "f2", 0, 2 * m),))
    C = SliceEntry(1 * m, 2 * m, (SlicePointer(2, "f3", 0, 2 * m),))
    D = SliceEntry(2 * m, 1 * m, (SlicePointer(0, "f4", 0, 1 * m),))
    E = SliceEntry(2 * m, 1 * m, (SlicePointer(1, "f5", 0, 1 * m),))
    return A, B, C, D, E

"""Canonical binary encodings for every metadata value.

All integers are big-endian. Every top-level value starts with a one-byte
format version so rewrites (compaction, spilling) are byte-deterministic.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

from .errors import InvalidArgument
from .slices import SliceEntry, SlicePointer

FORMAT = 1

TAG_DATA = 0
TAG_HOLE = 1
TAG_INDIRECT = 2

PLACE_ABSOLUTE = 0
PLACE_RELATIVE = 1

_U8 = struct.Struct(">B")
_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")
_PTR_TAIL = struct.Struct(">QQ")
_ENTRY_HEAD = struct.Struct(">BBBQQB")


class Reader:
    """Cursor over a bytes buffer for the decoders below."""

    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes, pos: int = 0):
        self.buf = buf
        self.pos = pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise InvalidArgument("truncated encoding")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return bytes(out)

    def unpack(self, st: struct.Struct):
        if self.pos + st.size > len(self.buf):
            raise InvalidArgument("truncated encoding")
        vals = st.unpack_from(self.buf, self.pos)
        self.pos += st.size
        return vals

    def u8(self) -> int:
        return self.unpack(_U8)[0]

    def u16(self) -> int:
        return self.unpack(_U16)[0]

    def u32(self) -> int:
        return self.unpack(_U32)[0]

    def u64(self) -> int:
        return self.unpack(_U64)[0]

    def str16(self) -> str:
        return self.take(self.u16()).decode()

    def blob32(self) -> bytes:
        return self.take(self.u32())

    def done(self) -> bool:
        return self.pos >= len(self.buf)


def u8(v: int) -> bytes:
    return _U8.pack(v)


def u16(v: int) -> bytes:
    return _U16.pack(v)


def u32(v: int) -> bytes:
    return _U32.pack(v)


def u64(v: int) -> bytes:
    return _U64.pack(v)


def str16(s: str) -> bytes:
    raw = s.encode()
    if len(raw) > 0xFFFF:
        raise InvalidArgument("name too long")
    return _U16.pack(len(raw)) + raw


def blob32(b: bytes) -> bytes:
    return _U32.pack(len(b)) + b


def _check_format(r: Reader, what: str):
    v = r.u8()
    if v != FORMAT:
        raise InvalidArgument(f"unsupported {what} format {v}")


# -- slice pointers and entries ---------------------------------------------

@lru_cache(maxsize=1 << 16)
def encode_pointer(p: SlicePointer) -> bytes:
    return _U64.pack(p.server_id) + str16(p.backing_file) + _PTR_TAIL.pack(p.file_offset, p.length)


def read_pointer(r: Reader) -> SlicePointer:
    sid = r.u64()
    name = r.str16()
    off, n = r.unpack(_PTR_TAIL)
    return SlicePointer(sid, name, off, n)


@dataclass(frozen=True)
class Indirection:
    """Region-list element standing in for a spilled, compacted entry list."""

    replicas: tuple
    length: int
    count: int
    end: int


def encode_entry(e: SliceEntry) -> bytes:
    tag = TAG_HOLE if e.is_hole else TAG_DATA
    place = PLACE_RELATIVE if e.offset is None else PLACE_ABSOLUTE
    raw = _ENTRY_HEAD.pack(FORMAT, tag, place, e.offset or 0, e.length, len(e.replicas))
    if e.replicas:
        raw += b"".join([encode_pointer(p) for p in e.replicas])
    _remember(raw, e)
    return raw


def encode_indirection(ind: Indirection) -> bytes:
    head = _ENTRY_HEAD.pack(FORMAT, TAG_INDIRECT, PLACE_ABSOLUTE, 0, ind.length, len(ind.replicas))
    body = b"".join(encode_pointer(p) for p in ind.replicas)
    return head + body + _U32.pack(ind.count) + _U64.pack(ind.end)


# raw element -> decoded value; encoders seed it so freshly written lists decode for free
_DECODED: dict = {}
_DECODED_MAX = 1 << 17


def _remember(raw: bytes, value) -> None:
    if len(_DECODED) >= _DECODED_MAX:
        _DECODED.clear()
    _DECODED[raw] = value


def decode_element(raw: bytes):
    """Decode a region-list element into a SliceEntry or an Indirection."""
    hit = _DECODED.get(raw)
    if hit is not None:
        return hit
    r = Reader(raw)
    fmt, tag, place, off, n, nrep = r.unpack(_ENTRY_HEAD)
    if fmt != FORMAT:
        raise InvalidArgument(f"unsupported entry format {fmt}")
    reps = tuple(read_pointer(r) for _ in range(nrep))
    if tag == TAG_INDIRECT:
        count = r.u32()
        end = r.u64()
        value = Indirection(reps, n, count, end)
    else:
        if tag == TAG_HOLE and reps:
            raise InvalidArgument("hole entry carries replicas")
        value = SliceEntry(None if place == PLACE_RELATIVE else off, n, reps)
    if r.pos != len(raw):
        raise InvalidArgument("trailing bytes after region-list element")
    _remember(raw, value)
    return value


def decode_entry(raw: bytes) -> SliceEntry:
    e = decode_element(raw)
    if not isinstance(e, SliceEntry):
        raise InvalidArgument("element is not a slice entry")
    return e


# -- region metadata ----------------------------------------------------------

def encode_entry_list(entries: Sequence[SliceEntry]) -> bytes:
    """Serialized entry list, used as the content of a spilled-region slice."""
    parts = [u8(FORMAT), u32(len(entries))]
    for e in entries:
        parts.append(blob32(encode_entry(e)))
    return b"".join(parts)


def decode_entry_list(raw: bytes) -> list[SliceEntry]:
    r = Reader(raw)
    _check_format(r, "entry list")
    n = r.u32()
    return [decode_entry(r.blob32()) for _ in range(n)]


@dataclass
class RegionMetadata:
    entries: list = field(default_factory=list)
    end_offset: int = 0


def encode_region(m: RegionMetadata) -> bytes:
    return u8(FORMAT) + u64(m.end_offset) + encode_entry_list(m.entries)


def decode_region(raw: bytes) -> RegionMetadata:
    r = Reader(raw)
    _check_format(r, "region")
    end = r.u64()
    return RegionMetadata(decode_entry_list(raw[r.pos:]), end)


# -- namespace records ----------------------------------------------------------

_INODE = struct.Struct(">BQIqIIIQQB")


@dataclass
class Inode:
    inode_id: int
    mode: int
    region_size: int
    replication: int = 1
    link_count: int = 0
    mtime: int = 0
    uid: int = 0
    gid: int = 0
    highest_region: int = 0


def encode_inode(i: Inode) -> bytes:
    return _INODE.pack(FORMAT, i.inode_id, i.link_count, i.mtime, i.mode, i.uid, i.gid,
                       i.highest_region, i.region_size, i.replication)


def decode_inode(raw: bytes) -> Inode:
    fmt, iid, links, mtime, mode, uid, gid, high, rs, repl = _INODE.unpack(raw)
    if fmt != FORMAT:
        raise InvalidArgument(f"unsupported inode format {fmt}")
    return Inode(inode_id=iid, mode=mode, region_size=rs, replication=repl, link_count=links,
                 mtime=mtime, uid=uid, gid=gid, highest_region=high)


@dataclass(frozen=True)
class PathRecord:
    pathname: str
    inode_id: int


def encode_path_record(p: PathRecord) -> bytes:
    return u8(FORMAT) + str16(p.pathname) + u64(p.inode_id)


def decode_path_record(raw: bytes) -> PathRecord:
    r = Reader(raw)
    _check_format(r, "path record")
    name = r.str16()
    return PathRecord(name, r.u64())


def encode_dir_record(name: str, inode_id: int) -> bytes:
    """One directory-file record; inode 0 marks the name as removed."""
    return u8(FORMAT) + str16(name) + u64(inode_id)


def decode_dir_records(raw: bytes) -> list[tuple[str, int]]:
    r = Reader(raw)
    out = []
    while not r.done():
        _check_format(r, "directory record")
        name = r.str16()
        out.append((name, r.u64()))
    return out


# -- garbage collection -----------------------------------------------------------

@dataclass
class InUseList:
    server_id: int
    scan_id: int
    extents: list = field(default_factory=list)  # sorted (backing_file, offset, length)


def encode_in_use(l: InUseList) -> bytes:
    parts = [u8(FORMAT), u64(l.scan_id), u64(len(l.extents))]
    for name, off, n in sorted(l.extents):
        parts.append(str16(name) + u64(off) + u64(n))
    return b"".join(parts)


def decode_in_use(raw: bytes, server_id: int = 0) -> InUseList:
    r = Reader(raw)
    _check_format(r, "in-use list")
    scan_id = r.u64()
    n = r.u64()
    exts = []
    for _ in range(n):
        name = r.str16()
        exts.append((name, r.u64(), r.u64()))
    return InUseList(server_id, scan_id, exts)


# -- metadata-store keys ----------------------------------------------------------

def inode_key(inode_id: int) -> bytes:
    return _U64.pack(inode_id)


def region_key(inode_id: int, region_index: int) -> bytes:
    return _U64.pack(inode_id) + _U64.pack(region_index)


def split_region_key(key: bytes) -> tuple[int, int]:
    return _U64.unpack_from(key, 0)[0], _U64.unpack_from(key, 8)[0]

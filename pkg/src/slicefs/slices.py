"""Slice pointers, metadata entries, and the overlay algebra over them.

A region's bytes are defined by replaying its entry list in order: later
entries cover earlier ones wherever their ranges overlap, holes cover with
zeros, and relative entries land at the running end of the region.
Everything here is a pure function of immutable values.
"""

from __future__ import annotations

from bisect import bisect_left, bisect_right
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .errors import EntryOutOfBounds, InvalidArgument, OutOfRange

# Placement marker for entries that land at the region's running end.
RELATIVE = None


@dataclass(frozen=True, slots=True)
class SlicePointer:
    server_id: int
    backing_file: str
    file_offset: int
    length: int

    def __post_init__(self):
        if self.length <= 0:
            raise InvalidArgument(f"slice length must be positive, got {self.length}")
        if self.file_offset < 0:
            raise InvalidArgument("negative backing-file offset")

    @property
    def end(self) -> int:
        return self.file_offset + self.length

    def subrange(self, start: int, length: int) -> "SlicePointer":
        return subrange_pointer(self, start, length)


def subrange_pointer(p: SlicePointer, start: int, length: int) -> SlicePointer:
    if start < 0 or length <= 0 or start + length > p.length:
        raise OutOfRange(f"subrange [{start}, {start + length}) outside slice of {p.length} bytes")
    if start == 0 and length == p.length:
        return p
    return SlicePointer(p.server_id, p.backing_file, p.file_offset + start, length)


@dataclass(frozen=True, slots=True)
class SliceEntry:
    """One overlay write: replicated data, or a hole when ``replicas`` is empty.

    ``offset`` is the in-region placement, or ``RELATIVE`` for appends.
    """

    offset: Optional[int]
    length: int
    replicas: tuple = ()

    def __post_init__(self):
        if self.length <= 0:
            raise InvalidArgument("entry length must be positive")
        if self.replicas:
            for r in self.replicas:
                if r.length != self.length:
                    raise InvalidArgument("replica lengths disagree with entry length")
        elif self.offset is RELATIVE:
            raise InvalidArgument("hole entries need an absolute offset")
        if self.offset is not None and self.offset < 0:
            raise InvalidArgument("negative entry offset")

    @property
    def is_hole(self) -> bool:
        return not self.replicas

    @property
    def is_relative(self) -> bool:
        return self.offset is RELATIVE

    def at(self, offset: Optional[int]) -> "SliceEntry":
        return SliceEntry(offset, self.length, self.replicas)

    def sub(self, start: int, length: int, offset: Optional[int]) -> "SliceEntry":
        """Entry for ``length`` bytes of this one beginning ``start`` bytes in."""
        if start == 0 and length == self.length:
            return SliceEntry(offset, length, self.replicas)
        return SliceEntry(offset, length, tuple(subrange_pointer(p, start, length) for p in self.replicas))


def hole(offset: int, length: int) -> SliceEntry:
    return SliceEntry(offset, length, ())


@dataclass(frozen=True, slots=True)
class ResolvedExtent:
    """Visible bytes ``[region_offset, region_offset + length)``.

    ``entry`` is None for zeros; otherwise the bytes come from ``entry``
    starting ``inner_offset`` bytes into it.
    """

    region_offset: int
    length: int
    entry: Optional[SliceEntry]
    inner_offset: int = 0

    @property
    def end(self) -> int:
        return self.region_offset + self.length

    @property
    def is_zeros(self) -> bool:
        return self.entry is None

    def as_entry(self, offset: Optional[int] = None) -> SliceEntry:
        off = self.region_offset if offset is None else offset
        if self.entry is None:
            return hole(off, self.length)
        return self.entry.sub(self.inner_offset, self.length, off)


class Overlay:
    """Incremental replay state for one region's entry list.

    ``apply`` may be called repeatedly as the list grows; ``copy`` forks
    the state so a cached prefix can be extended without disturbing it.
    """

    __slots__ = ("region_size", "starts", "exts", "end")

    def __init__(self, region_size: int):
        self.region_size = region_size
        # parallel lists: starts[i] is the start of exts[i] = (start, end, entry, inner)
        self.starts: list = []
        self.exts: list = []
        self.end = 0

    def copy(self) -> "Overlay":
        o = Overlay(self.region_size)
        o.starts = self.starts[:]
        o.exts = self.exts[:]
        o.end = self.end
        return o

    def apply(self, entries: Iterable[SliceEntry]) -> "Overlay":
        starts, exts, end, rs = self.starts, self.exts, self.end, self.region_size
        for e in entries:
            off = end if e.offset is None else e.offset
            stop = off + e.length
            if stop > rs:
                self.end = end
                raise EntryOutOfBounds(f"entry [{off}, {stop}) exceeds region of {rs} bytes")
            lo = bisect_right(starts, off) - 1
            if lo < 0 or exts[lo][1] <= off:
                lo += 1
            hi = bisect_left(starts, stop, lo)
            pieces = []
            if lo < hi:
                first = exts[lo]
                if first[0] < off:
                    pieces.append((first[0], off, first[2], first[3]))
            pieces.append((off, stop, None if e.is_hole else e, 0))
            if lo < hi:
                last = exts[hi - 1]
                if last[1] > stop:
                    pieces.append((stop, last[1], last[2], last[3] + (stop - last[0])))
            exts[lo:hi] = pieces
            starts[lo:hi] = [p[0] for p in pieces]
            if stop > end:
                end = stop
        self.end = end
        return self

    def extents(self) -> list[ResolvedExtent]:
        """Visible extents sorted by offset; adjacent zero extents merged, gaps omitted."""
        out: list[ResolvedExtent] = []
        for start, stop, entry, inner in self.exts:
            if entry is None and out and out[-1].entry is None and out[-1].end == start:
                prev = out.pop()
                out.append(ResolvedExtent(prev.region_offset, stop - prev.region_offset, None))
                continue
            out.append(ResolvedExtent(start, stop - start, entry, inner))
        return out


def resolve_entries(entries: Iterable[SliceEntry], region_size: int) -> tuple[list[ResolvedExtent], int]:
    """Replay ``entries`` and return (visible extents sorted by offset, region end).

    Adjacent zero extents are merged; unwritten gaps are not reported.
    """
    ov = Overlay(region_size).apply(entries)
    return ov.extents(), ov.end


def _contiguous(a: SliceEntry, b: SliceEntry) -> bool:
    if len(a.replicas) != len(b.replicas):
        return False
    for p, q in zip(a.replicas, b.replicas):
        if p.server_id != q.server_id or p.backing_file != q.backing_file or p.end != q.file_offset:
            return False
    return True


def _merge(a: SliceEntry, b: SliceEntry) -> SliceEntry:
    reps = tuple(
        SlicePointer(p.server_id, p.backing_file, p.file_offset, p.length + q.length)
        for p, q in zip(a.replicas, b.replicas)
    )
    return SliceEntry(a.offset, a.length + b.length, reps)


def compact_extents(extents: Sequence[ResolvedExtent], end: int) -> list[SliceEntry]:
    out: list[SliceEntry] = []
    data_end = 0
    for ext in extents:
        if ext.entry is None:
            continue
        ent = ext.as_entry()
        if out and out[-1].offset + out[-1].length == ent.offset and _contiguous(out[-1], ent):
            out[-1] = _merge(out[-1], ent)
        else:
            out.append(ent)
        data_end = ext.end
    if end > data_end:
        # keeps the region's end offset; interior gaps already read as zeros
        out.append(hole(data_end, end - data_end))
    return out


def compact(entries: Iterable[SliceEntry], region_size: int) -> list[SliceEntry]:
    """Minimal all-absolute entry list representing the same bytes and end offset."""
    extents, end = resolve_entries(entries, region_size)
    return compact_extents(extents, end)


def region_split(file_offset: int, length: int, region_size: int) -> list[tuple[int, int, int]]:
    """Partition ``[file_offset, file_offset + length)`` into (region, offset in region, length)."""
    if length <= 0 or region_size <= 0 or file_offset < 0:
        raise InvalidArgument("region_split needs length > 0, region_size > 0, offset >= 0")
    out = []
    pos = file_offset
    stop = file_offset + length
    while pos < stop:
        idx, inner = divmod(pos, region_size)
        n = min(region_size - inner, stop - pos)
        out.append((idx, inner, n))
        pos += n
    return out


def entries_span(entries: Sequence[SliceEntry]) -> int:
    """Bytes covered from 0 to the furthest absolute entry end."""
    return max((e.offset + e.length for e in entries), default=0)


def clip_extents(extents: Sequence[ResolvedExtent], start: int, stop: int, base: int = 0) -> list[SliceEntry]:
    """Entries for ``[start, stop)`` placed from ``base`` onward, with holes filling every gap."""
    out: list[SliceEntry] = []
    shift = base - start
    pos = start
    i = bisect_right([e.region_offset for e in extents], start) - 1
    if i < 0:
        i = 0
    for ext in extents[i:]:
        if ext.region_offset >= stop:
            break
        a = max(ext.region_offset, start)
        b = min(ext.end, stop)
        if b <= a:
            continue
        if a > pos:
            out.append(hole(pos + shift, a - pos))
        if ext.entry is None:
            out.append(hole(a + shift, b - a))
        else:
            out.append(ext.entry.sub(ext.inner_offset + (a - ext.region_offset), b - a, a + shift))
        pos = b
    if pos < stop:
        out.append(hole(pos + shift, stop - pos))
    return coalesce(out)


def coalesce(entries: list[SliceEntry]) -> list[SliceEntry]:
    """Merge neighbouring holes, and neighbouring entries whose replicas are contiguous on disk."""
    out: list[SliceEntry] = []
    for e in entries:
        if out and out[-1].offset + out[-1].length == e.offset and _contiguous(out[-1], e):
            out[-1] = _merge(out[-1], e)
        else:
            out.append(e)
    return out

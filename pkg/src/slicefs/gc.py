"""Garbage collection in three tiers.

1. Compaction rewrites a region's list into its minimal absolute form.
2. Spilling moves a long compacted list into a slice and leaves a pointer.
3. The global scan records which slice bytes are referenced, stores those
   in-use lists inside the filesystem, and hands them to storage servers,
   which then rewrite their most garbage-laden backing files.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional

from . import intervals
from .client import CONFIG, INODES, REGIONS, SliceFS
from .encoding import (
    InUseList,
    Indirection,
    decode_element,
    decode_inode,
    encode_entry,
    encode_entry_list,
    encode_in_use,
    encode_indirection,
    inode_key,
    region_key,
    split_region_key,
)
from .errors import NotFound, SliceFSError
from .slices import compact_extents, resolve_entries

log = logging.getLogger(__name__)

GC_DIR = "/.wtf-gc"
_SCAN_KEY = b"gc-scan"
KEEP_SCANS = 2


@dataclass
class CompactionStats:
    inode_id: int
    region_index: int
    entries_before: int
    entries_after: int
    spilled: bool = False
    committed: bool = False


def _region_state(fs: SliceFS, ctx, inode_id: int, ri: int):
    vv = ctx.get(REGIONS, region_key(inode_id, ri))
    if vv is None:
        raise NotFound(f"region {inode_id}/{ri}")
    inode = fs._inode(ctx, inode_id)
    return inode, vv


def compact_region(fs: SliceFS, inode_id: int, ri: int, spill_threshold: Optional[int] = None) -> CompactionStats:
    """Replace a region's list with its compacted form, spilling it when still too long.

    Version-guarded: if a writer gets there first the commit fails and the
    region is left for the next sweep. Storage servers are only contacted
    to read or write a spilled list.
    """
    threshold = fs.config.spill_threshold if spill_threshold is None else spill_threshold
    ctx = fs.meta.begin()
    inode, vv = _region_state(fs, ctx, inode_id, ri)
    items = vv.items
    spilled_now = [decode_element(x) for x in items]
    entries = fs.region_entries(items)
    extents, end = resolve_entries(entries, inode.region_size)
    compacted = compact_extents(extents, end)
    stats = CompactionStats(inode_id, ri, len(entries), len(compacted))
    if len(compacted) > threshold:
        already = len(spilled_now) == 1 and isinstance(spilled_now[0], Indirection)
        if already:
            return stats
        raw = encode_entry_list(compacted)
        reps = fs._replicate(inode, ri, raw)
        ind = Indirection(reps, len(raw), len(compacted), end)
        ctx.set_list(REGIONS, region_key(inode_id, ri), [encode_indirection(ind)], end=vv.end)
        stats.spilled = True
    else:
        if len(compacted) >= len(items) and not any(isinstance(e, Indirection) for e in spilled_now):
            return stats
        ctx.set_list(REGIONS, region_key(inode_id, ri), [encode_entry(e) for e in compacted], end=vv.end)
    stats.committed = ctx.commit()
    if not stats.committed:
        log.debug("compaction of %x/%d lost a race; will retry next sweep", inode_id, ri)
    return stats


def spill_region(fs: SliceFS, inode_id: int, ri: int, threshold: Optional[int] = None) -> CompactionStats:
    return compact_region(fs, inode_id, ri, spill_threshold=threshold)


def sweep(fs: SliceFS, min_entries: int = 2, limit: Optional[int] = None) -> list[CompactionStats]:
    """Compact regions, longest lists first."""
    regions = [(len(vv.items), k) for k, vv in fs.meta.scan(REGIONS) if len(vv.items) >= min_entries]
    regions.sort(key=lambda x: (-x[0], x[1]))
    out = []
    for _, k in regions[:limit]:
        ino, ri = split_region_key(k)
        try:
            out.append(compact_region(fs, ino, ri))
        except NotFound:
            continue
    return out


# -- global scan --------------------------------------------------------------------------------

@dataclass
class ScanResult:
    scan_id: int
    in_use: dict = field(default_factory=dict)  # server_id -> InUseList
    reports: dict = field(default_factory=dict)  # server_id -> GcReport


def _next_scan_id(fs: SliceFS) -> int:
    while True:
        ctx = fs.meta.begin()
        vv = ctx.get(CONFIG, _SCAN_KEY)
        sid = int(vv.value) + 1 if vv is not None else 1
        ctx.put(CONFIG, _SCAN_KEY, str(sid).encode())
        if ctx.commit():
            return sid


def collect_in_use(fs: SliceFS) -> dict[int, dict[str, list]]:
    """Referenced byte ranges per server and backing file, from one pass over all regions."""
    refs: dict[int, dict[str, list]] = defaultdict(lambda: defaultdict(list))
    sizes: dict[int, Optional[int]] = {}

    def mark(p):
        refs[p.server_id][p.backing_file].append((p.file_offset, p.end))

    for key, vv in fs.meta.scan(REGIONS):
        ino, _ = split_region_key(key)
        if ino not in sizes:
            iv = fs.meta.read(INODES, inode_key(ino))
            sizes[ino] = decode_inode(iv.value).region_size if iv.value is not None else None
        for raw in vv.items:
            el = decode_element(raw)
            if isinstance(el, Indirection):
                for p in el.replicas:
                    mark(p)
        entries = fs.region_entries(vv.items)
        rs = sizes[ino]
        if rs is None:
            # inode vanished under us: keep everything the list names
            for e in entries:
                for p in e.replicas:
                    mark(p)
            continue
        extents, _ = resolve_entries(entries, rs)
        for ext in extents:
            if ext.entry is not None:
                for p in ext.as_entry().replicas:
                    mark(p)
    return {sid: {name: intervals.normalize(r) for name, r in files.items()} for sid, files in refs.items()}


def global_scan(fs: SliceFS) -> ScanResult:
    """Run one filesystem-wide scan and publish in-use lists to every server.

    Lists are written under ``/.wtf-gc/<server>/<scan>`` before any server
    sees them, so a scan that fails part way publishes nothing.
    """
    scan_id = _next_scan_id(fs)
    members = fs.services.refresh().server_ids()
    for sid in members:
        fs.services.storage(sid).mark_scan(scan_id)
    refs = collect_in_use(fs)
    result = ScanResult(scan_id)
    for sid in members:
        exts = [(name, a, b - a) for name, rs in sorted(refs.get(sid, {}).items()) for a, b in rs]
        result.in_use[sid] = InUseList(sid, scan_id, exts)
    fs.makedirs(GC_DIR)
    for sid, lst in result.in_use.items():
        d = f"{GC_DIR}/{sid}"
        fs.makedirs(d)
        fs.write_file(f"{d}/{scan_id}", encode_in_use(lst))
        _prune(fs, d, scan_id)
    for sid, lst in result.in_use.items():
        result.reports[sid] = fs.services.storage(sid).apply_in_use_list(lst)
    return result


def _prune(fs: SliceFS, d: str, scan_id: int):
    for name in fs.readdir(d):
        if name.isdigit() and int(name) <= scan_id - KEEP_SCANS:
            try:
                fs.unlink(f"{d}/{name}")
            except SliceFSError:
                pass


# -- collection --------------------------------------------------------------------------------------

def collect(fs: SliceFS, reports: dict, gc_high: Optional[float] = None, gc_low: Optional[float] = None,
            force: bool = False) -> dict[int, int]:
    """Rewrite backing files on servers whose garbage fraction exceeds ``gc_high``.

    Files are taken most garbage first until the fraction drops to ``gc_low``.
    ``force`` collects every candidate regardless of thresholds.
    """
    hi = fs.config.gc_high if gc_high is None else gc_high
    lo = fs.config.gc_low if gc_low is None else gc_low
    freed: dict[int, int] = {}
    for sid, rep in reports.items():
        if not rep.total_bytes or (not force and rep.garbage_fraction < hi):
            continue
        remaining = rep.garbage_bytes
        got = 0
        for name, _ in rep.candidates:
            if not force and remaining / rep.total_bytes <= lo:
                break
            n = fs.services.storage(sid).collect_backing_file(name)
            got += n
            remaining -= n
        freed[sid] = got
    return freed


def full_cycle(fs: SliceFS, force: bool = True) -> dict[int, int]:
    """Two scans back to back, then collection: reclaims anything unreferenced before the first."""
    global_scan(fs)
    res = global_scan(fs)
    return collect(fs, res.reports, force=force)

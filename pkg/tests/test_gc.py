import os
import random

import pytest

from slicefs import gc
from slicefs.client import REGIONS
from slicefs.cluster import LocalCluster
from slicefs.config import FsConfig
from slicefs.encoding import Indirection, decode_element, decode_in_use, region_key

from oracles import FileModel, mib


def make(rs=4096, r=1, n=2, data_dir=None, **kw):
    c = LocalCluster(n, data_dir=data_dir, config=FsConfig(region_size=rs, replication=r, **kw))
    return c, c.client(seed=2)


def storage_io(c):
    return sum(v.get("creates", 0) + v.get("reads", 0) for v in c.storage_counters().values())


def test_fig2_compaction_no_storage_io():
    c, fs = make(rs=mib(4))
    m = mib(1)
    fs.create("/fig2")
    h = fs.open("/fig2", "rw")
    for off, n in [(0, 2), (2, 2), (1, 2), (2, 1), (2, 1)]:
        h.pwrite(off * m, os.urandom(n * m))
    before = fs.read_file("/fig2")
    ino = fs.inode_of("/fig2")
    io = storage_io(c)
    st = gc.compact_region(fs, ino, 0)
    assert (st.entries_before, st.entries_after, st.committed) == (5, 4, True)
    assert storage_io(c) == io
    assert [(e.offset, e.length) for e in fs.region_list("/fig2", 0)] == [(0, m), (m, m), (2 * m, m), (3 * m, m)]
    assert fs.read_file("/fig2") == before


def test_sequential_region_collapses():
    c, fs = make(rs=65536)
    h = fs.open("/seq", "rw", create=True)
    for i in range(64):
        h.write(bytes([i]) * 1024)
    assert len(fs.region_list("/seq", 0)) == 64
    gc.compact_region(fs, fs.inode_of("/seq"), 0)
    assert len(fs.region_list("/seq", 0)) == 1


def test_compacted_region_is_left_alone():
    c, fs = make()
    fs.write_file("/one", b"z" * 100)
    k = region_key(fs.inode_of("/one"), 0)
    v0 = c.meta.read(REGIONS, k).version
    st = gc.compact_region(fs, fs.inode_of("/one"), 0)
    assert not st.committed
    assert c.meta.read(REGIONS, k).version == v0


def test_compaction_preserves_relative_end_and_content():
    c, fs = make()
    fs.create("/ap")
    for i in range(30):
        fs.append("/ap", bytes([65 + i % 26]) * 37)
    want = fs.read_file("/ap")
    gc.sweep(fs)
    assert fs.read_file("/ap") == want
    assert fs.append("/ap", b"!") == len(want)


def _fragment(fs, path, rs, n, rng):
    model = FileModel()
    h = fs.open(path, "rw", create=True)
    for _ in range(n):
        off = rng.randrange(rs - 8)
        d = rng.randbytes(rng.randrange(1, 8))
        h.pwrite(off, d)
        model.pwrite(off, d)
    return h, model


def test_spill_large_region():
    c, fs = make(rs=65536)
    rng = random.Random(9)
    h, model = _fragment(fs, "/frag", 65536, 5000, rng)
    ino = fs.inode_of("/frag")
    st = gc.compact_region(fs, ino, 0)
    assert st.spilled and st.committed and st.entries_after > 1024
    items = c.meta.read(REGIONS, region_key(ino, 0)).items
    assert len(items) == 1 and isinstance(decode_element(items[0]), Indirection)
    assert fs.read_file("/frag") == bytes(model.data)
    # a second client dereferences the spilled list through storage
    assert c.client().read_file("/frag") == bytes(model.data)
    # new writes land after the indirection element
    for _ in range(50):
        off = rng.randrange(65536 - 8)
        d = rng.randbytes(5)
        h.pwrite(off, d)
        model.pwrite(off, d)
    assert len(c.meta.read(REGIONS, region_key(ino, 0)).items) == 51
    assert fs.read_file("/frag") == bytes(model.data)
    # spilled list dereferences to exactly what was spilled
    assert fs.region_list("/frag", 0)[:st.entries_after] == fs.region_entries(items)


def test_spill_threshold_respected():
    c, fs = make(rs=65536)
    _fragment(fs, "/small", 65536, 300, random.Random(1))
    st = gc.compact_region(fs, fs.inode_of("/small"), 0)
    assert not st.spilled


def test_empty_scan_lists():
    c, fs = make(n=3)
    res = gc.global_scan(fs)
    assert set(res.in_use) == set(c.servers)
    assert all(l.extents == [] for l in res.in_use.values())


def test_scan_lists_are_self_hosted():
    c, fs = make(n=2)
    fs.write_file("/data", os.urandom(5000))
    r1 = gc.global_scan(fs)
    r2 = gc.global_scan(fs)
    for sid in c.servers:
        raw = fs.read_file(f"{gc.GC_DIR}/{sid}/{r1.scan_id}")
        assert decode_in_use(raw, sid).extents == r1.in_use[sid].extents
    # scan 2 saw scan 1's list files as live data
    for sid in c.servers:
        path = f"{gc.GC_DIR}/{sid}/{r1.scan_id}"
        for e in fs.region_list(path, 0):
            for p in e.replicas:
                exts = r2.in_use[p.server_id].extents
                assert any(n == p.backing_file and o <= p.file_offset and p.end <= o + l for n, o, l in exts)


def test_deleted_file_collected_after_two_scans(tmp_path):
    c, fs = make(rs=65536, n=1, data_dir=str(tmp_path))
    keep = os.urandom(mib(1))
    fs.write_file("/keep", keep)
    fs.write_file("/drop", os.urandom(mib(4)))
    fs.unlink("/drop")
    r1 = gc.global_scan(fs)
    assert all(rep.garbage_bytes == 0 for rep in r1.reports.values())
    r2 = gc.global_scan(fs)
    garbage = sum(rep.garbage_bytes for rep in r2.reports.values())
    assert garbage >= mib(4)
    freed = gc.collect(fs, r2.reports, force=True)
    assert sum(freed.values()) >= mib(4)
    assert fs.read_file("/keep") == keep


def test_orphans_from_aborted_txn_collected():
    c, fs = make(n=1)
    with pytest.raises(RuntimeError):
        with fs.transaction() as t:
            t.write_file("/ghost", os.urandom(20000))
            raise RuntimeError
    gc.global_scan(fs)
    r = gc.global_scan(fs)
    assert sum(rep.garbage_bytes for rep in r.reports.values()) >= 20000


def test_punched_file_collects_to_nothing():
    c, fs = make(rs=65536, n=1)
    fs.write_file("/p", os.urandom(mib(2)))
    h = fs.open("/p", "rw")
    h.punch(mib(2))
    gc.sweep(fs)
    gc.full_cycle(fs)
    live = sum(intervals_total(l.extents) for l in gc.global_scan(fs).in_use.values())
    assert live < 64 * 1024  # only GC list files and directory records remain
    assert fs.read_file("/p") == bytes(mib(2))


def intervals_total(exts):
    return sum(n for _, _, n in exts)


@pytest.mark.parametrize("seed", range(4))
def test_gc_never_collects_live_bytes(seed):
    rng = random.Random(seed)
    c, fs = make(rs=8192, n=2, r=2)
    other = c.client()
    models = {}
    for step in range(60):
        op = rng.random()
        name = f"/f{rng.randrange(6)}"
        if op < 0.45:
            d = rng.randbytes(rng.randrange(1, 20000))
            fs.write_file(name, d)
            models[name] = d
        elif op < 0.6 and name in models:
            fs.unlink(name)
            del models[name]
        elif op < 0.7 and name in models:
            dst = f"/f{rng.randrange(6)}"
            if dst != name:
                other.copy(name, dst, overwrite=True)
                models[dst] = models[name]
        elif op < 0.8:
            gc.sweep(fs)
        else:
            res = gc.global_scan(other if rng.random() < 0.5 else fs)
            gc.collect(fs, res.reports, force=True)
        for n, d in models.items():
            assert fs.read_file(n) == d


def test_collect_policy_thresholds():
    c, fs = make(rs=65536, n=1, gc_high=0.5, gc_low=0.3)
    for i in range(10):
        fs.write_file(f"/x{i}", os.urandom(200_000))
    for i in range(3):
        fs.unlink(f"/x{i}")
    gc.global_scan(fs)
    r = gc.global_scan(fs)
    assert 0.2 < next(iter(r.reports.values())).garbage_fraction < 0.5
    assert gc.collect(fs, r.reports) == {}  # below gc_high
    for i in range(3, 8):
        fs.unlink(f"/x{i}")
    gc.global_scan(fs)
    r = gc.global_scan(fs)
    freed = gc.collect(fs, r.reports)
    assert sum(freed.values()) > 0

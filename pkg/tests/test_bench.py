import pytest

from slicefs.bench import SortJob, bench_sort, cut
from slicefs.cluster import LocalCluster
from slicefs.config import FsConfig
from slicefs.errors import VerificationFailed
from slicefs.slices import SliceEntry, SlicePointer

KiB = 1024


def test_cut_splits_entries():
    p = SlicePointer(1, "b0", 100, 30)
    ents = [SliceEntry(0, 30, (p,)), SliceEntry(30, 10, ())]
    got = cut(ents, [0, 30], 25, 10, 7)
    assert [(e.offset, e.length) for e in got] == [(7, 5), (12, 5)]
    assert got[0].replicas[0].file_offset == 125 and got[1].is_hole


@pytest.mark.parametrize("mode", ["conventional", "slicing"])
def test_small_sort_accounting(mode):
    size = 256 * KiB
    rep = bench_sort(size=size, record=4 * KiB, keylen=10, mode=mode, region_size=64 * KiB)
    assert rep.verified
    if mode == "slicing":
        assert rep.bytes_written == 0
        assert rep.stage_read == {"bucket": size, "sort": size, "merge": 0}
    else:
        assert rep.bytes_read == rep.bytes_written == 3 * size
        assert rep.stage_write == {"bucket": size, "sort": size, "merge": size}


@pytest.mark.parametrize("mode", ["conventional", "slicing"])
def test_single_record(mode):
    rep = bench_sort(size=4 * KiB, record=4 * KiB, keylen=10, mode=mode)
    assert rep.verified and rep.records == 1


def test_size_must_be_whole_records():
    with pytest.raises(ValueError):
        bench_sort(size=1000, record=300)


def test_verification_catches_corruption():
    with LocalCluster(2, config=FsConfig(region_size=64 * KiB, replication=1)) as c:
        job = SortJob(c, 64 * KiB, 4 * KiB, 10, 2)
        data = job.setup()
        for w in range(2):
            job.conv_bucket(w)
        for b in range(2):
            job.conv_sort(b)
        job.conv_merge()
        job.verify(data)
        job.fs.open("/sort/output", "rw").pwrite(5000, b"\xff" * 3)
        with pytest.raises(VerificationFailed):
            job.verify(data)

import os
import socket

import pytest

from slicefs import gc
from slicefs.client import SliceFS
from slicefs.config import FsConfig
from slicefs.encoding import encode_pointer
from slicefs.errors import Exists, IoFailure, NotFound
from slicefs.metastore import MetaStore
from slicefs.placement import Coordinator
from slicefs.slices import SlicePointer
from slicefs.storage import StorageServer
from slicefs.wire import (
    HEADER,
    OK,
    READ_SLICE,
    RemoteServices,
    RemoteStorage,
    StorageDaemon,
    pack_frame,
    read_frame,
    serve_coordinator,
    serve_meta,
)


@pytest.fixture
def net(tmp_path):
    coord = serve_coordinator(Coordinator(heartbeat_interval=0.2))
    meta = serve_meta(MetaStore(), coord.address)
    daemons = [StorageDaemon(StorageServer(data_dir=str(tmp_path / f"s{i}")), coord.address,
                             heartbeat_interval=0.05) for i in range(3)]
    yield coord, meta, daemons
    for d in daemons:
        d.stop()
    meta.stop()
    coord.stop()


def test_frame_layout():
    raw = pack_frame(OK, [1, b"x"])
    n, t = HEADER.unpack(raw[:5])
    assert t == OK and n == len(raw) - 5


def test_end_to_end_over_tcp(net):
    coord, _, daemons = net
    fs = SliceFS(RemoteServices(coord.address), FsConfig(region_size=8192, replication=2))
    data = os.urandom(50000)
    fs.write_file("/net", data)
    assert fs.read_file("/net") == data
    fs.copy("/net", "/net2")
    h = fs.open("/net2", "rw")
    h.pwrite(10, b"changed")
    assert fs.read_file("/net2")[10:17] == b"changed"
    assert fs.append("/net", b"tail") == 50000
    # second client finds the stored config
    other = SliceFS(RemoteServices(coord.address))
    assert other.config.region_size == 8192
    assert other.read_file("/net") == data + b"tail"
    with pytest.raises(NotFound):
        other.open("/absent")
    with pytest.raises(Exists):
        other.create("/net")


def test_transactions_and_gc_over_tcp(net):
    coord, _, _ = net
    fs = SliceFS(RemoteServices(coord.address), FsConfig(region_size=8192, replication=1))
    with fs.transaction() as t:
        t.write_file("/a", b"a" * 3000)
        t.write_file("/b", b"b" * 3000)
    fs.write_file("/junk", os.urandom(100_000))
    fs.unlink("/junk")
    gc.global_scan(fs)
    r = gc.global_scan(fs)
    assert sum(rep.garbage_bytes for rep in r.reports.values()) >= 100_000
    gc.collect(fs, r.reports, force=True)
    assert fs.read_file("/a") == b"a" * 3000 and fs.read_file("/b") == b"b" * 3000


def test_errors_cross_the_wire(net):
    _, _, daemons = net
    rs = RemoteStorage(daemons[0].address)
    with pytest.raises(NotFound):
        rs.read_slice(SlicePointer(daemons[0].server.server_id, "b0", 1 << 40, 5))
    # unknown message type is an error reply, the connection stays usable
    s = socket.create_connection(("127.0.0.1", int(daemons[0].address.rsplit(":", 1)[1])))
    s.sendall(pack_frame(0x6A, []))
    t, body = read_frame(s)
    assert t != OK and "unknown" in body[1]
    p = rs.create_slice(1, 0, b"abc")
    s.sendall(pack_frame(READ_SLICE, [encode_pointer(p)]))
    assert read_frame(s) == (OK, b"abc")
    s.close()


def test_dead_daemon_is_io_failure(net):
    _, _, daemons = net
    rs = RemoteStorage(daemons[1].address)
    rs.usage()
    daemons[1].stop()
    rs.close()
    with pytest.raises(IoFailure):
        rs.usage()

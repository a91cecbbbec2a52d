"""Framed TCP protocol between clients and the three daemon kinds.

Every frame is a 4-byte big-endian body length, a 1-byte message type and a
msgpack body holding the argument list. Filesystem values inside a body
(slice pointers, mutations, in-use lists) use the canonical encodings from
``encoding``/``metastore`` rather than ad-hoc structures.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import struct
import threading
import time
from typing import Callable, Optional

import msgpack

from .encoding import Reader, decode_in_use, encode_in_use, encode_pointer, read_pointer
from .errors import IoFailure, SliceFSError, error_for_code
from .metastore import CondResult, TxnContext, VersionedValue, encode_mutation, read_mutation
from .placement import Membership, ServerInfo
from .storage import GcReport

log = logging.getLogger(__name__)

HEADER = struct.Struct(">IB")
MAX_FRAME = 256 * 1024 * 1024

# storage
CREATE_SLICE = 0x01
READ_SLICE = 0x02
SCAN_MARK = 0x03
APPLY_IN_USE = 0x04
GC_REPORT = 0x05
COLLECT = 0x06
USAGE = 0x07
# metadata
MDS_GET = 0x10
MDS_PUT = 0x11
MDS_DELETE = 0x12
MDS_LIST_APPEND = 0x13
MDS_LIST_EXTEND = 0x14
MDS_COND_APPEND = 0x15
MDS_TXN_COMMIT = 0x16
MDS_SCAN = 0x17
# coordinator
REGISTER = 0x20
REGISTER_META = 0x21
HEARTBEAT = 0x22
DEREGISTER = 0x23
FETCH_MEMBERSHIP = 0x24
# any daemon
COUNTERS = 0x30
OK = 0x7E
ERR = 0x7F


def pack_frame(mtype: int, args) -> bytes:
    body = msgpack.packb(args, use_bin_type=True)
    return HEADER.pack(len(body), mtype) + body


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            raise ConnectionError("peer closed connection")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket):
    n, mtype = HEADER.unpack(_recv_exact(sock, HEADER.size))
    if n > MAX_FRAME:
        raise ConnectionError(f"frame of {n} bytes exceeds limit")
    return mtype, msgpack.unpackb(_recv_exact(sock, n), raw=False, strict_map_key=False)


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


# -- value conversions -----------------------------------------------------------------------

def _vv_out(vv: VersionedValue):
    v = vv.value
    return [list(v) if isinstance(v, tuple) else v, vv.version, vv.end]


def _vv_in(x) -> VersionedValue:
    v, version, end = x
    return VersionedValue(tuple(v) if isinstance(v, list) else v, version, end)


def _ptr(raw: bytes):
    return read_pointer(Reader(raw))


def _report_out(r: GcReport):
    return [r.server_id, r.scan_id, [list(c) for c in r.candidates], r.total_bytes]


def _report_in(x) -> GcReport:
    return GcReport(x[0], x[1], [tuple(c) for c in x[2]], x[3])


def _membership_out(m: Membership):
    return [m.epoch, [[s.server_id, s.address] for s in m.servers], m.meta_address, m.vnodes]


def _membership_in(x) -> Membership:
    return Membership(x[0], [ServerInfo(a, b) for a, b in x[1]], x[2], x[3])


# -- server side -------------------------------------------------------------------------------

def storage_handlers(server) -> dict[int, Callable]:
    return {
        CREATE_SLICE: lambda fid, ri, data: encode_pointer(server.create_slice(fid, ri, data)),
        READ_SLICE: lambda raw: server.read_slice(_ptr(raw)),
        SCAN_MARK: lambda scan_id: server.mark_scan(scan_id),
        APPLY_IN_USE: lambda sid, raw: _report_out(server.apply_in_use_list(decode_in_use(raw, sid))),
        GC_REPORT: lambda: _report_out(server.gc_report()),
        COLLECT: lambda name: server.collect_backing_file(name),
        USAGE: lambda: server.usage(),
        COUNTERS: lambda: {"role": "storage", "server_id": server.server_id, **server.counter_snapshot(),
                           "usage": {k: v for k, v in server.usage().items() if k != "files"}},
    }


def meta_handlers(store) -> dict[int, Callable]:
    def commit(read_set, muts):
        rs = {(space, key): version for space, key, version in read_set}
        return store.commit(rs, [read_mutation(Reader(m)) for m in muts])

    def cond(space, key, element, length, limit):
        r = store.cond_list_append(space, key, element, length, limit)
        return [r.applied, r.prior_end, r.version]

    return {
        MDS_GET: lambda space, key: _vv_out(store.read(space, key)),
        MDS_PUT: lambda space, key, value: store.put(space, key, value),
        MDS_DELETE: lambda space, key: store.delete(space, key),
        MDS_LIST_APPEND: lambda space, key, el, end: store.list_append(space, key, el, end),
        MDS_LIST_EXTEND: lambda space, key, els, end: store.list_extend(space, key, els, end),
        MDS_COND_APPEND: cond,
        MDS_TXN_COMMIT: commit,
        MDS_SCAN: lambda space: [[k, _vv_out(v)] for k, v in store.scan(space)],
        COUNTERS: lambda: {"role": "meta", **store.counter_snapshot()},
    }


def coord_handlers(coord) -> dict[int, Callable]:
    return {
        REGISTER: lambda address, sid=None: list(coord.register_server(address, sid)),
        REGISTER_META: lambda address: coord.register_meta(address),
        HEARTBEAT: lambda sid: coord.heartbeat(sid),
        DEREGISTER: lambda sid: coord.deregister(sid),
        FETCH_MEMBERSHIP: lambda: _membership_out(coord.fetch_membership()),
        COUNTERS: lambda: {"role": "coord", "epoch": coord.epoch,
                           "servers": len(coord.fetch_membership().servers)},
    }


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        table = self.server.table
        sock = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        while True:
            try:
                mtype, args = read_frame(sock)
            except (ConnectionError, OSError):
                return
            fn = table.get(mtype)
            try:
                if fn is None:
                    raise SliceFSError(f"unknown message type {mtype:#x}")
                reply = pack_frame(OK, fn(*args))
            except SliceFSError as e:
                reply = pack_frame(ERR, [e.wire_code, str(e)])
            except Exception as e:  # surfaced to the caller, never kills the daemon
                log.exception("handler for %#x failed", mtype)
                reply = pack_frame(ERR, [SliceFSError.wire_code, f"{type(e).__name__}: {e}"])
            try:
                sock.sendall(reply)
            except OSError:
                return


class FrameServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], table: dict):
        self.table = table
        super().__init__(address, _Handler)

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> "FrameServer":
        threading.Thread(target=self.serve_forever, daemon=True, name=f"serve-{self.address}").start()
        return self

    def stop(self):
        self.shutdown()
        self.server_close()


# -- client side -------------------------------------------------------------------------------

class Remote:
    """One connection per calling thread to a daemon at ``address``."""

    def __init__(self, address: str, timeout: float = 30.0):
        self.address = address
        self.timeout = timeout
        self._local = threading.local()

    def _sock(self) -> socket.socket:
        s = getattr(self._local, "sock", None)
        if s is None:
            try:
                s = socket.create_connection(parse_address(self.address), timeout=self.timeout)
            except OSError as e:
                raise IoFailure(f"cannot reach {self.address}: {e}") from e
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._local.sock = s
        return s

    def call(self, mtype: int, *args):
        s = self._sock()
        try:
            s.sendall(pack_frame(mtype, list(args)))
            rtype, body = read_frame(s)
        except (OSError, ConnectionError) as e:
            self.close()
            raise IoFailure(f"{self.address}: {e}") from e
        if rtype == ERR:
            code, msg = body
            raise error_for_code(code)(msg)
        return body

    def close(self):
        s = getattr(self._local, "sock", None)
        if s is not None:
            s.close()
            self._local.sock = None


class RemoteStorage(Remote):
    def create_slice(self, file_id, region_index, data):
        return _ptr(self.call(CREATE_SLICE, file_id, region_index, data))

    def read_slice(self, p):
        return self.call(READ_SLICE, encode_pointer(p))

    def mark_scan(self, scan_id):
        self.call(SCAN_MARK, scan_id)

    def apply_in_use_list(self, lst):
        return _report_in(self.call(APPLY_IN_USE, lst.server_id, encode_in_use(lst)))

    def gc_report(self):
        return _report_in(self.call(GC_REPORT))

    def collect_backing_file(self, name):
        return self.call(COLLECT, name)

    def usage(self):
        return self.call(USAGE)

    def counter_snapshot(self):
        return self.call(COUNTERS)


class RemoteMeta(Remote):
    def read(self, space, key):
        return _vv_in(self.call(MDS_GET, space, key))

    def get(self, space, key):
        from .errors import NotFound

        vv = self.read(space, key)
        if vv.value is None:
            raise NotFound(f"{space}/{key.hex()}")
        return vv

    def put(self, space, key, value):
        return self.call(MDS_PUT, space, key, value)

    def delete(self, space, key):
        return self.call(MDS_DELETE, space, key)

    def list_append(self, space, key, element, end=0):
        return self.call(MDS_LIST_APPEND, space, key, element, end)

    def list_extend(self, space, key, elements, end=0):
        return self.call(MDS_LIST_EXTEND, space, key, list(elements), end)

    def cond_list_append(self, space, key, element, length, limit):
        return CondResult(*self.call(MDS_COND_APPEND, space, key, element, length, limit))

    def scan(self, space):
        return [(k, _vv_in(v)) for k, v in self.call(MDS_SCAN, space)]

    def begin(self):
        return TxnContext(self)

    def commit(self, read_set, mutations):
        rs = [[space, key, version] for (space, key), version in read_set.items()]
        return self.call(MDS_TXN_COMMIT, rs, [encode_mutation(m) for m in mutations])

    def counter_snapshot(self):
        return self.call(COUNTERS)


class RemoteCoordinator(Remote):
    def register_server(self, address, server_id=None):
        return tuple(self.call(REGISTER, address, server_id))

    def register_meta(self, address):
        return self.call(REGISTER_META, address)

    def heartbeat(self, server_id):
        return self.call(HEARTBEAT, server_id)

    def deregister(self, server_id):
        return self.call(DEREGISTER, server_id)

    def fetch_membership(self):
        return _membership_in(self.call(FETCH_MEMBERSHIP))

    def counter_snapshot(self):
        return self.call(COUNTERS)


class RemoteServices:
    """Client-side view of a networked cluster, found through its coordinator."""

    def __init__(self, coord_address: str):
        self.coord = RemoteCoordinator(coord_address)
        self._lock = threading.Lock()
        self._membership: Optional[Membership] = None
        self._storage: dict[int, RemoteStorage] = {}
        m = self.refresh()
        if not m.meta_address:
            raise IoFailure("no metadata service registered with the coordinator")
        self.meta = RemoteMeta(m.meta_address)

    def membership(self) -> Membership:
        with self._lock:
            m = self._membership
        return m if m is not None else self.refresh()

    def refresh(self) -> Membership:
        m = self.coord.fetch_membership()
        with self._lock:
            self._membership = m
        return m

    def storage(self, server_id: int) -> RemoteStorage:
        with self._lock:
            r = self._storage.get(server_id)
        if r is None:
            try:
                addr = self.membership().address_of(server_id)
            except SliceFSError:
                addr = self.refresh().address_of(server_id)
            r = RemoteStorage(addr)
            with self._lock:
                self._storage[server_id] = r
        return r


# -- daemons --------------------------------------------------------------------------------------

def serve_coordinator(coord, host: str = "127.0.0.1", port: int = 0) -> FrameServer:
    return FrameServer((host, port), coord_handlers(coord)).start()


def serve_meta(store, coord_address: str, host: str = "127.0.0.1", port: int = 0) -> FrameServer:
    srv = FrameServer((host, port), meta_handlers(store)).start()
    RemoteCoordinator(coord_address).register_meta(srv.address)
    return srv


class StorageDaemon:
    """A storage server listening on TCP, registered and heart-beating with the coordinator."""

    def __init__(self, server, coord_address: str, host: str = "127.0.0.1", port: int = 0,
                 heartbeat_interval: float = 1.0):
        self.server = server
        self.frames = FrameServer((host, port), storage_handlers(server)).start()
        self.coord = RemoteCoordinator(coord_address)
        sid, _ = self.coord.register_server(self.frames.address, server.server_id)
        server.set_server_id(sid)
        self.interval = heartbeat_interval
        self._stop = threading.Event()
        threading.Thread(target=self._beat, daemon=True, name="heartbeat").start()

    @property
    def address(self) -> str:
        return self.frames.address

    def _beat(self):
        while not self._stop.wait(self.interval):
            try:
                self.coord.heartbeat(self.server.server_id)
            except SliceFSError as e:
                log.warning("heartbeat failed (%s); re-registering", e)
                try:
                    sid, _ = self.coord.register_server(self.frames.address, self.server.server_id)
                    self.server.set_server_id(sid)
                except SliceFSError:
                    time.sleep(self.interval)

    def stop(self):
        self._stop.set()
        self.frames.stop()

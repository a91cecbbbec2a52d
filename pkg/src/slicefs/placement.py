"""Consistent-hash placement and the coordinator's server registry.

Two independent rings are used: one over storage servers (region -> replica
set) and, inside each server, one over its backing files (region -> file).
They hash with different salts so regions that share a server rarely share
a backing file.
"""

from __future__ import annotations

import hashlib
import secrets
import struct
import threading
import time
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from .errors import InsufficientServers, UnknownServer

DEFAULT_VNODES = 64
SERVER_SALT = b"slicefs-server-ring"
FILE_SALT = b"slicefs-backing-ring"


def hash64(data: bytes, salt: bytes = b"") -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8, key=salt[:64]).digest(), "big")


def region_token(file_id: int, region_index: int) -> bytes:
    return struct.pack(">QQ", file_id, region_index)


class HashRing:
    def __init__(self, nodes: Iterable = (), vnodes: int = DEFAULT_VNODES, salt: bytes = SERVER_SALT):
        self.vnodes = vnodes
        self.salt = salt
        self._points: list[int] = []
        self._owners: list = []
        self._nodes: list = []
        for n in nodes:
            self.add(n)

    def add(self, node) -> None:
        if node in self._nodes:
            return
        self._nodes.append(node)
        pts = sorted(zip(self._points, self._owners))
        for i in range(self.vnodes):
            pts.append((hash64(f"{node}#{i}".encode(), self.salt), node))
        pts.sort(key=lambda p: (p[0], str(p[1])))
        self._points = [p for p, _ in pts]
        self._owners = [o for _, o in pts]

    def remove(self, node) -> None:
        if node not in self._nodes:
            return
        self._nodes.remove(node)
        keep = [(p, o) for p, o in zip(self._points, self._owners) if o != node]
        self._points = [p for p, _ in keep]
        self._owners = [o for _, o in keep]

    @property
    def nodes(self) -> list:
        return list(self._nodes)

    def __len__(self):
        return len(self._points)

    def walk(self, token: bytes):
        """Distinct owners in ring order starting at the token's hash."""
        if not self._points:
            return
        h = hash64(token, self.salt)
        start = bisect_right(self._points, h)
        seen = set()
        n = len(self._points)
        for i in range(n):
            owner = self._owners[(start + i) % n]
            if owner not in seen:
                seen.add(owner)
                yield owner
                if len(seen) == len(self._nodes):
                    return

    def lookup(self, token: bytes):
        for owner in self.walk(token):
            return owner
        raise InsufficientServers("empty ring")

    def place(self, token: bytes, count: int, exclude: Iterable = ()) -> list:
        skip = set(exclude)
        out = []
        for owner in self.walk(token):
            if owner in skip:
                continue
            out.append(owner)
            if len(out) == count:
                return out
        raise InsufficientServers(f"need {count} servers, ring offers {len(out)}")


@dataclass(frozen=True)
class ServerInfo:
    server_id: int
    address: str


@dataclass
class Membership:
    epoch: int
    servers: list = field(default_factory=list)  # ServerInfo
    meta_address: str = ""
    vnodes: int = DEFAULT_VNODES
    _ring: Optional[HashRing] = field(default=None, repr=False, compare=False)
    _placed: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def ring(self) -> HashRing:
        if self._ring is None:
            self._ring = HashRing([s.server_id for s in self.servers], self.vnodes)
        return self._ring

    def server_ids(self) -> list[int]:
        return [s.server_id for s in self.servers]

    def address_of(self, server_id: int) -> str:
        for s in self.servers:
            if s.server_id == server_id:
                return s.address
        raise UnknownServer(str(server_id))

    def place_region(self, file_id: int, region_index: int, r: int, exclude: Iterable = ()) -> list[int]:
        exclude = tuple(exclude)
        if exclude:
            return self.ring.place(region_token(file_id, region_index), r, exclude)
        k = (file_id, region_index, r)
        hit = self._placed.get(k)
        if hit is None:
            if len(self._placed) > 65536:
                self._placed.clear()
            hit = self._placed[k] = self.ring.place(region_token(file_id, region_index), r)
        return list(hit)


class Coordinator:
    """Single-process rendezvous point: registration, liveness, membership."""

    def __init__(self, heartbeat_interval: float = 1.0, missed_beats: int = 3,
                 clock: Callable[[], float] = time.monotonic, vnodes: int = DEFAULT_VNODES):
        self.heartbeat_interval = heartbeat_interval
        self.missed_beats = missed_beats
        self.clock = clock
        self.vnodes = vnodes
        self.epoch = 0
        self.meta_address = ""
        self._servers: dict[int, ServerInfo] = {}
        self._last_beat: dict[int, float] = {}
        self._lock = threading.Lock()

    def register_server(self, address: str, server_id: Optional[int] = None) -> tuple[int, int]:
        with self._lock:
            if server_id is None or server_id in self._servers and self._servers[server_id].address != address:
                server_id = secrets.randbits(63) or 1
                while server_id in self._servers:
                    server_id = secrets.randbits(63) or 1
            self._servers[server_id] = ServerInfo(server_id, address)
            self._last_beat[server_id] = self.clock()
            self.epoch += 1
            return server_id, self.epoch

    def register_meta(self, address: str) -> int:
        with self._lock:
            self.meta_address = address
            self.epoch += 1
            return self.epoch

    def heartbeat(self, server_id: int) -> int:
        with self._lock:
            self._expire()
            if server_id not in self._servers:
                raise UnknownServer(str(server_id))
            self._last_beat[server_id] = self.clock()
            return self.epoch

    def deregister(self, server_id: int) -> int:
        with self._lock:
            if self._servers.pop(server_id, None) is not None:
                self._last_beat.pop(server_id, None)
                self.epoch += 1
            return self.epoch

    def _expire(self):
        deadline = self.clock() - self.heartbeat_interval * self.missed_beats
        dead = [sid for sid, t in self._last_beat.items() if t < deadline]
        for sid in dead:
            del self._servers[sid]
            del self._last_beat[sid]
        if dead:
            self.epoch += 1

    def fetch_membership(self) -> Membership:
        with self._lock:
            self._expire()
            servers = sorted(self._servers.values(), key=lambda s: s.server_id)
            return Membership(self.epoch, servers, self.meta_address, self.vnodes)

"""In-process cluster: coordinator, metadata store and storage servers in one process.

Used by tests, the benchmark and the CLI's local mode. Storage calls go
through a thin proxy so faults (dead servers, dropped requests) can be
injected without touching the servers themselves.
"""

from __future__ import annotations

import fnmatch
import os
import random
import threading
from typing import Optional

from .client import SliceFS
from .config import FsConfig
from .errors import IoFailure, MessageDropped, UnknownServer
from .metastore import MetaStore
from .placement import Coordinator, Membership
from .storage import StorageServer


class _StorageProxy:
    def __init__(self, cluster: "LocalCluster", server: StorageServer):
        self._cluster = cluster
        self._server = server

    def __getattr__(self, name):
        target = getattr(self._server, name)
        if not callable(target):
            return target

        def call(*args):
            self._cluster._check_fault(self._server.server_id, name)
            return target(*args)

        return call


class LocalServices:
    """What a client needs: the metadata store, membership, storage proxies."""

    def __init__(self, cluster: "LocalCluster"):
        self.cluster = cluster
        self.meta = cluster.meta
        self._membership: Optional[Membership] = None
        self._lock = threading.Lock()

    def membership(self) -> Membership:
        with self._lock:
            if self._membership is None:
                self._membership = self.cluster.coordinator.fetch_membership()
            return self._membership

    def refresh(self) -> Membership:
        with self._lock:
            self._membership = self.cluster.coordinator.fetch_membership()
            return self._membership

    def storage(self, server_id: int):
        try:
            return self.cluster._proxies[server_id]
        except KeyError:
            raise UnknownServer(str(server_id)) from None


class LocalCluster:
    def __init__(self, n_servers: int = 4, data_dir: Optional[str] = None, config: Optional[FsConfig] = None,
                 backing_files: Optional[int] = None, seed: int = 0):
        self.config = config or FsConfig()
        self.data_dir = data_dir
        self.coordinator = Coordinator(heartbeat_interval=3600.0, vnodes=self.config.vnodes)
        wal = os.path.join(data_dir, "meta.wal") if data_dir else None
        if data_dir:
            os.makedirs(data_dir, exist_ok=True)
        self.meta = MetaStore(wal_path=wal)
        self.coordinator.register_meta("local:meta")
        self.servers: dict[int, StorageServer] = {}
        self._proxies: dict[int, _StorageProxy] = {}
        self._dead: set[int] = set()
        self._drops: list[tuple[str, float]] = []
        self._rng = random.Random(seed)
        self._fault_lock = threading.Lock()
        nbf = backing_files or self.config.backing_files
        id_rng = random.Random(seed)
        for i in range(n_servers):
            sdir = os.path.join(data_dir, f"storage{i}") if data_dir else None
            s = StorageServer(server_id=id_rng.getrandbits(63) or 1, data_dir=sdir, backing_files=nbf)
            sid, _ = self.coordinator.register_server(f"local:{i}", s.server_id)
            s.set_server_id(sid)
            self.servers[sid] = s
            self._proxies[sid] = _StorageProxy(self, s)
        self.services = LocalServices(self)

    def client(self, **kw) -> SliceFS:
        return SliceFS(LocalServices(self), config=self.config, **kw)

    # -- fault injection ----------------------------------------------------------------

    def kill_server(self, server_id: int, deregister: bool = False) -> None:
        """Make every call to ``server_id`` fail; optionally drop it from membership too."""
        with self._fault_lock:
            self._dead.add(server_id)
        if deregister:
            self.coordinator.deregister(server_id)

    def revive_server(self, server_id: int) -> None:
        with self._fault_lock:
            self._dead.discard(server_id)

    def drop_messages(self, pattern: str, probability: float) -> None:
        """Drop requests whose method name matches ``pattern`` with ``probability``."""
        with self._fault_lock:
            self._drops.append((pattern, probability))

    def clear_faults(self) -> None:
        with self._fault_lock:
            self._dead.clear()
            self._drops.clear()

    def _check_fault(self, server_id: int, method: str) -> None:
        with self._fault_lock:
            if server_id in self._dead:
                raise IoFailure(f"server {server_id} is down")
            for pattern, p in self._drops:
                if fnmatch.fnmatchcase(method, pattern) and self._rng.random() < p:
                    raise MessageDropped(f"{method} to {server_id} dropped")

    # -- accounting -----------------------------------------------------------------------

    def storage_counters(self) -> dict[int, dict]:
        return {sid: s.counter_snapshot() for sid, s in self.servers.items()}

    def storage_total(self, name: str) -> int:
        return sum(s.counter_snapshot().get(name, 0) for s in self.servers.values())

    def counters(self) -> dict:
        return {"meta": self.meta.counter_snapshot(),
                "storage": {str(k): v for k, v in self.storage_counters().items()}}

    def physical_bytes(self) -> int:
        return sum(s.usage()["physical"] for s in self.servers.values())

    def close(self) -> None:
        for s in self.servers.values():
            s.close()
        self.meta.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False

"""Filesystem configuration: ``key=value`` lines on disk, one dataclass in memory."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

MiB = 1024 * 1024


@dataclass
class FsConfig:
    region_size: int = 64 * MiB
    replication: int = 2
    gc_high: float = 0.40
    gc_low: float = 0.20
    backing_files: int = 8
    spill_threshold: int = 1024
    retry_cap: int = 16
    vnodes: int = 64
    hash: str = "blake2b-64"
    coord: str = ""

    def __post_init__(self):
        if self.region_size <= 0:
            raise ValueError("region_size must be positive")
        if self.replication < 1:
            raise ValueError("replication must be >= 1")
        if not 0 <= self.gc_low <= self.gc_high <= 1:
            raise ValueError("need 0 <= gc_low <= gc_high <= 1")

    def dumps(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def loads(cls, text: str) -> "FsConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kw = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            kind = types[key]
            if kind in ("int", int):
                kw[key] = parse_size(val)
            elif kind in ("float", float):
                kw[key] = float(val)
            else:
                kw[key] = val
        return cls(**kw)

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            f.write(self.dumps())

    @classmethod
    def load(cls, path: str) -> "FsConfig":
        with open(path) as f:
            cfg = cls.loads(f.read())
        if not cfg.coord and os.environ.get("WTF_COORD"):
            cfg.coord = os.environ["WTF_COORD"]
        return cfg


_SUFFIX = {"k": 1024, "m": MiB, "g": 1024 * MiB}


def parse_size(text: str) -> int:
    """Parse ``4096``, ``64k``, ``64MiB``, ``2M`` into bytes."""
    t = text.strip().lower().removesuffix("ib").removesuffix("b")
    if t and t[-1] in _SUFFIX:
        return int(float(t[:-1]) * _SUFFIX[t[-1]])
    return int(t)

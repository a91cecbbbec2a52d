"""The slicefs client library.

Files are inodes plus per-region entry lists in the metadata store; data is
immutable slices on storage servers. Every operation runs inside a metadata
transaction: either one the application opened with ``transaction()`` or an
implicit single-operation one. See ``txn.py`` for the retry layer.
"""

from __future__ import annotations

import posixpath
import random
import stat as statmod
import threading
import time
from collections import Counter, OrderedDict
from dataclasses import dataclass
from typing import Optional, Sequence, Union

from . import intervals
from .config import FsConfig
from .encoding import (
    Indirection,
    Inode,
    PathRecord,
    decode_dir_records,
    decode_element,
    decode_entry_list,
    decode_inode,
    decode_path_record,
    encode_dir_record,
    encode_entry,
    encode_inode,
    encode_path_record,
    inode_key,
    region_key,
)
from .errors import (
    DirectoryNotEmpty,
    Exists,
    InvalidArgument,
    IoFailure,
    IsADirectory,
    MessageDropped,
    NotADirectory,
    NotFound,
    OutOfRange,
    PermissionDenied,
    ReplicaWriteFailed,
    RetryExhausted,
    SliceFSError,
)
from .metastore import TxnContext
from .slices import (
    RELATIVE,
    SliceEntry,
    clip_extents,
    coalesce,
    entries_span,
    hole,
    region_split,
    Overlay,
)

PATHS = "paths"
INODES = "inodes"
REGIONS = "regions"
CONFIG = "config"

SEEK_SET, SEEK_CUR, SEEK_END = 0, 1, 2

MAX_SLICE = 64 * 1024 * 1024
_CONFIG_KEY = b"fs"
_APPEND_ATTEMPTS = 10_000


@dataclass(frozen=True)
class Stat:
    inode_id: int
    mode: int
    link_count: int
    mtime: int
    uid: int
    gid: int
    length: int
    highest_region: int
    region_size: int
    replication: int

    @property
    def is_dir(self) -> bool:
        return statmod.S_ISDIR(self.mode)


def normpath(path: str) -> str:
    if not path or not path.startswith("/"):
        raise InvalidArgument(f"path must be absolute: {path!r}")
    p = posixpath.normpath(path)
    if p.startswith("//"):
        p = "/" + p.lstrip("/")
    return p


def _backoff(attempt: int, rng: random.Random):
    time.sleep(min(0.05, 0.0005 * (2 ** min(attempt, 10))) * rng.random())


class FileHandle:
    """Descriptor-style cursor on one inode.

    Outside a transaction each call is its own atomic operation; handles
    returned by ``Transaction.open`` log every call in that transaction.
    A handle is meant for one caller at a time.
    """

    def __init__(self, fs: "SliceFS", path: str, mode: str, txn=None):
        self.fs = fs
        self.path = path
        self.mode = mode
        self.readable = "r" in mode or "+" in mode
        self.writable = "w" in mode or "+" in mode or "a" in mode
        self.inode_id: Optional[int] = None
        self.offset = 0
        self.txn = txn

    def __repr__(self):
        return f"FileHandle({self.path!r}, inode={self.inode_id}, offset={self.offset})"

    def _call(self, op, *args):
        if self.txn is not None:
            return self.txn.run(op, self, args)
        return self.fs._implicit(op, self, args)

    def read(self, n: int = -1) -> bytes:
        return self._call("read", n)

    def pread(self, offset: int, n: int) -> bytes:
        return self._call("pread", offset, n)

    def write(self, data: bytes) -> int:
        return self._call("write", bytes(data))

    def pwrite(self, offset: int, data: bytes) -> int:
        return self._call("pwrite", offset, bytes(data))

    def seek(self, offset: int, whence: int = SEEK_SET) -> None:
        """Move the cursor. Returns nothing; use ``tell`` to observe the position."""
        if self.txn is None and whence != SEEK_END:
            # purely local outside a transaction: nothing to read or validate
            pos = offset if whence == SEEK_SET else self.offset + offset
            if whence not in (SEEK_SET, SEEK_CUR):
                raise InvalidArgument(f"bad whence {whence}")
            if pos < 0:
                raise InvalidArgument("negative file position")
            self.offset = pos
            return
        self._call("seek", offset, whence)

    def tell(self) -> int:
        if self.txn is None:
            return self.offset
        return self._call("tell")

    def length(self) -> int:
        return self._call("length")

    def yank(self, size: int, with_data: bool = False):
        """Entries (offsets relative to the cursor) for the next ``size`` bytes, and optionally the bytes."""
        return self._call("yank", size, with_data)

    def paste(self, entries: Sequence[SliceEntry]) -> int:
        return self._call("paste", tuple(entries))

    def punch(self, amount: int) -> None:
        """Zero ``amount`` bytes at the cursor without moving it."""
        self._call("punch", amount)

    def append(self, payload: Union[bytes, Sequence[SliceEntry]]) -> int:
        """Append bytes or yanked entries at end of file; returns where they landed."""
        if self.txn is not None:
            return self.txn.run("append", self, (_payload(payload),))
        if not self.writable:
            raise PermissionDenied(f"{self.path} not open for writing")
        off, n = self.fs._append_fast(self.inode_id, _payload(payload))
        self.offset = off + n
        return off


def _payload(p):
    if isinstance(p, (bytes, bytearray, memoryview)):
        return bytes(p)
    return tuple(p)


class SliceFS:
    """Client for one slicefs filesystem reached through ``services``.

    ``services`` supplies ``meta`` (metadata store), ``membership()``,
    ``refresh()`` and ``storage(server_id)``.
    """

    def __init__(self, services, config: Optional[FsConfig] = None, retry_cap: Optional[int] = None,
                 seed: Optional[int] = None):
        self.services = services
        self.meta = services.meta
        self.counters = Counter()
        self._clock_lock = threading.Lock()
        self._rng = random.Random(seed)
        self._cache_lock = threading.Lock()
        self._extent_cache: OrderedDict = OrderedDict()
        self._spill_cache: OrderedDict = OrderedDict()
        self._latency: dict[int, float] = {}
        self.config = self._load_or_format(config or FsConfig())
        self.retry_cap = retry_cap if retry_cap is not None else self.config.retry_cap

    # -- bootstrap -------------------------------------------------------------------

    def _load_or_format(self, config: FsConfig) -> FsConfig:
        vv = self.meta.read(CONFIG, _CONFIG_KEY)
        if vv.value is not None:
            stored = FsConfig.loads(vv.value.decode())
            stored.coord = config.coord
            return stored
        ctx = self.meta.begin()
        if ctx.get(CONFIG, _CONFIG_KEY) is None:
            ctx.put(CONFIG, _CONFIG_KEY, config.dumps().encode())
            root = Inode(self._new_id(), statmod.S_IFDIR | 0o755, config.region_size, config.replication,
                         link_count=1, mtime=time.time_ns())
            ctx.put(INODES, inode_key(root.inode_id), encode_inode(root))
            ctx.put(PATHS, b"/", encode_path_record(PathRecord("/", root.inode_id)))
            if ctx.commit():
                return config
        return self._load_or_format(config)

    def _new_id(self) -> int:
        with self._clock_lock:
            return random.SystemRandom().getrandbits(63) or 1

    # -- public namespace API (implicit transactions) --------------------------------------

    def transaction(self, before_commit=None):
        from .txn import Transaction

        return Transaction(self, before_commit=before_commit)

    def _implicit(self, op, handle, args):
        from .txn import Transaction

        t = Transaction(self, implicit=True)
        t.run(op, handle, args)
        t.commit()
        return t.results[-1]

    def open(self, path: str, mode: str = "r", create: bool = False) -> FileHandle:
        h = FileHandle(self, normpath(path), mode)
        self._implicit("open", h, (h.path, mode, create))
        return h

    def create(self, path: str, mode: int = 0o644, replication: Optional[int] = None) -> None:
        self._implicit("create", None, (normpath(path), mode, replication))

    def mkdir(self, path: str, mode: int = 0o755) -> None:
        self._implicit("mkdir", None, (normpath(path), mode))

    def makedirs(self, path: str) -> None:
        parts = normpath(path).strip("/").split("/")
        cur = ""
        for p in parts:
            if not p:
                continue
            cur += "/" + p
            try:
                self.mkdir(cur)
            except Exists:
                if not self.stat(cur).is_dir:
                    raise NotADirectory(cur)

    def link(self, src: str, dst: str) -> None:
        self._implicit("link", None, (normpath(src), normpath(dst)))

    def unlink(self, path: str) -> None:
        self._implicit("unlink", None, (normpath(path),))

    def rmdir(self, path: str) -> None:
        self._implicit("rmdir", None, (normpath(path),))

    def readdir(self, path: str) -> list[str]:
        return self._implicit("readdir", None, (normpath(path),))

    def stat(self, path: str) -> Stat:
        return self._implicit("stat", None, (normpath(path),))

    def exists(self, path: str) -> bool:
        return self._implicit("exists", None, (normpath(path),))

    def chmod(self, path: str, mode: int) -> None:
        self._implicit("chmod", None, (normpath(path), mode))

    def concat(self, sources: Sequence[str], dest: str, overwrite: bool = False) -> None:
        self._implicit("concat", None, (tuple(normpath(s) for s in sources), normpath(dest), overwrite))

    def copy(self, source: str, dest: str, overwrite: bool = False) -> None:
        self.concat([source], dest, overwrite)

    def append(self, path: str, payload) -> int:
        ino = self._lookup_direct(normpath(path))
        return self._append_fast(ino, _payload(payload))[0]

    # whole-file conveniences

    def read_file(self, path: str) -> bytes:
        return self._implicit("read_file", None, (normpath(path),))

    def write_file(self, path: str, data: bytes, replication: Optional[int] = None) -> None:
        """Create-or-replace ``path`` with ``data`` in one transaction."""
        self._implicit("write_file", None, (normpath(path), bytes(data), replication))

    # -- operation dispatch ----------------------------------------------------------------------

    def _exec(self, ctx: TxnContext, op: str, h: Optional[FileHandle], args: tuple, saved):
        """Run ``op`` inside ``ctx``; returns (result, digest, saved).

        ``saved`` carries slice entries created on first execution so replays
        reuse them instead of writing the data again.
        """
        return getattr(self, "_op_" + op)(ctx, h, args, saved)

    @staticmethod
    def _strip_args(op: str, args: tuple) -> tuple:
        """Drop data payloads once their slices exist; the log keeps pointers only."""
        if op in ("write",):
            return ()
        if op == "pwrite":
            return (args[0],)
        if op == "append" and isinstance(args[0], bytes):
            return (None,)
        if op == "write_file":
            return (args[0], None, args[2])
        return args

    # namespace ops

    def _op_open(self, ctx, h, args, saved):
        path, mode, create = args
        rec = ctx.get(PATHS, path.encode())
        if rec is None:
            if not create:
                raise NotFound(path)
            inode = self._create_inode(ctx, path, 0o644, None)
        else:
            inode = self._inode(ctx, decode_path_record(rec.value).inode_id)
        if statmod.S_ISDIR(inode.mode) and h.writable:
            raise IsADirectory(path)
        if h.readable and not inode.mode & 0o444:
            raise PermissionDenied(f"{path}: not readable")
        if h.writable and not inode.mode & 0o222:
            raise PermissionDenied(f"{path}: not writable")
        h.inode_id = inode.inode_id
        h.offset = 0
        return None, "ok", None

    def _op_create(self, ctx, h, args, saved):
        path, mode, repl = args
        self._create_inode(ctx, path, mode, repl)
        return None, "ok", None

    def _op_mkdir(self, ctx, h, args, saved):
        path, mode = args
        self._create_inode(ctx, path, statmod.S_IFDIR | (mode & 0o7777), None)
        return None, "ok", None

    def _op_link(self, ctx, h, args, saved):
        src, dst = args
        inode = self._inode(ctx, self._lookup(ctx, src))
        if statmod.S_ISDIR(inode.mode):
            raise IsADirectory(src)
        parent, name = self._parent_dir(ctx, dst)
        if ctx.get(PATHS, dst.encode()) is not None:
            raise Exists(dst)
        ctx.put(PATHS, dst.encode(), encode_path_record(PathRecord(dst, inode.inode_id)))
        inode.link_count += 1
        self._put_inode(ctx, inode)
        self._dir_add(ctx, parent, name, inode.inode_id)
        return None, "ok", None

    def _op_unlink(self, ctx, h, args, saved):
        (path,) = args
        inode = self._inode(ctx, self._lookup(ctx, path))
        if statmod.S_ISDIR(inode.mode):
            raise IsADirectory(path)
        self._remove_name(ctx, path, inode)
        return None, "ok", None

    def _op_rmdir(self, ctx, h, args, saved):
        (path,) = args
        if path == "/":
            raise InvalidArgument("cannot remove the root directory")
        inode = self._inode(ctx, self._lookup(ctx, path))
        if not statmod.S_ISDIR(inode.mode):
            raise NotADirectory(path)
        if self._dir_entries(ctx, inode):
            raise DirectoryNotEmpty(path)
        self._remove_name(ctx, path, inode)
        return None, "ok", None

    def _op_readdir(self, ctx, h, args, saved):
        (path,) = args
        inode = self._inode(ctx, self._lookup(ctx, path))
        if not statmod.S_ISDIR(inode.mode):
            raise NotADirectory(path)
        names = sorted(self._dir_entries(ctx, inode))
        return names, tuple(names), None

    def _op_stat(self, ctx, h, args, saved):
        (path,) = args
        inode = self._inode(ctx, self._lookup(ctx, path))
        st = Stat(inode.inode_id, inode.mode, inode.link_count, inode.mtime, inode.uid, inode.gid,
                  self._length(ctx, inode), inode.highest_region, inode.region_size, inode.replication)
        return st, st, None

    def _op_exists(self, ctx, h, args, saved):
        (path,) = args
        found = ctx.get(PATHS, path.encode()) is not None
        return found, found, None

    def _op_chmod(self, ctx, h, args, saved):
        path, mode = args
        inode = self._inode(ctx, self._lookup(ctx, path))
        inode.mode = statmod.S_IFMT(inode.mode) | (mode & 0o7777)
        self._put_inode(ctx, inode)
        return None, "ok", None

    # data ops on handles

    def _handle_inode(self, ctx, h: FileHandle, write=False, read=False) -> Inode:
        if h.inode_id is None:
            raise InvalidArgument("handle is not open")
        if write and not h.writable:
            raise PermissionDenied(f"{h.path} not open for writing")
        if read and not h.readable:
            raise PermissionDenied(f"{h.path} not open for reading")
        return self._inode(ctx, h.inode_id)

    def _op_read(self, ctx, h, args, saved):
        (n,) = args
        inode = self._handle_inode(ctx, h, read=True)
        entries, data = self._read_range(ctx, inode, h.offset, n, fetch=saved is None)
        size = entries_span(entries)
        h.offset += size
        return data, (size, tuple(entries)), None

    def _op_pread(self, ctx, h, args, saved):
        off, n = args
        inode = self._handle_inode(ctx, h, read=True)
        entries, data = self._read_range(ctx, inode, off, n, fetch=saved is None)
        return data, (entries_span(entries), tuple(entries)), None

    def _op_write(self, ctx, h, args, saved):
        inode = self._handle_inode(ctx, h, write=True)
        if saved is None:
            (data,) = args
            if not data:
                raise InvalidArgument("zero-length write")
            saved = self._create_slices(inode, h.offset, data)
        n = entries_span(saved)
        self._place(ctx, inode, h.offset, saved)
        h.offset += n
        return n, n, saved

    def _op_pwrite(self, ctx, h, args, saved):
        off = args[0]
        if off < 0:
            raise InvalidArgument("negative offset")
        inode = self._handle_inode(ctx, h, write=True)
        if saved is None:
            data = args[1]
            if not data:
                raise InvalidArgument("zero-length write")
            saved = self._create_slices(inode, off, data)
        self._place(ctx, inode, off, saved)
        n = entries_span(saved)
        return n, n, saved

    def _op_seek(self, ctx, h, args, saved):
        off, whence = args
        if whence == SEEK_SET:
            pos = off
        elif whence == SEEK_CUR:
            pos = h.offset + off
        elif whence == SEEK_END:
            pos = self._length(ctx, self._handle_inode(ctx, h)) + off
        else:
            raise InvalidArgument(f"bad whence {whence}")
        if pos < 0:
            raise InvalidArgument("negative file position")
        h.offset = pos
        return None, None, None

    def _op_tell(self, ctx, h, args, saved):
        return h.offset, h.offset, None

    def _op_length(self, ctx, h, args, saved):
        n = self._length(ctx, self._handle_inode(ctx, h))
        return n, n, None

    def _op_yank(self, ctx, h, args, saved):
        size, with_data = args
        if size <= 0:
            raise InvalidArgument("yank size must be positive")
        inode = self._handle_inode(ctx, h, read=True)
        if h.offset + size > self._length(ctx, inode):
            raise OutOfRange(f"yank [{h.offset}, {h.offset + size}) beyond end of {h.path}")
        entries, data = self._read_range(ctx, inode, h.offset, size, fetch=with_data and saved is None)
        h.offset += size
        return (entries, data if with_data else None), tuple(entries), None

    def _op_paste(self, ctx, h, args, saved):
        (entries,) = args
        inode = self._handle_inode(ctx, h, write=True)
        if not entries:
            return 0, 0, None
        for e in entries:
            if e.offset is RELATIVE:
                raise InvalidArgument("paste needs absolute (yanked) entries")
        self._place(ctx, inode, h.offset, entries)
        n = entries_span(entries)
        h.offset += n
        return n, n, None

    def _op_punch(self, ctx, h, args, saved):
        (amount,) = args
        if amount <= 0:
            raise InvalidArgument("punch amount must be positive")
        inode = self._handle_inode(ctx, h, write=True)
        self._place(ctx, inode, h.offset, [hole(0, amount)])
        return None, None, None

    def _op_append(self, ctx, h, args, saved):
        inode = self._handle_inode(ctx, h, write=True)
        if saved is None:
            saved = self._payload_entries(inode, args[0])
        eof = self._length(ctx, inode)
        self._place(ctx, inode, eof, saved)
        h.offset = eof + entries_span(saved)
        return eof, eof, saved

    def _op_concat(self, ctx, h, args, saved):
        sources, dest, overwrite = args
        rs = self.config.region_size
        verbatim = []  # (region index, items, end) copied as-is from a leading aligned source
        high = 0
        pasted = []
        pos = 0
        for src in sources:
            inode = self._inode(ctx, self._lookup(ctx, src))
            if statmod.S_ISDIR(inode.mode):
                raise IsADirectory(src)
            n = self._length(ctx, inode)
            if not n:
                continue
            if pos == 0 and inode.region_size == rs:
                for ri in range(inode.highest_region + 1):
                    vv = self._region_value(ctx, inode.inode_id, ri)
                    if vv is not None:
                        verbatim.append((ri, vv.items, vv.end))
                high = inode.highest_region
            else:
                ents, _ = self._read_range(ctx, inode, 0, n, fetch=False)
                pasted.extend(e.at(e.offset + pos) for e in ents)
            pos += n
        dest_inode = self._replace_target(ctx, dest, overwrite, None)
        if verbatim:
            for ri, items, end in verbatim:
                ctx.set_list(REGIONS, region_key(dest_inode.inode_id, ri), items, end)
            dest_inode.highest_region = high
            self._put_inode(ctx, dest_inode)
        if pasted:
            self._place(ctx, dest_inode, 0, pasted)
        return None, "ok", None

    def _op_read_file(self, ctx, h, args, saved):
        (path,) = args
        inode = self._inode(ctx, self._lookup(ctx, path))
        entries, data = self._read_range(ctx, inode, 0, self._length(ctx, inode), fetch=saved is None)
        return data, tuple(entries), None

    def _op_write_file(self, ctx, h, args, saved):
        path, data, repl = args
        inode = self._replace_target(ctx, path, True, repl)
        if saved is None:
            saved = self._create_slices(inode, 0, data) if data else []
        if saved:
            self._place(ctx, inode, 0, saved)
        return None, "ok", saved

    # -- metadata helpers ---------------------------------------------------------------------------

    def _inode(self, ctx, inode_id: int) -> Inode:
        vv = ctx.get(INODES, inode_key(inode_id))
        if vv is None:
            raise NotFound(f"inode {inode_id}")
        return decode_inode(vv.value)

    def _put_inode(self, ctx, inode: Inode):
        ctx.put(INODES, inode_key(inode.inode_id), encode_inode(inode))

    def _lookup(self, ctx, path: str) -> int:
        rec = ctx.get(PATHS, path.encode())
        if rec is None:
            raise NotFound(path)
        return decode_path_record(rec.value).inode_id

    def _lookup_direct(self, path: str) -> int:
        vv = self.meta.read(PATHS, path.encode())
        if vv.value is None:
            raise NotFound(path)
        return decode_path_record(vv.value).inode_id

    def _parent_dir(self, ctx, path: str) -> tuple[Inode, str]:
        if path == "/":
            raise Exists("/")
        parent, name = posixpath.split(path)
        rec = ctx.get(PATHS, parent.encode())
        if rec is None:
            raise NotFound(parent)
        pino = self._inode(ctx, decode_path_record(rec.value).inode_id)
        if not statmod.S_ISDIR(pino.mode):
            raise NotADirectory(parent)
        return pino, name

    def _create_inode(self, ctx, path: str, mode: int, repl: Optional[int]) -> Inode:
        parent, name = self._parent_dir(ctx, path)
        if ctx.get(PATHS, path.encode()) is not None:
            raise Exists(path)
        inode = self._new_inode(mode, repl)
        self._put_inode(ctx, inode)
        ctx.put(PATHS, path.encode(), encode_path_record(PathRecord(path, inode.inode_id)))
        self._dir_add(ctx, parent, name, inode.inode_id)
        return inode

    def _new_inode(self, mode: int, repl: Optional[int]) -> Inode:
        if not statmod.S_IFMT(mode):
            mode |= statmod.S_IFREG
        return Inode(self._new_id(), mode, self.config.region_size, repl or self.config.replication,
                     link_count=1, mtime=time.time_ns())

    def _replace_target(self, ctx, path: str, overwrite: bool, repl: Optional[int]) -> Inode:
        rec = ctx.get(PATHS, path.encode())
        if rec is not None:
            if not overwrite:
                raise Exists(path)
            old = self._inode(ctx, decode_path_record(rec.value).inode_id)
            if statmod.S_ISDIR(old.mode):
                raise IsADirectory(path)
            self._unlink_inode(ctx, old)
            # the name stays in its directory, so only the path record moves to the new inode
            inode = self._new_inode(0o644, repl)
            self._put_inode(ctx, inode)
            ctx.put(PATHS, path.encode(), encode_path_record(PathRecord(path, inode.inode_id)))
            return inode
        return self._create_inode(ctx, path, 0o644, repl)

    def _remove_name(self, ctx, path: str, inode: Inode):
        parent, name = self._parent_dir(ctx, path)
        ctx.delete(PATHS, path.encode())
        self._unlink_inode(ctx, inode)
        self._dir_add(ctx, parent, name, 0)

    def _unlink_inode(self, ctx, inode: Inode):
        inode.link_count -= 1
        if inode.link_count <= 0:
            ctx.delete(INODES, inode_key(inode.inode_id))
            for ri in range(inode.highest_region + 1):
                if ctx.get(REGIONS, region_key(inode.inode_id, ri)) is not None:
                    ctx.delete(REGIONS, region_key(inode.inode_id, ri))
        else:
            self._put_inode(ctx, inode)

    def _dir_add(self, ctx, dir_inode: Inode, name: str, inode_id: int):
        rec = encode_dir_record(name, inode_id)
        eof = self._length(ctx, dir_inode)
        self._place(ctx, dir_inode, eof, self._create_slices(dir_inode, eof, rec))

    def _dir_entries(self, ctx, dir_inode: Inode) -> dict[str, int]:
        n = self._length(ctx, dir_inode)
        if n == 0:
            return {}
        _, raw = self._read_range(ctx, dir_inode, 0, n, fetch=True)
        out: dict[str, int] = {}
        for name, ino in decode_dir_records(raw):
            if ino:
                out[name] = ino
            else:
                out.pop(name, None)
        return out

    # -- region lists ------------------------------------------------------------------------------------

    def _region_value(self, ctx, inode_id: int, ri: int):
        return ctx.get(REGIONS, region_key(inode_id, ri))

    def _length(self, ctx, inode: Inode) -> int:
        vv = self._region_value(ctx, inode.inode_id, inode.highest_region)
        end = vv.end if vv is not None else 0
        return inode.highest_region * inode.region_size + end

    def region_entries(self, items: Sequence[bytes]) -> list[SliceEntry]:
        """Decode a region list, dereferencing a spilled prefix if present."""
        out: list[SliceEntry] = []
        for raw in items:
            el = decode_element(raw)
            if isinstance(el, Indirection):
                out = list(self._spilled(el))
            else:
                out.append(el)
        return out

    def _spilled(self, ind: Indirection) -> list[SliceEntry]:
        key = ind.replicas
        with self._cache_lock:
            hit = self._spill_cache.get(key)
        if hit is not None:
            return hit
        entries = decode_entry_list(self._read_replicas(ind.replicas))
        with self._cache_lock:
            self._spill_cache[key] = entries
            if len(self._spill_cache) > 256:
                self._spill_cache.popitem(last=False)
        return entries

    def _extents(self, ctx, inode: Inode, ri: int):
        k = region_key(inode.inode_id, ri)
        vv = ctx.get(REGIONS, k)
        if vv is None:
            return [], 0
        items = vv.items
        with self._cache_lock:
            hit = self._extent_cache.get(k)
        if hit is not None:
            old_items, ov, res = hit
            if old_items == items:
                return res
            n = len(old_items)
            if len(items) > n and items[:n] == old_items:
                new = [decode_element(raw) for raw in items[n:]]
                if not any(isinstance(e, Indirection) for e in new):
                    ov = ov.copy().apply(new)
                    return self._remember_extents(k, items, ov)
        ov = Overlay(inode.region_size).apply(self.region_entries(items))
        return self._remember_extents(k, items, ov)

    def _remember_extents(self, k, items, ov):
        res = (ov.extents(), ov.end)
        with self._cache_lock:
            self._extent_cache[k] = (items, ov, res)
            self._extent_cache.move_to_end(k)
            if len(self._extent_cache) > 2048:
                self._extent_cache.popitem(last=False)
        return res

    def _range_entries(self, ctx, inode: Inode, off: int, n: int) -> list[SliceEntry]:
        rs = inode.region_size
        out: list[SliceEntry] = []
        for ri, roff, sub in region_split(off, n, rs):
            exts, _ = self._extents(ctx, inode, ri)
            out.extend(clip_extents(exts, roff, roff + sub, ri * rs + roff - off))
        return coalesce(out)

    def _read_range(self, ctx, inode: Inode, off: int, n: int, fetch: bool):
        if off < 0:
            raise InvalidArgument("negative offset")
        length = self._length(ctx, inode)
        if n < 0 or off + n > length:
            n = max(0, length - off)
        if n == 0:
            return [], (b"" if fetch else None)
        entries = self._range_entries(ctx, inode, off, n)
        return entries, (self.fetch(entries) if fetch else None)

    def _place(self, ctx, inode: Inode, file_offset: int, entries: Sequence[SliceEntry]):
        """Overlay ``entries`` (offsets relative to ``file_offset``) onto the file's region lists."""
        rs = inode.region_size
        per_region: dict[int, list[SliceEntry]] = {}
        for e in entries:
            consumed = 0
            for ri, roff, sub in region_split(file_offset + e.offset, e.length, rs):
                per_region.setdefault(ri, []).append(e.sub(consumed, sub, roff))
                consumed += sub
        if not per_region:
            return
        top = max(per_region)
        if top > inode.highest_region:
            old = inode.highest_region
            vv = self._region_value(ctx, inode.inode_id, old)
            end_old = vv.end if vv is not None else 0
            covered = intervals.normalize((e.offset, e.offset + e.length) for e in per_region.get(old, ()))
            if end_old < rs and intervals.subtract([(end_old, rs)], covered):
                # seal: stale appenders must never land inside a region below the end of file
                ctx.list_append(REGIONS, region_key(inode.inode_id, old), encode_entry(hole(end_old, rs - end_old)), end=rs)
            inode.highest_region = top
            inode.mtime = time.time_ns()
            self._put_inode(ctx, inode)
        for ri, ents in per_region.items():
            k = region_key(inode.inode_id, ri)
            end = max(e.offset + e.length for e in ents)
            if len(ents) == 1:
                ctx.list_append(REGIONS, k, encode_entry(ents[0]), end=end)
            else:
                ctx.list_extend(REGIONS, k, [encode_entry(e) for e in ents], end=end)

    # -- data path ---------------------------------------------------------------------------------------

    def _create_slices(self, inode: Inode, file_offset: int, data: bytes) -> list[SliceEntry]:
        """Write ``data`` as replicated slices; entries are relative to ``file_offset``."""
        out = []
        pos = 0
        for ri, roff, sub in region_split(file_offset, len(data), inode.region_size):
            piece_end = pos + sub
            while pos < piece_end:
                n = min(MAX_SLICE, piece_end - pos)
                reps = self._replicate(inode, ri, data[pos:pos + n])
                out.append(SliceEntry(pos, n, reps))
                pos += n
        return out

    def _payload_entries(self, inode: Inode, payload) -> list[SliceEntry]:
        if isinstance(payload, bytes):
            if not payload:
                raise InvalidArgument("zero-length append")
            hint = inode.highest_region
            out, pos = [], 0
            step = min(MAX_SLICE, inode.region_size)
            while pos < len(payload):
                n = min(step, len(payload) - pos)
                out.append(SliceEntry(pos, n, self._replicate(inode, hint, payload[pos:pos + n])))
                pos += n
            return out
        entries = list(payload)
        if not entries:
            raise InvalidArgument("empty append")
        return entries

    def _replicate(self, inode: Inode, ri: int, data: bytes) -> tuple:
        r = inode.replication
        failed: set[int] = set()
        ptrs = []
        membership = self.services.membership()
        while len(ptrs) < r:
            try:
                targets = membership.place_region(inode.inode_id, ri, r, exclude=failed)
            except SliceFSError:
                membership = self.services.refresh()
                try:
                    targets = membership.place_region(inode.inode_id, ri, r, exclude=failed)
                except SliceFSError as e:
                    raise ReplicaWriteFailed(f"only {len(ptrs)} of {r} replicas written: {e}") from e
            done = {p.server_id for p in ptrs}
            for sid in targets:
                if sid in done:
                    continue
                try:
                    ptrs.append(self._storage_call(sid, "create_slice", inode.inode_id, ri, data))
                    self.counters["bytes_sent"] += len(data)
                except IoFailure:
                    failed.add(sid)
                    break
                done.add(sid)
                if len(ptrs) == r:
                    break
        return tuple(ptrs)

    def _storage_call(self, sid: int, method: str, *args, attempts: int = 8):
        last = None
        for attempt in range(attempts):
            try:
                return getattr(self.services.storage(sid), method)(*args)
            except MessageDropped as e:
                last = e
        raise last

    def _read_replicas(self, replicas: Sequence) -> bytes:
        order = sorted(replicas, key=lambda p: (self._latency.get(p.server_id, 0.0), self._rng.random()))
        last: Optional[Exception] = None
        for p in order:
            t0 = time.perf_counter()
            try:
                data = self._storage_call(p.server_id, "read_slice", p)
            except (NotFound, IoFailure, SliceFSError) as e:
                last = e
                self._latency[p.server_id] = self._latency.get(p.server_id, 0.0) + 1.0
                continue
            dt = time.perf_counter() - t0
            self._latency[p.server_id] = 0.8 * self._latency.get(p.server_id, dt) + 0.2 * dt
            self.counters["bytes_received"] += len(data)
            return data
        raise IoFailure(f"all {len(replicas)} replicas failed: {last}")

    def fetch(self, entries: Sequence[SliceEntry]) -> bytes:
        """Materialize entries (contiguous from offset 0) into bytes."""
        parts = []
        pos = 0
        for e in entries:
            if e.offset > pos:
                parts.append(bytes(e.offset - pos))
            parts.append(bytes(e.length) if e.is_hole else self._read_replicas(e.replicas))
            pos = e.offset + e.length
        return b"".join(parts)

    # -- optimized append --------------------------------------------------------------------------------

    def _append_fast(self, inode_id: int, payload) -> tuple[int, int]:
        """Append without a transaction when the record fits the last region.

        A guarded list append of an end-relative entry lets concurrent
        appenders proceed in parallel; when the guard fails the record is
        written at the end of file inside a transaction instead.
        """
        inode = self._inode_direct(inode_id)
        entries = self._payload_entries(inode, payload)
        n = entries_span(entries)
        rs = inode.region_size
        single = len(entries) == 1 and not entries[0].is_hole and n <= rs
        for attempt in range(_APPEND_ATTEMPTS):
            if single:
                h = inode.highest_region
                res = self.meta.cond_list_append(REGIONS, region_key(inode_id, h),
                                                 encode_entry(entries[0].at(RELATIVE)), n, rs)
                if res.applied:
                    self.counters["append_fast"] += 1
                    return h * rs + res.prior_end, n
                fresh = self._inode_direct(inode_id)
                if fresh.highest_region != h:
                    inode = fresh
                    continue
            ctx = self.meta.begin()
            inode = self._inode(ctx, inode_id)
            eof = self._length(ctx, inode)
            self._place(ctx, inode, eof, entries)
            if ctx.commit():
                self.counters["append_slow"] += 1
                return eof, n
            self.counters["append_retry"] += 1
            _backoff(attempt, self._rng)
            inode = self._inode_direct(inode_id)
        raise RetryExhausted("append could not be placed")

    def _inode_direct(self, inode_id: int) -> Inode:
        vv = self.meta.read(INODES, inode_key(inode_id))
        if vv.value is None:
            raise NotFound(f"inode {inode_id}")
        return decode_inode(vv.value)

    # -- inspection ----------------------------------------------------------------------------------------

    def region_list(self, path: str, region_index: int) -> list[SliceEntry]:
        """Raw (uncompacted) entry list of one region, spilled prefix expanded."""
        ino = self._lookup_direct(normpath(path))
        vv = self.meta.read(REGIONS, region_key(ino, region_index))
        return self.region_entries(vv.items) if vv.value is not None else []

    def inode_of(self, path: str) -> int:
        return self._lookup_direct(normpath(path))

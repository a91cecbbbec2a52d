"""Transaction retry layer.

Every call made through a transaction is logged with its arguments and
outcome. When the metadata commit loses a race, the whole log is replayed
against fresh state: slices written the first time are pasted again rather
than rewritten, and the transaction only aborts to the application when a
replayed call produces an outcome the application already saw differently.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

from .encoding import encode_entry
from .errors import DivergenceAbort, RetryExhausted, SliceFSError, UseAfterClose

# calls whose return values are deterministic given the arguments, or carry nothing
_UNOBSERVED = {"seek", "write", "pwrite", "paste", "punch", "open", "create", "mkdir", "link",
               "unlink", "rmdir", "chmod", "concat", "write_file"}


@dataclass
class LogRecord:
    op: str
    handle: object
    args: tuple
    saved: object  # slice entries created on first execution, or None
    digest: object  # outcome digest: pointer sets for data, never data bytes
    observed: bool

    def encoded_size(self) -> int:
        n = len(self.op) + 16
        for a in self.args:
            if isinstance(a, (bytes, str)):
                n += len(a)
            elif isinstance(a, tuple):
                n += sum(len(encode_entry(e)) if hasattr(e, "replicas") else 8 for e in a)
            else:
                n += 8
        if self.saved:
            n += sum(len(encode_entry(e)) for e in self.saved)
        return n


class _Raised:
    __slots__ = ("exc",)

    def __init__(self, exc):
        self.exc = exc


def _error_digest(exc: BaseException):
    return ("error", type(exc).__name__)


class Transaction:
    """A retried, serializable unit of filesystem work.

    Use as a context manager or call ``commit`` explicitly. ``before_commit``
    is called with the attempt number just before each metadata commit; tests
    use it to interleave competing work deterministically.
    """

    def __init__(self, fs, implicit: bool = False, before_commit: Optional[Callable[[int], None]] = None,
                 retry_cap: Optional[int] = None):
        self.fs = fs
        self.implicit = implicit
        self.before_commit = before_commit
        self.retry_cap = fs.retry_cap if retry_cap is None else retry_cap
        self.log: list[LogRecord] = []
        self.results: list = []
        self.attempts = 0
        self.status = "open"
        self._ctx = fs.meta.begin()
        self._handles: dict[int, tuple] = {}

    # -- application surface -----------------------------------------------------------------

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.commit()
        else:
            self.abort()
        return False

    def open(self, path: str, mode: str = "r", create: bool = False):
        from .client import FileHandle, normpath

        h = FileHandle(self.fs, normpath(path), mode, txn=self)
        self.run("open", h, (h.path, mode, create))
        return h

    def _ns(self, op, *args):
        from .client import normpath

        args = tuple(normpath(a) if isinstance(a, str) and a.startswith("/") else a for a in args)
        return self.run(op, None, args)

    def create(self, path, mode=0o644, replication=None):
        return self._ns("create", path, mode, replication)

    def mkdir(self, path, mode=0o755):
        return self._ns("mkdir", path, mode)

    def link(self, src, dst):
        return self._ns("link", src, dst)

    def unlink(self, path):
        return self._ns("unlink", path)

    def rmdir(self, path):
        return self._ns("rmdir", path)

    def readdir(self, path):
        return self._ns("readdir", path)

    def stat(self, path):
        return self._ns("stat", path)

    def exists(self, path):
        return self._ns("exists", path)

    def chmod(self, path, mode):
        return self._ns("chmod", path, mode)

    def read_file(self, path):
        return self._ns("read_file", path)

    def write_file(self, path, data, replication=None):
        return self._ns("write_file", path, bytes(data), replication)

    def concat(self, sources, dest, overwrite=False):
        from .client import normpath

        return self.run("concat", None, (tuple(normpath(s) for s in sources), normpath(dest), overwrite))

    def copy(self, source, dest, overwrite=False):
        return self.concat([source], dest, overwrite)

    # -- logging and execution -------------------------------------------------------------------

    def _remember_handle(self, h):
        if h is not None and id(h) not in self._handles:
            self._handles[id(h)] = (h, h.offset, h.inode_id)

    def run(self, op: str, h, args: tuple):
        if self.status != "open":
            raise UseAfterClose(f"transaction is {self.status}")
        self._remember_handle(h)
        for attempt in range(self.retry_cap + 1):
            sp = self._ctx.savepoint()
            try:
                result, digest, saved = self.fs._exec(self._ctx, op, h, args, None)
                break
            except SliceFSError as e:
                self._ctx.rollback(sp)
                if attempt < self.retry_cap and self._stale():
                    # the failure may be an artifact of reading two different versions of
                    # the metadata: catch up on fresh state and try the call again
                    self._restart()
                    continue
                if self.implicit:
                    self.status = "failed"
                    raise
                self.log.append(LogRecord(op, h, self.fs._strip_args(op, args), None, _error_digest(e), True))
                self.results.append(_Raised(e))
                raise
        observed = not self.implicit and op not in _UNOBSERVED
        self.log.append(LogRecord(op, h, self.fs._strip_args(op, args), saved, digest, observed))
        self.results.append(result)
        return result

    def _stale(self) -> bool:
        meta = self.fs.meta
        return any(meta.read(space, key).version != v for (space, key), v in self._ctx.read_set.items())

    def _restart(self):
        self.fs.counters["txn_retries"] += 1
        try:
            self._replay()
        except SliceFSError:
            self.status = "aborted"
            self.fs.counters["txn_aborts"] += 1
            raise

    def _replay(self):
        for h, off, ino in self._handles.values():
            h.offset, h.inode_id = off, ino
        self._ctx = self.fs.meta.begin()
        for i, rec in enumerate(self.log):
            sp = self._ctx.savepoint()
            try:
                result, digest, _ = self.fs._exec(self._ctx, rec.op, rec.handle, rec.args, rec.saved)
            except SliceFSError as e:
                self._ctx.rollback(sp)
                if rec.digest == _error_digest(e):
                    continue
                if self.implicit:
                    self.status = "failed"
                    raise
                raise DivergenceAbort(f"replayed {rec.op} now fails with {type(e).__name__}") from e
            if isinstance(self.results[i], _Raised):
                raise DivergenceAbort(f"replayed {rec.op} succeeded where it originally failed")
            if rec.observed and digest != rec.digest:
                raise DivergenceAbort(f"replayed {rec.op} produced a different outcome")
            if self.implicit:
                self.results[i] = result

    def commit(self) -> None:
        """Commit, replaying as needed; raises DivergenceAbort or RetryExhausted."""
        if self.status == "committed":
            return
        if self.status != "open":
            raise UseAfterClose(f"transaction is {self.status}")
        from .client import _backoff

        try:
            for attempt in range(self.retry_cap + 1):
                self.attempts = attempt + 1
                if attempt:
                    self.fs.counters["txn_retries"] += 1
                    _backoff(attempt, self.fs._rng)
                    self._replay()
                if self.before_commit is not None:
                    self.before_commit(attempt)
                if self._ctx.commit():
                    self.status = "committed"
                    self.fs.counters["txn_commits"] += 1
                    return
            raise RetryExhausted(f"transaction conflicted {self.retry_cap + 1} times")
        except SliceFSError:
            self.status = "aborted"
            self.fs.counters["txn_aborts"] += 1
            raise

    def abort(self) -> None:
        if self.status == "open":
            self._ctx.abort()
            self.status = "aborted"

    def log_size(self) -> int:
        return sum(r.encoded_size() for r in self.log)

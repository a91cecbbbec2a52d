"""Operator command line: daemons, file and slice operations, GC, benchmark, counters.

Commands reach a cluster either over the network (``--coord host:port``, the
config file's ``coord`` key or ``WTF_COORD``) or, with ``--local DIR``,
through an in-process cluster persisted under DIR.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import threading
from contextlib import contextmanager
from typing import Optional

from . import gc
from .bench import bench_sort
from .client import SliceFS
from .cluster import LocalCluster
from .config import FsConfig, parse_size
from .encoding import decode_entry_list, encode_entry_list
from .errors import InvalidArgument, SliceFSError

log = logging.getLogger("slicefs")

DEFAULT_CONFIG = "slicefs.conf"


def _load_config(args) -> FsConfig:
    path = args.config or os.environ.get("WTF_CONFIG") or DEFAULT_CONFIG
    cfg = FsConfig.load(path) if os.path.exists(path) else FsConfig()
    if getattr(args, "coord", None):
        cfg.coord = args.coord
    elif not cfg.coord and os.environ.get("WTF_COORD"):
        cfg.coord = os.environ["WTF_COORD"]
    return cfg


@contextmanager
def connect(args):
    cfg = _load_config(args)
    if args.local:
        with LocalCluster(args.servers, data_dir=args.local, config=cfg) as cluster:
            yield cluster.client(), cluster
        return
    if not cfg.coord:
        raise InvalidArgument("no cluster given: use --coord, WTF_COORD, a config file or --local")
    from .wire import RemoteServices

    yield SliceFS(RemoteServices(cfg.coord), cfg), None


def _wait_forever(stop: Optional[threading.Event] = None):
    try:
        (stop or threading.Event()).wait()
    except KeyboardInterrupt:
        pass


def _listen(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


# -- daemons ------------------------------------------------------------------------------------

def cmd_init(args):
    cfg = FsConfig(region_size=parse_size(args.region_size), replication=args.replication,
                   backing_files=args.backing_files, coord=args.coord or "")
    out = args.config or DEFAULT_CONFIG
    cfg.save(out)
    print(f"wrote {out}")


def cmd_coord(args):
    from .placement import Coordinator
    from .wire import serve_coordinator

    host, port = _listen(args.listen)
    srv = serve_coordinator(Coordinator(heartbeat_interval=args.heartbeat), host, port)
    print(f"coordinator listening on {srv.address}", flush=True)
    _wait_forever()


def cmd_meta(args):
    from .metastore import MetaStore
    from .wire import serve_meta

    cfg = _load_config(args)
    host, port = _listen(args.listen)
    srv = serve_meta(MetaStore(wal_path=args.wal, fsync=args.fsync), cfg.coord, host, port)
    print(f"metadata service listening on {srv.address}", flush=True)
    _wait_forever()


def cmd_storage(args):
    from .storage import StorageServer
    from .wire import StorageDaemon

    cfg = _load_config(args)
    host, port = _listen(args.listen)
    server = StorageServer(data_dir=args.data_dir, backing_files=args.backing_files or cfg.backing_files,
                           fsync=args.fsync)
    d = StorageDaemon(server, cfg.coord, host, port, heartbeat_interval=args.heartbeat)
    print(f"storage server {server.server_id} listening on {d.address}", flush=True)
    _wait_forever()


# -- files ----------------------------------------------------------------------------------------

def cmd_fs(args):
    with connect(args) as (fs, _):
        op = args.fs_op
        if op == "put":
            with open(args.local_path, "rb") as f:
                fs.write_file(args.path, f.read())
        elif op == "get":
            data = fs.read_file(args.path)
            with open(args.local_path, "wb") as f:
                f.write(data)
        elif op == "cat":
            sys.stdout.buffer.write(fs.read_file(args.path))
            sys.stdout.flush()
        elif op == "ls":
            st = fs.stat(args.path)
            names = fs.readdir(args.path) if st.is_dir else [args.path]
            for n in names:
                print(n)
        elif op == "mkdir":
            fs.makedirs(args.path) if args.parents else fs.mkdir(args.path)
        elif op == "ln":
            fs.link(args.src, args.dst)
        elif op == "rm":
            st = fs.stat(args.path)
            fs.rmdir(args.path) if st.is_dir else fs.unlink(args.path)
        elif op == "stat":
            print(json.dumps(dataclasses.asdict(fs.stat(args.path)), indent=2))


def cmd_slice(args):
    with connect(args) as (fs, _):
        op = args.slice_op
        if op == "yank":
            h = fs.open(args.path)
            h.seek(args.offset)
            entries, _ = h.yank(args.length)
            raw = encode_entry_list(entries)
            if args.output:
                with open(args.output, "wb") as f:
                    f.write(raw)
            else:
                print(raw.hex())
        elif op == "paste":
            if args.entries == "-":
                raw = bytes.fromhex(sys.stdin.read().strip())
            else:
                with open(args.entries, "rb") as f:
                    raw = f.read()
            h = fs.open(args.path, "rw", create=True)
            h.seek(args.offset)
            print(h.paste(decode_entry_list(raw)))
        elif op == "concat":
            fs.concat(args.sources, args.dest, overwrite=args.force)
        elif op == "copy":
            fs.copy(args.src, args.dst, overwrite=args.force)
        elif op == "punch":
            h = fs.open(args.path, "rw")
            h.seek(args.offset)
            h.punch(args.length)


# -- gc, bench, counters --------------------------------------------------------------------------

def cmd_gc(args):
    with connect(args) as (fs, _):
        if args.gc_op == "scan":
            res = gc.global_scan(fs)
            print(json.dumps({"scan_id": res.scan_id, "servers": {
                str(sid): {"garbage_bytes": r.garbage_bytes, "total_bytes": r.total_bytes,
                           "garbage_fraction": round(r.garbage_fraction, 4)}
                for sid, r in res.reports.items()}}, indent=2))
        elif args.gc_op == "collect":
            if args.cycle:
                freed = gc.full_cycle(fs, force=args.force)
            else:
                reports = {}
                for sid in fs.services.membership().server_ids():
                    reports[sid] = fs.services.storage(sid).gc_report()
                freed = gc.collect(fs, reports, force=args.force)
            print(json.dumps({str(k): v for k, v in freed.items()}, indent=2))
        elif args.gc_op == "compact":
            if args.path:
                st = fs.stat(args.path)
                stats = [gc.compact_region(fs, st.inode_id, ri) for ri in range(st.highest_region + 1)]
            else:
                stats = gc.sweep(fs)
            print(json.dumps([dataclasses.asdict(s) for s in stats], indent=2))


def cmd_bench(args):
    rep = bench_sort(size=parse_size(args.size), record=parse_size(args.record), keylen=args.keylen,
                     mode=args.mode, workers=args.workers, seed=args.seed,
                     region_size=parse_size(args.region_size), data_dir=args.data_dir)
    if args.json:
        out = dataclasses.asdict(rep)
        out.update(seconds=rep.seconds, read_factor=rep.read_factor, write_factor=rep.write_factor)
        print(json.dumps(out, indent=2))
    else:
        print(rep.summary())
        for stage in rep.stage_seconds:
            print(f"  {stage:7s} read {rep.stage_read[stage]:>12d}  write {rep.stage_write[stage]:>12d}")


def cmd_counters(args):
    with connect(args) as (fs, cluster):
        if cluster is not None:
            out = cluster.counters()
        else:
            svc = fs.services
            out = {"coord": svc.coord.counter_snapshot(), "meta": svc.meta.counter_snapshot(),
                   "storage": {str(sid): svc.storage(sid).counter_snapshot()
                               for sid in svc.membership().server_ids()}}
        print(json.dumps(out, indent=2, sort_keys=True))


# -- parser ----------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slicefs", description="Transactional file-slicing filesystem")
    p.add_argument("--config", help=f"config file (default $WTF_CONFIG or ./{DEFAULT_CONFIG})")
    p.add_argument("--coord", help="coordinator host:port (default: config or $WTF_COORD)")
    p.add_argument("--local", metavar="DIR", help="use an in-process cluster persisted under DIR")
    p.add_argument("--servers", type=int, default=4, help="storage servers for --local (default 4)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("init", help="write a filesystem config file")
    s.add_argument("--region-size", default="64MiB")
    s.add_argument("--replication", "-r", type=int, default=2)
    s.add_argument("--backing-files", type=int, default=8)
    s.set_defaults(fn=cmd_init)

    s = sub.add_parser("coord", help="run the coordinator")
    s.add_argument("--listen", default="127.0.0.1:7000")
    s.add_argument("--heartbeat", type=float, default=1.0)
    s.set_defaults(fn=cmd_coord)

    s = sub.add_parser("meta", help="run the metadata service")
    s.add_argument("--listen", default="127.0.0.1:7001")
    s.add_argument("--wal", help="write-ahead log path")
    s.add_argument("--fsync", action="store_true")
    s.set_defaults(fn=cmd_meta)

    s = sub.add_parser("storage", help="run a storage server")
    s.add_argument("--listen", default="127.0.0.1:0")
    s.add_argument("--data-dir", required=True)
    s.add_argument("--backing-files", type=int)
    s.add_argument("--heartbeat", type=float, default=1.0)
    s.add_argument("--fsync", action="store_true")
    s.set_defaults(fn=cmd_storage)

    s = sub.add_parser("fs", help="file operations")
    fsub = s.add_subparsers(dest="fs_op", required=True)
    x = fsub.add_parser("put")
    x.add_argument("local_path")
    x.add_argument("path")
    x = fsub.add_parser("get")
    x.add_argument("path")
    x.add_argument("local_path")
    for name in ("cat", "ls", "rm", "stat"):
        fsub.add_parser(name).add_argument("path")
    x = fsub.add_parser("mkdir")
    x.add_argument("path")
    x.add_argument("-p", "--parents", action="store_true")
    x = fsub.add_parser("ln")
    x.add_argument("src")
    x.add_argument("dst")
    s.set_defaults(fn=cmd_fs)

    s = sub.add_parser("slice", help="slice operations")
    ssub = s.add_subparsers(dest="slice_op", required=True)
    x = ssub.add_parser("yank", help="print the entries for a byte range (hex, or -o FILE)")
    x.add_argument("path")
    x.add_argument("offset", type=parse_size)
    x.add_argument("length", type=parse_size)
    x.add_argument("-o", "--output")
    x = ssub.add_parser("paste", help="paste yanked entries (file, or - for hex on stdin)")
    x.add_argument("path")
    x.add_argument("offset", type=parse_size)
    x.add_argument("entries")
    x = ssub.add_parser("concat")
    x.add_argument("sources", nargs="*")
    x.add_argument("dest")
    x.add_argument("-f", "--force", action="store_true", help="replace an existing destination")
    x = ssub.add_parser("copy")
    x.add_argument("src")
    x.add_argument("dst")
    x.add_argument("-f", "--force", action="store_true")
    x = ssub.add_parser("punch")
    x.add_argument("path")
    x.add_argument("offset", type=parse_size)
    x.add_argument("length", type=parse_size)
    s.set_defaults(fn=cmd_slice)

    s = sub.add_parser("gc", help="garbage collection")
    gsub = s.add_subparsers(dest="gc_op", required=True)
    gsub.add_parser("scan")
    x = gsub.add_parser("collect")
    x.add_argument("--force", action="store_true", help="ignore the gc_high/gc_low thresholds")
    x.add_argument("--cycle", action="store_true", help="run two scans first")
    x = gsub.add_parser("compact")
    x.add_argument("path", nargs="?")
    s.set_defaults(fn=cmd_gc)

    s = sub.add_parser("bench", help="benchmarks")
    bsub = s.add_subparsers(dest="bench_op", required=True)
    x = bsub.add_parser("sort")
    x.add_argument("--size", default="64MiB")
    x.add_argument("--record", default="64KiB")
    x.add_argument("--keylen", type=int, default=10)
    x.add_argument("--mode", choices=["conventional", "slicing"], default="slicing")
    x.add_argument("--workers", type=int, default=4)
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--region-size", default="64MiB")
    x.add_argument("--data-dir", help="keep storage on disk under this directory")
    x.add_argument("--json", action="store_true")
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("counters", help="dump per-server byte and operation counters")
    s.set_defaults(fn=cmd_counters)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        args.fn(args)
    except SliceFSError as e:
        print(f"slicefs: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except (ValueError, OSError) as e:
        print(f"slicefs: {e}", file=sys.stderr)
        return InvalidArgument.exit_code if isinstance(e, ValueError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

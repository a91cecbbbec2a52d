#!/usr/bin/env python3
"""Write a dataset, delete most of it, and watch two scans plus collection reclaim the space."""

import argparse
import random
import tempfile

from slicefs import gc
from slicefs.cluster import LocalCluster
from slicefs.config import FsConfig, parse_size

MiB = 1 << 20


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--size", default="256MiB")
    p.add_argument("--file-size", default="1MiB")
    p.add_argument("--delete", type=float, default=0.9, help="fraction of files to delete")
    p.add_argument("--servers", type=int, default=4)
    args = p.parse_args()
    size, fsize = parse_size(args.size), parse_size(args.file_size)
    with tempfile.TemporaryDirectory() as d, \
            LocalCluster(args.servers, data_dir=d, config=FsConfig(region_size=4 * MiB, replication=1)) as c:
        fs = c.client(seed=1)
        rng = random.Random(1)
        fs.mkdir("/data")
        n = size // fsize
        for i in range(n):
            fs.write_file(f"/data/{i}", rng.randbytes(fsize))
        doomed = rng.sample(range(n), int(n * args.delete))
        for i in doomed:
            fs.unlink(f"/data/{i}")
        live = (n - len(doomed)) * fsize
        before = c.physical_bytes()
        print(f"physical after delete: {before / MiB:.1f} MiB (live {live / MiB:.1f} MiB)")
        r1 = gc.global_scan(fs)
        print(f"scan {r1.scan_id}: collectible {sum(r.garbage_bytes for r in r1.reports.values()) / MiB:.1f} MiB")
        r2 = gc.global_scan(fs)
        print(f"scan {r2.scan_id}: collectible {sum(r.garbage_bytes for r in r2.reports.values()) / MiB:.1f} MiB")
        for sid, rep in r2.reports.items():
            top = ", ".join(f"{name}:{b / MiB:.1f}" for name, b in rep.candidates[:3])
            print(f"  server {sid}: {rep.garbage_fraction:.0%} garbage, most first: {top}")
        gc.collect(fs, r2.reports, gc_low=0.0)
        after = c.physical_bytes()
        written = c.storage_total("gc_bytes_written")
        print(f"physical after collect: {after / MiB:.1f} MiB, reclaimed {(before - after) / before:.1%}, "
              f"collection wrote {written / MiB:.1f} MiB")


if __name__ == "__main__":
    main()

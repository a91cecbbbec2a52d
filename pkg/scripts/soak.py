#!/usr/bin/env python3
"""Random slicing-operation sequences checked against the byte-array model."""

import argparse
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "tests"))

from slicefs.cluster import LocalCluster  # noqa: E402
from slicefs.config import FsConfig  # noqa: E402
from soak import run_sequence  # noqa: E402


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--sequences", type=int, default=100)
    p.add_argument("--ops", type=int, default=1000)
    p.add_argument("--first-seed", type=int, default=0)
    p.add_argument("--check-every", type=int, default=100)
    args = p.parse_args()
    t0 = time.perf_counter()
    for seed in range(args.first_seed, args.first_seed + args.sequences):
        rs = 4096 << (seed % 5)
        c = LocalCluster(2, config=FsConfig(region_size=rs, replication=1), seed=seed)
        run_sequence(c.client(seed=seed), seed, n_ops=args.ops, check_every=args.check_every)
        if (seed - args.first_seed + 1) % 50 == 0:
            print(f"{seed - args.first_seed + 1} sequences ok, {time.perf_counter() - t0:.1f}s", flush=True)
    print(f"all {args.sequences} sequences of {args.ops} ops matched the model "
          f"in {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()

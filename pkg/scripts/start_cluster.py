#!/usr/bin/env python3
"""Start a coordinator, a metadata service and N storage daemons as child processes."""

import argparse
import os
import signal
import subprocess
import sys
import time


def spawn(*args):
    return subprocess.Popen([sys.executable, "-m", "slicefs.cli", *args])


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--dir", default="./cluster")
    p.add_argument("--servers", type=int, default=4)
    p.add_argument("--port", type=int, default=7000, help="coordinator port; meta uses port+1")
    args = p.parse_args()
    coord = f"127.0.0.1:{args.port}"
    os.makedirs(args.dir, exist_ok=True)
    procs = [spawn("coord", "--listen", coord)]
    time.sleep(0.5)
    procs.append(spawn("--coord", coord, "meta", "--listen", f"127.0.0.1:{args.port + 1}",
                       "--wal", os.path.join(args.dir, "meta.wal")))
    for i in range(args.servers):
        procs.append(spawn("--coord", coord, "storage", "--data-dir", os.path.join(args.dir, f"storage{i}")))
    print(f"cluster up; export WTF_COORD={coord}  (Ctrl-C to stop)", flush=True)
    try:
        signal.pause()
    except KeyboardInterrupt:
        pass
    finally:
        for pr in procs:
            pr.terminate()
        for pr in procs:
            pr.wait()


if __name__ == "__main__":
    main()

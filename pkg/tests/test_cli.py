import json
import os

import pytest

from slicefs.cli import main
from slicefs.errors import NotFound
from slicefs.metastore import MetaStore
from slicefs.placement import Coordinator
from slicefs.storage import StorageServer
from slicefs.wire import StorageDaemon, serve_coordinator, serve_meta


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def local(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("WTF_COORD", raising=False)
    monkeypatch.delenv("WTF_CONFIG", raising=False)
    return ["--local", str(tmp_path / "cluster")]


def test_init_writes_config(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run(capsys, "init", "--region-size", "1MiB", "-r", "3")[0] == 0
    text = (tmp_path / "slicefs.conf").read_text()
    assert "region_size=1048576" in text and "replication=3" in text


def test_put_get_roundtrip(local, tmp_path, capsys):
    src = tmp_path / "f.bin"
    src.write_bytes(os.urandom(200_000))
    assert run(capsys, *local, "fs", "put", str(src), "/f")[0] == 0
    # a second process-equivalent invocation reopens the persisted cluster
    assert run(capsys, *local, "fs", "get", "/f", str(tmp_path / "out.bin"))[0] == 0
    assert (tmp_path / "out.bin").read_bytes() == src.read_bytes()
    code, out, _ = run(capsys, *local, "fs", "stat", "/f")
    assert json.loads(out)["length"] == 200_000


def test_error_exit_codes(local, capsys):
    code, _, err = run(capsys, *local, "fs", "cat", "/missing")
    assert code == NotFound.exit_code and "NotFound" in err
    assert run(capsys, *local, "slice", "punch", "/missing", "0", "5")[0] == NotFound.exit_code


def test_slice_commands(local, tmp_path, capsys):
    src = tmp_path / "s.bin"
    data = os.urandom(50_000)
    src.write_bytes(data)
    run(capsys, *local, "fs", "put", str(src), "/s")
    ent = tmp_path / "e.bin"
    assert run(capsys, *local, "slice", "yank", "/s", "1000", "5000", "-o", str(ent))[0] == 0
    code, out, _ = run(capsys, *local, "slice", "paste", "/p", "0", str(ent))
    assert code == 0 and out.strip() == "5000"
    run(capsys, *local, "slice", "concat", "/s", "/p", "/joined")
    run(capsys, *local, "slice", "copy", "/joined", "/copy")
    run(capsys, *local, "slice", "punch", "/copy", "0", "10")
    run(capsys, *local, "fs", "get", "/copy", str(tmp_path / "c.bin"))
    assert (tmp_path / "c.bin").read_bytes() == bytes(10) + data[10:] + data[1000:6000]
    code, out, _ = run(capsys, *local, "fs", "ls", "/")
    assert set(out.split()) == {"s", "p", "joined", "copy"}


def test_bench_cli(capsys):
    code, out, _ = run(capsys, "bench", "sort", "--size", "512KiB", "--record", "16KiB",
                       "--region-size", "128KiB", "--json")
    rep = json.loads(out)
    assert code == 0 and rep["bytes_written"] == 0 and rep["verified"]


@pytest.fixture
def network(tmp_path):
    coord = serve_coordinator(Coordinator(heartbeat_interval=5))
    meta = serve_meta(MetaStore(), coord.address)
    daemons = [StorageDaemon(StorageServer(data_dir=str(tmp_path / f"s{i}")), coord.address) for i in range(2)]
    yield coord.address
    for d in daemons:
        d.stop()
    meta.stop()
    coord.stop()


def test_networked_commands_and_counters(network, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("WTF_COORD", network)
    monkeypatch.chdir(tmp_path)
    src = tmp_path / "n.bin"
    src.write_bytes(os.urandom(30_000))
    assert run(capsys, "fs", "put", str(src), "/n")[0] == 0
    code, out, _ = run(capsys, "counters")
    before = json.loads(out)
    written = sum(s["bytes_written"] for s in before["storage"].values())
    assert written >= 30_000
    assert run(capsys, "slice", "concat", "/n", "/n", "/nn")[0] == 0
    after = json.loads(run(capsys, "counters")[1])
    # metadata-only except for the new name's directory record
    assert sum(s["bytes_written"] for s in after["storage"].values()) - written < 100
    assert run(capsys, "slice", "concat", "-f", "/n", "/nn")[0] == 0
    again = json.loads(run(capsys, "counters")[1])
    assert sum(s["bytes_written"] for s in again["storage"].values()) == \
        sum(s["bytes_written"] for s in after["storage"].values())
    assert after["meta"]["commit"] > before["meta"]["commit"]
    run(capsys, "fs", "get", "/nn", str(tmp_path / "nn.bin"))
    assert (tmp_path / "nn.bin").read_bytes() == src.read_bytes()

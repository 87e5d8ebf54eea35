import json
import os
import signal
import socket
import subprocess
import sys
import time

import pytest

from visric import __version__
from visric.cli import EXIT_BIND, EXIT_CONNECT, EXIT_OK, EXIT_USAGE, main


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def visric(*args, **kw):
    return subprocess.Popen([sys.executable, "-m", "visric.cli", *args], stdout=subprocess.PIPE,
                            stderr=subprocess.PIPE, text=True, **kw)


def wait_port(port, timeout=10.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        try:
            socket.create_connection(("127.0.0.1", port), timeout=0.2).close()
            return
        except OSError:
            time.sleep(0.05)
    raise TimeoutError(port)


@pytest.fixture
def broker_proc(tmp_path):
    ap, xp = free_port(), free_port()
    stats = tmp_path / "stats.jsonl"
    p = visric("broker", "--agents-port", str(ap), "--xapps-port", str(xp), "--stats-interval", "0.2",
               "--stats-file", str(stats))
    wait_port(ap)
    wait_port(xp)
    yield ap, xp, stats, p
    if p.poll() is None:
        p.kill()
        p.wait()


def test_version(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--version"])
    assert e.value.code == 0 and __version__ in capsys.readouterr().out


def test_unknown_command_is_usage_error():
    with pytest.raises(SystemExit) as e:
        main(["launch"])
    assert e.value.code == EXIT_USAGE


def test_rate_zero_is_usage_error():
    assert main(["agent", "load", "--rate", "0", "--broker", "127.0.0.1:1"]) == EXIT_USAGE


def test_connect_refused():
    assert main(["agent", "load", "--broker", f"127.0.0.1:{free_port()}", "--duration", "0.1"]) == EXIT_CONNECT


def test_bad_bench_config_is_usage_error(tmp_path):
    assert main(["bench", "--agents", "1", "--size", "16", "--rate", "0", "--out", str(tmp_path)]) == EXIT_USAGE


def test_scene_export(tmp_path):
    out = tmp_path / "frames.csv"
    assert main(["scene", "--frames", "3", "--out", str(out)]) == EXIT_OK
    lines = out.read_text().splitlines()
    assert lines[0].startswith("frame_index,time_s,object")
    assert {ln.split(",")[0] for ln in lines[1:]} == {"0", "1", "2"}


def test_usecase_command(tmp_path, capsys):
    rc = main(["usecase", "--out", str(tmp_path), "--time-scale", "0.1", "--normalize-timestamps"])
    assert rc == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc["anticipation_scene_ms"] == 600.0
    assert doc["transitions"]["los_lost_interval"] == 16
    assert (tmp_path / "fused_timeline.csv").exists()


def test_usecase_seed_changes_snr_only(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["usecase", "--out", str(a), "--time-scale", "0.1", "--normalize-timestamps"]) == EXIT_OK
    assert main(["usecase", "--out", str(b), "--time-scale", "0.1", "--normalize-timestamps",
                 "--seed", "99"]) == EXIT_OK
    assert (a / "cvf_events.csv").read_text() == (b / "cvf_events.csv").read_text()
    assert (a / "fused_timeline.csv").read_text() != (b / "fused_timeline.csv").read_text()


def test_broker_agent_xapp_processes(broker_proc, tmp_path):
    ap, xp, stats, bp = broker_proc
    out = tmp_path / "xapp"
    x = visric("xapp", "fuse", "--broker", f"127.0.0.1:{xp}", "--subscribe", "all", "--duration", "4",
               "--out", str(out))
    time.sleep(1.0)
    env = dict(os.environ, VISRIC_AGENT_ENDPOINT=f"127.0.0.1:{ap}")
    a = visric("agent", "radio", "--duration", "1", "--time-scale", "1", env=env)
    aout, aerr = a.communicate(timeout=30)
    assert a.returncode == EXIT_OK, aerr
    assert json.loads(aout)["emitted"] == 100
    xout, xerr = x.communicate(timeout=30)
    assert x.returncode == EXIT_OK, xerr
    assert json.loads(xout)["received"] == 100
    assert sum(int(r.split(",")[3]) for r in (out / "fused_timeline.csv").read_text().splitlines()[1:]) == 100
    bp.send_signal(signal.SIGINT)
    bp.wait(timeout=10)
    assert bp.returncode == EXIT_OK
    lines = [json.loads(ln) for ln in stats.read_text().splitlines()]
    assert lines and lines[-1]["routed"] == 100


def test_bind_conflict(broker_proc):
    ap, xp, _, _ = broker_proc
    p = visric("broker", "--agents-port", str(ap), "--xapps-port", str(free_port()))
    p.communicate(timeout=10)
    assert p.returncode == EXIT_BIND


def test_duplicate_agent_id_exits_nonzero(broker_proc):
    ap, *_ = broker_proc
    first = visric("agent", "load", "--broker", f"127.0.0.1:{ap}", "--agent-id", "5", "--rate", "100",
                   "--duration", "2")
    time.sleep(0.7)
    second = visric("agent", "load", "--broker", f"127.0.0.1:{ap}", "--agent-id", "5", "--duration", "0.1")
    second.communicate(timeout=10)
    first.communicate(timeout=10)
    assert first.returncode == EXIT_OK
    assert second.returncode == EXIT_CONNECT

import json
import socket
import subprocess
import sys
import time
from pathlib import Path

import pytest

from tcpspeed.cli import EXIT_ABORTED, build_parser, main

FIXTURE = Path(__file__).parent / "fixtures" / "campaign.yaml"


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture(scope="module")
def server():
    port = free_port()
    proc = subprocess.Popen([sys.executable, "-m", "tcpspeed", "serve", "--listen", f"127.0.0.1:{port}"],
                            stdout=subprocess.PIPE, stderr=subprocess.STDOUT)
    deadline = time.monotonic() + 10
    while time.monotonic() < deadline:
        try:
            socket.create_connection(("127.0.0.1", port), timeout=0.2).close()
            break
        except OSError:
            time.sleep(0.05)
    yield f"127.0.0.1:{port}"
    proc.terminate()
    proc.wait(5)


def test_measure_writes_four_files(server, tmp_path, capsys):
    db = tmp_path / "asn.txt"
    db.write_text("127.0.0.0/8 64500\n")
    out = tmp_path / "run"
    code = main(["measure", "--server", server, "--flows", "2", "--duration", "1", "--pretest", "0.2",
                 "--pings", "3", "--stats-interval", "50", "--run-id", "cli-1", "--tag", "site=lab",
                 "--asn-db", str(db), "--max-ttl", "3", "--out", str(out)])
    report = json.loads(capsys.readouterr().out)
    assert code == 0 and report["status"] == "complete"
    assert report["dl_rate_bps"] > 0
    for name in ("summary.json", "flows.json", "stats.json", "traceroute.json"):
        assert (out / name).exists()
    stats = json.loads((out / "stats.json").read_text())
    assert stats["interval_ms"] == 50 and stats["capability"] == "tcp_info"
    summary = json.loads((out / "summary.json").read_text())
    assert summary["test_id"] == "cli-1" and summary["config"]["tags"] == {"site": "lab"}
    trace = json.loads((out / "traceroute.json").read_text())
    assert trace["hops"][0]["address"] == "127.0.0.1"
    assert trace["hops"][0]["asn"] is None  # loopback is not a public address


def test_measure_refused_exit_code(tmp_path, capsys):
    code = main(["measure", "--server", f"127.0.0.1:{free_port()}", "--no-traceroute", "--out", str(tmp_path)])
    assert code == EXIT_ABORTED
    assert json.loads(capsys.readouterr().out)["status"] == "aborted"
    assert json.loads((tmp_path / "traceroute.json").read_text())["status"] == "skipped"


def test_measure_rejects_bad_config(tmp_path, capsys):
    assert main(["measure", "--flows", "0", "--out", str(tmp_path)]) == 2
    assert "flows" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        build_parser().parse_args(["measure", "--chunk", "big"])


def test_batch_dry_run_and_analyze(tmp_path, capsys):
    assert main(["batch", "--spec", str(FIXTURE), "--out", str(tmp_path), "--dry-run"]) == 0
    ids = capsys.readouterr().out.split()
    assert len(ids) == 8 and ids[0].startswith("campaign1-00000-flows=1-server=10.0.0.1_5201")
    assert main(["batch", "--spec", str(FIXTURE), "--out", str(tmp_path / "runs")]) == 0
    assert json.loads(capsys.readouterr().out)["statuses"] == {"complete": 8}
    code = main(["analyze", "--in", str(tmp_path / "runs"), "--group-by", "server,flows", "--saturation-s", "2",
                 "--checkpoints", "0.5,1", "--compare", "server=10.0.0.1:5201", "--out", str(tmp_path / "an")])
    assert code == 0
    table = (tmp_path / "an" / "distance.csv").read_text().splitlines()
    assert len(table) == 5
    assert main(["analyze", "--in", str(tmp_path / "runs"), "--compare", "server=x", "--out",
                 str(tmp_path / "an2")]) == 2


def test_batch_bad_spec(tmp_path, capsys):
    bad = tmp_path / "spec.yaml"
    bad.write_text("axes: {speed: [1]}\n")
    assert main(["batch", "--spec", str(bad), "--out", str(tmp_path)]) == 2
    assert "unknown axis" in capsys.readouterr().err


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "tcpspeed", "--help"], capture_output=True, text=True, check=True)
    for cmd in ("serve", "measure", "batch", "analyze"):
        assert cmd in out.stdout

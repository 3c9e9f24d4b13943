"""Command-line interface: subcommands, exit codes, server subprocess."""

from __future__ import annotations

import json
import socket
import subprocess
import sys
import time

import pytest

from iotsync.cli import EXIT_DENIED, EXIT_OK, EXIT_TRANSPORT, main

TOKENS = {
    "dev-tok": {"principal": "esp32-1", "role": "device"},
    "user-tok": {"principal": "alice", "role": "user"},
}


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture(scope="module")
def served(tmp_path_factory):
    """A server subprocess started through the real CLI entry point."""
    root = tmp_path_factory.mktemp("cli-server")
    port = free_port()
    config = {
        "host": "127.0.0.1",
        "port": port,
        "ws_port": None,
        "data_dir": str(root / "data"),
        "tokens": TOKENS,
    }
    cfg_path = root / "server.json"
    cfg_path.write_text(json.dumps(config))
    proc = subprocess.Popen(
        [sys.executable, "-m", "iotsync.cli", "serve", "--config", str(cfg_path)],
        stdout=subprocess.DEVNULL,
        stderr=subprocess.DEVNULL,
    )
    deadline = time.time() + 10
    while time.time() < deadline:
        try:
            with socket.create_connection(("127.0.0.1", port), timeout=0.2):
                break
        except OSError:
            time.sleep(0.05)
    else:
        proc.kill()
        raise TimeoutError("server never came up")
    yield {"server": f"127.0.0.1:{port}", "data_dir": str(root / "data")}
    proc.terminate()
    proc.wait(timeout=5)


def test_put_then_get(served, capsys):
    assert main(["put", "--server", served["server"], "--token", "user-tok", "/leds/led1", "true"]) == EXIT_OK
    assert "revision" in capsys.readouterr().out
    assert main(["get", "--server", served["server"], "--token", "user-tok", "/leds/led1"]) == EXIT_OK
    assert capsys.readouterr().out.strip() == "true"


def test_get_absent_path(served, capsys):
    assert main(["get", "--server", served["server"], "--token", "user-tok", "/leds/nothing"]) == EXIT_OK
    assert capsys.readouterr().out.strip() == "(absent)"


def test_toggle_flips_led(served, capsys):
    assert main(["toggle", "--server", served["server"], "--token", "user-tok", "led2"]) == EXIT_OK
    assert "-> true" in capsys.readouterr().out
    assert main(["toggle", "--server", served["server"], "--token", "user-tok", "led2"]) == EXIT_OK
    assert "-> false" in capsys.readouterr().out


def test_denied_write_exits_2(served, capsys):
    code = main(["put", "--server", served["server"], "--token", "user-tok", "/sensors/temperature", "25"])
    assert code == EXIT_DENIED
    assert "DENIED" in capsys.readouterr().err


def test_bad_token_exits_2(served, capsys):
    code = main(["get", "--server", served["server"], "--token", "nope", "/"])
    assert code == EXIT_DENIED


def test_unreachable_server_exits_3(capsys):
    code = main(["get", "--server", f"127.0.0.1:{free_port()}", "--token", "user-tok", "/"])
    assert code == EXIT_TRANSPORT


def test_dumplog_prints_commits(served, capsys):
    main(["put", "--server", served["server"], "--token", "user-tok", "/leds/led1", "false"])
    capsys.readouterr()
    assert main(["dumplog", served["data_dir"]]) == EXIT_OK
    lines = [json.loads(l) for l in capsys.readouterr().out.strip().split("\n")]
    assert lines[0]["revision"] == 1
    assert [r["revision"] for r in lines] == list(range(1, len(lines) + 1))


def test_sim_subcommand_json_report(capsys):
    assert main(["sim", "--duration", "5000", "--seed", "3", "--json"]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["frames_produced"] == 6
    assert report["first_pass_success_rate"] == 1.0


def test_sim_subcommand_table_and_determinism(capsys):
    assert main(["sim", "--duration", "5000", "--seed", "3"]) == EXIT_OK
    first = capsys.readouterr().out
    assert "Data Transmission Success" in first
    main(["sim", "--duration", "5000", "--seed", "3"])
    assert capsys.readouterr().out == first


def test_sim_config_file(tmp_path, capsys):
    cfg = {"duration_ms": 3000, "seed": 9, "device_link": {"delay_ms": 10, "drop_prob": 0.1}}
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(cfg))
    assert main(["sim", "--config", str(path), "--json"]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["seed"] == 9 and report["duration_ms"] == 3000

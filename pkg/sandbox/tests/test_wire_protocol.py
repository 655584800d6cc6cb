"""End-to-end tests against the live worker process over its stdio protocol."""

from __future__ import annotations

import json
import os
import select
import subprocess
import sys
import time
from pathlib import Path

import pytest

SRC = Path(__file__).resolve().parents[1] / "src"


class WireClient:
    """Minimal host-side counterpart used only by these tests."""

    def __init__(self, whitelist: str = "math", handshake_timeout_ms: int | None = None):
        cmd = [sys.executable, "-m", "sandbox_runtime", "--whitelist", whitelist]
        if handshake_timeout_ms is not None:
            cmd += ["--handshake-timeout-ms", str(handshake_timeout_ms)]
        env = dict(os.environ)
        env["PYTHONPATH"] = str(SRC) + os.pathsep + env.get("PYTHONPATH", "")
        self.proc = subprocess.Popen(
            cmd,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            text=True,
            bufsize=1,
            env=env,
        )

    def send(self, frame: dict) -> None:
        assert self.proc.stdin is not None
        self.proc.stdin.write(json.dumps(frame) + "\n")
        self.proc.stdin.flush()

    def recv(self, timeout: float = 5.0) -> dict:
        assert self.proc.stdout is not None
        deadline = time.monotonic() + timeout
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TimeoutError("no frame from worker")
            ready, _, _ = select.select([self.proc.stdout], [], [], remaining)
            if ready:
                line = self.proc.stdout.readline()
                if not line:
                    raise EOFError("worker exited")
                return json.loads(line)

    def handshake(self, tools: tuple[str, ...] = ()) -> dict:
        self.send({"type": "handshake", "session_id": "test", "tools": list(tools)})
        return self.recv()

    def run(self, code: str, step: int = 1, handlers: dict | None = None) -> dict:
        """Send an exec frame; answer tool_call frames from `handlers` until
        the exec_result arrives."""
        self.send({"type": "exec", "code": code, "step": step, "timeout_ms": 5000})
        while True:
            frame = self.recv()
            if frame["type"] == "exec_result":
                return frame
            assert frame["type"] == "tool_call", frame
            reply = {"type": "tool_result", "call_id": frame["call_id"]}
            handler = (handlers or {}).get(frame["tool"])
            if handler is None:
                reply["error"] = f"unknown tool '{frame['tool']}'"
            else:
                try:
                    reply["result"] = handler(*frame["args"], **frame["kwargs"])
                except Exception as exc:
                    reply["error"] = str(exc)
            self.send(reply)

    def checkpoint(self, step: int) -> dict:
        self.send({"type": "checkpoint", "step": step})
        return self.recv()

    def restore(self, step: int, snapshot: str | None = None) -> dict:
        frame: dict = {"type": "restore", "step": step}
        if snapshot is not None:
            frame["snapshot"] = snapshot
        self.send(frame)
        return self.recv()

    def close(self) -> None:
        if self.proc.poll() is None:
            self.proc.kill()
        self.proc.wait()


@pytest.fixture
def client():
    c = WireClient()
    reply = c.handshake(("echo_tool", "adder"))
    assert reply["ok"] is True
    yield c
    c.close()


def test_handshake_echoes_tool_names():
    c = WireClient()
    try:
        reply = c.handshake(("a", "b", "c", "d", "e"))
        assert reply["type"] == "handshake"
        assert reply["tools"] == ["a", "b", "c", "d", "e"]
    finally:
        c.close()


def test_print_output_captured_in_order(client):
    result = client.run("y = [i*i for i in range(3)]\nprint(y)\nprint('twice')")
    assert result["stdout"] == "[0, 1, 4]\ntwice\n"
    assert "error" not in result


def test_variables_persist_across_exec_frames(client):
    assert "error" not in client.run("x = 5", step=1)
    assert client.run("print(x)", step=2)["stdout"] == "5\n"


def test_import_whitelist_blocks_os(client):
    result = client.run("import os")
    assert result["error"]["error_class"] == "import-violation"
    # Whitelisted math still works, including attribute access.
    ok = client.run("import math\nprint(math.floor(math.pi))")
    assert ok["stdout"] == "3\n"


def test_final_answer_short_circuits(client):
    result = client.run("final_answer('done')\nprint('after')")
    assert result["final_answer"] == "done"
    assert "after" not in result["stdout"]


def test_final_answer_unswallowable(client):
    code = "try:\n    final_answer(41 + 1)\nexcept Exception:\n    print('nope')"
    result = client.run(code)
    assert result["final_answer"] == "42"


def test_proxy_transparency_matches_direct_handler(client):
    handler = lambda value: {"wrapped": value}  # noqa: E731
    result = client.run(
        "out = echo_tool('payload-123')\nprint(out)", handlers={"echo_tool": handler}
    )
    assert result["stdout"].strip() == str(handler("payload-123"))


def test_nested_proxy_call_inside_function(client):
    code = (
        "def wrap(v):\n"
        "    return adder(v, 10)\n"
        "print(wrap(5))"
    )
    result = client.run(code, handlers={"adder": lambda a, b: a + b})
    assert result["stdout"] == "15\n"


def test_host_error_raises_catchable_tool_failure(client):
    code = (
        "try:\n"
        "    echo_tool('x')\n"
        "except Exception as e:\n"
        "    print('caught:', e)"
    )
    result = client.run(code, handlers={})
    assert result["stdout"].startswith("caught:")
    assert "unknown tool" in result["stdout"]


def test_uncaught_tool_failure_reported_with_host_message(client):
    def failing(*a, **k):
        raise RuntimeError("records unavailable")

    result = client.run("echo_tool('x')", handlers={"echo_tool": failing})
    assert result["error"]["error_class"] == "tool-failure"
    assert "records unavailable" in result["error"]["message"]


def test_shadowing_proxy_names_rejected(client):
    result = client.run("echo_tool = 3")
    assert result["error"]["error_class"] == "shadowing"
    result = client.run("def final_answer():\n    pass")
    assert result["error"]["error_class"] == "shadowing"


def test_snapshot_mutate_restore_round_trip(client):
    client.run("counter = 1", step=1)
    client.checkpoint(2)
    client.run("counter = 99", step=2)
    ack = client.restore(2)
    assert ack["ok"] is True
    assert client.run("print(counter)", step=2)["stdout"] == "1\n"


def test_restore_is_idempotent(client):
    client.run("v = 'stable'", step=1)
    client.checkpoint(2)
    client.run("v = 'mutated'", step=2)
    client.restore(2)
    client.restore(2)
    assert client.run("print(v)", step=2)["stdout"] == "stable\n"


def test_restore_without_checkpoint_errors(client):
    ack = client.restore(7)
    assert ack["ok"] is False
    assert ack["error"] == "missing-checkpoint"


def test_restore_from_host_snapshot_into_fresh_worker(client):
    client.run("portable = 'carried over'", step=1)
    blob = client.checkpoint(2)["snapshot"]
    fresh = WireClient()
    try:
        fresh.handshake(("echo_tool", "adder"))
        ack = fresh.restore(2, snapshot=blob)
        assert ack["ok"] is True
        assert fresh.run("print(portable)", step=2)["stdout"] == "carried over\n"
    finally:
        fresh.close()


def test_unserializable_binding_dropped_with_warning(client):
    client.run("fh = open('/dev/null')\nkept = 'yes'", step=1)
    ack = client.checkpoint(2)
    assert any("fh" in w for w in ack["warnings"])
    client.restore(2)
    assert client.run("print(kept)", step=2)["stdout"] == "yes\n"
    result = client.run("print(fh)", step=2)
    assert result["error"]["error_class"] == "name-error"


def test_module_bindings_reimported_on_restore(client):
    client.run("import math", step=1)
    client.checkpoint(2)
    client.run("zz = 1", step=2)
    ack = client.restore(2)
    assert ack["ok"] is True
    assert client.run("print(math.sqrt(16))", step=2)["stdout"] == "4.0\n"


def test_syntax_error_reported_in_frame(client):
    result = client.run("def broken(:\n  pass")
    assert result["error"]["error_class"] == "syntax-error"
    # The worker survives and keeps serving.
    assert client.run("print('alive')")["stdout"] == "alive\n"


def test_handshake_timeout_exits_nonzero():
    c = WireClient(handshake_timeout_ms=200)
    try:
        c.proc.wait(timeout=5)
        assert c.proc.returncode == 2
    finally:
        c.close()


def test_user_print_never_pollutes_the_wire(client):
    # Printed text containing JSON-looking lines must arrive inside
    # exec_result.stdout, never as stray frames.
    result = client.run('print(\'{"type": "fake_frame"}\')')
    assert result["stdout"] == '{"type": "fake_frame"}\n'
    follow_up = client.run("print('still speaking frames')")
    assert follow_up["stdout"] == "still speaking frames\n"

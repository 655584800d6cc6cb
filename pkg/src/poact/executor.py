"""Host-side sandbox orchestration: session lifecycle over the
newline-delimited JSON frame protocol, per-step checkpoints, host tool
dispatch, the authorized-imports contract, timeouts, and crash recovery.

Two transports carry the same frames: an in-memory fake (queues + a worker
thread, no subprocess needed) and a real subprocess speaking the protocol on
its stdio.
"""

from __future__ import annotations

import json
import logging
import queue
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol

from .local_sandbox import start_worker

logger = logging.getLogger(__name__)

DEFAULT_STDOUT_CAP_BYTES = 65536
TRUNCATION_MARKER = "[truncated]"


class ExecutorError(Exception):
    """Base class for orchestrator failures."""


class SpawnFailure(ExecutorError):
    """The sandbox process/worker could not start."""


class HandshakeTimeout(ExecutorError):
    """No handshake reply within the deadline."""


class MissingCheckpoint(ExecutorError):
    """restore_to_step was asked for a step with no stored checkpoint."""


class ProtocolError(ExecutorError):
    """The sandbox sent a frame the protocol does not allow here."""


class TransportTimeout(ExecutorError):
    """No frame arrived within the deadline (internal; surfaces as a timeout
    failure on the ExecutionResult)."""


class TransportClosed(ExecutorError):
    """The sandbox went away (internal; surfaces as a crash failure)."""


@dataclass
class ToolCallRequest:
    call_id: str
    tool: str
    args: list
    kwargs: dict


@dataclass
class ToolCallResponse:
    call_id: str
    result: object | None = None
    error: str | None = None


@dataclass
class HostTool:
    """Host-side realization of a tool: the handler the sandbox proxies call."""

    callable_id: str
    handler: Callable
    spec: object | None = None


@dataclass(frozen=True)
class ExecFailure:
    error_class: str
    message: str


@dataclass
class ExecutionResult:
    stdout: str
    failure: ExecFailure | None = None
    final_answer: str | None = None
    wall_time: float = 0.0

    def __post_init__(self) -> None:
        if self.failure is not None and self.final_answer is not None:
            raise ValueError("an execution result cannot both fail and answer")


@dataclass
class SessionHandle:
    """One live sandbox session. `visible_tool_ids` mirrors the selector's
    latest pick; `step_snapshots` holds the opaque pre-execution checkpoint
    token for each executed step."""

    session_id: str
    visible_tool_ids: list[str]
    authorized_imports: list[str]
    step_snapshots: dict[int, str] = field(default_factory=dict)
    installed_tool_ids: list[str] = field(default_factory=list)
    transport: "SandboxTransport | None" = None


class SandboxTransport(Protocol):
    def send(self, frame: dict) -> None: ...

    def recv(self, timeout: float) -> dict: ...

    def kill(self) -> None: ...

    def close(self) -> None: ...

    @property
    def alive(self) -> bool: ...


class InMemoryTransport:
    """Wire protocol over queues. Frames are round-tripped through JSON on
    both directions so nothing non-serializable can sneak across."""

    def __init__(self, whitelist: list[str]) -> None:
        self._inbox, self._outbox, self._thread = start_worker(whitelist)
        self._alive = True

    def send(self, frame: dict) -> None:
        if not self._alive:
            raise TransportClosed("in-memory sandbox was killed")
        self._inbox.put(json.loads(json.dumps(frame)))

    def recv(self, timeout: float) -> dict:
        if not self._alive:
            raise TransportClosed("in-memory sandbox was killed")
        try:
            frame = self._outbox.get(timeout=max(timeout, 0.0))
        except queue.Empty:
            raise TransportTimeout(f"no frame within {timeout:.1f}s") from None
        return json.loads(json.dumps(frame))

    def kill(self) -> None:
        # The worker thread is a daemon; a wedged exec is simply abandoned.
        self._alive = False

    def close(self) -> None:
        if self._alive:
            self._inbox.put(None)
        self._alive = False

    @property
    def alive(self) -> bool:
        return self._alive


class SubprocessTransport:
    """Wire protocol over a child process's stdin/stdout, one JSON frame per
    line. A reader thread feeds a queue so receives can honor deadlines."""

    _EOF = object()

    def __init__(self, command: list[str], env: dict | None = None) -> None:
        try:
            self._proc = subprocess.Popen(
                command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
                text=True,
                bufsize=1,
                env=env,
            )
        except OSError as exc:
            raise SpawnFailure(f"could not spawn sandbox: {exc}") from exc
        self._frames: queue.Queue = queue.Queue()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_loop(self) -> None:
        assert self._proc.stdout is not None
        for line in self._proc.stdout:
            line = line.strip()
            if not line:
                continue
            try:
                self._frames.put(json.loads(line))
            except json.JSONDecodeError:
                self._frames.put(ProtocolError(f"unparseable frame: {line[:120]!r}"))
        self._frames.put(self._EOF)

    def send(self, frame: dict) -> None:
        assert self._proc.stdin is not None
        try:
            self._proc.stdin.write(json.dumps(frame, ensure_ascii=False) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, ValueError, OSError) as exc:
            raise TransportClosed(f"sandbox stdin closed: {exc}") from exc

    def recv(self, timeout: float) -> dict:
        try:
            item = self._frames.get(timeout=max(timeout, 0.0))
        except queue.Empty:
            raise TransportTimeout(f"no frame within {timeout:.1f}s") from None
        if item is self._EOF:
            raise TransportClosed("sandbox process exited")
        if isinstance(item, ProtocolError):
            raise item
        return item

    def kill(self) -> None:
        self._proc.kill()
        self._proc.wait()

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                assert self._proc.stdin is not None
                self._proc.stdin.close()
                self._proc.wait(timeout=2)
            except (OSError, subprocess.TimeoutExpired):
                self._proc.kill()
                self._proc.wait()

    @property
    def alive(self) -> bool:
        return self._proc.poll() is None


class InMemorySandboxLauncher:
    def launch(self, whitelist: list[str]) -> InMemoryTransport:
        return InMemoryTransport(whitelist)


class SubprocessSandboxLauncher:
    """Spawns the standalone sandbox process; the import whitelist travels on
    the command line."""

    def __init__(self, command: list[str] | None = None, env: dict | None = None) -> None:
        self.command = command or [sys.executable, "-m", "sandbox_runtime"]
        self.env = env

    def launch(self, whitelist: list[str]) -> SubprocessTransport:
        argv = list(self.command) + ["--whitelist", ",".join(whitelist)]
        return SubprocessTransport(argv, env=self.env)


def dispatch_tool(
    request: ToolCallRequest,
    registry: Mapping[str, HostTool],
    visible_tool_ids: set[str],
) -> ToolCallResponse:
    """Run one host tool call. Handler exceptions become structured
    tool-failure responses; a tool outside the visible set is refused by name."""
    if request.tool not in visible_tool_ids:
        return ToolCallResponse(
            call_id=request.call_id,
            error=f"unknown tool '{request.tool}': not in the visible tool set",
        )
    tool = registry.get(request.tool)
    if tool is None:
        return ToolCallResponse(
            call_id=request.call_id,
            error=f"unknown tool '{request.tool}': no host handler registered",
        )
    try:
        result = tool.handler(*request.args, **request.kwargs)
    except Exception as exc:
        return ToolCallResponse(
            call_id=request.call_id, error=f"tool '{request.tool}' failed: {exc}"
        )
    try:
        json.dumps(result)
    except (TypeError, ValueError):
        return ToolCallResponse(
            call_id=request.call_id,
            error=f"tool '{request.tool}' returned a non-JSON-serializable value",
        )
    return ToolCallResponse(call_id=request.call_id, result=result)


class Executor:
    """Owns sandbox sessions: one transport per running trajectory, strict
    request/response framing, pre-execution checkpoints, and recovery (kill,
    respawn, restore last checkpoint) on timeout or crash."""

    def __init__(
        self,
        host_tools: Mapping[str, HostTool] | None = None,
        *,
        launcher=None,
        default_timeout: float = 10.0,
        stdout_cap_bytes: int = DEFAULT_STDOUT_CAP_BYTES,
        handshake_timeout: float = 10.0,
    ) -> None:
        self.host_tools = dict(host_tools or {})
        self.launcher = launcher or InMemorySandboxLauncher()
        self.default_timeout = default_timeout
        self.stdout_cap_bytes = stdout_cap_bytes
        self.handshake_timeout = handshake_timeout

    # -- session lifecycle ---------------------------------------------------

    def open_session(
        self,
        trajectory_id: str,
        tool_ids: list[str],
        authorized_imports: list[str],
    ) -> SessionHandle:
        transport = self.launcher.launch(list(authorized_imports))
        self._handshake(transport, trajectory_id, list(tool_ids))
        return SessionHandle(
            session_id=trajectory_id,
            visible_tool_ids=list(tool_ids),
            authorized_imports=list(authorized_imports),
            installed_tool_ids=list(tool_ids),
            transport=transport,
        )

    def _handshake(self, transport, session_id: str, tool_ids: list[str]) -> None:
        transport.send({"type": "handshake", "session_id": session_id, "tools": tool_ids})
        try:
            reply = transport.recv(self.handshake_timeout)
        except TransportTimeout:
            transport.kill()
            raise HandshakeTimeout(
                f"no handshake reply within {self.handshake_timeout:.1f}s"
            ) from None
        except TransportClosed as exc:
            raise SpawnFailure(f"sandbox exited during handshake: {exc}") from exc
        if reply.get("type") != "handshake" or not reply.get("ok"):
            transport.kill()
            raise SpawnFailure(f"bad handshake reply: {reply}")
        if list(reply.get("tools", [])) != list(tool_ids):
            transport.kill()
            raise SpawnFailure(
                f"sandbox registered proxies {reply.get('tools')}, expected {tool_ids}"
            )

    def set_visible_tools(self, session: SessionHandle, tool_ids: list[str]) -> None:
        """Keep the session's visible set mirroring the selector's latest
        pick; dispatch enforces it on every call."""
        session.visible_tool_ids = list(tool_ids)

    def close_session(self, session: SessionHandle) -> None:
        if session.transport is not None:
            session.transport.close()

    # -- execution -----------------------------------------------------------

    def execute(
        self,
        session: SessionHandle,
        code: str,
        step: int,
        timeout: float | None = None,
    ) -> ExecutionResult:
        """Run one code block in the session namespace. Stores a pre-execution
        checkpoint under `step`, forwards tool calls to host handlers, and
        caps stdout. Timeouts and sandbox deaths recover the session from the
        last checkpoint and come back as failures, not exceptions."""
        if not code:
            raise ExecutorError("execute needs non-empty code")
        timeout = timeout if timeout is not None else self.default_timeout
        started = time.monotonic()
        try:
            self._checkpoint(session, step)
            assert session.transport is not None
            session.transport.send(
                {"type": "exec", "code": code, "step": step, "timeout_ms": int(timeout * 1000)}
            )
            deadline = time.monotonic() + timeout
            while True:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise TransportTimeout(f"step {step} still running after {timeout:.1f}s")
                frame = session.transport.recv(remaining)
                frame_type = frame.get("type")
                if frame_type == "tool_call":
                    request = ToolCallRequest(
                        call_id=frame.get("call_id", ""),
                        tool=frame.get("tool", ""),
                        args=list(frame.get("args", [])),
                        kwargs=dict(frame.get("kwargs", {})),
                    )
                    response = dispatch_tool(
                        request, self.host_tools, set(session.visible_tool_ids)
                    )
                    reply: dict = {"type": "tool_result", "call_id": response.call_id}
                    if response.error is not None:
                        reply["error"] = response.error
                    else:
                        reply["result"] = response.result
                    session.transport.send(reply)
                elif frame_type == "exec_result":
                    return self._build_result(frame, started)
                elif frame_type == "error":
                    raise ProtocolError(str(frame.get("error")))
                else:
                    raise ProtocolError(f"unexpected frame during exec: {frame_type!r}")
        except TransportTimeout:
            return self._recover(
                session,
                "timeout",
                f"step {step} exceeded the {timeout:.1f}s execution budget; "
                f"do less work per code action",
                started,
            )
        except (TransportClosed, ProtocolError) as exc:
            return self._recover(
                session, "crash", f"the sandbox died while running step {step}: {exc}", started
            )

    def _build_result(self, frame: dict, started: float) -> ExecutionResult:
        failure = None
        if frame.get("error") is not None:
            err = frame["error"]
            failure = ExecFailure(
                error_class=str(err.get("error_class", "unknown")),
                message=str(err.get("message", "")),
            )
        final_answer = frame.get("final_answer")
        if failure is not None and final_answer is not None:
            raise ProtocolError("exec_result carried both an error and a final answer")
        stdout = frame.get("stdout", "")
        encoded = stdout.encode("utf-8")
        if len(encoded) > self.stdout_cap_bytes:
            stdout = (
                encoded[: self.stdout_cap_bytes].decode("utf-8", errors="ignore")
                + TRUNCATION_MARKER
            )
        return ExecutionResult(
            stdout=stdout,
            failure=failure,
            final_answer=None if final_answer is None else str(final_answer),
            wall_time=time.monotonic() - started,
        )

    def _checkpoint(self, session: SessionHandle, step: int) -> None:
        assert session.transport is not None
        session.transport.send({"type": "checkpoint", "step": step})
        ack = session.transport.recv(self.default_timeout)
        if ack.get("type") != "checkpoint" or not ack.get("ok"):
            raise ProtocolError(f"bad checkpoint ack: {ack}")
        for warning in ack.get("warnings", []):
            logger.warning("session %s checkpoint %d: %s", session.session_id, step, warning)
        session.step_snapshots[step] = ack["snapshot"]

    def _recover(
        self, session: SessionHandle, error_class: str, message: str, started: float
    ) -> ExecutionResult:
        """Kill the transport and respawn from the most recent checkpoint."""
        assert session.transport is not None
        session.transport.kill()
        transport = self.launcher.launch(session.authorized_imports)
        self._handshake(transport, session.session_id, session.installed_tool_ids)
        if session.step_snapshots:
            last_step = max(session.step_snapshots)
            transport.send(
                {
                    "type": "restore",
                    "step": last_step,
                    "snapshot": session.step_snapshots[last_step],
                }
            )
            ack = transport.recv(self.default_timeout)
            if ack.get("type") != "restore" or not ack.get("ok"):
                raise ProtocolError(f"bad restore ack during recovery: {ack}")
        session.transport = transport
        return ExecutionResult(
            stdout="",
            failure=ExecFailure(error_class=error_class, message=message),
            final_answer=None,
            wall_time=time.monotonic() - started,
        )

    def restore_to_step(self, session: SessionHandle, step: int) -> SessionHandle:
        """Rewind the session namespace to the pre-execution snapshot of
        `step` and discard later checkpoints."""
        blob = session.step_snapshots.get(step)
        if blob is None:
            raise MissingCheckpoint(f"no checkpoint stored for step {step}")
        assert session.transport is not None
        session.transport.send({"type": "restore", "step": step, "snapshot": blob})
        ack = session.transport.recv(self.default_timeout)
        if ack.get("type") != "restore" or not ack.get("ok"):
            raise ProtocolError(f"restore to step {step} failed: {ack}")
        for warning in ack.get("warnings", []):
            logger.warning("session %s restore %d: %s", session.session_id, step, warning)
        session.step_snapshots = {s: b for s, b in session.step_snapshots.items() if s <= step}
        return session

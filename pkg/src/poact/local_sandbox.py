"""In-process stand-in for the sandbox worker.

Implements exactly the executor wire protocol (handshake / exec / tool_call /
tool_result / exec_result / checkpoint / restore frames), carried over queues
instead of a subprocess's stdio, so the whole primary test suite runs without
spawning anything. One worker = one persistent session namespace.
"""

from __future__ import annotations

import ast
import base64
import builtins as _builtins
import importlib
import io
import json
import pickle
import queue
import re
import threading
import types

FINAL_ANSWER_NAME = "final_answer"

#: Namespace entries that belong to the harness, never to the user.
_HARNESS_KEYS = ("__name__", "__builtins__")


class FinalAnswerSignal(BaseException):
    """Raised by the final-answer callable. A BaseException so user-level
    `except Exception` blocks cannot swallow the short-circuit."""

    def __init__(self, value) -> None:
        super().__init__("final answer")
        self.value = value


class ImportViolationError(ImportError):
    """An import outside the whitelist, refused before module init."""


class ToolProxyError(Exception):
    """A tool call failed host-side; catchable by user code."""


class ShadowingError(Exception):
    """User code tried to rebind a tool proxy or the final-answer callable."""


_SPECIAL_ERROR_CLASSES = [
    (ImportViolationError, "import-violation"),
    (ToolProxyError, "tool-failure"),
    (ShadowingError, "shadowing"),
]


def error_class_for(exc: BaseException) -> str:
    """Map an exception to its wire error class (kebab-cased type name, with
    harness-specific exceptions pinned to their contract names)."""
    for exc_type, cls in _SPECIAL_ERROR_CLASSES:
        if isinstance(exc, exc_type):
            return cls
    name = type(exc).__name__
    return re.sub(r"(?<!^)(?=[A-Z])", "-", name).lower()


def collect_bound_names(tree: ast.AST) -> set[str]:
    """Every name a code block binds anywhere (module level or nested), used
    to refuse shadowing of reserved callables before execution."""
    names: set[str] = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.Name) and isinstance(node.ctx, (ast.Store, ast.Del)):
            names.add(node.id)
        elif isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef, ast.ClassDef)):
            names.add(node.name)
        elif isinstance(node, ast.Import):
            for alias in node.names:
                names.add(alias.asname or alias.name.split(".")[0])
        elif isinstance(node, ast.ImportFrom):
            for alias in node.names:
                names.add(alias.asname or alias.name)
        elif isinstance(node, (ast.Global, ast.Nonlocal)):
            names.update(node.names)
        elif isinstance(node, ast.arg):
            names.add(node.arg)
    return names


class LocalSandboxWorker:
    """The fake sandbox's event loop: reads frames from `inbox`, writes frames
    to `outbox`. Runs on its own daemon thread; strictly one frame at a time,
    with tool calls as synchronous round-trips mid-exec."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, whitelist: list[str]) -> None:
        self._inbox = inbox
        self._outbox = outbox
        self._whitelist = set(whitelist)
        self._namespace: dict = {}
        self._snapshots: dict[int, str] = {}
        self._proxy_names: list[str] = []
        self._call_counter = 0
        self._stdout_buffer: io.StringIO | None = None
        self._import_hook = self._make_import_hook()

    # -- main loop ---------------------------------------------------------

    def run(self) -> None:
        while True:
            frame = self._inbox.get()
            if frame is None:
                return
            frame_type = frame.get("type") if isinstance(frame, dict) else None
            try:
                if frame_type == "handshake":
                    self._handle_handshake(frame)
                elif frame_type == "exec":
                    self._handle_exec(frame)
                elif frame_type == "checkpoint":
                    self._handle_checkpoint(frame)
                elif frame_type == "restore":
                    self._handle_restore(frame)
                else:
                    self._outbox.put({"type": "error", "error": f"unknown frame type {frame_type!r}"})
            except Exception as exc:  # harness bug, reported in-frame
                self._outbox.put({"type": "error", "error": f"worker failure: {exc}"})

    # -- namespace machinery -------------------------------------------------

    def _make_import_hook(self):
        real_import = _builtins.__import__
        whitelist = self._whitelist

        def guarded_import(name, globals=None, locals=None, fromlist=(), level=0):
            if level > 0:
                raise ImportViolationError("relative imports are not available in a session")
            top = name.split(".")[0] if name else ""
            if top not in whitelist:
                allowed = ", ".join(sorted(whitelist)) or "(none)"
                raise ImportViolationError(
                    f"import of '{top}' is not authorized; authorized imports: {allowed}"
                )
            return real_import(name, globals, locals, fromlist, level)

        return guarded_import

    def _session_print(self, *args, **kwargs):
        if "file" not in kwargs and self._stdout_buffer is not None:
            kwargs["file"] = self._stdout_buffer
        _builtins.print(*args, **kwargs)

    def _reserved_names(self) -> set[str]:
        return set(self._proxy_names) | {FINAL_ANSWER_NAME}

    def _reset_namespace(
        self, values: dict | None = None, modules: dict[str, str] | None = None
    ) -> list[str]:
        """Rebuild the session namespace: guarded builtins, tool proxies, the
        final-answer sentinel, then restored bindings. Returns warnings for
        module bindings that could not come back."""
        guarded_builtins = dict(vars(_builtins))
        guarded_builtins["__import__"] = self._import_hook
        guarded_builtins["print"] = self._session_print
        namespace: dict = {"__name__": "__session__", "__builtins__": guarded_builtins}
        for name in self._proxy_names:
            if name == FINAL_ANSWER_NAME:
                continue
            namespace[name] = self._make_proxy(name)
        namespace[FINAL_ANSWER_NAME] = self._final_answer

        warnings: list[str] = []
        for binding, module_name in (modules or {}).items():
            if module_name.split(".")[0] in self._whitelist:
                try:
                    namespace[binding] = importlib.import_module(module_name)
                except Exception as exc:
                    warnings.append(f"module {module_name!r} not restored: {exc}")
            else:
                warnings.append(f"module {module_name!r} not restored: not authorized")
        namespace.update(values or {})
        self._namespace = namespace
        return warnings

    @staticmethod
    def _final_answer(value=None):
        raise FinalAnswerSignal(value)

    def _make_proxy(self, tool_name: str):
        def proxy(*args, **kwargs):
            self._call_counter += 1
            call_id = f"{tool_name}-{self._call_counter}"
            try:
                payload_args = json.loads(json.dumps(list(args)))
                payload_kwargs = json.loads(json.dumps(kwargs))
            except (TypeError, ValueError) as exc:
                raise ToolProxyError(f"tool arguments must be JSON values: {exc}") from None
            self._outbox.put(
                {
                    "type": "tool_call",
                    "call_id": call_id,
                    "tool": tool_name,
                    "args": payload_args,
                    "kwargs": payload_kwargs,
                }
            )
            reply = self._inbox.get()
            if (
                not isinstance(reply, dict)
                or reply.get("type") != "tool_result"
                or reply.get("call_id") != call_id
            ):
                raise ToolProxyError(f"protocol violation: expected tool_result for {call_id}")
            if reply.get("error") is not None:
                raise ToolProxyError(str(reply["error"]))
            return reply.get("result")

        proxy.__name__ = tool_name
        proxy.__qualname__ = tool_name
        return proxy

    # -- frame handlers ------------------------------------------------------

    def _handle_handshake(self, frame: dict) -> None:
        self._proxy_names = [str(t) for t in frame.get("tools", [])]
        self._reset_namespace()
        self._outbox.put(
            {
                "type": "handshake",
                "ok": True,
                "session_id": frame.get("session_id", ""),
                "tools": list(self._proxy_names),
            }
        )

    def _handle_exec(self, frame: dict) -> None:
        code = frame.get("code", "")
        step = frame.get("step", 0)
        buffer = io.StringIO()
        self._stdout_buffer = buffer
        result: dict = {"type": "exec_result", "step": step}
        try:
            tree = ast.parse(code)
            shadowed = collect_bound_names(tree) & self._reserved_names()
            if shadowed:
                raise ShadowingError(
                    f"code must not rebind reserved names: {', '.join(sorted(shadowed))}"
                )
            compiled = compile(tree, "<session>", "exec")
            exec(compiled, self._namespace)
        except FinalAnswerSignal as signal:
            result["final_answer"] = "" if signal.value is None else str(signal.value)
        except Exception as exc:
            result["error"] = {
                "error_class": error_class_for(exc),
                "message": str(exc) or type(exc).__name__,
            }
        finally:
            self._stdout_buffer = None
        result["stdout"] = buffer.getvalue()
        self._outbox.put(result)

    def _handle_checkpoint(self, frame: dict) -> None:
        step = frame["step"]
        blob, warnings = self._snapshot_blob()
        self._snapshots[step] = blob
        self._outbox.put(
            {"type": "checkpoint", "ok": True, "step": step, "snapshot": blob, "warnings": warnings}
        )

    def _snapshot_blob(self) -> tuple[str, list[str]]:
        values: dict = {}
        modules: dict[str, str] = {}
        warnings: list[str] = []
        reserved = self._reserved_names()
        for name, value in self._namespace.items():
            if name in _HARNESS_KEYS or name in reserved:
                continue
            if isinstance(value, types.ModuleType):
                modules[name] = value.__name__
                continue
            try:
                pickle.dumps(value)
            except Exception:
                warnings.append(f"dropped unserializable binding {name!r}")
                continue
            values[name] = value
        blob = base64.b64encode(pickle.dumps({"values": values, "modules": modules})).decode("ascii")
        return blob, warnings

    def _handle_restore(self, frame: dict) -> None:
        step = frame["step"]
        blob = frame.get("snapshot") or self._snapshots.get(step)
        if blob is None:
            self._outbox.put(
                {"type": "restore", "ok": False, "step": step, "error": "missing-checkpoint"}
            )
            return
        payload = pickle.loads(base64.b64decode(blob))
        warnings = self._reset_namespace(payload.get("values"), payload.get("modules"))
        self._snapshots = {s: b for s, b in self._snapshots.items() if s <= step}
        self._snapshots[step] = blob
        self._outbox.put({"type": "restore", "ok": True, "step": step, "warnings": warnings})


def start_worker(whitelist: list[str]) -> tuple[queue.Queue, queue.Queue, threading.Thread]:
    """Spin up a worker on a daemon thread; returns (inbox, outbox, thread)."""
    inbox: queue.Queue = queue.Queue()
    outbox: queue.Queue = queue.Queue()
    worker = LocalSandboxWorker(inbox, outbox, whitelist)
    thread = threading.Thread(target=worker.run, name="local-sandbox", daemon=True)
    thread.start()
    return inbox, outbox, thread

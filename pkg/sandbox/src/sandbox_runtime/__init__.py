"""Code-execution worker for one agent session.

The far side of the orchestrator's stdio protocol: one JSON frame per line on
stdin/stdout (`handshake`, `exec`, `tool_call`/`tool_result`, `exec_result`,
`checkpoint`, `restore`). The worker keeps a persistent namespace across exec
frames, installs an import whitelist that refuses modules before they
initialize, exposes host tools as plain functions that round-trip over the
wire, captures printed output per block, and short-circuits the block when
final_answer(...) fires. Checkpoints serialize the namespace so the host can
restore it here or into a freshly spawned worker.
"""

from __future__ import annotations

import ast
import base64
import builtins as _builtins
import importlib
import io
import json
import pickle
import re
import select
import sys
import types

__version__ = "0.1.0"

FINAL_ANSWER_NAME = "final_answer"

_HARNESS_KEYS = ("__name__", "__builtins__")


class FinalAnswer(BaseException):
    """Raised by the final-answer callable; a BaseException so user-level
    `except Exception` cannot swallow the short-circuit."""

    def __init__(self, value) -> None:
        super().__init__("final answer")
        self.value = value


class ImportBlocked(ImportError):
    """An import outside the whitelist, refused before module initialization."""


class ToolCallError(Exception):
    """A proxied tool call failed host-side; catchable by user code."""


class ReservedNameError(Exception):
    """The block tried to rebind a tool proxy or final_answer."""


_SPECIAL_CLASSES = [
    (ImportBlocked, "import-violation"),
    (ToolCallError, "tool-failure"),
    (ReservedNameError, "shadowing"),
]


def to_error_class(exc: BaseException) -> str:
    for exc_type, name in _SPECIAL_CLASSES:
        if isinstance(exc, exc_type):
            return name
    return re.sub(r"(?<!^)(?=[A-Z])", "-", type(exc).__name__).lower()


def bound_names(tree: ast.AST) -> set[str]:
    """Every name the block binds anywhere, including nested scopes."""
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


class Harness:
    """Single-threaded frame loop over stdin/stdout for one session."""

    def __init__(self, whitelist: list[str], stdin=None, wire_out=None) -> None:
        self._stdin = stdin if stdin is not None else sys.stdin
        self._wire = wire_out if wire_out is not None else sys.stdout
        self._whitelist = {w for w in whitelist if w}
        self._namespace: dict = {}
        self._snapshots: dict[int, str] = {}
        self._tool_names: list[str] = []
        self._call_counter = 0
        self._import_hook = self._make_import_hook()

    # -- wire ---------------------------------------------------------------

    def send(self, frame: dict) -> None:
        self._wire.write(json.dumps(frame, ensure_ascii=False) + "\n")
        self._wire.flush()

    def read_frame(self) -> dict | None:
        line = self._stdin.readline()
        if not line:
            return None
        line = line.strip()
        if not line:
            return self.read_frame()
        return json.loads(line)

    # -- lifecycle ------------------------------------------------------------

    def serve(self, handshake_timeout_ms: int = 10000) -> int:
        if not self._await_handshake(handshake_timeout_ms):
            return 2
        while True:
            frame = self.read_frame()
            if frame is None:
                return 0
            self.dispatch(frame)

    def _await_handshake(self, timeout_ms: int) -> bool:
        try:
            ready, _, _ = select.select([self._stdin], [], [], timeout_ms / 1000.0)
        except (OSError, ValueError):
            ready = [self._stdin]  # non-selectable stdin (tests), just read
        if not ready:
            return False
        frame = self.read_frame()
        if not isinstance(frame, dict) or frame.get("type") != "handshake":
            return False
        self._tool_names = [str(t) for t in frame.get("tools", [])]
        self._rebuild_namespace()
        self.send(
            {
                "type": "handshake",
                "ok": True,
                "session_id": frame.get("session_id", ""),
                "tools": list(self._tool_names),
            }
        )
        return True

    def dispatch(self, frame: dict) -> None:
        frame_type = frame.get("type")
        try:
            if frame_type == "exec":
                self._run_block(frame)
            elif frame_type == "checkpoint":
                self._checkpoint(frame)
            elif frame_type == "restore":
                self._restore(frame)
            else:
                self.send({"type": "error", "error": f"unknown frame type {frame_type!r}"})
        except Exception as exc:  # never die on a bad frame; report it
            self.send({"type": "error", "error": f"harness failure: {exc}"})

    # -- namespace ------------------------------------------------------------

    def _make_import_hook(self):
        real_import = _builtins.__import__

        def guarded(name, globals=None, locals=None, fromlist=(), level=0):
            if level > 0:
                raise ImportBlocked("relative imports are not available in a session")
            top = name.split(".")[0] if name else ""
            if top not in self._whitelist:
                allowed = ", ".join(sorted(self._whitelist)) or "(none)"
                raise ImportBlocked(
                    f"import of '{top}' is not authorized; authorized imports: {allowed}"
                )
            return real_import(name, globals, locals, fromlist, level)

        return guarded

    def _reserved(self) -> set[str]:
        return set(self._tool_names) | {FINAL_ANSWER_NAME}

    def _rebuild_namespace(
        self, values: dict | None = None, modules: dict[str, str] | None = None
    ) -> list[str]:
        guarded_builtins = dict(vars(_builtins))
        guarded_builtins["__import__"] = self._import_hook
        namespace: dict = {"__name__": "__session__", "__builtins__": guarded_builtins}
        for name in self._tool_names:
            if name != FINAL_ANSWER_NAME:
                namespace[name] = self._make_proxy(name)
        namespace[FINAL_ANSWER_NAME] = _final_answer

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

    def _make_proxy(self, name: str):
        def proxy(*args, **kwargs):
            self._call_counter += 1
            call_id = f"{name}-{self._call_counter}"
            try:
                args_payload = json.loads(json.dumps(list(args)))
                kwargs_payload = json.loads(json.dumps(kwargs))
            except (TypeError, ValueError) as exc:
                raise ToolCallError(f"tool arguments must be JSON values: {exc}") from None
            self.send(
                {
                    "type": "tool_call",
                    "call_id": call_id,
                    "tool": name,
                    "args": args_payload,
                    "kwargs": kwargs_payload,
                }
            )
            reply = self.read_frame()
            if (
                not isinstance(reply, dict)
                or reply.get("type") != "tool_result"
                or reply.get("call_id") != call_id
            ):
                raise ToolCallError(f"protocol violation waiting for {call_id}")
            if reply.get("error") is not None:
                raise ToolCallError(str(reply["error"]))
            return reply.get("result")

        proxy.__name__ = name
        proxy.__qualname__ = name
        return proxy

    # -- frames ---------------------------------------------------------------

    def _run_block(self, frame: dict) -> None:
        code = frame.get("code", "")
        step = frame.get("step", 0)
        result: dict = {"type": "exec_result", "step": step}
        buffer = io.StringIO()
        saved_stdout = sys.stdout
        sys.stdout = buffer
        try:
            tree = ast.parse(code)
            clash = bound_names(tree) & self._reserved()
            if clash:
                raise ReservedNameError(
                    f"code must not rebind reserved names: {', '.join(sorted(clash))}"
                )
            exec(compile(tree, "<session>", "exec"), self._namespace)
        except FinalAnswer as signal:
            result["final_answer"] = "" if signal.value is None else str(signal.value)
        except Exception as exc:
            result["error"] = {
                "error_class": to_error_class(exc),
                "message": str(exc) or type(exc).__name__,
            }
        finally:
            sys.stdout = saved_stdout
        result["stdout"] = buffer.getvalue()
        self.send(result)

    def _snapshot_blob(self) -> tuple[str, list[str]]:
        values: dict = {}
        modules: dict[str, str] = {}
        warnings: list[str] = []
        reserved = self._reserved()
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
        blob = base64.b64encode(pickle.dumps({"values": values, "modules": modules}))
        return blob.decode("ascii"), warnings

    def _checkpoint(self, frame: dict) -> None:
        step = frame["step"]
        blob, warnings = self._snapshot_blob()
        self._snapshots[step] = blob
        self.send(
            {
                "type": "checkpoint",
                "ok": True,
                "step": step,
                "snapshot": blob,
                "warnings": warnings,
            }
        )

    def _restore(self, frame: dict) -> None:
        step = frame["step"]
        blob = frame.get("snapshot") or self._snapshots.get(step)
        if blob is None:
            self.send(
                {"type": "restore", "ok": False, "step": step, "error": "missing-checkpoint"}
            )
            return
        payload = pickle.loads(base64.b64decode(blob))
        warnings = self._rebuild_namespace(payload.get("values"), payload.get("modules"))
        self._snapshots = {s: b for s, b in self._snapshots.items() if s <= step}
        self._snapshots[step] = blob
        self.send({"type": "restore", "ok": True, "step": step, "warnings": warnings})


def _final_answer(value=None):
    raise FinalAnswer(value)

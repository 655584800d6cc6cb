"""Trajectory data model: role-tagged messages, the model-output tag parser,
history rendering for backends, truncation for backtracking, and the
JSON-lines trajectory log format shared by the CLI and the bench harness.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import TYPE_CHECKING, Iterable

from .backend import TokenUsage

if TYPE_CHECKING:  # pragma: no cover
    from .policy import StepPolicy


class Role(str, Enum):
    SYSTEM = "system"
    QUERY = "query"
    PLAN = "plan"
    THOUGHT = "thought"
    CODE = "code"
    OBSERVATION = "observation"
    ERROR = "error"
    ANSWER = "answer"


#: Roles produced inside a reasoning round. Everything else (query, plan,
#: answer, system) frames the rounds.
LOOP_ROLES = frozenset({Role.THOUGHT, Role.CODE, Role.OBSERVATION, Role.ERROR})


class TrajectoryStatus(str, Enum):
    RUNNING = "running"
    ANSWERED = "answered"
    FAILED = "failed"
    STEP_LIMIT = "step_limit"


class ConversationError(Exception):
    """Base class for trajectory/parsing errors."""


class MalformedOutput(ConversationError):
    """The expected tag block is missing. Carries the raw completion so the
    reviewer can inspect it."""

    def __init__(self, message: str, raw: str) -> None:
        super().__init__(message)
        self.raw = raw


class NestedTag(ConversationError):
    """Thought/code tags were nested or interleaved."""


class OrderViolation(ConversationError):
    """An append would break step ordering or the per-step role pattern."""


class OutOfRange(ConversationError):
    """Truncation target outside [0, step_count]."""


class LogParseError(ConversationError):
    """A trajectory log line failed to parse."""

    def __init__(self, message: str, line_number: int) -> None:
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


@dataclass(frozen=True)
class Message:
    role: Role
    content: str
    step_index: int
    token_count: int | None = None

    def __post_init__(self) -> None:
        if self.step_index < 0:
            raise ValueError("step_index must be non-negative")
        if self.token_count is not None and self.token_count < 0:
            raise ValueError("token_count must be non-negative")
        if not self.content and self.role is not Role.ANSWER:
            raise ValueError(f"{self.role.value} messages must have content")


@dataclass(frozen=True)
class Trajectory:
    """Ordered message history plus loop state. Values are immutable; every
    operation returns a new trajectory, so one driver owns one lineage."""

    messages: tuple[Message, ...] = ()
    global_plan: str | None = None
    status: TrajectoryStatus = TrajectoryStatus.RUNNING
    usage: TokenUsage = field(default_factory=TokenUsage)
    revise_plan_pending: bool = False

    @property
    def step_count(self) -> int:
        """Maximum step_index present (0 for an empty trajectory)."""
        return max((m.step_index for m in self.messages), default=0)

    def messages_at(self, step: int) -> tuple[Message, ...]:
        return tuple(m for m in self.messages if m.step_index == step)

    def roles_at(self, step: int) -> set[Role]:
        return {m.role for m in self.messages_at(step)}

    def step_is_closed(self, step: int) -> bool:
        """A step is closed once its outcome (observation or error) landed."""
        roles = self.roles_at(step)
        return Role.OBSERVATION in roles or Role.ERROR in roles

    def last_message(self, role: Role) -> Message | None:
        for m in reversed(self.messages):
            if m.role is role:
                return m
        return None

    def with_status(self, status: TrajectoryStatus) -> "Trajectory":
        if status is TrajectoryStatus.ANSWERED:
            last_answer = self.last_message(Role.ANSWER)
            if last_answer is None or not last_answer.content:
                raise ConversationError("answered status requires a non-empty answer message")
        return replace(self, status=status)

    def with_plan(self, plan: str) -> "Trajectory":
        return replace(self, global_plan=plan, revise_plan_pending=False)

    def with_revise_flag(self, pending: bool = True) -> "Trajectory":
        return replace(self, revise_plan_pending=pending)

    def add_prompt_tokens(self, count: int, estimated: bool = False) -> "Trajectory":
        return replace(
            self, usage=self.usage + TokenUsage(prompt_tokens=count, estimated=estimated)
        )


def append_message(trajectory: Trajectory, message: Message) -> Trajectory:
    """Append one message, enforcing step monotonicity and the per-step role
    pattern (thought opens a round, code follows it, the observation needs its
    code; error-role guidance may land anywhere)."""
    if trajectory.messages and message.step_index < trajectory.messages[-1].step_index:
        raise OrderViolation(
            f"step_index {message.step_index} < last step "
            f"{trajectory.messages[-1].step_index}"
        )
    roles = trajectory.roles_at(message.step_index)
    if message.role is Role.THOUGHT:
        if roles & {Role.THOUGHT, Role.CODE, Role.OBSERVATION}:
            raise OrderViolation(f"thought cannot open step {message.step_index}: round already started")
    elif message.role is Role.CODE:
        if roles & {Role.CODE, Role.OBSERVATION}:
            raise OrderViolation(f"step {message.step_index} already has a code action")
    elif message.role is Role.OBSERVATION:
        if Role.CODE not in roles:
            raise OrderViolation(f"observation at step {message.step_index} has no code action")
        if Role.OBSERVATION in roles:
            raise OrderViolation(f"step {message.step_index} already has an observation")

    usage = trajectory.usage
    if message.token_count is not None:
        usage = usage + TokenUsage(completion_tokens=message.token_count)
    return replace(trajectory, messages=trajectory.messages + (message,), usage=usage)


def truncate_to_step(trajectory: Trajectory, step: int) -> Trajectory:
    """Drop every message past `step` and reset the status to running. The
    usage accumulator is kept intact: backtracked tokens were really spent."""
    if step < 0 or step > trajectory.step_count:
        raise OutOfRange(f"step {step} outside [0, {trajectory.step_count}]")
    kept = tuple(m for m in trajectory.messages if m.step_index <= step)
    return replace(trajectory, messages=kept, status=TrajectoryStatus.RUNNING)


# ---------------------------------------------------------------------------
# Model-output tag parsing
# ---------------------------------------------------------------------------

_TAG_MARKERS = {
    "thought": ("<thought>", "</thought>"),
    "code": ("<code>", "</code>"),
}
_ALL_MARKERS = tuple(m for pair in _TAG_MARKERS.values() for m in pair)


@dataclass(frozen=True)
class StepOutput:
    """Parsed completion: at least one of thought/code is present."""

    thought: str | None
    code: str | None
    raw: str


def _first_block(raw: str, kind: str) -> str | None:
    """Inner content of the first well-formed block of `kind`, or None.

    An opening marker inside the extracted content means tags were nested or
    interleaved, which is rejected rather than guessed at.
    """
    open_marker, close_marker = _TAG_MARKERS[kind]
    start = raw.find(open_marker)
    if start < 0:
        return None
    end = raw.find(close_marker, start + len(open_marker))
    if end < 0:
        return None
    inner = raw[start + len(open_marker) : end]
    for marker in _ALL_MARKERS:
        if marker in inner:
            raise NestedTag(f"marker {marker!r} inside <{kind}> block")
    return inner


def parse_model_output(raw: str, expected: "StepPolicy | str") -> StepOutput:
    """Extract the first well-formed thought/code blocks from a completion.

    The block required by `expected` must be present; the other is kept too
    when the model emitted both. Plan-policy completions are untagged, so the
    whole (trimmed) completion becomes the plan text, carried in `thought`.
    Inner content is preserved byte-for-byte.
    """
    want = str(getattr(expected, "value", expected))
    thought = _first_block(raw, "thought")
    code = _first_block(raw, "code")

    if want == "plan" and thought is None:
        text = raw.strip()
        if not text:
            raise MalformedOutput("empty plan completion", raw)
        thought = text
    if want == "thought" and thought is None:
        raise MalformedOutput("no <thought> block in completion", raw)
    if want == "code" and code is None:
        raise MalformedOutput("no <code> block in completion", raw)
    if thought is None and code is None:
        raise MalformedOutput("no recognized tag block in completion", raw)
    return StepOutput(thought=thought, code=code, raw=raw)


def wrap_step_output(out: StepOutput) -> str:
    """Re-wrap parsed fields in their tags (round-trip inverse of parsing)."""
    parts = []
    if out.thought is not None:
        parts.append(f"<thought>{out.thought}</thought>")
    if out.code is not None:
        parts.append(f"<code>{out.code}</code>")
    return "".join(parts)


# ---------------------------------------------------------------------------
# History rendering
# ---------------------------------------------------------------------------


class HistoryFormat(str, Enum):
    #: System/user/assistant turns; observations and errors come back as user
    #: turns wrapped in their tags.
    CHAT = "chat"
    #: Same, but observations/errors are emitted as tool-role turns.
    TOOL_TURNS = "tool-turns"


def render_history(
    trajectory: Trajectory, format: HistoryFormat = HistoryFormat.CHAT
) -> list[tuple[str, str]]:
    """Serialize messages into backend-ready turns. Pure: identical
    trajectories render byte-identically."""
    feedback_role = "user" if format is HistoryFormat.CHAT else "tool"
    turns: list[tuple[str, str]] = []
    for m in trajectory.messages:
        if m.role is Role.SYSTEM:
            turns.append(("system", m.content))
        elif m.role is Role.QUERY:
            turns.append(("user", m.content))
        elif m.role is Role.PLAN:
            turns.append(("assistant", f"<plan>{m.content}</plan>"))
        elif m.role is Role.THOUGHT:
            turns.append(("assistant", f"<thought>{m.content}</thought>"))
        elif m.role is Role.CODE:
            turns.append(("assistant", f"<code>{m.content}</code>"))
        elif m.role is Role.OBSERVATION:
            turns.append((feedback_role, f"<observation>{m.content}</observation>"))
        elif m.role is Role.ERROR:
            turns.append((feedback_role, f"<error>{m.content}</error>"))
        elif m.role is Role.ANSWER:
            turns.append(("assistant", m.content))
    return turns


# ---------------------------------------------------------------------------
# Trajectory log (JSON lines): {"role", "content", "step", "tokens"?}
# ---------------------------------------------------------------------------


def message_to_log_line(message: Message) -> str:
    entry: dict = {
        "role": message.role.value,
        "content": message.content,
        "step": message.step_index,
    }
    if message.token_count is not None:
        entry["tokens"] = message.token_count
    return json.dumps(entry, ensure_ascii=False, sort_keys=True)


def message_from_log_entry(entry: dict, line_number: int) -> Message:
    for key in ("role", "content", "step"):
        if key not in entry:
            raise LogParseError(f"missing field {key!r}", line_number)
    try:
        role = Role(entry["role"])
    except ValueError:
        raise LogParseError(f"unknown role {entry['role']!r}", line_number) from None
    try:
        return Message(
            role=role,
            content=entry["content"],
            step_index=int(entry["step"]),
            token_count=int(entry["tokens"]) if "tokens" in entry else None,
        )
    except (TypeError, ValueError) as exc:
        raise LogParseError(str(exc), line_number) from None


def read_log(path: str) -> list[Message]:
    """Parse a trajectory log. Raises LogParseError with the 1-based line
    number on the first bad line; an empty file is an error at line 1."""
    messages: list[Message] = []
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not any(line.strip() for line in lines):
        raise LogParseError("empty trajectory log", 1)
    for idx, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
        except json.JSONDecodeError as exc:
            raise LogParseError(f"invalid JSON ({exc.msg})", idx) from None
        if not isinstance(entry, dict):
            raise LogParseError("log line is not a JSON object", idx)
        messages.append(message_from_log_entry(entry, idx))
    return messages


def rebuild_trajectory(entries: Iterable[Message]) -> Trajectory:
    """Replay an append-ordered log into a trajectory. A step regression in
    the stream marks a backtrack and is replayed as a truncation."""
    trajectory = Trajectory()
    for message in entries:
        if trajectory.messages and message.step_index < trajectory.messages[-1].step_index:
            trajectory = truncate_to_step(trajectory, message.step_index)
        trajectory = append_message(trajectory, message)
        if message.role is Role.PLAN:
            trajectory = trajectory.with_plan(message.content)
    last_answer = trajectory.last_message(Role.ANSWER)
    if last_answer is not None and last_answer.content:
        trajectory = trajectory.with_status(TrajectoryStatus.ANSWERED)
    return trajectory


class TrajectoryLogWriter:
    """Append-order log writer: every message lands as one JSON line, in the
    order it was appended, including messages a later backtrack discards."""

    def __init__(self, path: str) -> None:
        self.path = path
        self._fh = open(path, "w", encoding="utf-8")

    def append(self, message: Message) -> None:
        self._fh.write(message_to_log_line(message) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "TrajectoryLogWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

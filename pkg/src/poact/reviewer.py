"""Reasoning-path review: executor exceptions become error-role guidance,
queries and final answers get rewritten, repeated-error loops trigger
backtracking, and trigger-matched code actions are rejected before they run.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum

from .backend import BackendError, ChatRequest, complete
from .conversation import Message, Role, Trajectory

#: Error class used for reviewer-injected hint messages.
REVIEW_HINT_CLASS = "review-hint"


class ReviewerError(Exception):
    """Base class for reviewer configuration failures."""


@dataclass(frozen=True)
class ErrorRecord:
    """A classified executor failure with the guidance the agent will see."""

    step_index: int
    error_class: str
    message: str
    cause_hint: str
    solution_hint: str

    def __post_init__(self) -> None:
        if not self.cause_hint or not self.solution_hint:
            raise ValueError("cause_hint and solution_hint must be non-empty")


@dataclass(frozen=True)
class Trigger:
    """A code-action tripwire: keyword triggers match a substring of the code;
    model triggers ask a backend to judge a predicate against it."""

    id: str
    kind: str  # "keyword" | "model"
    hint: str
    pattern: str = ""
    prompt: str = ""

    def __post_init__(self) -> None:
        if self.kind not in ("keyword", "model"):
            raise ValueError(f"trigger {self.id!r}: unknown kind {self.kind!r}")
        if self.kind == "keyword" and not self.pattern:
            raise ValueError(f"trigger {self.id!r}: keyword triggers need a pattern")
        if self.kind == "model" and not self.prompt:
            raise ValueError(f"trigger {self.id!r}: model triggers need a prompt")


class Verdict(str, Enum):
    ACCEPT = "accept"
    REJECT = "reject"
    BACKTRACK = "backtrack"
    REVISE_PLAN = "revise_plan"


@dataclass(frozen=True)
class ReviewDecision:
    verdict: Verdict
    hint: str = ""
    to_step: int | None = None
    audit: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.verdict is Verdict.BACKTRACK and self.to_step is None:
            raise ValueError("backtrack decisions need a target step")


@dataclass(frozen=True)
class RewriteRules:
    """Query expansions by task type and the ordered answer-format rules.
    Rules are pure text transforms or a single backend call; they may change
    how a number is written, never what it is worth."""

    query_expansions: dict[str, list[str]] = field(default_factory=dict)
    answer_format_rules: tuple[str, ...] = (
        "decimal-places",
        "plain-number-format",
        "keyword-retention",
    )


_KNOWN_ANSWER_RULES = {"decimal-places", "plain-number-format", "keyword-retention"}


# ---------------------------------------------------------------------------
# Error-message formatting (also the parse side used by replay --check)
# ---------------------------------------------------------------------------


def format_error_content(error_class: str, message: str, cause: str, solution: str) -> str:
    return (
        f"Error [{error_class}]: {message}\n"
        f"Possible cause: {cause}\n"
        f"Suggested solution: {solution}"
    )


_ERROR_CONTENT_RE = re.compile(
    r"^Error \[(?P<cls>[^\]]+)\]: (?P<msg>.*?)(?:\nPossible cause:|\Z)", re.DOTALL
)


def parse_error_content(content: str) -> tuple[str, str]:
    """Recover (error_class, message) from an error message's content.
    Foreign content comes back as class 'unknown'."""
    match = _ERROR_CONTENT_RE.match(content)
    if not match:
        return "unknown", content
    return match.group("cls"), match.group("msg")


def normalize_error_message(message: str) -> str:
    """Collapse the superficial variation between logically identical errors:
    memory addresses, line numbers, whitespace runs."""
    text = re.sub(r"0x[0-9a-fA-F]+", "0x?", message)
    text = re.sub(r"\bline \d+\b", "line ?", text)
    return " ".join(text.split())


# ---------------------------------------------------------------------------
# Exception handling
# ---------------------------------------------------------------------------


def load_error_rules(path: str) -> dict[str, dict[str, str]]:
    """Error-rule table: JSON map error_class -> {cause, solution}, with a
    required "default" entry so every failure maps to guidance."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ReviewerError(f"{path}: error-rule table must be a JSON object")
    if "default" not in raw:
        raise ReviewerError(f"{path}: error-rule table is missing the required 'default' entry")
    for cls, rule in raw.items():
        if not isinstance(rule, dict) or not rule.get("cause") or not rule.get("solution"):
            raise ReviewerError(f"{path}: rule {cls!r} needs non-empty 'cause' and 'solution'")
    return raw


def error_record_for(failure, step: int, rule_table: dict[str, dict[str, str]]) -> ErrorRecord:
    """Match a failure against the rule table (default rule guarantees a hit)."""
    error_class = getattr(failure, "error_class", None) or "unknown"
    message = getattr(failure, "message", None) or "(no message)"
    rule = rule_table.get(error_class) or rule_table["default"]
    return ErrorRecord(
        step_index=step,
        error_class=error_class,
        message=message,
        cause_hint=rule["cause"],
        solution_hint=rule["solution"],
    )


def handle_exception(failure, step: int, rule_table: dict[str, dict[str, str]]) -> Message:
    """Wrap an executor failure as an error-role message carrying the original
    message plus cause/solution guidance. Never raises: the loop continues."""
    record = error_record_for(failure, step, rule_table)
    content = format_error_content(
        record.error_class, record.message, record.cause_hint, record.solution_hint
    )
    return Message(role=Role.ERROR, content=content, step_index=step)


def make_hint_message(hint: str, step: int) -> Message:
    """A reviewer hint entering the dialogue history as an error-role message."""
    content = format_error_content(
        REVIEW_HINT_CLASS,
        hint,
        "The reviewer intervened on the reasoning path.",
        "Follow the guidance above and take a different approach.",
    )
    return Message(role=Role.ERROR, content=content, step_index=step)


# ---------------------------------------------------------------------------
# Query & answer rewrite
# ---------------------------------------------------------------------------


def rewrite_query(query: str, task_type: str, rules: RewriteRules, backend=None) -> str:
    """Extend the query with the task type's knowledge snippets. When a
    backend assists, its output is only used if the original query survives
    verbatim inside it; otherwise the rule-only expansion stands."""
    snippets = rules.query_expansions.get(task_type, [])
    if snippets:
        bullet_list = "\n".join(f"- {s}" for s in snippets)
        expanded = f"{query}\n\nRelevant background:\n{bullet_list}"
    else:
        expanded = query
    if backend is not None:
        try:
            response = complete(
                backend,
                ChatRequest(
                    turns=(
                        (
                            "system",
                            "Expand the user's question with clarifying context. "
                            "Keep the original question verbatim.",
                        ),
                        ("user", expanded),
                    )
                ),
            )
            if query in response.text:
                return response.text
        except BackendError:
            pass
    return expanded


_NUMERIC_TOKEN_RE = re.compile(r"\d+(?:,\d{3})*(?:\.\d+)?")
_DECIMAL_TOKEN_RE = re.compile(r"\d+(?:,\d{3})*\.\d+")
_SEPARATED_INT_RE = re.compile(r"\d{1,3}(?:,\d{3})+(?:\.\d+)?")

_WORD_NUMBERS = {
    "one": 1, "two": 2, "three": 3, "four": 4, "five": 5,
    "six": 6, "seven": 7, "eight": 8, "nine": 9, "ten": 10,
}


def parse_numeric_values(text: str) -> list[float]:
    """Every maximal numeric token in the text, as values (separators ignored)."""
    return [float(tok.replace(",", "")) for tok in _NUMERIC_TOKEN_RE.findall(text)]


def requested_precision(query: str) -> int | None:
    """The decimal-place count the query explicitly asks for, if any."""
    match = re.search(r"(\d+)\s+decimal\s+place", query, re.IGNORECASE)
    if match:
        return int(match.group(1))
    match = re.search(
        r"\b(one|two|three|four|five|six|seven|eight|nine|ten)\s+decimal\s+place",
        query,
        re.IGNORECASE,
    )
    if match:
        return _WORD_NUMBERS[match.group(1).lower()]
    return None


def _apply_decimal_places(answer: str, places: int) -> str:
    def repl(match: re.Match) -> str:
        value = float(match.group(0).replace(",", ""))
        return f"{value:.{places}f}"

    return _DECIMAL_TOKEN_RE.sub(repl, answer)


def _strip_thousands_separators(answer: str) -> str:
    return _SEPARATED_INT_RE.sub(lambda m: m.group(0).replace(",", ""), answer)


def values_preserved(before: str, after: str, precision: int | None = None) -> bool:
    """Whether the numeric value multiset survived a rewrite, up to the
    explicitly requested precision."""
    def canon(values: list[float]) -> list[float]:
        if precision is None:
            return sorted(values)
        return sorted(round(v, precision) for v in values)

    return canon(parse_numeric_values(before)) == canon(parse_numeric_values(after))


def rewrite_answer(query: str, answer: str, rules: RewriteRules, backend=None) -> str:
    """Apply the answer-format rules in order. Numeric values are preserved up
    to the precision the query asks for; a backend polish pass is discarded
    outright if it would change any value."""
    if not answer:
        raise ValueError("rewrite_answer needs a non-empty answer")
    result = answer
    precision = requested_precision(query)
    for rule in rules.answer_format_rules:
        if rule == "decimal-places":
            if precision is not None:
                result = _apply_decimal_places(result, precision)
        elif rule == "plain-number-format":
            result = _strip_thousands_separators(result)
        elif rule == "keyword-retention":
            if backend is None:
                continue
            try:
                response = complete(
                    backend,
                    ChatRequest(
                        turns=(
                            (
                                "system",
                                "Polish the answer for clarity. Keep every fact, keyword "
                                "and number exactly as given; reply with the answer only.",
                            ),
                            ("user", f"Question: {query}\nAnswer: {result}"),
                        )
                    ),
                )
                candidate = response.text.strip()
                if candidate and values_preserved(result, candidate, precision):
                    result = candidate
            except BackendError:
                pass
    return result if result.strip() else answer


# ---------------------------------------------------------------------------
# Code action reflection
# ---------------------------------------------------------------------------


def detect_repeated_error(trajectory: Trajectory, window: int = 2) -> int | None:
    """Find a repeated-error loop: the last `window` error messages sit on
    consecutive steps and share error class + normalized message. Returns the
    step before the first occurrence, never below 0."""
    if window < 2:
        raise ValueError("window must be >= 2")
    errors = [
        (m.step_index, parse_error_content(m.content))
        for m in trajectory.messages
        if m.role is Role.ERROR
    ]
    if len(errors) < window:
        return None
    tail = errors[-window:]
    steps = [step for step, _ in tail]
    if any(steps[i + 1] != steps[i] + 1 for i in range(len(steps) - 1)):
        return None
    signatures = {(cls, normalize_error_message(msg)) for _, (cls, msg) in tail}
    if len(signatures) != 1:
        return None
    return max(0, steps[0] - 1)


def _hints_since_last_plan(trajectory: Trajectory) -> int:
    count = 0
    for m in trajectory.messages:
        if m.role is Role.PLAN:
            count = 0
        elif m.role is Role.ERROR and parse_error_content(m.content)[0] == REVIEW_HINT_CLASS:
            count += 1
    return count


def reflect_code(
    code: str,
    trajectory: Trajectory,
    triggers: list[Trigger],
    backend=None,
    window: int = 2,
) -> ReviewDecision:
    """Review a parsed-but-unexecuted code action.

    Keyword triggers run first (cheap), then model triggers (a failing model
    trigger is skipped, fail-open, and noted in the audit). A repeated-error
    loop then forces a backtrack; if this plan already needed a backtrack, the
    repeat escalates to a plan revision instead.
    """
    audit: list[str] = []
    for trigger in triggers:
        if trigger.kind != "keyword":
            continue
        if trigger.pattern in code:
            return ReviewDecision(
                verdict=Verdict.REJECT,
                hint=trigger.hint,
                audit=tuple(audit + [f"keyword trigger {trigger.id!r} matched"]),
            )
    for trigger in triggers:
        if trigger.kind != "model":
            continue
        if backend is None:
            audit.append(f"model trigger {trigger.id!r} skipped: no backend")
            continue
        try:
            response = complete(
                backend,
                ChatRequest(
                    turns=(
                        ("system", trigger.prompt + "\nAnswer yes or no."),
                        ("user", code),
                    )
                ),
            )
            if response.text.strip().lower().startswith("yes"):
                return ReviewDecision(
                    verdict=Verdict.REJECT,
                    hint=trigger.hint,
                    audit=tuple(audit + [f"model trigger {trigger.id!r} matched"]),
                )
        except BackendError as exc:
            audit.append(f"model trigger {trigger.id!r} skipped: {exc}")

    target = detect_repeated_error(trajectory, window)
    if target is not None:
        last_error = [m for m in trajectory.messages if m.role is Role.ERROR][-1]
        cls, msg = parse_error_content(last_error.content)
        hint = (
            f"The last {window} steps failed with the same error "
            f"[{cls}]: {normalize_error_message(msg)}. "
            f"Do not repeat that code action; solve the step differently."
        )
        if _hints_since_last_plan(trajectory) > 0:
            return ReviewDecision(
                verdict=Verdict.REVISE_PLAN,
                hint=hint + " Revise the plan to route around this obstacle.",
                audit=tuple(audit + ["repeated error after an earlier intervention"]),
            )
        return ReviewDecision(
            verdict=Verdict.BACKTRACK,
            hint=hint,
            to_step=target,
            audit=tuple(audit + [f"repeated error window={window}"]),
        )
    return ReviewDecision(verdict=Verdict.ACCEPT, audit=tuple(audit))


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------


def load_triggers(path: str) -> list[Trigger]:
    """Triggers file: JSON array with id, kind ("keyword"|"model"),
    pattern or prompt, hint."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise ReviewerError(f"{path}: triggers file must be a JSON array")
    triggers = []
    for i, entry in enumerate(raw):
        try:
            triggers.append(
                Trigger(
                    id=entry["id"],
                    kind=entry["kind"],
                    hint=entry["hint"],
                    pattern=entry.get("pattern", ""),
                    prompt=entry.get("prompt", ""),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ReviewerError(f"{path}: bad trigger entry {i}: {exc}") from None
    return triggers


def load_rewrite_rules(path: str) -> RewriteRules:
    """Rewrite rules file: {"query_expansions": {task_type: [snippets]},
    "answer_format_rules": [rule names]}."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    expansions = raw.get("query_expansions", {})
    rule_names = tuple(raw.get("answer_format_rules", RewriteRules().answer_format_rules))
    unknown = [r for r in rule_names if r not in _KNOWN_ANSWER_RULES]
    if unknown:
        raise ReviewerError(f"{path}: unknown answer format rules: {unknown}")
    return RewriteRules(query_expansions=expansions, answer_format_rules=rule_names)

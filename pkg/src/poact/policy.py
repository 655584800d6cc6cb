"""Reasoning-policy selection and system-prompt assembly.

The controller picks which expert the next completion should speak as (Plan,
Thought, or Code) from the trajectory state alone, then splices the agent
policy, the retrieved action space, and the import whitelist into that
policy's template.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Mapping

from .conversation import Role, Trajectory, TrajectoryStatus


class StepPolicy(str, Enum):
    PLAN = "plan"
    THOUGHT = "thought"
    CODE = "code"


#: The full placeholder vocabulary templates may use, exactly `<<name>>`.
PLACEHOLDER_NAMES = (
    "agent_policy",
    "tool_descriptions",
    "few_shots",
    "authorized_imports",
)

#: Injected when a section has nothing to say, so templates never keep a bare
#: placeholder behind.
EMPTY_SECTION = "(none)"

_PLACEHOLDER_RE = re.compile(r"<<(\w+)>>")

#: Template file names expected in a prompt directory.
TEMPLATE_FILES = {
    StepPolicy.PLAN: "plan.tmpl",
    StepPolicy.THOUGHT: "thought.tmpl",
    StepPolicy.CODE: "code.tmpl",
}
AGENT_POLICY_FILE = "agent_policy.tmpl"


class PolicyError(Exception):
    """Base class for policy-controller failures."""


class UnknownPolicy(PolicyError):
    """No template registered for the requested policy."""


class UnresolvedPlaceholder(PolicyError):
    """A template placeholder has no provided value."""

    def __init__(self, name: str) -> None:
        super().__init__(f"no value for placeholder <<{name}>>")
        self.name = name


class PolicyMismatch(PolicyError):
    """A template was registered under a different policy than it declares."""


class InvalidState(PolicyError):
    """next_policy was asked about a trajectory with no next move."""


@dataclass(frozen=True)
class PromptTemplate:
    policy: StepPolicy
    body: str

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for name in _PLACEHOLDER_RE.findall(self.body):
            if name in seen:
                raise ValueError(f"placeholder <<{name}>> appears more than once")
            seen.add(name)

    @property
    def placeholders(self) -> tuple[str, ...]:
        return tuple(_PLACEHOLDER_RE.findall(self.body))


@dataclass(frozen=True)
class AgentPolicy:
    """The global prompt section defining what query/thought/code/observation
    mean in the dialogue history."""

    body: str

    def __post_init__(self) -> None:
        if not self.body.strip():
            raise ValueError("agent policy text must be non-empty")


class PromptLibrary:
    """Write-once-then-read registry of step-policy templates."""

    def __init__(self) -> None:
        self._templates: dict[StepPolicy, PromptTemplate] = {}

    def register(self, policy: StepPolicy, template: PromptTemplate) -> None:
        if template.policy is not policy:
            raise PolicyMismatch(
                f"template declares policy {template.policy.value!r}, "
                f"registered under {policy.value!r}"
            )
        self._templates[policy] = template

    def get(self, policy: StepPolicy) -> PromptTemplate:
        try:
            return self._templates[policy]
        except KeyError:
            raise UnknownPolicy(f"no template registered for policy {policy!r}") from None

    def policies(self) -> tuple[StepPolicy, ...]:
        return tuple(self._templates)


def register_template(library: PromptLibrary, policy: StepPolicy, template: PromptTemplate) -> None:
    library.register(policy, template)


def substitute_placeholders(body: str, values: Mapping[str, str]) -> str:
    """Replace every `<<name>>` in `body` with its value, verbatim. Empty
    values become the empty-section marker; unknown names raise."""

    def repl(match: re.Match) -> str:
        name = match.group(1)
        if name not in values:
            raise UnresolvedPlaceholder(name)
        value = values[name]
        return value if value.strip() else EMPTY_SECTION

    return _PLACEHOLDER_RE.sub(repl, body)


def assemble_system_prompt(
    policy: StepPolicy,
    agent_policy: AgentPolicy,
    tool_descriptions: str,
    few_shots: str,
    authorized_imports: list[str] | tuple[str, ...],
    library: PromptLibrary,
) -> str:
    """Build the full system prompt for one reasoning step."""
    template = library.get(policy)
    values = {
        "agent_policy": agent_policy.body,
        "tool_descriptions": tool_descriptions,
        "few_shots": few_shots,
        "authorized_imports": ", ".join(authorized_imports),
    }
    return substitute_placeholders(template.body, values)


def next_policy(trajectory: Trajectory) -> StepPolicy:
    """Decide the policy for the next completion.

    Plan fires while no global plan exists or the reviewer raised the
    plan-revision flag. Otherwise the open round dictates: a closed (or not
    yet opened) round starts with Thought, a thought without code needs Code.
    """
    if trajectory.status is not TrajectoryStatus.RUNNING:
        raise InvalidState(f"trajectory status is {trajectory.status.value}")
    if trajectory.global_plan is None or trajectory.revise_plan_pending:
        return StepPolicy.PLAN
    step = trajectory.step_count
    roles = trajectory.roles_at(step)
    if trajectory.step_is_closed(step) or Role.THOUGHT not in roles:
        return StepPolicy.THOUGHT
    if Role.CODE not in roles:
        return StepPolicy.CODE
    raise InvalidState(
        f"step {step} has an unexecuted code action; the loop must record its result first"
    )


def load_prompt_library(prompt_dir: str | Path) -> tuple[PromptLibrary, AgentPolicy]:
    """Load the shipped template set from a prompt directory."""
    prompt_dir = Path(prompt_dir)
    library = PromptLibrary()
    for policy, filename in TEMPLATE_FILES.items():
        path = prompt_dir / filename
        if not path.is_file():
            raise PolicyError(f"missing template file: {path}")
        library.register(policy, PromptTemplate(policy, path.read_text(encoding="utf-8")))
    agent_path = prompt_dir / AGENT_POLICY_FILE
    if not agent_path.is_file():
        raise PolicyError(f"missing template file: {agent_path}")
    return library, AgentPolicy(agent_path.read_text(encoding="utf-8"))


def default_prompt_dir() -> Path:
    return Path(__file__).parent / "prompts"

"""Shared fixture builders: scripted happy-path runs derived from generated
tasks, plus randomized anomaly scripts for the policy-sequence checks.

Script matchers are anchored to phrases unique to each step-policy template,
so a driver asking for the wrong policy fails with MatcherMismatch instead of
silently consuming the wrong completion.
"""

from __future__ import annotations

import json
import random

from poact.backend import ScriptedBackend, ScriptStep
from poact.bench import SyntheticTask, TaskSuite, generate_tasks, runtime_for_suite
from poact.reviewer import Trigger
from poact.runner import Runtime

PLAN_MARKER = "list of Plans"
THOUGHT_MARKER = "Always provide a <thought></thought> sequence"
CODE_MARKER = "Always provide a <code></code> sequence"

#: Keyword trigger used by fixtures that force a rejection.
FORBIDDEN_MARKER = "FORBIDDEN_ACTION"
REJECT_TRIGGER = Trigger(
    id="fixture-forbidden",
    kind="keyword",
    pattern=FORBIDDEN_MARKER,
    hint="That code action is off the expected path; use the provided tools.",
)


def plan_step(plan_text: str) -> ScriptStep:
    return ScriptStep(match=PLAN_MARKER, response=plan_text)


def thought_step(text: str) -> ScriptStep:
    return ScriptStep(match=THOUGHT_MARKER, response=f"<thought>{text}</thought>")


def code_step(code: str) -> ScriptStep:
    return ScriptStep(match=CODE_MARKER, response=f"<code>{code}</code>")


def round_steps(thought: str, code: str) -> list[ScriptStep]:
    return [thought_step(thought), code_step(code)]


def chain_code_lines(task: SyntheticTask) -> list[str]:
    """One code action per hop, threading results through session variables
    the way the join chain implies."""
    trace = task.ground_truth_trace
    lines: list[str] = []
    for i, (tool, arg) in enumerate(trace):
        var = f"r{i + 1}"
        if i == 0:
            expr = json.dumps(arg)
        elif tool == "get_court_info":
            expr = f'r{i}["court_name"]'
        elif tool == "get_court_code_details":
            expr = f'r{i}["court_code"]'
        else:
            expr = f"r{i}"
        lines.append(f"{var} = {tool}({expr})\nprint({var})")
    return lines


def task_script(task: SyntheticTask) -> list[ScriptStep]:
    """The happy-path script for one generated task: a plan, one thought/code
    round per hop, and a terminal final-answer round."""
    trace = task.ground_truth_trace
    plan_lines = [
        f"{i + 1}. Use {tool} to advance the lookup chain." for i, (tool, _) in enumerate(trace)
    ]
    plan_lines.append(f"{len(trace) + 1}. Return the result with final_answer.")
    steps = [plan_step("\n".join(plan_lines))]
    for (tool, _), code in zip(trace, chain_code_lines(task)):
        steps += round_steps(
            f"Call {tool} next. The tool {tool} advances the lookup chain for this task.", code
        )
    keyword = task.expected_keywords[0]
    steps += round_steps(
        "The last observation contains the requested value; return it with final_answer.",
        f'final_answer("The answer is {keyword}.")',
    )
    return steps


def scripted_runtime(
    suite: TaskSuite,
    steps: list[ScriptStep],
    **overrides,
) -> tuple[Runtime, ScriptedBackend]:
    backend = ScriptedBackend(steps)
    overrides.setdefault("triggers", [REJECT_TRIGGER])
    runtime = runtime_for_suite(suite, backend, **overrides)
    return runtime, backend


def three_hop_fixture(seed: int = 11) -> tuple[TaskSuite, SyntheticTask, list[ScriptStep]]:
    suite = generate_tasks(seed, {3: 1})
    task = suite.tasks[0]
    return suite, task, task_script(task)


# ---------------------------------------------------------------------------
# Randomized anomaly scripts (policy-sequence fixtures)
# ---------------------------------------------------------------------------


def _fail_round(uid: str) -> list[ScriptStep]:
    return round_steps(
        f"Try reading the staged value {uid}.",
        f"print(missing_value_{uid})",
    )


def _plain_round(uid: str) -> list[ScriptStep]:
    return round_steps(f"Record checkpoint {uid}.", f'print("checkpoint {uid}")')


def random_anomaly_script(rng: random.Random) -> list[ScriptStep]:
    """A script whose run exercises a random mix of clean rounds, rejections,
    one-off failures, repeated-error backtracks, and an escalation to plan
    revision. Matchers pin every completion to its expected policy."""
    steps: list[ScriptStep] = [plan_step("1. Probe the session.\n2. Answer with final_answer.")]
    for i in range(rng.randint(0, 2)):
        steps += _plain_round(f"warmup{i}")

    scenario = rng.choice(["clean", "reject", "single_fail", "backtrack", "backtrack_revise"])
    if scenario == "reject":
        steps += round_steps(
            "Attempt a shortcut outside the tools.", f'print("{FORBIDDEN_MARKER}")'
        )
        steps += _plain_round("after-reject")
    elif scenario == "single_fail":
        steps += _fail_round(f"solo{rng.randint(0, 9)}")
        steps += _plain_round("after-fail")
    elif scenario in ("backtrack", "backtrack_revise"):
        uid = f"loop{rng.randint(0, 9)}"
        steps += _fail_round(uid)
        steps += _fail_round(uid)
        # Consumed by the backtrack decision; never executes.
        steps += _plain_round("sacrificial")
        steps += _plain_round("recovered")
        if scenario == "backtrack_revise":
            uid2 = f"again{rng.randint(0, 9)}"
            steps += _fail_round(uid2)
            steps += _fail_round(uid2)
            # Consumed by the revise_plan decision, then the new plan.
            steps += _plain_round("sacrificial2")
            steps.append(plan_step("1. Revised route.\n2. Answer with final_answer."))
            steps += _plain_round("post-revise")
    for i in range(rng.randint(0, 1)):
        steps += _plain_round(f"tail{i}")
    steps += round_steps(
        "Wrap up and answer.",
        'final_answer("fixture complete")',
    )
    return steps


def validate_policy_sequence(events: list[tuple]) -> None:
    """Assert the driver's policy stream matches Plan (Thought Code)+ with
    Plan re-entries only immediately after a revise_plan decision."""
    from poact.policy import StepPolicy
    from poact.reviewer import Verdict

    policies = [p for kind, p in events if kind == "policy"]
    assert policies, "no policies were emitted"
    assert policies[0] is StepPolicy.PLAN, f"first policy was {policies[0]}"

    previous = None
    for kind, payload in events:
        if kind == "policy":
            if payload is StepPolicy.PLAN and previous is not None:
                assert (
                    previous[0] == "decision" and previous[1].verdict is Verdict.REVISE_PLAN
                ), f"Plan re-entry not preceded by revise_plan (preceded by {previous})"
            if payload is StepPolicy.CODE:
                assert previous == ("policy", StepPolicy.THOUGHT), (
                    f"Code not preceded by Thought (preceded by {previous})"
                )
        previous = (kind, payload)

    # Every Thought is eventually followed by a Code before the next Thought.
    seq = [p.value for p in policies]
    i = 0
    while i < len(seq):
        if seq[i] == "thought":
            assert i + 1 < len(seq) and seq[i + 1] == "code", f"dangling thought at {i}: {seq}"
            i += 2
        else:
            assert seq[i] == "plan", f"unexpected policy {seq[i]}"
            i += 1

"""Loop drivers.

`run_poact` is the dual-control loop: policy-switched completions, a
retrieval-scoped action space re-selected every step, reviewed code actions,
and checkpointed backtracking. The three baselines (ReAct, plan-and-solve,
plan-and-execute) share the same tool registry, few-shot budget, backend and
executor so comparisons isolate the controllers.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .backend import ChatRequest, complete
from .conversation import (
    HistoryFormat,
    MalformedOutput,
    Message,
    NestedTag,
    Role,
    Trajectory,
    TrajectoryLogWriter,
    TrajectoryStatus,
    append_message,
    parse_model_output,
    render_history,
    truncate_to_step,
)
from .executor import ExecFailure, Executor
from .policy import (
    AgentPolicy,
    PromptLibrary,
    StepPolicy,
    assemble_system_prompt,
    next_policy,
    substitute_placeholders,
)
from .retrieval import (
    Registry,
    RetrievalConfig,
    full_action_space,
    item_key,
    render_few_shots,
    render_tool_descriptions,
    retrieval_query,
    retrieve,
    select_action_space,
)
from .reviewer import (
    ReviewDecision,
    RewriteRules,
    Trigger,
    Verdict,
    handle_exception,
    make_hint_message,
    reflect_code,
    rewrite_answer,
    rewrite_query,
)

#: Last-resort rule table so a runtime missing its rules file still produces
#: total error guidance.
FALLBACK_ERROR_RULES = {
    "default": {
        "cause": "The code action hit an unexpected condition.",
        "solution": "Read the error message, adjust the code, and try a different approach.",
    }
}


@dataclass
class Runtime:
    """Everything a loop driver needs, built once per run configuration."""

    backend: object
    library: PromptLibrary
    agent_policy: AgentPolicy
    tool_registry: Registry
    shot_registry: Registry
    provider: object
    executor: Executor
    reranker: object | None = None
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    selector_enabled: bool = True
    triggers: list[Trigger] = field(default_factory=list)
    error_rules: dict = field(default_factory=lambda: dict(FALLBACK_ERROR_RULES))
    rewrite_rules: RewriteRules = field(default_factory=RewriteRules)
    qar_enabled: bool = True
    car_enabled: bool = True
    llm_rewrite: bool = False
    error_window: int = 2
    authorized_imports: list[str] = field(default_factory=list)
    step_limit: int = 20
    exec_timeout: float = 10.0
    temperature: float = 0.0
    baseline_templates: dict[str, str] = field(default_factory=dict)


@dataclass
class RunResult:
    """Outcome of driving one query through one strategy."""

    answer: str | None
    status: TrajectoryStatus
    trajectory: Trajectory
    events: list[tuple] = field(default_factory=list)
    completions: int = 0

    @property
    def policies(self) -> list[StepPolicy]:
        return [payload for kind, payload in self.events if kind == "policy"]

    @property
    def decisions(self) -> list[ReviewDecision]:
        return [payload for kind, payload in self.events if kind == "decision"]

    @property
    def usage(self):
        return self.trajectory.usage


def _append(traj: Trajectory, message: Message, log: TrajectoryLogWriter | None) -> Trajectory:
    traj = append_message(traj, message)
    if log is not None:
        log.append(message)
    return traj


def _action_space(rt: Runtime, traj: Trajectory) -> tuple[str, str, list[str]]:
    reranker = rt.reranker if rt.retrieval.rerank_enabled else None
    if rt.selector_enabled:
        return select_action_space(
            traj, rt.tool_registry, rt.shot_registry, rt.retrieval, rt.provider, reranker
        )
    return full_action_space(
        rt.tool_registry,
        rt.shot_registry,
        rt.retrieval.k_shots,
        retrieval_query(traj),
        rt.provider,
        rt.retrieval,
        reranker,
    )


def _all_tool_names(rt: Runtime) -> list[str]:
    return [t.name for t in rt.tool_registry.items]


def _completion_budget(rt: Runtime) -> int:
    # Plans and reviewer retries cost extra completions beyond thought/code
    # pairs; 4x the step limit bounds runaway loops without throttling
    # legitimate runs.
    return max(rt.step_limit * 4, 8)


def run_poact(
    rt: Runtime,
    query: str,
    task_type: str = "general",
    log_writer: TrajectoryLogWriter | None = None,
    trajectory_id: str = "query",
) -> RunResult:
    """Drive the full dual-control loop until a final answer or the step
    limit. Returns the (possibly rewritten) answer plus the trajectory and the
    ordered policy/decision event stream."""
    events: list[tuple] = []
    traj = Trajectory()
    effective_query = query
    if rt.qar_enabled:
        effective_query = rewrite_query(
            query, task_type, rt.rewrite_rules, rt.backend if rt.llm_rewrite else None
        )
    traj = _append(traj, Message(Role.QUERY, effective_query, 0), log_writer)

    session = rt.executor.open_session(trajectory_id, _all_tool_names(rt), rt.authorized_imports)
    answer: str | None = None
    completions = 0
    budget = _completion_budget(rt)
    try:
        while traj.status is TrajectoryStatus.RUNNING:
            policy = next_policy(traj)
            if completions >= budget or (
                policy is StepPolicy.THOUGHT and traj.step_count + 1 > rt.step_limit
            ):
                traj = traj.with_status(TrajectoryStatus.STEP_LIMIT)
                break

            tools_text, shots_text, visible = _action_space(rt, traj)
            rt.executor.set_visible_tools(session, visible)
            system = assemble_system_prompt(
                policy, rt.agent_policy, tools_text, shots_text, rt.authorized_imports, rt.library
            )
            request = ChatRequest(
                turns=(("system", system), *render_history(traj, HistoryFormat.CHAT)),
                temperature=rt.temperature,
            )
            response = complete(rt.backend, request)
            completions += 1
            traj = traj.add_prompt_tokens(response.usage.prompt_tokens, response.usage.estimated)
            events.append(("policy", policy))
            tokens = response.usage.completion_tokens

            if policy is StepPolicy.PLAN:
                try:
                    out = parse_model_output(response.text, StepPolicy.PLAN)
                except (MalformedOutput, NestedTag) as exc:
                    traj = _append(
                        traj,
                        handle_exception(
                            ExecFailure("malformed-output", str(exc)),
                            traj.step_count,
                            rt.error_rules,
                        ),
                        log_writer,
                    )
                    continue
                traj = traj.with_plan(out.thought)
                traj = _append(
                    traj,
                    Message(Role.PLAN, out.thought, traj.step_count, token_count=tokens),
                    log_writer,
                )
                continue

            if policy is StepPolicy.THOUGHT:
                step = traj.step_count + 1
                try:
                    out = parse_model_output(response.text, StepPolicy.THOUGHT)
                except (MalformedOutput, NestedTag) as exc:
                    traj = _append(
                        traj,
                        handle_exception(
                            ExecFailure("malformed-output", str(exc)), step, rt.error_rules
                        ),
                        log_writer,
                    )
                    continue
                traj = _append(
                    traj, Message(Role.THOUGHT, out.thought, step, token_count=tokens), log_writer
                )
                continue

            # Code policy: review first, then execute.
            step = traj.step_count
            try:
                out = parse_model_output(response.text, StepPolicy.CODE)
            except (MalformedOutput, NestedTag) as exc:
                traj = _append(
                    traj,
                    handle_exception(
                        ExecFailure("malformed-output", str(exc)), step, rt.error_rules
                    ),
                    log_writer,
                )
                continue

            if rt.car_enabled:
                decision = reflect_code(
                    out.code, traj, rt.triggers, rt.backend, window=rt.error_window
                )
                events.append(("decision", decision))
            else:
                decision = ReviewDecision(verdict=Verdict.ACCEPT)

            if decision.verdict is Verdict.REJECT:
                traj = _append(traj, make_hint_message(decision.hint, step), log_writer)
                continue
            if decision.verdict is Verdict.BACKTRACK:
                target = decision.to_step
                traj = truncate_to_step(traj, target)
                snapshot_step = target + 1
                if snapshot_step in session.step_snapshots:
                    rt.executor.restore_to_step(session, snapshot_step)
                traj = _append(traj, make_hint_message(decision.hint, target), log_writer)
                continue
            if decision.verdict is Verdict.REVISE_PLAN:
                traj = _append(traj, make_hint_message(decision.hint, step), log_writer)
                traj = traj.with_revise_flag()
                continue

            traj = _append(
                traj, Message(Role.CODE, out.code, step, token_count=tokens), log_writer
            )
            result = rt.executor.execute(session, out.code, step, rt.exec_timeout)
            if result.final_answer is not None:
                answer = result.final_answer
                if rt.qar_enabled and answer:
                    answer = rewrite_answer(
                        query, answer, rt.rewrite_rules, rt.backend if rt.llm_rewrite else None
                    )
                traj = _append(traj, Message(Role.ANSWER, answer, step), log_writer)
                if answer:
                    traj = traj.with_status(TrajectoryStatus.ANSWERED)
                else:
                    traj = traj.with_status(TrajectoryStatus.FAILED)
            elif result.failure is not None:
                traj = _append(
                    traj, handle_exception(result.failure, step, rt.error_rules), log_writer
                )
            else:
                stdout = result.stdout if result.stdout.strip() else "(empty)"
                traj = _append(traj, Message(Role.OBSERVATION, stdout, step), log_writer)
    finally:
        rt.executor.close_session(session)
    return RunResult(answer, traj.status, traj, events, completions)


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


def _baseline_system(rt: Runtime, name: str, query: str) -> str:
    """Assemble a baseline system prompt: full tool registry (no selector),
    the shared few-shot budget, same agent policy."""
    body = rt.baseline_templates.get(name)
    if body is None:
        raise ValueError(f"no baseline template loaded for {name!r}")
    tools = sorted(rt.tool_registry.items, key=item_key)
    reranker = rt.reranker if rt.retrieval.rerank_enabled else None
    shots = []
    if rt.retrieval.k_shots > 0 and rt.shot_registry.items:
        shots = retrieve(
            rt.shot_registry, query, rt.retrieval.k_shots, rt.retrieval, rt.provider, reranker
        )
    return substitute_placeholders(
        body,
        {
            "agent_policy": rt.agent_policy.body,
            "tool_descriptions": render_tool_descriptions(tools),
            "few_shots": render_few_shots(shots),
            "authorized_imports": ", ".join(rt.authorized_imports),
        },
    )


def _plain_error_message(failure: ExecFailure, step: int) -> Message:
    # Baselines see raw errors without the reviewer's cause/solution guidance.
    return Message(
        role=Role.ERROR,
        content=f"Error [{failure.error_class}]: {failure.message}",
        step_index=step,
    )


def run_react(
    rt: Runtime,
    query: str,
    task_type: str = "general",
    log_writer: TrajectoryLogWriter | None = None,
    trajectory_id: str = "react",
) -> RunResult:
    """ReAct baseline: one merged thought+code completion per round, full tool
    registry visible, no selector and no reviewer."""
    traj = Trajectory()
    traj = _append(traj, Message(Role.QUERY, query, 0), log_writer)
    system = _baseline_system(rt, "react", query)
    all_tools = _all_tool_names(rt)
    session = rt.executor.open_session(trajectory_id, all_tools, rt.authorized_imports)
    rt.executor.set_visible_tools(session, all_tools)
    answer: str | None = None
    completions = 0
    try:
        while traj.status is TrajectoryStatus.RUNNING:
            step = traj.step_count + 1
            if step > rt.step_limit or completions >= _completion_budget(rt):
                traj = traj.with_status(TrajectoryStatus.STEP_LIMIT)
                break
            request = ChatRequest(
                turns=(("system", system), *render_history(traj, HistoryFormat.CHAT)),
                temperature=rt.temperature,
            )
            response = complete(rt.backend, request)
            completions += 1
            traj = traj.add_prompt_tokens(response.usage.prompt_tokens, response.usage.estimated)
            tokens = response.usage.completion_tokens
            try:
                out = parse_model_output(response.text, StepPolicy.CODE)
            except (MalformedOutput, NestedTag) as exc:
                traj = _append(
                    traj, _plain_error_message(ExecFailure("malformed-output", str(exc)), step),
                    log_writer,
                )
                continue
            if out.thought:
                traj = _append(
                    traj, Message(Role.THOUGHT, out.thought, step, token_count=tokens), log_writer
                )
                tokens = None
            traj = _append(traj, Message(Role.CODE, out.code, step, token_count=tokens), log_writer)
            result = rt.executor.execute(session, out.code, step, rt.exec_timeout)
            if result.final_answer is not None:
                answer = result.final_answer
                traj = _append(traj, Message(Role.ANSWER, answer, step), log_writer)
                traj = (
                    traj.with_status(TrajectoryStatus.ANSWERED)
                    if answer
                    else traj.with_status(TrajectoryStatus.FAILED)
                )
            elif result.failure is not None:
                traj = _append(traj, _plain_error_message(result.failure, step), log_writer)
            else:
                stdout = result.stdout if result.stdout.strip() else "(empty)"
                traj = _append(traj, Message(Role.OBSERVATION, stdout, step), log_writer)
    finally:
        rt.executor.close_session(session)
    return RunResult(answer, traj.status, traj, [], completions)


_JSON_ARRAY_RE = re.compile(r"\[.*\]", re.DOTALL)
_JSON_OBJECT_RE = re.compile(r"\{.*\}", re.DOTALL)


def _extract_json(text: str, pattern: re.Pattern):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        match = pattern.search(text)
        if match is None:
            raise ValueError("no JSON payload in completion")
        return json.loads(match.group(0))


def _tool_call_code(tool: str, args: dict) -> str:
    """Synthesize the one-line code action a structured tool step compiles to."""
    if not re.fullmatch(r"[A-Za-z_]\w*", tool or ""):
        raise ValueError(f"invalid tool name {tool!r}")
    return f"print({tool}(**{args!r}))"


def run_plan_and_solve(
    rt: Runtime,
    query: str,
    task_type: str = "general",
    log_writer: TrajectoryLogWriter | None = None,
    trajectory_id: str = "ps",
) -> RunResult:
    """Plan-and-solve baseline: one upfront plan naming concrete tools and
    parameters, executed sequentially, then a single answer turn over all
    observations."""
    traj = Trajectory()
    traj = _append(traj, Message(Role.QUERY, query, 0), log_writer)
    system = _baseline_system(rt, "ps", query)
    all_tools = _all_tool_names(rt)
    session = rt.executor.open_session(trajectory_id, all_tools, rt.authorized_imports)
    rt.executor.set_visible_tools(session, all_tools)
    completions = 0
    try:
        request = ChatRequest(
            turns=(("system", system), *render_history(traj, HistoryFormat.CHAT)),
            temperature=rt.temperature,
        )
        response = complete(rt.backend, request)
        completions += 1
        traj = traj.add_prompt_tokens(response.usage.prompt_tokens, response.usage.estimated)
        traj = _append(
            traj,
            Message(Role.PLAN, response.text.strip() or "(empty plan)", 0,
                    token_count=response.usage.completion_tokens),
            log_writer,
        )
        try:
            plan_steps = _extract_json(response.text, _JSON_ARRAY_RE)
            if not isinstance(plan_steps, list):
                raise ValueError("plan is not a JSON array")
        except ValueError as exc:
            traj = _append(
                traj, _plain_error_message(ExecFailure("plan-parse", str(exc)), 0), log_writer
            )
            traj = traj.with_status(TrajectoryStatus.FAILED)
            return RunResult(None, traj.status, traj, [], completions)

        for index, entry in enumerate(plan_steps, start=1):
            if index > rt.step_limit:
                traj = traj.with_status(TrajectoryStatus.STEP_LIMIT)
                return RunResult(None, traj.status, traj, [], completions)
            try:
                code = _tool_call_code(entry.get("tool", ""), dict(entry.get("args", {})))
            except (ValueError, TypeError, AttributeError) as exc:
                traj = _append(
                    traj, _plain_error_message(ExecFailure("plan-step", str(exc)), index),
                    log_writer,
                )
                continue
            traj = _append(traj, Message(Role.CODE, code, index), log_writer)
            result = rt.executor.execute(session, code, index, rt.exec_timeout)
            if result.failure is not None:
                traj = _append(traj, _plain_error_message(result.failure, index), log_writer)
            else:
                stdout = result.stdout if result.stdout.strip() else "(empty)"
                traj = _append(traj, Message(Role.OBSERVATION, stdout, index), log_writer)

        final_request = ChatRequest(
            turns=(
                ("system", system),
                *render_history(traj, HistoryFormat.CHAT),
                ("user", "All planned steps have run. Answer the original question "
                         "using the observations above. Reply with the answer only."),
            ),
            temperature=rt.temperature,
        )
        final_response = complete(rt.backend, final_request)
        completions += 1
        traj = traj.add_prompt_tokens(
            final_response.usage.prompt_tokens, final_response.usage.estimated
        )
        answer = final_response.text.strip()
        traj = _append(
            traj,
            Message(Role.ANSWER, answer, traj.step_count,
                    token_count=final_response.usage.completion_tokens),
            log_writer,
        )
        status = TrajectoryStatus.ANSWERED if answer else TrajectoryStatus.FAILED
        traj = traj.with_status(status)
        return RunResult(answer or None, status, traj, [], completions)
    finally:
        rt.executor.close_session(session)


def run_plan_and_execute(
    rt: Runtime,
    query: str,
    task_type: str = "general",
    log_writer: TrajectoryLogWriter | None = None,
    trajectory_id: str = "pe",
) -> RunResult:
    """Plan-and-execute baseline: plan, run one step, replan from the results,
    repeat until the model returns a final answer."""
    traj = Trajectory()
    traj = _append(traj, Message(Role.QUERY, query, 0), log_writer)
    system = _baseline_system(rt, "pe", query)
    all_tools = _all_tool_names(rt)
    session = rt.executor.open_session(trajectory_id, all_tools, rt.authorized_imports)
    rt.executor.set_visible_tools(session, all_tools)
    answer: str | None = None
    completions = 0
    try:
        while traj.status is TrajectoryStatus.RUNNING:
            step = traj.step_count + 1
            if step > rt.step_limit or completions >= _completion_budget(rt):
                traj = traj.with_status(TrajectoryStatus.STEP_LIMIT)
                break
            request = ChatRequest(
                turns=(("system", system), *render_history(traj, HistoryFormat.CHAT)),
                temperature=rt.temperature,
            )
            response = complete(rt.backend, request)
            completions += 1
            traj = traj.add_prompt_tokens(response.usage.prompt_tokens, response.usage.estimated)
            tokens = response.usage.completion_tokens
            try:
                payload = _extract_json(response.text, _JSON_OBJECT_RE)
                if not isinstance(payload, dict):
                    raise ValueError("completion is not a JSON object")
            except ValueError as exc:
                traj = _append(
                    traj, _plain_error_message(ExecFailure("plan-parse", str(exc)), step),
                    log_writer,
                )
                continue
            if payload.get("final_answer") is not None:
                answer = str(payload["final_answer"])
                traj = _append(
                    traj, Message(Role.ANSWER, answer, step, token_count=tokens), log_writer
                )
                traj = (
                    traj.with_status(TrajectoryStatus.ANSWERED)
                    if answer
                    else traj.with_status(TrajectoryStatus.FAILED)
                )
                continue
            plan_text = json.dumps(payload.get("plan", []), ensure_ascii=False)
            traj = _append(
                traj, Message(Role.PLAN, plan_text or "[]", step, token_count=tokens), log_writer
            )
            action = payload.get("action") or {}
            try:
                code = _tool_call_code(action.get("tool", ""), dict(action.get("args", {})))
            except (ValueError, TypeError) as exc:
                traj = _append(
                    traj, _plain_error_message(ExecFailure("plan-step", str(exc)), step),
                    log_writer,
                )
                continue
            traj = _append(traj, Message(Role.CODE, code, step), log_writer)
            result = rt.executor.execute(session, code, step, rt.exec_timeout)
            if result.failure is not None:
                traj = _append(traj, _plain_error_message(result.failure, step), log_writer)
            else:
                stdout = result.stdout if result.stdout.strip() else "(empty)"
                traj = _append(traj, Message(Role.OBSERVATION, stdout, step), log_writer)
    finally:
        rt.executor.close_session(session)
    return RunResult(answer, traj.status, traj, [], completions)


STRATEGY_RUNNERS = {
    "poact": run_poact,
    "react": run_react,
    "ps": run_plan_and_solve,
    "pe": run_plan_and_execute,
}

"""Acceptance suite: one test per criterion, each at its stated tolerance,
printing one PASS line on success (run with `pytest tests/test_acceptance.py -v`).

The primary criteria run entirely against the in-memory wire-protocol fake;
the two sandbox criteria drive the real worker subprocess and are skipped if
the sandbox package is absent.
"""

from __future__ import annotations

import os
import random
import time
from pathlib import Path

import pytest

from poact.bench import evaluate_sr, generate_tasks
from poact.conversation import (
    Role,
    TrajectoryLogWriter,
    TrajectoryStatus,
    read_log,
    rebuild_trajectory,
)
from poact.executor import Executor, HostTool, SubprocessSandboxLauncher
from poact.policy import (
    UnresolvedPlaceholder,
    PromptTemplate,
    StepPolicy,
    assemble_system_prompt,
    default_prompt_dir,
    load_prompt_library,
)
from poact.retrieval import (
    HashEmbedding,
    Registry,
    RetrievalConfig,
    ToolSpec,
    full_action_space,
    index_registry,
    retrieve,
    select_action_space,
)
from poact.reviewer import (
    RewriteRules,
    Verdict,
    error_record_for,
    handle_exception,
    rewrite_answer,
    values_preserved,
)
from poact.runner import run_poact
from poact.executor import ExecFailure

from .helpers import (
    plan_step,
    random_anomaly_script,
    round_steps,
    scripted_runtime,
    three_hop_fixture,
    validate_policy_sequence,
)
from .test_retrieval import FixedVectors, _random_unit, brute_force_top_k
from .test_reviewer import RULE_TABLE

SANDBOX_SRC = Path(__file__).resolve().parents[1] / "sandbox" / "src"
sandbox_available = (SANDBOX_SRC / "sandbox_runtime" / "__init__.py").is_file()


def _report(name: str) -> None:
    print(f"PASS [{name}]")


# ---------------------------------------------------------------------------
# [PRIMARY] End-to-end scripted run
# ---------------------------------------------------------------------------


def test_end_to_end_scripted_three_hop(tmp_path):
    logs = []
    for run in range(3):
        started = time.monotonic()
        suite, task, steps = three_hop_fixture()
        rt, backend = scripted_runtime(suite, steps)
        path = tmp_path / f"run{run}.jsonl"
        with TrajectoryLogWriter(str(path)) as writer:
            result = run_poact(rt, task.query, task.task_type, writer, trajectory_id="e2e")
        elapsed = time.monotonic() - started

        assert result.status is TrajectoryStatus.ANSWERED
        assert evaluate_sr(result.answer, task.expected_keywords) == 1.0  # pass/fail SR
        assert elapsed < 5.0, f"run took {elapsed:.2f}s"
        assert backend.remaining == 0

        entries = read_log(str(path))
        plans = [m for m in entries if m.role is Role.PLAN]
        assert len(plans) == 1 and plans[0].step_index == 0  # exactly one initial Plan
        rounds = {
            m.step_index for m in entries if m.role is Role.OBSERVATION
        }
        assert len(rounds) >= 3  # >= 3 thought/code/observation rounds
        codes = [m for m in entries if m.role is Role.CODE]
        assert "final_answer" in codes[-1].content  # terminal final-answer action
        logs.append(path.read_bytes())
    assert logs[0] == logs[1] == logs[2]  # deterministic across 3 runs
    _report("end-to-end scripted 3-hop run")


# ---------------------------------------------------------------------------
# [PRIMARY] Policy sequence invariant
# ---------------------------------------------------------------------------


def test_policy_sequence_invariant_100_randomized_runs():
    suite = generate_tasks(3, {1: 1})
    violations = 0
    for seed in range(100):
        rng = random.Random(seed)
        steps = random_anomaly_script(rng)
        rt, backend = scripted_runtime(suite, steps)
        result = run_poact(rt, f"randomized run {seed}", "general", trajectory_id=f"r{seed}")
        assert result.status is TrajectoryStatus.ANSWERED
        assert backend.remaining == 0
        try:
            validate_policy_sequence(result.events)
        except AssertionError:
            violations += 1
    assert violations == 0
    _report("policy sequence invariant over 100 randomized trajectories")


# ---------------------------------------------------------------------------
# [PRIMARY] Retrieval oracle equivalence
# ---------------------------------------------------------------------------


def test_retrieval_oracle_equivalence_200_registries():
    rng = random.Random(2024)
    started = time.monotonic()
    mismatches = 0
    for trial in range(200):
        dim = rng.choice([8, 16, 32])
        n = rng.randint(1, 1000)
        items = tuple(
            ToolSpec(
                name=f"t{i:04d}",
                description="",
                input_example="",
                output_example="",
                callable_id=f"t{i:04d}",
                embedding=_random_unit(rng, dim),
            )
            for i in range(n)
        )
        query_vec = _random_unit(rng, dim)
        provider = FixedVectors(dim, {"q": query_vec})
        registry = Registry(items=items, dimension=dim)
        k = rng.randint(1, 20)
        got = [
            t.name
            for t in retrieve(registry, "q", k, RetrievalConfig(rerank_enabled=False), provider)
        ]
        expected = [t.name for t in brute_force_top_k(items, query_vec, k)]
        if got != expected:
            mismatches += 1
    elapsed = time.monotonic() - started
    assert mismatches == 0
    assert elapsed < 30.0, f"took {elapsed:.1f}s"
    _report(f"retrieval oracle equivalence, 200 registries in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# [PRIMARY] Backtracking correctness
# ---------------------------------------------------------------------------


def test_backtracking_correctness(tmp_path):
    failing = "ghost = 123\nprint(missing_acceptance_var)"
    steps = [plan_step("1. Stage. 2. Read. 3. Answer.")]
    steps += round_steps("Stage the anchor.", "anchor = 'acceptance'\nprint(anchor)")
    steps += round_steps("Read the staged value.", failing)
    steps += round_steps("Read the staged value again.", failing)
    steps += round_steps("Another attempt.", "print('sacrificial')")
    steps += round_steps(
        "Recover with prior-step state.",
        "print(anchor)\ntry:\n    print(ghost)\nexcept NameError:\n    print('ghost-cleared')",
    )
    steps += round_steps("Finish.", "final_answer('recovered ' + anchor)")

    suite = generate_tasks(5, {1: 1})
    rt, backend = scripted_runtime(suite, steps)
    path = tmp_path / "backtrack.jsonl"
    with TrajectoryLogWriter(str(path)) as writer:
        result = run_poact(rt, "acceptance backtrack", "general", writer, trajectory_id="abt")

    backtracks = [d for d in result.decisions if d.verdict is Verdict.BACKTRACK]
    assert len(backtracks) == 1 and backtracks[0].to_step == 1

    # Truncated trajectory equals the filter-by-step oracle.
    entries = read_log(str(path))
    regression = next(
        i for i in range(1, len(entries)) if entries[i].step_index < entries[i - 1].step_index
    )
    oracle = [m for m in entries[:regression] if m.step_index <= 1]
    replayed = rebuild_trajectory(entries[: regression + 1])
    assert list(replayed.messages[:-1]) == oracle

    # Restored session: prior-step variable visible, post-target binding gone.
    recovery = [m for m in result.trajectory.messages if m.role is Role.OBSERVATION][-1].content
    assert "acceptance" in recovery and "ghost-cleared" in recovery

    # Scripted recovery completes the task.
    assert result.status is TrajectoryStatus.ANSWERED
    assert result.answer == "recovered acceptance"
    assert backend.remaining == 0
    _report("backtracking correctness with session restoration")


# ---------------------------------------------------------------------------
# [PRIMARY] Token-budget direction
# ---------------------------------------------------------------------------


def test_token_budget_direction():
    prompt_tokens = {}
    for label, selector in (("selected", True), ("full", False)):
        suite, task, steps = three_hop_fixture()
        rt, _ = scripted_runtime(
            suite, steps, selector_enabled=selector,
            retrieval=RetrievalConfig(k_tools=5, k_shots=3),
        )
        result = run_poact(rt, task.query, task.task_type, trajectory_id=label)
        assert result.status is TrajectoryStatus.ANSWERED
        prompt_tokens[label] = result.usage.prompt_tokens
    assert len(suite.tool_specs) >= 30
    assert prompt_tokens["selected"] < prompt_tokens["full"]

    # Rendered tool-description length is monotone in k_tools.
    provider = HashEmbedding(dimension=64)
    registry = index_registry(suite.tool_specs, provider)
    shots = index_registry(suite.few_shots, provider)
    lengths = {}
    from poact.conversation import Message, Trajectory, append_message

    traj = append_message(Trajectory(), Message(Role.QUERY, suite.tasks[0].query, 0))
    for k in (5, 10):
        text, _, _ = select_action_space(
            traj, registry, shots,
            RetrievalConfig(k_tools=k, k_shots=0, rerank_enabled=False), provider,
        )
        lengths[k] = len(text)
    full_text, _, _ = full_action_space(registry, shots, 0, suite.tasks[0].query, provider)
    assert lengths[5] <= lengths[10] <= len(full_text)
    _report(
        f"token-budget direction (selected {prompt_tokens['selected']} < "
        f"full {prompt_tokens['full']} prompt tokens; render monotone in k)"
    )


# ---------------------------------------------------------------------------
# [PRIMARY] Reviewer totality and numeric preservation
# ---------------------------------------------------------------------------


def test_reviewer_totality_and_numeric_preservation():
    rng = random.Random(404)
    alphabet = "abcdefghij-_[](){}:;,. \n0123456789"
    violations = 0
    for _ in range(1000):
        cls = "".join(rng.choice("abcdefg-") for _ in range(rng.randint(0, 10)))
        text = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 80)))
        record = error_record_for(ExecFailure(cls, text), rng.randint(0, 30), RULE_TABLE)
        message = handle_exception(ExecFailure(cls, text), 1, RULE_TABLE)
        if not record.cause_hint or not record.solution_hint or message.role is not Role.ERROR:
            violations += 1
    assert violations == 0

    rules = RewriteRules()
    words = ["total", "value", "约", "sum", "is", "fine", "deposit", ";"]
    for _ in range(1000):
        parts = []
        for _ in range(rng.randint(1, 7)):
            parts.append(rng.choice(words))
            roll = rng.random()
            if roll < 0.45:
                parts.append(f"{rng.randint(0, 9999)}.{rng.randint(0, 99999):05d}")
            elif roll < 0.8:
                parts.append(f"{rng.randint(1000, 99999999):,d}")
        answer = " ".join(parts)
        places = rng.choice([None, None, 1, 2, 3, 4])
        query = f"please give {places} decimal places" if places else "no format request"
        rewritten = rewrite_answer(query, answer, rules)
        if not values_preserved(answer, rewritten, places) or not rewritten:
            violations += 1
    assert violations == 0
    _report("reviewer totality (1000 failures) and numeric preservation (1000 answers)")


# ---------------------------------------------------------------------------
# [PRIMARY] Prompt assembly
# ---------------------------------------------------------------------------


def test_prompt_assembly_randomized_payloads():
    library, agent = load_prompt_library(default_prompt_dir())
    rng = random.Random(77)
    for trial in range(50):
        tool_names = [f"tool_{rng.randint(0, 999):03d}_{i}" for i in range(rng.randint(1, 8))]
        tool_text = "\n".join(f"### {name}\ndoes {name}" for name in tool_names)
        shots = rng.choice(["", "Example: worked case", "multi\nline\nexample"])
        imports = rng.sample(["math", "json", "re", "statistics", "datetime"], rng.randint(0, 4))
        for policy in (StepPolicy.PLAN, StepPolicy.THOUGHT, StepPolicy.CODE):
            prompt = assemble_system_prompt(policy, agent, tool_text, shots, imports, library)
            assert "<<" not in prompt, f"unresolved placeholder in {policy} (trial {trial})"
            for name in tool_names:
                assert name in prompt
    mutated = PromptTemplate(StepPolicy.PLAN, "prefix <<oops>> suffix")
    from poact.policy import PromptLibrary

    broken = PromptLibrary()
    broken.register(StepPolicy.PLAN, mutated)
    with pytest.raises(UnresolvedPlaceholder):
        assemble_system_prompt(StepPolicy.PLAN, agent, "T", "S", [], broken)
    _report("prompt assembly over randomized payloads; unknown placeholder raises")


# ---------------------------------------------------------------------------
# [PRIMARY] SR metric
# ---------------------------------------------------------------------------


def test_sr_metric_unit_table():
    assert evaluate_sr("alpha and beta present", ["alpha", "beta"]) == 1.0
    assert evaluate_sr("only alpha here", ["alpha", "beta"]) == 0.5
    assert evaluate_sr("", ["alpha"]) == 0.0
    assert evaluate_sr("the  spaced   keyword", ["spaced keyword"]) == 1.0
    _report("SR metric unit table")


# ---------------------------------------------------------------------------
# [SECONDARY] Sandbox session semantics over the live wire protocol
# ---------------------------------------------------------------------------


def _subprocess_executor(tools=None, imports=("math",)):
    env = dict(os.environ)
    env["PYTHONPATH"] = str(SANDBOX_SRC) + os.pathsep + env.get("PYTHONPATH", "")
    launcher = SubprocessSandboxLauncher(env=env)
    return Executor(host_tools=tools or {}, launcher=launcher, default_timeout=8.0)


@pytest.mark.skipif(not sandbox_available, reason="secondary sandbox component not built")
def test_sandbox_session_semantics_live():
    started = time.monotonic()
    echo = HostTool("echo", lambda v: {"wrapped": v})
    ex = _subprocess_executor({"echo": echo})
    session = ex.open_session("acceptance", ["echo"], ["math"])
    try:
        # Variable persistence across two exec frames.
        assert ex.execute(session, "x = 21", 1).failure is None
        assert ex.execute(session, "print(x * 2)", 2).stdout == "42\n"
        # Import violation for a non-whitelisted module.
        result = ex.execute(session, "import socket", 3)
        assert result.failure is not None
        assert result.failure.error_class == "import-violation"
        # Final-answer short-circuit: nothing printed after the sentinel.
        result = ex.execute(session, "print('before')\nfinal_answer('done')\nprint('after')", 4)
        assert result.final_answer == "done"
        assert "after" not in result.stdout and "before" in result.stdout
        # Snapshot -> mutate -> restore round trip.
        ex.execute(session, "state = 'original'", 5)
        ex.execute(session, "state = 'mutated'", 6)
        ex.restore_to_step(session, 6)  # pre-exec snapshot of step 6
        assert ex.execute(session, "print(state)", 6).stdout == "original\n"
        # Proxy transparency: proxied result equals direct handler invocation.
        result = ex.execute(session, "print(echo('payload'))", 7)
        assert result.stdout.strip() == str(echo.handler("payload"))
    finally:
        ex.close_session(session)
    elapsed = time.monotonic() - started
    assert elapsed < 10.0, f"took {elapsed:.1f}s"
    _report(f"sandbox session semantics over the live wire in {elapsed:.1f}s")


@pytest.mark.skipif(not sandbox_available, reason="secondary sandbox component not built")
def test_sandbox_crash_recovery_live():
    ex = _subprocess_executor(imports=("os",))
    session = ex.open_session("crash", [], ["os"])
    try:
        assert ex.execute(session, "kept = 'survivor'", 1).failure is None
        result = ex.execute(session, "import os\nos._exit(13)", 2)
        assert result.failure is not None
        assert result.failure.error_class == "crash"
        # Respawned from the last checkpoint: prior-step variables intact.
        assert ex.execute(session, "print(kept)", 3).stdout == "survivor\n"
    finally:
        ex.close_session(session)
    _report("sandbox crash recovery with checkpointed state")

"""Bench-harness tests: generator determinism and shape, the SR metric,
strategy runs with error containment, and report round-trips."""

from __future__ import annotations

import json

import pytest

from poact.backend import ScriptStep
from poact.bench import (
    BUCKETS,
    BenchError,
    RunReport,
    Strategy,
    StrategyResult,
    TaskOutcome,
    emit_report,
    evaluate_sr,
    generate_tasks,
    load_tasks,
    render_report_table,
    run_strategy,
    write_tasks,
)
from poact.conversation import read_log

from .helpers import scripted_runtime, three_hop_fixture

PS_MARKER = "Reply with the JSON array only."


# ---------------------------------------------------------------------------
# Task generation
# ---------------------------------------------------------------------------


def test_same_seed_same_tasks():
    a = generate_tasks(7, {1: 2, 3: 1, "knowledge": 1})
    b = generate_tasks(7, {1: 2, 3: 1, "knowledge": 1})
    assert a.tasks == b.tasks
    assert [t.name for t in a.tool_specs] == [t.name for t in b.tool_specs]


def test_counts_are_honored():
    suite = generate_tasks(3, {1: 2, 2: 1, 5: 1, "knowledge": 2})
    buckets = [t.bucket for t in suite.tasks]
    assert buckets.count("1-hop") == 2
    assert buckets.count("2-hop") == 1
    assert buckets.count("5-hop") == 1
    assert buckets.count("knowledge") == 2


def test_hop_n_trace_has_n_distinct_tools():
    suite = generate_tasks(9, {h: 1 for h in range(1, 6)})
    for task in suite.tasks:
        assert len(task.ground_truth_trace) == task.hops
        tools = [tool for tool, _ in task.ground_truth_trace]
        assert len(set(tools)) == task.hops


def test_one_hop_keyword_equals_traced_terminal_value():
    suite = generate_tasks(7, {1: 1})
    task = suite.tasks[0]
    tool, arg = task.ground_truth_trace[0]
    assert tool == "get_company_info"
    row = suite.host_tools[tool].handler(arg)
    assert task.expected_keywords[0] in {str(v) for v in row.values()}
    assert arg in task.query


def test_registry_has_at_least_30_distinct_tools():
    suite = generate_tasks(0)
    names = [t.name for t in suite.tool_specs]
    assert len(names) >= 30
    assert len(set(names)) == len(names)


def test_knowledge_task_answerable_by_notes_tool():
    suite = generate_tasks(4, {"knowledge": 1})
    task = suite.tasks[0]
    tool, query = task.ground_truth_trace[0]
    snippet = suite.host_tools[tool].handler(query)
    assert task.expected_keywords[0] in snippet


def test_negative_counts_rejected():
    with pytest.raises(BenchError):
        generate_tasks(0, {1: -1})


# ---------------------------------------------------------------------------
# SR metric
# ---------------------------------------------------------------------------


def test_sr_all_keywords_present():
    assert evaluate_sr("the cat sat on the mat", ["cat", "mat"]) == 1.0


def test_sr_half_present():
    assert evaluate_sr("only the cat", ["cat", "mat"]) == 0.5


def test_sr_empty_answer():
    assert evaluate_sr("", ["cat"]) == 0.0


def test_sr_whitespace_normalized():
    assert evaluate_sr("value:  Nordhaven   District Court", ["Nordhaven District\tCourt"]) == 1.0


def test_sr_requires_keywords():
    with pytest.raises(BenchError):
        evaluate_sr("anything", [])


# ---------------------------------------------------------------------------
# run_strategy
# ---------------------------------------------------------------------------


def test_run_strategy_poact_scripted(tmp_path):
    suite, task, steps = three_hop_fixture()
    rt, backend = scripted_runtime(suite, steps)
    report = run_strategy(Strategy.POACT, [task], rt, out_dir=tmp_path, seed=11)
    result = report.results["poact"]
    assert result.overall() == {"count": 1, "pass_rate": 1.0, "mean_fraction": 1.0}
    outcome = result.outcomes[0]
    assert outcome.passed and outcome.status == "answered"
    entries = read_log(outcome.log_path)
    assert entries[0].role.value == "query"
    assert backend.remaining == 0


def test_run_strategy_records_zero_on_wrong_plan(tmp_path):
    suite, task, _ = three_hop_fixture()
    steps = [
        ScriptStep(PS_MARKER, json.dumps([{"tool": "get_missing_thing", "args": {}}])),
        ScriptStep("All planned steps have run", "I could not find it."),
    ]
    rt, _ = scripted_runtime(suite, steps)
    report = run_strategy(Strategy.PLAN_AND_SOLVE, [task], rt, out_dir=tmp_path)
    outcome = report.results["ps"].outcomes[0]
    assert outcome.sr_fraction == 0.0
    assert not outcome.passed


def test_run_strategy_contains_task_exceptions(tmp_path):
    suite, task, steps = three_hop_fixture()
    # Script only covers the first task; the second exhausts the backend.
    rt, _ = scripted_runtime(suite, steps)
    report = run_strategy(Strategy.POACT, [task, task], rt, out_dir=tmp_path)
    outcomes = report.results["poact"].outcomes
    assert outcomes[0].passed
    assert not outcomes[1].passed
    assert outcomes[1].error is not None


def test_token_totals_equal_sum_over_outcomes(tmp_path):
    suite, task, steps = three_hop_fixture()
    rt, _ = scripted_runtime(suite, steps)
    report = run_strategy(Strategy.POACT, [task], rt, out_dir=tmp_path)
    result = report.results["poact"]
    totals = result.token_totals()
    assert totals["prompt_tokens"] == sum(o.prompt_tokens for o in result.outcomes)
    assert totals["total"] == totals["prompt_tokens"] + totals["completion_tokens"]


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def _dummy_report() -> RunReport:
    outcomes = [
        TaskOutcome("1-hop-000", "1-hop", 1.0, True, 100, 20, "answered"),
        TaskOutcome("1-hop-001", "1-hop", 0.5, False, 90, 18, "answered"),
        TaskOutcome("3-hop-000", "3-hop", 1.0, True, 300, 60, "answered"),
        TaskOutcome("knowledge-000", "knowledge", 0.0, False, 50, 10, "failed"),
    ]
    return RunReport(results={"poact": StrategyResult("poact", outcomes)}, seed=3)


def test_report_json_round_trip(tmp_path):
    report = _dummy_report()
    json_path, txt_path = emit_report(report, tmp_path)
    loaded = RunReport.from_dict(json.loads(json_path.read_text()))
    assert loaded.seed == report.seed
    assert loaded.results["poact"].outcomes == report.results["poact"].outcomes
    assert loaded.results["poact"].bucket_stats() == report.results["poact"].bucket_stats()
    assert txt_path.exists()


def test_report_table_one_row_per_strategy():
    report = _dummy_report().merge(
        RunReport(results={"react": StrategyResult("react", _dummy_report().results["poact"].outcomes)})
    )
    table = render_report_table(report)
    lines = [ln for ln in table.splitlines() if ln.strip()]
    assert len(lines) == 3  # header + two strategies
    assert lines[1].startswith("poact") or lines[2].startswith("poact")


def test_report_columns_ordered_hops_then_knowledge_then_all():
    table = render_report_table(_dummy_report())
    header = table.splitlines()[0]
    i1 = header.index("1-hop")
    i3 = header.index("3-hop")
    ik = header.index("knowledge")
    ia = header.index("all")
    assert i1 < i3 < ik < ia
    assert BUCKETS.index("1-hop") < BUCKETS.index("5-hop") < BUCKETS.index("knowledge")


def test_overall_sr_is_count_weighted_mean_of_buckets():
    result = _dummy_report().results["poact"]
    stats = result.bucket_stats()
    weighted = sum(s["pass_rate"] * s["count"] for s in stats.values())
    total = sum(s["count"] for s in stats.values())
    assert result.overall()["pass_rate"] == pytest.approx(weighted / total)


def test_task_file_round_trip(tmp_path):
    suite = generate_tasks(6, {1: 1, 2: 1})
    path = tmp_path / "tasks.json"
    write_tasks(suite.tasks, path)
    loaded = load_tasks(path)
    assert loaded == suite.tasks


def test_hand_authored_tasks_may_omit_trace(tmp_path):
    path = tmp_path / "tasks.json"
    path.write_text(
        json.dumps([{"query": "q?", "expected_keywords": ["k"], "hops": 1, "task_type": "1-hop"}])
    )
    tasks = load_tasks(path)
    assert tasks[0].ground_truth_trace == ()

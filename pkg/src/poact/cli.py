"""Command-line entry point: run one query through the full loop, run
benchmark batches, replay and inspect trajectory logs, and validate
configuration.

Exit codes are a stable contract: 0 success, 2 configuration error,
3 finished without an answer (step limit)."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .backend import BackendError, ScriptedBackend, build_backend
from .bench import (
    Strategy,
    emit_report,
    generate_tasks,
    load_baseline_templates,
    load_tasks,
    render_report_table,
    run_strategy,
    runtime_for_suite,
)
from .config import ConfigError, RuntimeConfig, load_config, validate_config
from .conversation import (
    LogParseError,
    Message,
    Role,
    Trajectory,
    TrajectoryLogWriter,
    TrajectoryStatus,
    append_message,
    read_log,
    truncate_to_step,
)
from .executor import Executor, HostTool, InMemorySandboxLauncher, SubprocessSandboxLauncher
from .policy import load_prompt_library
from .retrieval import (
    HashEmbedding,
    NgramOverlapReranker,
    RetrievalConfig,
    index_registry,
    load_few_shots,
    load_tool_registry,
)
from .reviewer import (
    REVIEW_HINT_CLASS,
    RewriteRules,
    detect_repeated_error,
    load_error_rules,
    load_rewrite_rules,
    load_triggers,
    parse_error_content,
)
from .runner import FALLBACK_ERROR_RULES, Runtime, run_poact

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NO_ANSWER = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poact",
        description="Dual-control code-acting agent runtime and benchmark harness.",
    )
    parser.add_argument("--config", help="runtime config file (defaults to the shipped config)")
    parser.add_argument("--log-dir", default="logs", help="directory for trajectory logs")
    parser.add_argument("--step-limit", type=int, help="override the loop step limit")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one query through the full loop")
    run_p.add_argument("query")
    run_p.add_argument("--task-type", default="general")
    run_p.add_argument("--script", help="scripted-backend script file (overrides the config backend)")
    _add_runtime_flags(run_p)

    bench_p = sub.add_parser("bench", help="benchmark commands")
    bench_sub = bench_p.add_subparsers(dest="bench_command", required=True)
    bench_run = bench_sub.add_parser("run", help="run a benchmark batch")
    bench_run.add_argument(
        "--strategy", choices=["poact", "react", "ps", "pe", "all"], default="poact"
    )
    bench_run.add_argument("--tasks", help="task file (JSON array); generated from --seed if absent")
    bench_run.add_argument("--seed", type=int, default=0)
    bench_run.add_argument("--workers", type=int, default=1)
    bench_run.add_argument("--out", required=True, help="report/output directory")
    bench_run.add_argument(
        "--counts", help="generated task counts, e.g. '1:2,2:2,3:1,knowledge:1'"
    )
    bench_run.add_argument("--script", help="scripted-backend script file")
    _add_runtime_flags(bench_run)

    replay_p = sub.add_parser("replay", help="pretty-print a trajectory log")
    replay_p.add_argument("log_path")
    replay_p.add_argument(
        "--check", action="store_true", help="re-run reviewer detectors over the log"
    )
    replay_p.add_argument("--error-window", type=int, default=2)

    sub.add_parser("validate", help="validate the runtime configuration")
    return parser


def _add_runtime_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k-tools", type=int, help="visible tools per step")
    p.add_argument("--k-shots", type=int, help="few-shot examples per step")
    p.add_argument("--no-rerank", action="store_true", help="disable the second retrieval stage")
    p.add_argument(
        "--no-selector", action="store_true",
        help="inject the full tool registry instead of the retrieved subset",
    )
    p.add_argument("--error-window", type=int, help="repeated-error window")
    p.add_argument("--no-reviewer", action="store_true", help="disable rewrite and reflection")
    p.add_argument("--no-qar", action="store_true", help="disable query & answer rewrite")
    p.add_argument("--no-car", action="store_true", help="disable code action reflection")
    p.add_argument("--stdout-cap-bytes", type=int)
    p.add_argument("--sandbox", choices=["inproc", "subprocess"])


def _apply_overrides(config: RuntimeConfig, args: argparse.Namespace) -> RuntimeConfig:
    retrieval = config.retrieval
    k_tools = getattr(args, "k_tools", None)
    k_shots = getattr(args, "k_shots", None)
    if k_tools is not None or k_shots is not None or getattr(args, "no_rerank", False):
        retrieval = RetrievalConfig(
            k_tools=k_tools if k_tools is not None else retrieval.k_tools,
            k_shots=k_shots if k_shots is not None else retrieval.k_shots,
            recall_multiplier=retrieval.recall_multiplier,
            rerank_enabled=False if getattr(args, "no_rerank", False) else retrieval.rerank_enabled,
        )
    config.retrieval = retrieval
    if args.step_limit is not None:
        config.step_limit = args.step_limit
    if getattr(args, "error_window", None):
        config.error_window = args.error_window
    if getattr(args, "no_reviewer", False):
        config.qar = False
        config.car = False
    if getattr(args, "no_qar", False):
        config.qar = False
    if getattr(args, "no_car", False):
        config.car = False
    if getattr(args, "stdout_cap_bytes", None):
        config.stdout_cap_bytes = args.stdout_cap_bytes
    if getattr(args, "sandbox", None):
        config.sandbox = args.sandbox
    return config


def _missing_handler(callable_id: str):
    def handler(*args, **kwargs):
        raise LookupError(f"no host handler bound for callable_id {callable_id!r}")

    return handler


def _launcher_for(config: RuntimeConfig):
    if config.sandbox == "subprocess":
        return SubprocessSandboxLauncher(command=config.sandbox_cmd)
    return InMemorySandboxLauncher()


def _build_runtime(config: RuntimeConfig, args: argparse.Namespace) -> Runtime:
    """Wire a Runtime from config files: registries from disk, host handlers
    bound against the seeded synthetic world by callable_id."""
    script = getattr(args, "script", None)
    if script:
        backend = ScriptedBackend.from_file(script)
    else:
        backend = build_backend(config.backend)
    library, agent_policy = load_prompt_library(config.prompt_dir)
    provider = HashEmbedding()
    tool_specs = load_tool_registry(str(config.tools_file))
    shots = load_few_shots(str(config.few_shots_file))
    world = generate_tasks(config.world_seed)
    host_tools: dict[str, HostTool] = {}
    for spec in tool_specs:
        bound = world.host_tools.get(spec.callable_id)
        host_tools[spec.name] = bound or HostTool(
            callable_id=spec.callable_id, handler=_missing_handler(spec.callable_id)
        )
    executor = Executor(
        host_tools=host_tools,
        launcher=_launcher_for(config),
        default_timeout=config.exec_timeout,
        stdout_cap_bytes=config.stdout_cap_bytes,
    )
    triggers = load_triggers(str(config.triggers_file)) if config.triggers_file else []
    error_rules = (
        load_error_rules(str(config.error_rules_file))
        if config.error_rules_file
        else dict(FALLBACK_ERROR_RULES)
    )
    rewrite_rules = (
        load_rewrite_rules(str(config.rewrite_rules_file))
        if config.rewrite_rules_file
        else RewriteRules()
    )
    return Runtime(
        backend=backend,
        library=library,
        agent_policy=agent_policy,
        tool_registry=index_registry(tool_specs, provider),
        shot_registry=index_registry(shots, provider),
        provider=provider,
        executor=executor,
        reranker=NgramOverlapReranker(),
        retrieval=config.retrieval,
        selector_enabled=not getattr(args, "no_selector", False),
        triggers=triggers,
        error_rules=error_rules,
        rewrite_rules=rewrite_rules,
        qar_enabled=config.qar,
        car_enabled=config.car,
        error_window=config.error_window,
        authorized_imports=list(config.authorized_imports),
        step_limit=config.step_limit,
        exec_timeout=config.exec_timeout,
        temperature=config.backend.temperature,
        baseline_templates=load_baseline_templates(config.prompt_dir),
    )


def _load_validated_config(args: argparse.Namespace) -> RuntimeConfig | None:
    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return None
    errors = validate_config(config)
    if errors:
        for err in errors:
            print(f"config error: {err}", file=sys.stderr)
        return None
    return config


def cmd_run(args: argparse.Namespace) -> int:
    config = _load_validated_config(args)
    if config is None:
        return EXIT_CONFIG
    config = _apply_overrides(config, args)
    runtime = _build_runtime(config, args)

    log_dir = Path(args.log_dir)
    log_dir.mkdir(parents=True, exist_ok=True)
    log_path = log_dir / "trajectory.jsonl"
    writer = TrajectoryLogWriter(str(log_path))
    try:
        result = run_poact(runtime, args.query, args.task_type, writer)
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        print(f"trajectory log: {log_path}")
        return 1
    finally:
        writer.close()

    print(f"trajectory log: {log_path}")
    if result.status is TrajectoryStatus.ANSWERED and result.answer:
        print(result.answer)
        return EXIT_OK
    print(f"no answer ({result.status.value})", file=sys.stderr)
    return EXIT_NO_ANSWER


def _parse_counts(spec: str | None) -> dict | None:
    if not spec:
        return None
    counts: dict = {}
    for part in spec.split(","):
        key, _, value = part.partition(":")
        key = key.strip()
        counts["knowledge" if key == "knowledge" else int(key)] = int(value)
    return counts


def cmd_bench_run(args: argparse.Namespace) -> int:
    config = _load_validated_config(args)
    if config is None:
        return EXIT_CONFIG
    config = _apply_overrides(config, args)

    suite = generate_tasks(args.seed, _parse_counts(args.counts))
    tasks = load_tasks(args.tasks) if args.tasks else suite.tasks
    if args.script:
        backend = ScriptedBackend.from_file(args.script)
    else:
        backend = build_backend(config.backend)
    runtime = runtime_for_suite(
        suite,
        backend,
        prompt_dir=config.prompt_dir,
        retrieval=config.retrieval,
        selector_enabled=not getattr(args, "no_selector", False),
        triggers=load_triggers(str(config.triggers_file)) if config.triggers_file else [],
        error_rules=(
            load_error_rules(str(config.error_rules_file))
            if config.error_rules_file
            else None
        ),
        rewrite_rules=(
            load_rewrite_rules(str(config.rewrite_rules_file))
            if config.rewrite_rules_file
            else None
        ),
        qar_enabled=config.qar,
        car_enabled=config.car,
        error_window=config.error_window,
        authorized_imports=tuple(config.authorized_imports),
        step_limit=config.step_limit,
        exec_timeout=config.exec_timeout,
        launcher=_launcher_for(config),
        stdout_cap_bytes=config.stdout_cap_bytes,
    )

    strategies = (
        [Strategy.POACT, Strategy.REACT, Strategy.PLAN_AND_SOLVE, Strategy.PLAN_AND_EXECUTE]
        if args.strategy == "all"
        else [Strategy(args.strategy)]
    )
    report = None
    for strategy in strategies:
        part = run_strategy(
            strategy, tasks, runtime, out_dir=args.out, workers=args.workers, seed=args.seed
        )
        report = part if report is None else report.merge(part)
    json_path, txt_path = emit_report(report, args.out)
    print(render_report_table(report), end="")
    print(f"report: {json_path}")
    return EXIT_OK


_POLICY_BY_ROLE = {Role.PLAN: "Plan", Role.THOUGHT: "Thought", Role.CODE: "Code"}


def cmd_replay(args: argparse.Namespace) -> int:
    try:
        entries = read_log(args.log_path)
    except FileNotFoundError:
        print(f"error: no such log: {args.log_path}", file=sys.stderr)
        return EXIT_CONFIG
    except LogParseError as exc:
        print(f"error: {args.log_path}: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    completion_tokens = 0
    previous_step: int | None = None
    for message in entries:
        if previous_step is not None and message.step_index < previous_step:
            print(f"---- backtrack: history truncated to step {message.step_index} ----")
        previous_step = message.step_index
        completion_tokens += message.token_count or 0
        label = message.role.value
        policy = _POLICY_BY_ROLE.get(message.role)
        if policy:
            label = f"{label} ({policy})"
        if message.role is Role.ERROR:
            cls, _ = parse_error_content(message.content)
            if cls == REVIEW_HINT_CLASS:
                label = "error (reviewer decision)"
        first_line = message.content.splitlines()[0] if message.content else "(empty)"
        if len(first_line) > 120:
            first_line = first_line[:117] + "..."
        print(f"[step {message.step_index:>2}] {label:<24} {first_line}")
    print(f"messages: {len(entries)}; completion tokens: {completion_tokens}")

    if args.check:
        fired = _check_log(entries, args.error_window)
        if not fired:
            print("check: no reviewer decisions would fire")
    return EXIT_OK


def _check_log(entries: list[Message], window: int) -> bool:
    """Replay the log incrementally, running the repeated-error detector after
    every error message, and report would-be decisions."""
    trajectory = Trajectory()
    fired = False
    for message in entries:
        if trajectory.messages and message.step_index < trajectory.messages[-1].step_index:
            trajectory = truncate_to_step(trajectory, message.step_index)
        trajectory = append_message(trajectory, message)
        if message.role is Role.ERROR:
            target = detect_repeated_error(trajectory, window)
            if target is not None:
                print(
                    f"check: after step {message.step_index}: "
                    f"would backtrack to step {target}"
                )
                fired = True
    return fired


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print(f"FAIL {exc}")
        return EXIT_CONFIG
    errors = validate_config(config)
    if errors:
        for err in errors:
            print(f"FAIL {err}")
        return EXIT_CONFIG
    print(f"ok: {config.source_path}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    if args.command == "bench":
        return cmd_bench_run(args)
    if args.command == "replay":
        return cmd_replay(args)
    if args.command == "validate":
        return cmd_validate(args)
    parser.error(f"unknown command {args.command!r}")
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

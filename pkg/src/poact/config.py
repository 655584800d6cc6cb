"""Runtime configuration: loading, path resolution, and whole-config
validation (every problem reported at once)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .backend import BackendConfig
from .policy import PLACEHOLDER_NAMES, PolicyError, load_prompt_library
from .retrieval import (
    HashEmbedding,
    RetrievalConfig,
    RetrievalError,
    index_registry,
    load_few_shots,
    load_tool_registry,
)
from .reviewer import ReviewerError, load_error_rules, load_rewrite_rules, load_triggers


class ConfigError(Exception):
    """A config file could not be loaded at all."""


@dataclass
class RuntimeConfig:
    backend: BackendConfig
    prompt_dir: Path
    tools_file: Path
    few_shots_file: Path
    triggers_file: Path | None
    error_rules_file: Path | None
    rewrite_rules_file: Path | None
    retrieval: RetrievalConfig
    qar: bool = True
    car: bool = True
    error_window: int = 2
    authorized_imports: list[str] = field(default_factory=list)
    exec_timeout: float = 10.0
    stdout_cap_bytes: int = 65536
    sandbox: str = "inproc"
    sandbox_cmd: list[str] | None = None
    step_limit: int = 20
    world_seed: int = 0
    source_path: Path | None = None


def default_config_path() -> Path:
    return Path(__file__).parent / "data" / "config.json"


def load_config(path: str | Path | None = None) -> RuntimeConfig:
    """Load a config file; relative paths resolve against its directory."""
    config_path = Path(path) if path is not None else default_config_path()
    if not config_path.is_file():
        raise ConfigError(f"config file not found: {config_path}")
    try:
        raw = json.loads(config_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{config_path}: invalid JSON: {exc}") from None
    base = config_path.parent

    def resolve(key: str, default: str | None = None) -> Path | None:
        value = raw.get(key, default)
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else (base / p)

    retrieval_raw = raw.get("retrieval", {})
    reviewer_raw = raw.get("reviewer", {})
    executor_raw = raw.get("executor", {})
    try:
        retrieval = RetrievalConfig(
            k_tools=int(retrieval_raw.get("k_tools", 5)),
            k_shots=int(retrieval_raw.get("k_shots", 3)),
            recall_multiplier=int(retrieval_raw.get("recall_multiplier", 4)),
            rerank_enabled=bool(retrieval_raw.get("rerank_enabled", True)),
        )
    except ValueError as exc:
        raise ConfigError(f"{config_path}: bad retrieval config: {exc}") from None

    return RuntimeConfig(
        backend=BackendConfig.from_dict(raw.get("backend", {})),
        prompt_dir=resolve("prompt_dir", "prompts"),
        tools_file=resolve("tools_file", "tools.json"),
        few_shots_file=resolve("few_shots_file", "few_shots.json"),
        triggers_file=resolve("triggers_file"),
        error_rules_file=resolve("error_rules_file"),
        rewrite_rules_file=resolve("rewrite_rules_file"),
        retrieval=retrieval,
        qar=bool(reviewer_raw.get("qar", True)),
        car=bool(reviewer_raw.get("car", True)),
        error_window=int(reviewer_raw.get("error_window", 2)),
        authorized_imports=list(executor_raw.get("authorized_imports", [])),
        exec_timeout=float(executor_raw.get("timeout_s", 10.0)),
        stdout_cap_bytes=int(executor_raw.get("stdout_cap_bytes", 65536)),
        sandbox=str(executor_raw.get("sandbox", "inproc")),
        sandbox_cmd=executor_raw.get("sandbox_cmd"),
        step_limit=int(raw.get("step_limit", 20)),
        world_seed=int(raw.get("world_seed", 0)),
        source_path=config_path,
    )


def validate_config(config: RuntimeConfig) -> list[str]:
    """Check everything the runtime will need, aggregating all failures:
    templates load with only known placeholders, registries parse and index
    under the test provider, trigger/rule files are total."""
    errors: list[str] = []

    if config.step_limit < 1:
        errors.append("step_limit must be >= 1")
    if config.sandbox not in ("inproc", "subprocess"):
        errors.append(f"executor.sandbox must be 'inproc' or 'subprocess', got {config.sandbox!r}")

    if not config.prompt_dir.is_dir():
        errors.append(f"prompt directory not found: {config.prompt_dir}")
    else:
        try:
            library, _ = load_prompt_library(config.prompt_dir)
        except (PolicyError, ValueError) as exc:
            errors.append(str(exc))
        else:
            for policy in library.policies():
                template = library.get(policy)
                for name in template.placeholders:
                    if name not in PLACEHOLDER_NAMES:
                        errors.append(
                            f"{config.prompt_dir / (policy.value + '.tmpl')}: "
                            f"unknown placeholder <<{name}>>"
                        )

    provider = HashEmbedding(dimension=32)
    for label, path, loader in (
        ("tool registry", config.tools_file, load_tool_registry),
        ("few-shot file", config.few_shots_file, load_few_shots),
    ):
        if path is None or not path.is_file():
            errors.append(f"{label} not found: {path}")
            continue
        try:
            items = loader(str(path))
            index_registry(items, provider)
        except RetrievalError as exc:
            errors.append(str(exc))

    if config.triggers_file is not None:
        if not config.triggers_file.is_file():
            errors.append(f"triggers file not found: {config.triggers_file}")
        else:
            try:
                load_triggers(str(config.triggers_file))
            except ReviewerError as exc:
                errors.append(str(exc))
    if config.error_rules_file is not None:
        if not config.error_rules_file.is_file():
            errors.append(f"error-rule table not found: {config.error_rules_file}")
        else:
            try:
                load_error_rules(str(config.error_rules_file))
            except ReviewerError as exc:
                errors.append(str(exc))
    if config.rewrite_rules_file is not None:
        if not config.rewrite_rules_file.is_file():
            errors.append(f"rewrite rules file not found: {config.rewrite_rules_file}")
        else:
            try:
                load_rewrite_rules(str(config.rewrite_rules_file))
            except ReviewerError as exc:
                errors.append(str(exc))
    return errors

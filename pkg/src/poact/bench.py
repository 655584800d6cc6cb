"""Benchmark harness: seeded synthetic multi-hop tasks over linked lookup
tables, the keyword success-rate metric, strategy runs under identical tool
settings, and machine/human-readable comparison reports.
"""

from __future__ import annotations

import json
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .conversation import TrajectoryLogWriter
from .executor import Executor, HostTool, InMemorySandboxLauncher
from .policy import default_prompt_dir, load_prompt_library
from .retrieval import (
    FewShotExample,
    HashEmbedding,
    NgramOverlapReranker,
    RetrievalConfig,
    ToolSpec,
    index_registry,
)
from .reviewer import RewriteRules, Trigger
from .runner import FALLBACK_ERROR_RULES, STRATEGY_RUNNERS, Runtime


class BenchError(Exception):
    """Base class for harness failures."""


class Strategy(str, Enum):
    POACT = "poact"
    REACT = "react"
    PLAN_AND_SOLVE = "ps"
    PLAN_AND_EXECUTE = "pe"


#: Report column order: hop buckets, then knowledge, then the overall column.
BUCKETS = ("1-hop", "2-hop", "3-hop", "4-hop", "5-hop", "knowledge")


@dataclass(frozen=True)
class SyntheticTask:
    task_id: str
    query: str
    expected_keywords: tuple[str, ...]
    hops: int
    task_type: str
    #: Generator-private oracle: the (tool, argument) chain that answers the
    #: task. Hand-authored task files may omit it.
    ground_truth_trace: tuple[tuple[str, str], ...] = ()

    @property
    def bucket(self) -> str:
        return "knowledge" if self.task_type == "knowledge" else f"{self.hops}-hop"


@dataclass
class TaskSuite:
    """Tasks plus the seeded world they run against."""

    seed: int
    tasks: list[SyntheticTask]
    tool_specs: list[ToolSpec]
    host_tools: dict[str, HostTool]
    few_shots: list[FewShotExample]
    tables: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Synthetic world generation
# ---------------------------------------------------------------------------

_NAME_A = ["Acme", "Borealis", "Cobalt", "Dynamo", "Everglade", "Fulcrum", "Gilded",
           "Harborlight", "Ironwood", "Juniper", "Kestrel", "Lumen", "Meridian",
           "Northgate", "Obsidian", "Pinnacle"]
_NAME_B = ["Dynamics", "Holdings", "Industries", "Logistics", "Materials",
           "Networks", "Partners", "Systems", "Textiles", "Ventures"]
_SECTORS = ["marine salvage", "cold-chain freight", "precision optics", "grain futures",
            "battery recycling", "modular housing", "satellite telemetry", "rare-earth refining",
            "port dredging", "industrial ceramics"]
_FIRST = ["Wei", "Anouk", "Tomas", "Ingrid", "Rafael", "Mei", "Oskar", "Priya",
          "Lionel", "Sanna", "Dmitri", "Yara"]
_LAST = ["Falkner", "Okafor", "Lindqvist", "Moreau", "Takahashi", "Petrov",
         "Alvarez", "Nordin", "Castellan", "Bhatt"]
_CITIES = ["Eastport", "Vellmar", "Quarrytown", "Nordhaven", "Silverbay", "Marrowgate",
           "Ashford", "Drumlin", "Fennwick", "Larkspur"]
_LEVELS = ["district", "intermediate", "high"]
_DIVISIONS = ["commercial division", "maritime division", "administrative division",
              "enforcement division"]
_REGIONS = ["northern circuit", "eastern circuit", "coastal circuit", "inland circuit"]

_FILLER_DOMAINS = [
    "lawfirm", "address", "filing", "penalty", "license", "trademark", "patent",
    "auditor", "shareholder", "bond", "merger", "tender", "sanction", "permit",
    "insurance", "customs", "tax_record", "employment", "pension", "grant",
    "loan", "lease", "vehicle", "vessel", "estate", "inspection", "arbitration",
    "notary",
]

_HOP_FIELDS = {
    1: ("company", ["industry", "founder", "hq_city", "registration_id"]),
    2: ("subsidiary", ["sector", "ceo"]),
    3: ("case", ["court_name", "amount", "year"]),
    4: ("court", ["city", "level", "court_code"]),
    5: ("code", ["division", "region"]),
}

_QUERY_TEMPLATES = {
    1: "What is the {field} of the company {company}?",
    2: "What is the {field} of the subsidiary of {company}?",
    3: "What {field} is recorded for the case filed against the subsidiary of {company}?",
    4: "For the case against the subsidiary of {company}, what is the {field} of the court "
       "that handled it?",
    5: "For the case against the subsidiary of {company}, what {field} does the handling "
       "court's code map to?",
}


def _company_world(rng: random.Random, count: int) -> dict:
    companies: dict = {}
    subsidiaries: dict = {}
    cases: dict = {}
    courts: dict = {}
    codes: dict = {}
    for i in range(count):
        name = f"{_NAME_A[i % len(_NAME_A)]} {rng.choice(_NAME_B)} {i:02d}"
        city = rng.choice(_CITIES)
        court_name = f"{rng.choice(_CITIES)} {rng.choice(_LEVELS).title()} Court"
        court_code = f"K{rng.randrange(1000, 9999)}-{i:02d}"
        sub_name = f"{name.split()[0]} {rng.choice(_NAME_B)} Subsidiary {i:02d}"
        case_id = f"C-{rng.randrange(10000, 99999)}-{i:02d}"
        companies[name] = {
            "industry": rng.choice(_SECTORS),
            "founder": f"{rng.choice(_FIRST)} {rng.choice(_LAST)}",
            "hq_city": city,
            "registration_id": f"R-{rng.randrange(10000, 99999)}",
            "subsidiary": sub_name,
        }
        subsidiaries[sub_name] = {
            "parent": name,
            "sector": rng.choice(_SECTORS),
            "ceo": f"{rng.choice(_FIRST)} {rng.choice(_LAST)}",
            "case_id": case_id,
        }
        cases[case_id] = {
            "defendant": sub_name,
            "court_name": court_name,
            "amount": rng.randrange(40000, 990000),
            "year": rng.randrange(1998, 2024),
        }
        if court_name not in courts:
            courts[court_name] = {
                "city": rng.choice(_CITIES),
                "level": rng.choice(_LEVELS),
                "court_code": court_code,
            }
        codes[courts[court_name]["court_code"]] = {
            "division": rng.choice(_DIVISIONS),
            "region": rng.choice(_REGIONS),
        }
    return {
        "companies": companies,
        "subsidiaries": subsidiaries,
        "cases": cases,
        "courts": courts,
        "codes": codes,
    }


def _lookup(table: dict, key: str, kind: str):
    if key not in table:
        raise LookupError(f"no {kind} record for {key!r}")
    return table[key]


def _chain_tools(tables: dict, notes: list[str]) -> tuple[list[ToolSpec], dict[str, HostTool]]:
    companies = tables["companies"]
    subsidiaries = tables["subsidiaries"]
    cases = tables["cases"]
    courts = tables["courts"]
    codes = tables["codes"]
    sample_company = next(iter(companies))
    sample_sub = companies[sample_company]["subsidiary"]
    sample_case = subsidiaries[sample_sub]["case_id"]
    sample_court = cases[sample_case]["court_name"]
    sample_code = courts[sample_court]["court_code"]

    def search_notes(query: str) -> str:
        def overlap(snippet: str) -> int:
            q_tokens = set(str(query).lower().split())
            return len(q_tokens & set(snippet.lower().split()))

        best = max(range(len(notes)), key=lambda i: (overlap(notes[i]), -i))
        return notes[best]

    defs = [
        (
            "get_company_info",
            "Return the registered profile of a listed company: industry, founder, "
            "headquarters city, and registration id.",
            f'get_company_info("{sample_company}")',
            json.dumps({k: v for k, v in companies[sample_company].items() if k != "subsidiary"}),
            lambda name: {
                k: v for k, v in _lookup(companies, name, "company").items() if k != "subsidiary"
            },
        ),
        (
            "get_subsidiary_name",
            "Resolve a listed company to the name of its wholly owned subsidiary.",
            f'get_subsidiary_name("{sample_company}")',
            json.dumps(sample_sub),
            lambda name: _lookup(companies, name, "company")["subsidiary"],
        ),
        (
            "get_subsidiary_info",
            "Return a subsidiary's operating profile: sector and chief executive.",
            f'get_subsidiary_info("{sample_sub}")',
            json.dumps({k: subsidiaries[sample_sub][k] for k in ("sector", "ceo")}),
            lambda name: {
                k: _lookup(subsidiaries, name, "subsidiary")[k] for k in ("sector", "ceo")
            },
        ),
        (
            "get_case_id",
            "Find the docket id of the legal case naming a subsidiary as defendant.",
            f'get_case_id("{sample_sub}")',
            json.dumps(sample_case),
            lambda name: _lookup(subsidiaries, name, "subsidiary")["case_id"],
        ),
        (
            "get_case_info",
            "Return a case's record by docket id: handling court, disputed amount, filing year.",
            f'get_case_info("{sample_case}")',
            json.dumps({k: cases[sample_case][k] for k in ("court_name", "amount", "year")}),
            lambda case_id: {
                k: _lookup(cases, case_id, "case")[k] for k in ("court_name", "amount", "year")
            },
        ),
        (
            "get_court_info",
            "Return a court's registry entry: seat city, level, and court code.",
            f'get_court_info("{sample_court}")',
            json.dumps(courts[sample_court]),
            lambda name: _lookup(courts, name, "court"),
        ),
        (
            "get_court_code_details",
            "Expand a court code into its division and judicial circuit.",
            f'get_court_code_details("{sample_code}")',
            json.dumps(codes[sample_code]),
            lambda code: _lookup(codes, code, "court code"),
        ),
        (
            "search_legal_notes",
            "Retrieve the most relevant compliance note for a free-text question.",
            'search_legal_notes("statutory limit for appeal filing")',
            json.dumps(notes[0] if notes else ""),
            search_notes,
        ),
    ]
    specs = []
    host_tools = {}
    for name, description, input_example, output_example, handler in defs:
        specs.append(
            ToolSpec(
                name=name,
                description=description,
                input_example=input_example,
                output_example=output_example,
                callable_id=name,
            )
        )
        host_tools[name] = HostTool(callable_id=name, handler=handler)
    return specs, host_tools


def _filler_tools(rng: random.Random) -> tuple[list[ToolSpec], dict[str, HostTool]]:
    specs = []
    host_tools = {}
    for domain in _FILLER_DOMAINS:
        table = {
            f"{domain.upper()}-{i:03d}": {
                "status": rng.choice(["active", "lapsed", "pending", "archived"]),
                "registered_in": rng.choice(_CITIES),
                "reference": f"{domain[:3].upper()}-{rng.randrange(1000, 9999)}",
            }
            for i in range(3)
        }
        name = f"get_{domain}_record"
        sample_key = next(iter(table))
        label = domain.replace("_", " ")

        def handler(key: str, _table=table, _label=label):
            return _lookup(_table, key, _label)

        specs.append(
            ToolSpec(
                name=name,
                description=f"Look up the {label} record held under a given identifier.",
                input_example=f'{name}("{sample_key}")',
                output_example=json.dumps(table[sample_key]),
                callable_id=name,
            )
        )
        host_tools[name] = HostTool(callable_id=name, handler=handler)
    return specs, host_tools


def _knowledge_notes(rng: random.Random, count: int) -> tuple[list[str], list[tuple[str, str]]]:
    """Seeded compliance notes plus (topic, keyword) pairs for tasks."""
    topics = ["appeal filing", "contract registration", "asset disclosure", "audit retention",
              "license renewal", "bond settlement", "injunction response", "records archival"]
    notes: list[str] = []
    facts: list[tuple[str, str]] = []
    for i in range(max(count, 4)):
        topic = topics[i % len(topics)]
        value = f"{rng.randrange(10, 480)} days"
        notes.append(
            f"Compliance note {i:02d}: the statutory limit for {topic} is {value}, "
            f"measured from the date of service."
        )
        facts.append((topic, value))
    return notes, facts


def _few_shot_examples(tables: dict) -> list[FewShotExample]:
    company = next(iter(tables["companies"]))
    sub = tables["companies"][company]["subsidiary"]
    case = tables["subsidiaries"][sub]["case_id"]
    return [
        FewShotExample(
            task_type="1-hop",
            content=(
                f"<thought>The company profile holds the answer; call get_company_info.</thought>\n"
                f'<code>info = get_company_info("{company}")\nprint(info)</code>\n'
                f"<observation>{{'industry': '...', 'founder': '...'}}</observation>"
            ),
        ),
        FewShotExample(
            task_type="2-hop",
            content=(
                "<thought>First resolve the subsidiary, then read its profile in the next "
                "round.</thought>\n"
                f'<code>sub = get_subsidiary_name("{company}")\nprint(sub)</code>\n'
                f"<observation>{sub}</observation>"
            ),
        ),
        FewShotExample(
            task_type="3-hop",
            content=(
                "<thought>I already hold the docket id in a variable; fetch the case record "
                "with get_case_info.</thought>\n"
                "<code>case = get_case_info(case_id)\nprint(case)</code>\n"
                "<observation>{'court_name': '...', 'amount': 120000, 'year': 2014}</observation>"
            ),
        ),
        FewShotExample(
            task_type="error-recovery",
            content=(
                "<thought>The last call failed because the key came from a guess. Re-read the "
                "previous observation and pass the exact identifier.</thought>\n"
                f'<code>case_id = get_case_id("{sub}")\nprint(case_id)</code>\n'
                f"<observation>{case}</observation>"
            ),
        ),
        FewShotExample(
            task_type="final-answer",
            content=(
                "<thought>The observation already contains the requested field; return it with "
                "final_answer.</thought>\n"
                "<code>final_answer(f\"The recorded amount is {case['amount']}\")</code>"
            ),
        ),
        FewShotExample(
            task_type="knowledge",
            content=(
                "<thought>A compliance question: search the legal notes.</thought>\n"
                '<code>note = search_legal_notes("statutory limit for appeal filing")\n'
                "print(note)</code>\n"
                "<observation>Compliance note 00: the statutory limit for appeal filing is "
                "90 days, measured from the date of service.</observation>"
            ),
        ),
    ]


def _trace_for(tables: dict, company: str, hops: int) -> tuple[tuple[str, str], ...]:
    sub = tables["companies"][company]["subsidiary"]
    case = tables["subsidiaries"][sub]["case_id"]
    court = tables["cases"][case]["court_name"]
    code = tables["courts"][court]["court_code"]
    chain = [
        ("get_company_info", company),
        ("get_subsidiary_name", company),
        ("get_subsidiary_info", sub),
        ("get_case_id", sub),
        ("get_case_info", case),
        ("get_court_info", court),
        ("get_court_code_details", code),
    ]
    if hops == 1:
        return (chain[0],)
    # Hop chains skip the info-only company lookup and follow the join chain.
    per_hop = {2: chain[1:3], 3: [chain[1], chain[3], chain[4]],
               4: [chain[1], chain[3], chain[4], chain[5]],
               5: [chain[1], chain[3], chain[4], chain[5], chain[6]]}
    return tuple(per_hop[hops])


def _terminal_value(tables: dict, company: str, hops: int, fld: str):
    sub = tables["companies"][company]["subsidiary"]
    case = tables["subsidiaries"][sub]["case_id"]
    court = tables["cases"][case]["court_name"]
    code = tables["courts"][court]["court_code"]
    source = {
        1: tables["companies"][company],
        2: tables["subsidiaries"][sub],
        3: tables["cases"][case],
        4: tables["courts"][court],
        5: tables["codes"][code],
    }[hops]
    return source[fld]


def generate_tasks(seed: int, counts: dict | None = None) -> TaskSuite:
    """Build the seeded world and its task list. Deterministic: the same seed
    yields identical tasks, tables, and tool registries."""
    counts = dict(counts or {1: 2, 2: 2, 3: 2, 4: 1, 5: 1, "knowledge": 2})
    hop_counts = {h: int(counts.get(h, counts.get(str(h), 0))) for h in range(1, 6)}
    knowledge_count = int(counts.get("knowledge", 0))
    if any(v < 0 for v in hop_counts.values()) or knowledge_count < 0:
        raise BenchError("task counts must be non-negative")

    rng = random.Random(seed)
    total = sum(hop_counts.values()) + knowledge_count
    tables = _company_world(rng, max(total + 4, 10))
    notes, facts = _knowledge_notes(rng, knowledge_count)
    company_names = list(tables["companies"])

    tasks: list[SyntheticTask] = []
    cursor = 0
    for hops in range(1, 6):
        _, fields = _HOP_FIELDS[hops]
        for i in range(hop_counts[hops]):
            company = company_names[cursor % len(company_names)]
            cursor += 1
            fld = rng.choice(fields)
            value = _terminal_value(tables, company, hops, fld)
            tasks.append(
                SyntheticTask(
                    task_id=f"{hops}-hop-{i:03d}",
                    query=_QUERY_TEMPLATES[hops].format(field=fld.replace("_", " "), company=company),
                    expected_keywords=(str(value),),
                    hops=hops,
                    task_type=f"{hops}-hop",
                    ground_truth_trace=_trace_for(tables, company, hops),
                )
            )
    for i in range(knowledge_count):
        topic, value = facts[i % len(facts)]
        tasks.append(
            SyntheticTask(
                task_id=f"knowledge-{i:03d}",
                query=f"According to the legal notes, what is the statutory limit for {topic}?",
                expected_keywords=(value,),
                hops=1,
                task_type="knowledge",
                ground_truth_trace=(("search_legal_notes", f"statutory limit for {topic}"),),
            )
        )

    chain_specs, chain_tools = _chain_tools(tables, notes)
    filler_specs, filler_tools = _filler_tools(rng)
    host_tools = {**chain_tools, **filler_tools}
    return TaskSuite(
        seed=seed,
        tasks=tasks,
        tool_specs=chain_specs + filler_specs,
        host_tools=host_tools,
        few_shots=_few_shot_examples(tables),
        tables=tables,
    )


# ---------------------------------------------------------------------------
# Success-rate metric
# ---------------------------------------------------------------------------


def _normalize_ws(text: str) -> str:
    return " ".join(text.split())


def evaluate_sr(answer: str, expected_keywords) -> float:
    """Fraction of expected keywords appearing verbatim in the answer, after
    whitespace normalization on both sides."""
    keywords = list(expected_keywords)
    if not keywords:
        raise BenchError("evaluate_sr needs at least one expected keyword")
    if not answer:
        return 0.0
    haystack = _normalize_ws(answer)
    hits = sum(1 for kw in keywords if _normalize_ws(kw) in haystack)
    return hits / len(keywords)


# ---------------------------------------------------------------------------
# Runs and reports
# ---------------------------------------------------------------------------


@dataclass
class TaskOutcome:
    task_id: str
    bucket: str
    sr_fraction: float
    passed: bool
    prompt_tokens: int
    completion_tokens: int
    status: str
    log_path: str = ""
    error: str | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, raw: dict) -> "TaskOutcome":
        return cls(**raw)


@dataclass
class StrategyResult:
    strategy: str
    outcomes: list[TaskOutcome] = field(default_factory=list)

    def bucket_stats(self) -> dict[str, dict]:
        stats: dict[str, dict] = {}
        for bucket in BUCKETS:
            rows = [o for o in self.outcomes if o.bucket == bucket]
            if not rows:
                continue
            stats[bucket] = {
                "count": len(rows),
                "pass_rate": sum(o.passed for o in rows) / len(rows),
                "mean_fraction": sum(o.sr_fraction for o in rows) / len(rows),
            }
        return stats

    def overall(self) -> dict:
        rows = self.outcomes
        if not rows:
            return {"count": 0, "pass_rate": 0.0, "mean_fraction": 0.0}
        return {
            "count": len(rows),
            "pass_rate": sum(o.passed for o in rows) / len(rows),
            "mean_fraction": sum(o.sr_fraction for o in rows) / len(rows),
        }

    def token_totals(self) -> dict:
        prompt = sum(o.prompt_tokens for o in self.outcomes)
        completion = sum(o.completion_tokens for o in self.outcomes)
        return {"prompt_tokens": prompt, "completion_tokens": completion,
                "total": prompt + completion}

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "outcomes": [o.to_dict() for o in self.outcomes],
            "per_bucket": self.bucket_stats(),
            "overall": self.overall(),
            "tokens": self.token_totals(),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "StrategyResult":
        return cls(
            strategy=raw["strategy"],
            outcomes=[TaskOutcome.from_dict(o) for o in raw["outcomes"]],
        )


@dataclass
class RunReport:
    results: dict[str, StrategyResult] = field(default_factory=dict)
    seed: int | None = None

    def merge(self, other: "RunReport") -> "RunReport":
        merged = dict(self.results)
        merged.update(other.results)
        return RunReport(results=merged, seed=self.seed if self.seed is not None else other.seed)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "results": {name: res.to_dict() for name, res in self.results.items()},
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "RunReport":
        return cls(
            seed=raw.get("seed"),
            results={
                name: StrategyResult.from_dict(res) for name, res in raw["results"].items()
            },
        )


def run_strategy(
    strategy: Strategy,
    tasks: list[SyntheticTask],
    runtime: Runtime,
    *,
    out_dir: str | Path | None = None,
    workers: int = 1,
    seed: int | None = None,
) -> RunReport:
    """Run every task under one strategy. A failing task contributes SR 0 and
    never aborts the batch. Trajectory logs land beside the report."""
    runner = STRATEGY_RUNNERS[strategy.value]
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    def run_one(index_task: tuple[int, SyntheticTask]) -> TaskOutcome:
        index, task = index_task
        log_path = ""
        writer = None
        if out_path is not None:
            log_path = str(out_path / f"{strategy.value}-{task.task_id}.jsonl")
            writer = TrajectoryLogWriter(log_path)
        try:
            result = runner(
                runtime,
                task.query,
                task.task_type,
                writer,
                trajectory_id=f"{strategy.value}-{task.task_id}",
            )
            fraction = evaluate_sr(result.answer or "", task.expected_keywords)
            return TaskOutcome(
                task_id=task.task_id,
                bucket=task.bucket,
                sr_fraction=fraction,
                passed=fraction == 1.0,
                prompt_tokens=result.usage.prompt_tokens,
                completion_tokens=result.usage.completion_tokens,
                status=result.status.value,
                log_path=log_path,
            )
        except Exception as exc:
            return TaskOutcome(
                task_id=task.task_id,
                bucket=task.bucket,
                sr_fraction=0.0,
                passed=False,
                prompt_tokens=0,
                completion_tokens=0,
                status="failed",
                log_path=log_path,
                error=f"{type(exc).__name__}: {exc}",
            )
        finally:
            if writer is not None:
                writer.close()

    indexed = list(enumerate(tasks))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run_one, indexed))
    else:
        outcomes = [run_one(pair) for pair in indexed]
    result = StrategyResult(strategy=strategy.value, outcomes=outcomes)
    return RunReport(results={strategy.value: result}, seed=seed)


def render_report_table(report: RunReport) -> str:
    """Aligned comparison table: one row per strategy, hop columns in order,
    then knowledge, all, and token usage."""
    counts: dict[str, int] = {}
    for res in report.results.values():
        for bucket, stats in res.bucket_stats().items():
            counts.setdefault(bucket, stats["count"])
    columns = [b for b in BUCKETS if b in counts]
    header = ["method"] + [f"{b}({counts[b]})" for b in columns] + ["all", "tokens_usage"]

    rows = [header]
    for name in sorted(report.results):
        res = report.results[name]
        stats = res.bucket_stats()
        cells = [name]
        for bucket in columns:
            if bucket in stats:
                cells.append(f"{stats[bucket]['pass_rate'] * 100:.2f}")
            else:
                cells.append("-")
        cells.append(f"{res.overall()['pass_rate'] * 100:.2f}")
        cells.append(f"{res.token_totals()['total']:,}")
        rows.append(cells)

    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = []
    for row in rows:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
    return "\n".join(lines) + "\n"


def emit_report(report: RunReport, out_dir: str | Path) -> tuple[Path, Path]:
    """Write report.json (round-trips to an equal RunReport) and report.txt."""
    out_path = Path(out_dir)
    out_path.mkdir(parents=True, exist_ok=True)
    json_path = out_path / "report.json"
    txt_path = out_path / "report.txt"
    json_path.write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
    txt_path.write_text(render_report_table(report), encoding="utf-8")
    return json_path, txt_path


# ---------------------------------------------------------------------------
# Task files and runtime wiring
# ---------------------------------------------------------------------------


def write_tasks(tasks: list[SyntheticTask], path: str | Path) -> None:
    payload = []
    for task in tasks:
        entry = {
            "task_id": task.task_id,
            "query": task.query,
            "expected_keywords": list(task.expected_keywords),
            "hops": task.hops,
            "task_type": task.task_type,
        }
        if task.ground_truth_trace:
            entry["ground_truth_trace"] = [list(pair) for pair in task.ground_truth_trace]
        payload.append(entry)
    Path(path).write_text(
        json.dumps(payload, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )


def load_tasks(path: str | Path) -> list[SyntheticTask]:
    """Task file: JSON array of tasks; hand-authored files may omit the
    ground-truth trace."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, list):
        raise BenchError(f"{path}: task file must be a JSON array")
    tasks = []
    for i, entry in enumerate(raw):
        try:
            tasks.append(
                SyntheticTask(
                    task_id=entry.get("task_id", f"task-{i:03d}"),
                    query=entry["query"],
                    expected_keywords=tuple(entry["expected_keywords"]),
                    hops=int(entry.get("hops", 1)),
                    task_type=entry.get("task_type", "general"),
                    ground_truth_trace=tuple(
                        tuple(pair) for pair in entry.get("ground_truth_trace", [])
                    ),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise BenchError(f"{path}: bad task entry {i}: {exc}") from None
    return tasks


def load_baseline_templates(prompt_dir: str | Path) -> dict[str, str]:
    templates = {}
    for name in ("react", "ps", "pe"):
        path = Path(prompt_dir) / f"{name}.tmpl"
        if path.is_file():
            templates[name] = path.read_text(encoding="utf-8")
    return templates


def runtime_for_suite(
    suite: TaskSuite,
    backend,
    *,
    prompt_dir: str | Path | None = None,
    retrieval: RetrievalConfig | None = None,
    selector_enabled: bool = True,
    triggers: list[Trigger] | None = None,
    error_rules: dict | None = None,
    rewrite_rules: RewriteRules | None = None,
    qar_enabled: bool = True,
    car_enabled: bool = True,
    error_window: int = 2,
    authorized_imports: tuple[str, ...] = ("math", "statistics", "json", "re"),
    step_limit: int = 20,
    exec_timeout: float = 10.0,
    launcher=None,
    embedding_dimension: int = 128,
    stdout_cap_bytes: int = 65536,
) -> Runtime:
    """Wire a Runtime around a task suite: index its registries with the
    deterministic providers and bind its host tools to a fresh executor."""
    prompt_dir = Path(prompt_dir) if prompt_dir is not None else default_prompt_dir()
    library, agent_policy = load_prompt_library(prompt_dir)
    provider = HashEmbedding(dimension=embedding_dimension)
    tool_registry = index_registry(suite.tool_specs, provider)
    shot_registry = index_registry(suite.few_shots, provider)
    executor = Executor(
        host_tools=suite.host_tools,
        launcher=launcher or InMemorySandboxLauncher(),
        default_timeout=exec_timeout,
        stdout_cap_bytes=stdout_cap_bytes,
    )
    return Runtime(
        backend=backend,
        library=library,
        agent_policy=agent_policy,
        tool_registry=tool_registry,
        shot_registry=shot_registry,
        provider=provider,
        executor=executor,
        reranker=NgramOverlapReranker(),
        retrieval=retrieval or RetrievalConfig(),
        selector_enabled=selector_enabled,
        triggers=list(triggers or []),
        error_rules=error_rules if error_rules is not None else dict(FALLBACK_ERROR_RULES),
        rewrite_rules=rewrite_rules or RewriteRules(),
        qar_enabled=qar_enabled,
        car_enabled=car_enabled,
        error_window=error_window,
        authorized_imports=list(authorized_imports),
        step_limit=step_limit,
        exec_timeout=exec_timeout,
        baseline_templates=load_baseline_templates(prompt_dir),
    )

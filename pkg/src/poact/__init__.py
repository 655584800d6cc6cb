"""Dual-control code-acting agent runtime.

A reasoning loop that switches per-step policies (plan / thought / code),
scopes its visible action space by retrieval, reviews code actions before
execution with repeated-error backtracking, and runs code in a persistent,
checkpointed sandbox session. Ships with a synthetic multi-hop benchmark
harness comparing the loop against ReAct-style baselines.
"""

__version__ = "0.1.0"

from .backend import ChatRequest, ChatResponse, ScriptedBackend, TokenUsage
from .conversation import (
    HistoryFormat,
    Message,
    Role,
    StepOutput,
    Trajectory,
    TrajectoryStatus,
    append_message,
    parse_model_output,
    render_history,
    truncate_to_step,
)
from .policy import AgentPolicy, PromptTemplate, StepPolicy, assemble_system_prompt, next_policy
from .retrieval import (
    FewShotExample,
    HashEmbedding,
    RetrievalConfig,
    ToolSpec,
    index_registry,
    retrieve,
    select_action_space,
)
from .reviewer import (
    ReviewDecision,
    Trigger,
    Verdict,
    detect_repeated_error,
    handle_exception,
    reflect_code,
    rewrite_answer,
    rewrite_query,
)
from .runner import RunResult, Runtime, run_poact

__all__ = [
    "AgentPolicy",
    "ChatRequest",
    "ChatResponse",
    "FewShotExample",
    "HashEmbedding",
    "HistoryFormat",
    "Message",
    "PromptTemplate",
    "RetrievalConfig",
    "ReviewDecision",
    "Role",
    "RunResult",
    "Runtime",
    "ScriptedBackend",
    "StepOutput",
    "StepPolicy",
    "TokenUsage",
    "ToolSpec",
    "Trajectory",
    "TrajectoryStatus",
    "Trigger",
    "Verdict",
    "append_message",
    "assemble_system_prompt",
    "detect_repeated_error",
    "handle_exception",
    "index_registry",
    "next_policy",
    "parse_model_output",
    "reflect_code",
    "render_history",
    "retrieve",
    "rewrite_answer",
    "rewrite_query",
    "run_poact",
    "select_action_space",
    "truncate_to_step",
]

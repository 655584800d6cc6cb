"""Tool and few-shot stores with two-stage retrieval: exact cosine recall over
unit embeddings, optional reranking of the recall pool, and rendering of the
selected action space into prompt-ready text blocks.

The default providers are deterministic and offline (feature-hashed character
n-grams, n-gram overlap reranking) so every test runs without model weights.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from typing import Protocol, Sequence

import numpy as np

from .conversation import Role, Trajectory
from .policy import EMPTY_SECTION


class RetrievalError(Exception):
    """Base class for retrieval failures."""


class UnindexedRegistry(RetrievalError):
    """Retrieval was attempted against a registry with missing embeddings."""


class ProviderFailure(RetrievalError):
    """An embedding provider failed; carries the item identity."""


class EmbeddingProvider(Protocol):
    dimension: int

    def embed(self, text: str) -> np.ndarray: ...


class RerankProvider(Protocol):
    def score(self, query: str, candidate: str) -> float: ...


@dataclass(frozen=True)
class ToolSpec:
    """A retrievable tool: prompt-facing description plus the host-side
    handler key the executor binds it to."""

    name: str
    description: str
    input_example: str
    output_example: str
    callable_id: str
    embedding: np.ndarray | None = None


@dataclass(frozen=True)
class FewShotExample:
    task_type: str
    content: str
    embedding: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not self.content:
            raise ValueError("few-shot content must be non-empty")


def item_text(item) -> str:
    """The text an item is embedded and reranked by."""
    if isinstance(item, ToolSpec):
        return "\n".join(
            [item.name, item.description, item.input_example, item.output_example]
        )
    return f"{item.task_type}\n{item.content}"


def item_key(item) -> str:
    """Deterministic tie-break key: tool name, or a stable tag for examples."""
    if isinstance(item, ToolSpec):
        return item.name
    digest = hashlib.sha1(item.content.encode("utf-8")).hexdigest()[:12]
    return f"{item.task_type}:{digest}"


@dataclass(frozen=True)
class RetrievalConfig:
    k_tools: int = 5
    k_shots: int = 3
    recall_multiplier: int = 4
    rerank_enabled: bool = True

    def __post_init__(self) -> None:
        if self.k_tools < 1:
            raise ValueError("k_tools must be positive")
        if self.k_shots < 0:
            raise ValueError("k_shots must be non-negative")
        if self.recall_multiplier < 1:
            raise ValueError("recall_multiplier must be >= 1")


class HashEmbedding:
    """Deterministic offline embedding: character trigrams feature-hashed into
    a fixed-dimension vector, L2-normalized. Same text, same vector, always."""

    def __init__(self, dimension: int = 128) -> None:
        if dimension < 2:
            raise ValueError("dimension must be >= 2")
        self.dimension = dimension

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dimension, dtype=np.float64)
        padded = f" {text} "
        for i in range(len(padded) - 2):
            gram = padded[i : i + 3].encode("utf-8")
            digest = hashlib.blake2b(gram, digest_size=8).digest()
            value = int.from_bytes(digest, "big")
            index = value % self.dimension
            sign = 1.0 if (value >> 32) & 1 else -1.0
            vec[index] += sign
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            vec[0] = 1.0
            return vec
        return vec / norm


def _trigrams(text: str) -> set[str]:
    padded = f" {text} "
    return {padded[i : i + 3] for i in range(len(padded) - 2)}


class NgramOverlapReranker:
    """Deterministic offline reranker: Jaccard overlap of character trigrams.
    Higher scores mean more relevant."""

    def score(self, query: str, candidate: str) -> float:
        q, c = _trigrams(query), _trigrams(candidate)
        if not q or not c:
            return 0.0
        return len(q & c) / len(q | c)


@dataclass(frozen=True)
class Registry:
    """An indexed, immutable item store. Items keep the order they arrived in;
    ranking is retrieval's job."""

    items: tuple = ()
    dimension: int | None = None

    def __len__(self) -> int:
        return len(self.items)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(item_key(it) for it in self.items)


def index_registry(items: Sequence, provider: EmbeddingProvider) -> Registry:
    """Embed every item via the provider. Idempotent: re-indexing produces
    identical embeddings because providers are deterministic."""
    embedded = []
    for item in items:
        try:
            vec = np.asarray(provider.embed(item_text(item)), dtype=np.float64)
        except Exception as exc:
            raise ProviderFailure(f"embedding failed for {item_key(item)!r}: {exc}") from exc
        if vec.shape != (provider.dimension,):
            raise ProviderFailure(
                f"provider returned shape {vec.shape} for {item_key(item)!r}, "
                f"expected ({provider.dimension},)"
            )
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            raise ProviderFailure(f"zero embedding for {item_key(item)!r}")
        if abs(norm - 1.0) > 1e-6:
            vec = vec / norm
        embedded.append(replace(item, embedding=vec))
    return Registry(items=tuple(embedded), dimension=provider.dimension)


def retrieve(
    registry: Registry,
    query: str,
    k: int,
    config: RetrievalConfig,
    provider: EmbeddingProvider,
    reranker: RerankProvider | None = None,
) -> list:
    """Two-stage retrieval.

    Stage 1 ranks the whole registry by exact cosine similarity and keeps a
    pool of k * recall_multiplier items. Stage 2, when enabled, reorders that
    pool by reranker score and keeps the top k. Ties break by ascending item
    name at both stages, so results are reproducible across platforms.
    """
    if k <= 0 or not registry.items:
        return []
    if registry.dimension is None or any(it.embedding is None for it in registry.items):
        raise UnindexedRegistry("registry must be indexed before retrieval")

    query_vec = np.asarray(provider.embed(query), dtype=np.float64)
    ranked = sorted(
        registry.items,
        key=lambda it: (-float(np.dot(query_vec, it.embedding)), item_key(it)),
    )
    pool = ranked[: min(k * config.recall_multiplier, len(ranked))]

    if config.rerank_enabled and reranker is not None:
        pool = sorted(pool, key=lambda it: (-reranker.score(query, item_text(it)), item_key(it)))
    return pool[:k]


def render_tool_descriptions(tools: Sequence[ToolSpec]) -> str:
    """Render tools as the name/description/input/output blocks prompts use."""
    if not tools:
        return EMPTY_SECTION
    blocks = []
    for tool in tools:
        blocks.append(
            f"### {tool.name}\n"
            f"{tool.description}\n"
            f"Input example: {tool.input_example}\n"
            f"Output example: {tool.output_example}"
        )
    return "\n\n".join(blocks)


def render_few_shots(shots: Sequence[FewShotExample]) -> str:
    if not shots:
        return EMPTY_SECTION
    return "\n\n".join(f"Example ({s.task_type}):\n{s.content}" for s in shots)


def retrieval_query(trajectory: Trajectory) -> str:
    """What to retrieve against: the (rewritten) user query, extended with the
    latest local plan so the action space tracks the current step."""
    query_msg = trajectory.last_message(Role.QUERY)
    query = query_msg.content if query_msg else ""
    thought = trajectory.last_message(Role.THOUGHT)
    if thought is not None:
        return f"{query}\n{thought.content}"
    return query


def select_action_space(
    trajectory: Trajectory,
    tool_registry: Registry,
    shot_registry: Registry,
    config: RetrievalConfig,
    provider: EmbeddingProvider,
    reranker: RerankProvider | None = None,
) -> tuple[str, str, list[str]]:
    """Pick the visible action space for the next step.

    Returns (tool_descriptions, few_shots, selected_tool_ids); the executor
    binds exactly the returned tool ids.
    """
    query = retrieval_query(trajectory)
    tools = retrieve(tool_registry, query, config.k_tools, config, provider, reranker)
    shots: list[FewShotExample] = []
    if config.k_shots > 0 and shot_registry.items:
        shots = retrieve(shot_registry, query, config.k_shots, config, provider, reranker)
    return (
        render_tool_descriptions(tools),
        render_few_shots(shots),
        [t.name for t in tools],
    )


def full_action_space(tool_registry: Registry, shot_registry: Registry, k_shots: int,
                      query: str, provider: EmbeddingProvider,
                      config: RetrievalConfig | None = None,
                      reranker: RerankProvider | None = None) -> tuple[str, str, list[str]]:
    """The no-selector arm: every tool in the registry is visible, rendered in
    name order; few-shots still honor the shared budget."""
    tools = sorted(tool_registry.items, key=item_key)
    shots: list[FewShotExample] = []
    if k_shots > 0 and shot_registry.items:
        cfg = config or RetrievalConfig(k_shots=k_shots)
        shots = retrieve(shot_registry, query, k_shots, cfg, provider, reranker)
    return (
        render_tool_descriptions(tools),
        render_few_shots(shots),
        [t.name for t in tools],
    )


# ---------------------------------------------------------------------------
# Registry files
# ---------------------------------------------------------------------------


def load_tool_registry(path: str) -> list[ToolSpec]:
    """Tool registry file: JSON array with name, description, input_example,
    output_example, callable_id."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise RetrievalError(f"{path}: tool registry must be a JSON array")
    tools = []
    seen: set[str] = set()
    for i, entry in enumerate(raw):
        try:
            tool = ToolSpec(
                name=entry["name"],
                description=entry["description"],
                input_example=entry["input_example"],
                output_example=entry["output_example"],
                callable_id=entry["callable_id"],
            )
        except (KeyError, TypeError) as exc:
            raise RetrievalError(f"{path}: bad tool entry {i}: {exc}") from None
        if tool.name in seen:
            raise RetrievalError(f"{path}: duplicate tool name {tool.name!r}")
        seen.add(tool.name)
        tools.append(tool)
    return tools


def load_few_shots(path: str) -> list[FewShotExample]:
    """Few-shot file: JSON array with task_type, content."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise RetrievalError(f"{path}: few-shot file must be a JSON array")
    shots = []
    for i, entry in enumerate(raw):
        try:
            shots.append(FewShotExample(task_type=entry["task_type"], content=entry["content"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise RetrievalError(f"{path}: bad few-shot entry {i}: {exc}") from None
    return shots

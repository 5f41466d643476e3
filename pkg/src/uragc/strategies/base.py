"""Shared configuration, environment and context assembly for RAG strategies."""

from __future__ import annotations

import math
import random
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

from ..core import Document, McqaInstance, OptionDistribution, Step, StrategyTrace, derive_seed, option_letters
from ..errors import ArgumentError, StrategyError, UragcError
from ..prompts import PromptLibrary, render_mcqa
from ..providers import ChatClient, Embedder
from ..retrieval import Ranking, VectorIndex, sample_irrelevant, search

CHARS_PER_TOKEN = 4


def approx_tokens(text: str) -> int:
    return math.ceil(len(text) / CHARS_PER_TOKEN)


@dataclass(frozen=True)
class StrategyConfig:
    name: str = "naive"
    retrieval_depth: int = 10
    max_context_tokens: int = 4000
    iterations: int = 3
    query_count: int = 4
    fusion_smoothing_k: int = 60
    fusion_temperature: float = 0.9
    selfrag_weights: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    selfrag_passages: int = 5
    selfrag_top: int = 3
    raptor_chunk_tokens: int = 100
    raptor_max_depth: int = 3
    raptor_threshold: float = 0.1
    raptor_max_clusters: int = 8
    raptor_reduce_dim: int = 10
    raptor_reducer: str = "pca"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "selfrag_weights", tuple(float(w) for w in self.selfrag_weights))
        if self.retrieval_depth < 1:
            raise ArgumentError("retrieval_depth must be >= 1")
        if self.iterations < 1:
            raise ArgumentError("iterations must be >= 1")
        # n = 1 is allowed so Fusion can be checked against Naive
        if self.query_count < 1:
            raise ArgumentError("query_count must be >= 1")
        if self.max_context_tokens < 1:
            raise ArgumentError("max_context_tokens must be >= 1")
        w = self.selfrag_weights
        if len(w) != 3 or any(x < 0 for x in w) or abs(math.fsum(w) - 1.0) > 1e-9:
            raise ArgumentError(f"selfrag_weights must be 3 non-negative reals summing to 1, got {w}")
        if self.raptor_reducer not in ("pca", "none"):
            raise ArgumentError(f"unknown reducer {self.raptor_reducer!r}")

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["selfrag_weights"] = list(self.selfrag_weights)
        return rec

    @classmethod
    def from_record(cls, rec: Mapping) -> "StrategyConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(rec) - known
        if extra:
            raise ArgumentError(f"unknown strategy settings: {sorted(extra)}")
        data = dict(rec)
        if "selfrag_weights" in data:
            data["selfrag_weights"] = tuple(data["selfrag_weights"])
        return cls(**data)


@dataclass(frozen=True)
class NoiseInjection:
    """Adds ``count`` random corpus documents to every retrieval.

    ``mode="fresh"`` draws a new sample per retrieval step; ``"fixed"`` reuses
    one per-instance seed.
    """

    count: int = 10
    mode: str = "fresh"
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ArgumentError("injected document count must be >= 1")
        if self.mode not in ("fresh", "fixed"):
            raise ArgumentError(f"unknown injection mode {self.mode!r}")


@dataclass
class StrategyEnv:
    chat: ChatClient
    embedder: Embedder
    index: VectorIndex | None = None
    corpus: Mapping[str, Document] = field(default_factory=dict)
    prompts: PromptLibrary = field(default_factory=PromptLibrary)
    raptor_tree: object | None = None
    noise: NoiseInjection | None = None
    # instance id -> probabilities shown in the confidence block (self/wrong-aware)
    display: Mapping[str, Sequence[float]] | None = None

    def confidence_for(self, instance: McqaInstance) -> Sequence[float] | None:
        if self.display is None:
            return None
        return self.display.get(instance.id)

    def doc_text(self, doc_id: str) -> str:
        return self.corpus[doc_id].text


@dataclass
class Retrieved:
    ranking: Ranking
    doc_ids: list[str]
    injected: list[str]

    @property
    def note(self) -> str | None:
        return f"injected={','.join(self.injected)}" if self.injected else None


def require_index(env: StrategyEnv, instance: McqaInstance) -> VectorIndex:
    if env.index is None or len(env.index) == 0:
        raise StrategyError(f"{instance.id}: no corpus index bound")
    if instance.corpus_ref and env.index.corpus_ref and instance.corpus_ref != env.index.corpus_ref:
        raise StrategyError(
            f"{instance.id}: instance targets corpus {instance.corpus_ref!r}, index holds {env.index.corpus_ref!r}"
        )
    return env.index


def inject(env: StrategyEnv, instance: McqaInstance, retrieved: Sequence[str], step_no: int) -> tuple[list[str], list[str]]:
    """Mix noise documents into a retrieved list; returns (combined, injected)."""
    if env.noise is None:
        return list(retrieved), []
    key = (instance.id, step_no) if env.noise.mode == "fresh" else (instance.id,)
    seed = derive_seed(env.noise.seed, "noise", *key)
    pool = len(env.index) - len(set(retrieved))
    count = min(env.noise.count, pool)
    injected = sample_irrelevant(env.index, retrieved, count, seed)
    combined = list(retrieved) + injected
    random.Random(seed).shuffle(combined)
    return combined, injected


def retrieve_text(env: StrategyEnv, instance: McqaInstance, text: str, k: int, step_no: int) -> Retrieved:
    index = require_index(env, instance)
    vec = env.embedder.embed_one(text)
    ranking = search(index, vec, k, query=text)
    ids, injected = inject(env, instance, ranking.doc_ids, step_no)
    return Retrieved(ranking, ids, injected)


def assemble_context(texts: Sequence[tuple[str, str]], max_tokens: int) -> tuple[str, list[str], bool]:
    """Join ``(id, text)`` passages as a numbered list, cut at the token budget.

    Returns the context, the ids whose text made it in (even partially) and
    whether anything was cut.
    """
    budget = max_tokens * CHARS_PER_TOKEN
    parts, used = [], []
    length = 0
    truncated = False
    for i, (doc_id, text) in enumerate(texts, start=1):
        block = f"[{i}] {text.strip()}"
        sep = 2 if parts else 0
        if length + sep + len(block) > budget:
            room = budget - length - sep
            if room > 0:
                parts.append(block[:room])
                used.append(doc_id)
            truncated = True
            break
        parts.append(block)
        used.append(doc_id)
        length += sep + len(block)
    return "\n\n".join(parts), used, truncated


def score_prompt(env: StrategyEnv, instance: McqaInstance, context: str | None) -> tuple[str, OptionDistribution, str]:
    prompt = render_mcqa(env.prompts, instance, context, env.confidence_for(instance))
    dist, result = env.chat.score_options_detailed(prompt, option_letters(instance.k))
    return prompt, dist, result.text


def finish(trace: StrategyTrace, env: StrategyEnv, instance: McqaInstance, context: str | None) -> StrategyTrace:
    prompt, dist, completion = score_prompt(env, instance, context)
    trace.add(Step("score", query=instance.question, doc_ids=(), prompt=prompt, completion=completion))
    for flag in dist.flags:
        trace.flag(flag)
    if trace.flags:
        dist = dist.with_flags(*trace.flags)
    trace.final_distribution = dist
    return trace


StrategyFn = Callable[[McqaInstance, StrategyEnv, StrategyConfig], StrategyTrace]


def guarded(name: str, fn: StrategyFn) -> StrategyFn:
    """Wrap a strategy so every failure surfaces as StrategyError with the instance id
    and whatever trace was built before the failure."""

    def run(instance: McqaInstance, env: StrategyEnv, config: StrategyConfig) -> StrategyTrace:
        trace = StrategyTrace(instance.id, name)
        try:
            return fn(instance, env, config, trace)
        except StrategyError as exc:
            if exc.trace is None:
                exc.trace = trace
            raise
        except UragcError as exc:
            raise StrategyError(f"{instance.id}: {name} failed: {exc}", trace=trace) from exc

    run.__name__ = f"run_{name}"
    run.__doc__ = fn.__doc__
    return run

"""Single-pass strategies: no retrieval, naive top-k, query fusion and HyDE."""

from __future__ import annotations

import logging

from ..core import McqaInstance, Step, StrategyTrace, derive_rng
from ..errors import ProviderError
from ..prompts import fill
from ..retrieval import rrf_fuse, search
from .base import StrategyConfig, StrategyEnv, assemble_context, finish, inject, require_index, retrieve_text

log = logging.getLogger(__name__)


def _note(*parts: str | None) -> str | None:
    kept = [p for p in parts if p]
    return "; ".join(kept) if kept else None


def _context_step(trace, env, instance, query, doc_ids, injected_note, config, kind="search"):
    context, _, truncated = assemble_context([(d, env.doc_text(d)) for d in doc_ids], config.max_context_tokens)
    trace.add(
        Step(kind, query=query, action="retrieve", doc_ids=tuple(doc_ids),
             note=_note("truncated" if truncated else None, injected_note))
    )
    return context


def no_retrieve(instance: McqaInstance, env: StrategyEnv, config: StrategyConfig, trace: StrategyTrace):
    return finish(trace, env, instance, None)


def naive(instance: McqaInstance, env: StrategyEnv, config: StrategyConfig, trace: StrategyTrace):
    """Top-k on the raw question, concatenated and cut to the context budget."""
    got = retrieve_text(env, instance, instance.question, config.retrieval_depth, step_no=0)
    context = _context_step(trace, env, instance, instance.question, got.doc_ids, got.note, config)
    return finish(trace, env, instance, context)


def generate_reformulations(instance: McqaInstance, env: StrategyEnv, config: StrategyConfig,
                            trace: StrategyTrace) -> list[str]:
    pool = env.prompts.fusion_pool()
    rng = derive_rng(config.seed, "fusion", instance.id)
    queries = [instance.question]
    for j in range(1, config.query_count):
        system = rng.choice(pool["system"])
        user = fill(rng.choice(pool["user"]), {"question": instance.question}) + pool.get("suffix", "")
        try:
            text = env.chat.generate(user, system=system, temperature=config.fusion_temperature, max_tokens=128)
        except ProviderError as exc:
            log.warning("%s: reformulation %d failed: %s", instance.id, j, exc)
            trace.flag("fusion_reformulation_failed")
            continue
        lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
        if not lines:
            trace.flag("fusion_reformulation_failed")
            continue
        trace.add(Step("reformulate", query=lines[0], prompt=f"{system}\n\n{user}", completion=text))
        queries.append(lines[0])
    return queries


def fusion(instance: McqaInstance, env: StrategyEnv, config: StrategyConfig, trace: StrategyTrace):
    """Several phrasings of the question, each searched, merged with RRF."""
    index = require_index(env, instance)
    queries = generate_reformulations(instance, env, config, trace)
    rankings = []
    for q in queries:
        ranking = search(index, env.embedder.embed_one(q), config.retrieval_depth, query=q)
        rankings.append(ranking)
        if len(queries) > 1:
            trace.add(Step("search", query=q, action="retrieve", doc_ids=ranking.doc_ids))
    fused = rrf_fuse(rankings, config.fusion_smoothing_k) if len(rankings) > 1 else rankings[0]
    ids, injected = inject(env, instance, fused.doc_ids, step_no=0)
    note = f"injected={','.join(injected)}" if injected else None
    kind = "fuse" if len(rankings) > 1 else "search"
    context = _context_step(trace, env, instance, instance.question, ids, note, config, kind=kind)
    return finish(trace, env, instance, context)


def hyde(instance: McqaInstance, env: StrategyEnv, config: StrategyConfig, trace: StrategyTrace):
    """Retrieve with the embedding of a generated answer passage."""
    prompt = fill(env.prompts.text("hyde.txt"), {"question": instance.question})
    passage = ""
    for _ in range(2):
        passage = env.chat.generate(prompt).strip()
        if passage:
            break
    trace.add(Step("generate", prompt=prompt, completion=passage))
    query = passage
    if not passage:
        trace.flag("hyde_fallback")
        query = instance.question
    got = retrieve_text(env, instance, query, config.retrieval_depth, step_no=0)
    context = _context_step(trace, env, instance, query, got.doc_ids, got.note, config)
    return finish(trace, env, instance, context)

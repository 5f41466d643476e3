"""Per-document scoring ensembled with similarity-softmax weights."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..core import McqaInstance, OptionDistribution, Step, StrategyTrace
from ..errors import ArgumentError, ProviderError, StrategyError
from ..retrieval import search
from .base import StrategyConfig, StrategyEnv, assemble_context, inject, require_index, score_prompt


def similarity_weights(similarities: Sequence[float]) -> list[float]:
    if not similarities:
        raise ArgumentError("no similarities to weight")
    top = max(similarities)
    exps = [math.exp(s - top) for s in similarities]
    total = math.fsum(exps)
    return [e / total for e in exps]


def replug_mixture(similarities: Sequence[float], distributions: Sequence[Sequence[float]]) -> list[float]:
    """sum_d softmax(similarities)_d * p_d, per option."""
    if len(similarities) != len(distributions):
        raise ArgumentError("one distribution per similarity required")
    lam = similarity_weights(similarities)
    k = len(distributions[0])
    if any(len(p) != k for p in distributions):
        raise ArgumentError("distributions differ in length")
    return [math.fsum(w * p[c] for w, p in zip(lam, distributions)) for c in range(k)]


def replug(instance: McqaInstance, env: StrategyEnv, config: StrategyConfig, trace: StrategyTrace):
    index = require_index(env, instance)
    qvec = np.asarray(env.embedder.embed_one(instance.question))
    ranking = search(index, qvec, config.retrieval_depth, query=instance.question)
    ids, injected = inject(env, instance, ranking.doc_ids, step_no=0)
    trace.add(Step("search", query=instance.question, action="retrieve", doc_ids=tuple(ids),
                   note=f"injected={','.join(injected)}" if injected else None))

    sims, dists = [], []
    for doc_id in ids:
        context, _, _ = assemble_context([(doc_id, env.doc_text(doc_id))], config.max_context_tokens)
        try:
            prompt, dist, completion = score_prompt(env, instance, context)
        except ProviderError:
            trace.flag("replug_doc_dropped")
            trace.add(Step("score", doc_ids=(doc_id,), note="dropped: provider error"))
            continue
        for flag in dist.flags:
            trace.flag(flag)
        sim = float(index.vector(doc_id) @ qvec)
        trace.add(Step("score", doc_ids=(doc_id,), prompt=prompt, completion=completion, note=f"similarity={sim!r}"))
        sims.append(sim)
        dists.append(dist.probs)
    if not dists:
        raise StrategyError(f"{instance.id}: every per-document scoring call failed", trace=trace)
    mixed = replug_mixture(sims, dists)
    trace.final_distribution = OptionDistribution.from_weights(mixed, trace.flags)
    return trace

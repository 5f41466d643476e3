"""Draft, then T rounds of query -> retrieve -> revise, then score."""

from __future__ import annotations

from ..core import McqaInstance, Step, StrategyTrace
from ..prompts import fill, render_options
from .base import StrategyConfig, StrategyEnv, assemble_context, finish, retrieve_text


def rat(instance: McqaInstance, env: StrategyEnv, config: StrategyConfig, trace: StrategyTrace):
    options = render_options(instance.options)
    base = {"question": instance.question, "options": options}
    draft_prompt = fill(env.prompts.text("rat_draft.txt"), base)
    draft = env.chat.generate(draft_prompt).strip()
    trace.add(Step("draft", prompt=draft_prompt, completion=draft))

    query_tpl = env.prompts.text("rat_query.txt")
    revise_tpl = env.prompts.text("rat_revise.txt")
    for t in range(1, config.iterations + 1):
        q_text = env.chat.generate(fill(query_tpl, {**base, "draft": draft}), max_tokens=128).strip()
        query = q_text.splitlines()[0].strip() if q_text else instance.question
        got = retrieve_text(env, instance, query, config.retrieval_depth, step_no=t)
        context, _, truncated = assemble_context([(d, env.doc_text(d)) for d in got.doc_ids], config.max_context_tokens)
        revise_prompt = fill(revise_tpl, {**base, "draft": draft, "context": context})
        revised = env.chat.generate(revise_prompt).strip() or draft
        notes = [n for n in (f"round={t}", "truncated" if truncated else None, got.note) if n]
        trace.add(Step("retrieve", query=query, action="retrieve", doc_ids=tuple(got.doc_ids),
                       prompt=revise_prompt, completion=revised, note="; ".join(notes)))
        draft = revised

    return finish(trace, env, instance, f"Draft answer:\n{draft}")

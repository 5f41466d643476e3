"""Retrieve-or-not decision followed by reflection-scored candidate selection."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Sequence

from ..core import McqaInstance, Step, StrategyTrace, option_letters, stable_argmax
from ..prompts import fill, render_options
from .base import StrategyConfig, StrategyEnv, assemble_context, finish, retrieve_text, score_prompt

RELEVANCE = {"relevant": 1.0, "irrelevant": 0.0}
SUPPORT = {"fully_supported": 1.0, "partially_supported": 0.7, "no_support": 0.0}
ABSENT = 0.5
MALFORMED = (0.5, 0.5, 0.6)

_REL_RE = re.compile(r"(?<![\w])(irrelevant|relevant)(?![\w])", re.I)
_SUP_RE = re.compile(r"(?<![\w])(fully_supported|partially_supported|no_support)(?![\w])", re.I)
_USE_RE = re.compile(r"utility\s*[:=]?\s*(\d)", re.I)
_DECIDE_RE = re.compile(r"(no_retrieve|retrieve)", re.I)


@dataclass(frozen=True)
class ReflectionScores:
    s_rel: float
    s_sup: float
    s_use: float

    def __post_init__(self):
        for v in (self.s_rel, self.s_sup, self.s_use):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"reflection score {v} outside [0, 1]")

    def composite(self, weights: Sequence[float]) -> float:
        w_rel, w_sup, w_use = weights
        return math.fsum((w_rel * self.s_rel, w_sup * self.s_sup, w_use * self.s_use))


def utility_score(level: int) -> float:
    return min(max(level, 1), 5) / 5


def parse_reflection(text: str) -> tuple[ReflectionScores, bool]:
    """Map judgment tokens to scores; the bool is True when nothing parsed."""
    rel = _REL_RE.search(text)
    sup = _SUP_RE.search(text)
    use = _USE_RE.search(text)
    if not (rel or sup or use):
        return ReflectionScores(*MALFORMED), True
    return (
        ReflectionScores(
            RELEVANCE[rel.group(1).lower()] if rel else ABSENT,
            SUPPORT[sup.group(1).lower()] if sup else ABSENT,
            utility_score(int(use.group(1))) if use else ABSENT,
        ),
        False,
    )


def parse_decision(text: str) -> str | None:
    m = _DECIDE_RE.search(text)
    return m.group(1).lower() if m else None


def select_candidate(scores: Sequence[float]) -> int:
    return stable_argmax(scores)


def selfrag(instance: McqaInstance, env: StrategyEnv, config: StrategyConfig, trace: StrategyTrace):
    options = render_options(instance.options)
    prompt = fill(env.prompts.text("selfrag_decide.txt"), {"question": instance.question, "options": options})
    reply = env.chat.generate(prompt, max_tokens=16)
    decision = parse_decision(reply)
    note = None
    if decision is None:
        decision, note = "retrieve", "unparsed decision; defaulted to retrieve"
    trace.add(Step("decide", query=instance.question, action=decision, prompt=prompt, completion=reply, note=note))
    if decision == "no_retrieve":
        return finish(trace, env, instance, None)

    got = retrieve_text(env, instance, instance.question, config.selfrag_passages, step_no=0)
    trace.add(Step("search", query=instance.question, action="retrieve", doc_ids=tuple(got.doc_ids), note=got.note))
    configurations = [("none", []), ("top", got.doc_ids[: config.selfrag_top]), ("all", got.doc_ids)]

    letters = option_letters(instance.k)
    reflect_tpl = env.prompts.text("selfrag_reflect.txt")
    candidates, composites = [], []
    for m, (label, ids) in enumerate(configurations):
        context = None
        if ids:
            context, _, _ = assemble_context([(d, env.doc_text(d)) for d in ids], config.max_context_tokens)
        cand_prompt, dist, completion = score_prompt(env, instance, context)
        best = stable_argmax(dist.probs)
        candidate = f"{letters[best]}. {instance.options[best]}"
        r_prompt = fill(reflect_tpl, {
            "context": context or "(none)", "question": instance.question,
            "options": options, "candidate": candidate,
        })
        r_text = env.chat.generate(r_prompt, max_tokens=64)
        scores, malformed = parse_reflection(r_text)
        if malformed:
            trace.flag("selfrag_reflection_malformed")
        s = scores.composite(config.selfrag_weights)
        trace.add(Step("candidate", doc_ids=tuple(ids), prompt=cand_prompt, completion=completion, note=label))
        trace.add(Step("reflect", prompt=r_prompt, completion=r_text,
                       note=f"rel={scores.s_rel} sup={scores.s_sup} use={scores.s_use} S={s!r}"))
        candidates.append(dist)
        composites.append(s)

    chosen = select_candidate(composites)
    trace.add(Step("select", note=f"candidate={chosen} ({configurations[chosen][0]})"))
    dist = candidates[chosen]
    for flag in dist.flags:
        trace.flag(flag)
    trace.final_distribution = dist.with_flags(*trace.flags) if trace.flags else dist
    return trace

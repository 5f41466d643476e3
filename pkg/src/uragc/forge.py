"""Distractor forging: generate wrong-but-plausible options, gate them by NLI, regenerate."""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .core import McqaInstance, derive_rng, dump_record, normalize_text, permute_options
from .errors import ArgumentError, ForgeError, ProviderError
from .prompts import PromptLibrary, fill
from .providers import ChatClient, NliClient

log = logging.getLogger(__name__)

SIMILARITY_TYPES = ("role-similar", "time-similar", "lexical-similar", "topic-similar")
MODES = ("naive", "full")
MAX_REREQUESTS = 3
DEFAULT_THRESHOLD = 0.5
NOT_DIFFICULT = "not_difficult"

_JSON_OBJECT = re.compile(r"\{.*\}", re.S)


@dataclass(frozen=True)
class DistractorCandidate:
    text: str
    # None only for the naive prompt, which does not ask for a similarity dimension
    similarity_type: str | None
    fake_document: tuple[str, str] | None
    source_iteration: int = 0

    def to_record(self) -> dict:
        return {
            "text": self.text,
            "similarity_type": self.similarity_type,
            "fake_document": list(self.fake_document) if self.fake_document else None,
            "source_iteration": self.source_iteration,
        }


@dataclass(frozen=True)
class ForgeVerdict:
    difficult: bool
    entail_probs: tuple[float | None, ...]
    iterations_used: int = 0
    threshold: float = DEFAULT_THRESHOLD

    @property
    def known_probs(self) -> list[float]:
        return [p for p in self.entail_probs if p is not None]

    def to_record(self) -> dict:
        return {
            "difficult": self.difficult,
            "entail_probs": list(self.entail_probs),
            "iterations_used": self.iterations_used,
            "threshold": self.threshold,
        }


@dataclass(frozen=True)
class ForgeSeed:
    id: str
    question: str
    answer: str
    document: str = ""
    corpus_ref: str = ""
    tags: tuple[str, ...] = ()


@dataclass
class ForgeResult:
    instance: McqaInstance
    verdict: ForgeVerdict
    candidates: list[DistractorCandidate]
    provenance: dict = field(default_factory=dict)


def load_seeds(path) -> list[ForgeSeed]:
    p = Path(path)
    if not p.exists():
        raise ArgumentError(f"seed file not found: {p}")
    seeds = []
    with open(p, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                seeds.append(ForgeSeed(
                    id=str(rec["id"]), question=rec["question"], answer=rec["answer"],
                    document=rec.get("document", ""), corpus_ref=rec.get("corpus_ref", ""),
                    tags=tuple(rec.get("tags", ())),
                ))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise ArgumentError(f"{p}:{line_no}: bad seed record ({exc})") from exc
    if not seeds:
        raise ArgumentError(f"seed file {p} is empty")
    return seeds


# ---------------------------------------------------------------- generation


def _avoid_block(avoid: Sequence[str], problem: str | None) -> str:
    lines = []
    if avoid:
        quoted = "; ".join(f'"{a}"' for a in avoid)
        lines.append(f"Do not reuse any of these answers: {quoted}.")
    if problem:
        lines.append(f"Your previous reply was rejected: {problem}.")
    return "\n".join(lines)


def parse_candidate(raw: str, mode: str, correct_answer: str, iteration: int,
                    taken: Sequence[str] = ()) -> DistractorCandidate:
    """Parse one structured completion; raises ForgeError describing the violation."""
    m = _JSON_OBJECT.search(raw)
    try:
        rec = json.loads(m.group(0)) if m else None
    except json.JSONDecodeError:
        rec = None
    if not isinstance(rec, dict):
        raise ForgeError("completion is not a JSON object", raw=raw)
    text = rec.get("fake_answer")
    if not isinstance(text, str) or not text.strip():
        raise ForgeError("missing fake_answer", raw=raw)
    text = text.strip()
    if normalize_text(text) == normalize_text(correct_answer):
        raise ForgeError("fake answer equals the correct answer", raw=raw)
    if normalize_text(text) in {normalize_text(t) for t in taken}:
        raise ForgeError("fake answer duplicates an earlier one", raw=raw)
    if mode == "naive":
        return DistractorCandidate(text, None, None, iteration)
    sim = rec.get("similarity_type")
    if sim not in SIMILARITY_TYPES:
        raise ForgeError(f"similarity_type {sim!r} not in {SIMILARITY_TYPES}", raw=raw)
    title = rec.get("fake_document_title")
    excerpt = rec.get("fake_document_excerpt")
    if not isinstance(title, str) or not isinstance(excerpt, str) or not excerpt.strip():
        raise ForgeError("fake document fields missing or empty", raw=raw)
    return DistractorCandidate(text, sim, (title.strip(), excerpt.strip()), iteration)


def _request_one(chat: ChatClient, template: str, values: dict, mode: str, correct_answer: str,
                 iteration: int, taken: list[str], log_to: list | None) -> DistractorCandidate:
    problem = None
    raw = ""
    for attempt in range(MAX_REREQUESTS + 1):
        prompt = fill(template, {**values, "avoid_block": _avoid_block(taken, problem)})
        raw = chat.generate(prompt)
        entry = {"iteration": iteration, "attempt": attempt, "prompt": prompt, "completion": raw}
        try:
            cand = parse_candidate(raw, mode, correct_answer, iteration, taken)
        except ForgeError as exc:
            problem = str(exc)
            entry["rejected"] = problem
            if log_to is not None:
                log_to.append(entry)
            continue
        if log_to is not None:
            log_to.append(entry)
        return cand
    raise ForgeError(f"no valid distractor after {MAX_REREQUESTS} re-requests: {problem}", raw=raw)


def generate_distractors(question: str, correct_answer: str, retrieved_context: str, count: int,
                         mode: str, chat: ChatClient, prompts: PromptLibrary | None = None,
                         iteration: int = 0, previous: Sequence[DistractorCandidate] | None = None,
                         log_to: list | None = None) -> list[DistractorCandidate]:
    """``count`` candidates, one completion each.

    With ``previous`` the regeneration prompt is used, each new candidate citing
    the one it replaces.
    """
    if count < 1:
        raise ArgumentError("count must be >= 1")
    if mode not in MODES:
        raise ArgumentError(f"mode must be one of {MODES}")
    prompts = prompts or PromptLibrary()
    values = {"question": question, "correct_answer": correct_answer, "original_document": retrieved_context}
    taken: list[str] = []
    out = []
    for i in range(count):
        if previous:
            template = prompts.text("regen_fake_answer.txt")
            vals = {**values, "old_incorrect_answer": previous[i % len(previous)].text}
            cand_mode = "full"
        else:
            template = prompts.text("fake_answer_naive.txt" if mode == "naive" else "fake_answer.txt")
            vals = values
            cand_mode = mode
        cand = _request_one(chat, template, vals, cand_mode, correct_answer, iteration, taken, log_to)
        taken.append(cand.text)
        out.append(cand)
    return out


# -------------------------------------------------------------------- gating


def nli_pair(question: str, correct_answer: str, candidate: str) -> tuple[str, str]:
    return f"{question} {correct_answer}", f"{question} {candidate}"


def gate_difficulty(question: str, correct_answer: str, candidates: Sequence[DistractorCandidate],
                    nli: NliClient, threshold: float = DEFAULT_THRESHOLD) -> ForgeVerdict:
    if not candidates:
        raise ArgumentError("gate needs at least one candidate")
    probs: list[float | None] = []
    for cand in candidates:
        premise, hypothesis = nli_pair(question, correct_answer, cand.text)
        try:
            probs.append(nli.nli(premise, hypothesis).entail)
        except ProviderError as exc:
            log.warning("NLI failed for candidate %r: %s", cand.text, exc)
            probs.append(None)
    known = [p for p in probs if p is not None]
    if not known:
        log.warning("no NLI verdicts available; marking not difficult")
    return ForgeVerdict(bool(known) and max(known) >= threshold, tuple(probs), 0, threshold)


# --------------------------------------------------------------------- forge


def forge_instance(seed: ForgeSeed, chat: ChatClient, nli: NliClient, max_iterations: int = 3,
                   count: int = 3, first_mode: str = "naive", threshold: float = DEFAULT_THRESHOLD,
                   rng_seed: int = 0, prompts: PromptLibrary | None = None) -> ForgeResult:
    """Generate, gate, and regenerate up to ``max_iterations`` times; always emits an instance."""
    if max_iterations < 1:
        raise ArgumentError("max_iterations must be >= 1")
    calls: list = []
    history = []
    cands = generate_distractors(seed.question, seed.answer, seed.document, count, first_mode, chat,
                                 prompts, iteration=0, log_to=calls)
    verdict = gate_difficulty(seed.question, seed.answer, cands, nli, threshold)
    history.append({"iteration": 0, "candidates": [c.to_record() for c in cands], **verdict.to_record()})
    used = 0
    while not verdict.difficult and used < max_iterations:
        used += 1
        cands = generate_distractors(seed.question, seed.answer, seed.document, count, "full", chat,
                                     prompts, iteration=used, previous=cands, log_to=calls)
        verdict = gate_difficulty(seed.question, seed.answer, cands, nli, threshold)
        history.append({"iteration": used, "candidates": [c.to_record() for c in cands], **verdict.to_record()})
    verdict = ForgeVerdict(verdict.difficult, verdict.entail_probs, used, threshold)

    options, answer_index = permute_options(
        [seed.answer] + [c.text for c in cands], 0, derive_rng(rng_seed, "forge", seed.id)
    )
    tags = tuple(seed.tags) + (() if verdict.difficult else (NOT_DIFFICULT,))
    inst = McqaInstance(seed.id, seed.question, tuple(options), answer_index, seed.corpus_ref, tags)
    provenance = {
        "id": seed.id,
        "verdict": verdict.to_record(),
        "iterations": history,
        "calls": calls,
    }
    return ForgeResult(inst, verdict, cands, provenance)


def forge_dataset(seeds: Sequence[ForgeSeed], chat: ChatClient, nli: NliClient, concurrency: int = 1,
                  **kwargs) -> list[ForgeResult]:
    def one(s):
        return forge_instance(s, chat, nli, **kwargs)

    if concurrency == 1:
        return [one(s) for s in seeds]
    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        return list(pool.map(one, seeds))


def forge_report(verdicts: Sequence[ForgeVerdict], max_iterations: int = 3) -> dict[str, float]:
    """Percentage of instances difficult after iteration 0 (Naive) through ``max_iterations``."""
    if not verdicts:
        raise ArgumentError("forge_report needs at least one verdict")
    n = len(verdicts)
    row = {}
    for j in range(max_iterations + 1):
        label = "Naive" if j == 0 else f"Iter {j}"
        hits = sum(1 for v in verdicts if v.difficult and v.iterations_used <= j)
        row[label] = 100.0 * hits / n
    return row


def write_provenance(results: Sequence[ForgeResult], out_dir) -> None:
    base = Path(out_dir) / "provenance"
    base.mkdir(parents=True, exist_ok=True)
    for r in results:
        safe = re.sub(r"[^\w.-]", "_", r.instance.id)
        (base / f"{safe}.json").write_text(dump_record(r.provenance) + "\n", encoding="utf-8")

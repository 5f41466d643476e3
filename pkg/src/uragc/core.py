"""Domain types, dataset/corpus I/O and small deterministic utilities."""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ArgumentError, DatasetParseError, IntegrityError

LETTERS = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"


def normalize_text(text: str) -> str:
    return " ".join(text.split()).casefold()


def option_letters(k: int) -> list[str]:
    if not 1 <= k <= len(LETTERS):
        raise ArgumentError(f"cannot label {k} options with single letters")
    return list(LETTERS[:k])


@dataclass(frozen=True)
class McqaInstance:
    id: str
    question: str
    options: tuple[str, ...]
    answer_index: int
    corpus_ref: str = ""
    tags: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "options", tuple(self.options))
        object.__setattr__(self, "tags", tuple(self.tags))
        if len(self.options) < 2:
            raise IntegrityError(f"{self.id}: need at least 2 options, got {len(self.options)}")
        if not 0 <= self.answer_index < len(self.options):
            raise IntegrityError(
                f"{self.id}: answer_index {self.answer_index} out of range for {len(self.options)} options"
            )
        normed = [normalize_text(o) for o in self.options]
        if len(set(normed)) != len(normed):
            raise IntegrityError(f"{self.id}: option texts are not pairwise distinct")

    @property
    def k(self) -> int:
        return len(self.options)

    @property
    def answer(self) -> str:
        return self.options[self.answer_index]

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "question": self.question,
            "options": list(self.options),
            "answer_index": self.answer_index,
            "corpus_ref": self.corpus_ref,
            "tags": list(self.tags),
        }


@dataclass(frozen=True)
class Document:
    id: str
    body: str
    title: str | None = None
    embedding: tuple[float, ...] | None = None

    def __post_init__(self):
        if not self.body or not self.body.strip():
            raise IntegrityError(f"document {self.id}: empty body")
        if self.embedding is not None:
            emb = tuple(float(x) for x in self.embedding)
            norm = math.sqrt(math.fsum(x * x for x in emb))
            if abs(norm - 1.0) > 1e-6:
                raise IntegrityError(f"document {self.id}: embedding norm {norm} is not 1")
            object.__setattr__(self, "embedding", emb)

    @property
    def text(self) -> str:
        return f"{self.title}\n{self.body}" if self.title else self.body

    def to_record(self) -> dict:
        rec = {"id": self.id}
        if self.title is not None:
            rec["title"] = self.title
        rec["body"] = self.body
        return rec


@dataclass(frozen=True)
class OptionDistribution:
    """Normalized probability vector over one question's options.

    ``flags`` names any degradation applied while producing it (floor rule,
    one-hot fallback, dropped documents); flagged distributions are kept but
    excluded from headline metrics.
    """

    probs: tuple[float, ...]
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        probs = tuple(float(p) for p in self.probs)
        if not probs:
            raise ArgumentError("empty distribution")
        if any(p < 0.0 or p > 1.0 or math.isnan(p) for p in probs):
            raise ArgumentError(f"probabilities outside [0, 1]: {probs}")
        if abs(math.fsum(probs) - 1.0) > 1e-9:
            raise ArgumentError(f"probabilities sum to {math.fsum(probs)}, not 1")
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "flags", tuple(self.flags))

    def __len__(self) -> int:
        return len(self.probs)

    @classmethod
    def from_weights(cls, weights: Sequence[float], flags: Iterable[str] = ()) -> "OptionDistribution":
        total = math.fsum(weights)
        if total <= 0:
            raise ArgumentError("weights must have positive mass")
        probs = [w / total for w in weights]
        # push the rounding residue onto the largest entry so the sum is exact to 1e-9
        residue = 1.0 - math.fsum(probs)
        top = stable_argmax(probs)
        probs[top] = min(1.0, max(0.0, probs[top] + residue))
        return cls(tuple(probs), tuple(flags))

    def with_flags(self, *flags: str) -> "OptionDistribution":
        merged = tuple(dict.fromkeys(self.flags + flags))
        return OptionDistribution(self.probs, merged)


@dataclass(frozen=True)
class SplitSpec:
    calibration_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    seed: int

    def __post_init__(self):
        if set(self.calibration_ids) & set(self.test_ids):
            raise IntegrityError("calibration and test ids overlap")


@dataclass(frozen=True)
class Step:
    """One action of a strategy run: what was asked, retrieved and answered."""

    kind: str
    query: str | None = None
    action: str | None = None
    doc_ids: tuple[str, ...] = ()
    prompt: str | None = None
    completion: str | None = None
    note: str | None = None

    def to_record(self) -> dict:
        return {
            "kind": self.kind,
            "query": self.query,
            "action": self.action,
            "doc_ids": list(self.doc_ids),
            "prompt": self.prompt,
            "completion": self.completion,
            "note": self.note,
        }


@dataclass
class StrategyTrace:
    instance_id: str
    strategy: str
    steps: list[Step] = field(default_factory=list)
    final_distribution: OptionDistribution | None = None
    flags: list[str] = field(default_factory=list)

    def add(self, step: Step) -> Step:
        self.steps.append(step)
        return step

    def flag(self, name: str) -> None:
        if name not in self.flags:
            self.flags.append(name)

    @property
    def retrieved_ids(self) -> list[str]:
        out: list[str] = []
        for s in self.steps:
            out.extend(s.doc_ids)
        return out

    def to_record(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "strategy": self.strategy,
            "steps": [s.to_record() for s in self.steps],
            "final_distribution": list(self.final_distribution.probs) if self.final_distribution else None,
            "flags": list(self.flags),
        }


# --------------------------------------------------------------------- I/O


def _iter_jsonl(path: Path):
    if not Path(path).is_file():
        raise ArgumentError(f"file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetParseError(path, line_no, f"invalid JSON: {exc.msg}") from exc
            if not isinstance(rec, dict):
                raise DatasetParseError(path, line_no, "record is not an object")
            yield line_no, rec


def load_dataset(path) -> list[McqaInstance]:
    path = Path(path)
    instances: list[McqaInstance] = []
    seen: set[str] = set()
    k_expected: int | None = None
    for line_no, rec in _iter_jsonl(path):
        try:
            options = rec["options"]
            answer_index = rec["answer_index"]
            if not isinstance(options, list) or not all(isinstance(o, str) for o in options):
                raise TypeError("options must be a list of strings")
            if not isinstance(answer_index, int) or isinstance(answer_index, bool):
                raise TypeError("answer_index must be an integer")
            inst_id = str(rec["id"])
            question = rec["question"]
            if not isinstance(question, str):
                raise TypeError("question must be a string")
        except (KeyError, TypeError) as exc:
            raise DatasetParseError(path, line_no, f"malformed record: {exc}") from exc
        if inst_id in seen:
            raise IntegrityError(f"{path}:{line_no}: duplicate id {inst_id!r}")
        seen.add(inst_id)
        try:
            inst = McqaInstance(
                id=inst_id,
                question=question,
                options=tuple(options),
                answer_index=answer_index,
                corpus_ref=str(rec.get("corpus_ref", "")),
                tags=tuple(rec.get("tags", ())),
            )
        except IntegrityError as exc:
            raise IntegrityError(f"{path}:{line_no}: {exc}") from exc
        if k_expected is None:
            k_expected = inst.k
        elif inst.k != k_expected:
            raise IntegrityError(f"{path}:{line_no}: {inst.k} options, expected {k_expected} like earlier records")
        instances.append(inst)
    return instances


def dump_record(rec: dict) -> str:
    return json.dumps(rec, ensure_ascii=False)


def save_dataset(instances: Iterable[McqaInstance], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(dump_record(inst.to_record()) + "\n")


def load_corpus(path) -> list[Document]:
    path = Path(path)
    docs: list[Document] = []
    seen: set[str] = set()
    for line_no, rec in _iter_jsonl(path):
        try:
            doc_id = str(rec["id"])
            body = rec["body"]
        except KeyError as exc:
            raise DatasetParseError(path, line_no, f"missing field {exc}") from exc
        if doc_id in seen:
            raise IntegrityError(f"{path}:{line_no}: duplicate document id {doc_id!r}")
        seen.add(doc_id)
        try:
            docs.append(Document(id=doc_id, body=body, title=rec.get("title")))
        except IntegrityError as exc:
            raise IntegrityError(f"{path}:{line_no}: {exc}") from exc
    return docs


def save_corpus(docs: Iterable[Document], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(dump_record(doc.to_record()) + "\n")


# ----------------------------------------------------------- deterministic utils


def derive_seed(seed: int, *keys) -> int:
    """Stable 64-bit seed for a (seed, key...) tuple, independent of PYTHONHASHSEED."""
    h = hashlib.sha256(repr((int(seed),) + tuple(str(k) for k in keys)).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little")


def derive_rng(seed: int, *keys) -> random.Random:
    return random.Random(derive_seed(seed, *keys))


def split(instances: Sequence[McqaInstance], fraction: float, seed: int) -> SplitSpec:
    if not instances:
        raise ArgumentError("cannot split an empty dataset")
    if not 0.0 < fraction < 1.0:
        raise ArgumentError(f"fraction must lie in (0, 1), got {fraction}")
    ids = [inst.id for inst in instances]
    random.Random(seed).shuffle(ids)
    n_cal = round(fraction * len(ids))
    return SplitSpec(tuple(ids[:n_cal]), tuple(ids[n_cal:]), seed)


def stable_argmax(probs: Sequence[float]) -> int:
    if len(probs) == 0:
        raise ArgumentError("argmax of an empty vector")
    best = 0
    for i in range(1, len(probs)):
        if probs[i] > probs[best]:
            best = i
    return best


def permute_options(options: Sequence[str], answer_index: int, rng: random.Random) -> tuple[tuple[str, ...], int]:
    order = list(range(len(options)))
    rng.shuffle(order)
    new_options = tuple(options[i] for i in order)
    return new_options, order.index(answer_index)


def split_by_count(instances: Sequence[McqaInstance], n_calibration: int, seed: int) -> SplitSpec:
    n = len(instances)
    if not 1 <= n_calibration < n:
        raise ArgumentError(f"calibration size must lie in [1, {n - 1}], got {n_calibration}")
    ids = [inst.id for inst in instances]
    random.Random(seed).shuffle(ids)
    return SplitSpec(tuple(ids[:n_calibration]), tuple(ids[n_calibration:]), seed)

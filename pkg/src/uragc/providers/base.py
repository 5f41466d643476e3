"""Client-side contracts for the chat, embedding and NLI services.

Backends only move bytes: they turn a request into a raw reply.  Everything
the harness relies on (normalization, restricted softmax over option labels,
renormalizing NLI verdicts, bounded concurrency) lives in the clients here so
that HTTP and mock backends behave identically.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
import threading
from dataclasses import dataclass, field
from typing import Protocol, Sequence

from ..core import OptionDistribution
from ..errors import ArgumentError, CapabilityError, ProviderError

log = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.1
FLOOR_OFFSET = 10.0
FLAG_FLOOR = "logprob_floor"
FLAG_ONE_HOT = "one_hot_fallback"
FLAG_NLI_RENORM = "nli_renormalized"

_ANSWER_RE = re.compile(r"Answer\s*\|\s*([A-Z])")


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[tuple[str, str], ...]
    temperature: float = DEFAULT_TEMPERATURE
    max_tokens: int = 256
    want_logprobs: bool = False
    logprob_top_n: int = 20

    def __post_init__(self):
        object.__setattr__(self, "messages", tuple((str(r), str(t)) for r, t in self.messages))
        if not self.messages:
            raise ArgumentError("chat request needs at least one message")
        if not 0.0 <= self.temperature <= 2.0:
            raise ArgumentError(f"temperature {self.temperature} outside [0, 2]")
        if self.max_tokens < 1:
            raise ArgumentError("max_tokens must be positive")

    @classmethod
    def user(cls, prompt: str, system: str | None = None, **kwargs) -> "ChatRequest":
        msgs = [("system", system)] if system else []
        msgs.append(("user", prompt))
        return cls(tuple(msgs), **kwargs)

    def to_body(self, model: str = "") -> dict:
        body = {
            "model": model,
            "messages": [{"role": r, "content": t} for r, t in self.messages],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }
        if self.want_logprobs:
            body["logprobs"] = True
            body["top_logprobs"] = self.logprob_top_n
        return body

    def digest(self, model: str = "") -> str:
        return request_hash(self.to_body(model))


def request_hash(body: dict) -> str:
    canonical = json.dumps(body, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class TokenPosition:
    token: str
    candidates: tuple[tuple[str, float], ...]


@dataclass(frozen=True)
class TokenLogprobs:
    positions: tuple[TokenPosition, ...]

    def __post_init__(self):
        fixed = []
        for pos in self.positions:
            cands = tuple(sorted(((str(t), float(lp)) for t, lp in pos.candidates), key=lambda c: -c[1]))
            if any(lp > 1e-12 for _, lp in cands):
                raise ProviderError(f"positive logprob in candidates {cands}")
            fixed.append(TokenPosition(pos.token, cands))
        object.__setattr__(self, "positions", tuple(fixed))


@dataclass(frozen=True)
class ChatResult:
    text: str
    logprobs: TokenLogprobs | None
    request_id: str


@dataclass(frozen=True)
class NliVerdict:
    entail: float
    neutral: float
    contradict: float
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        vals = (self.entail, self.neutral, self.contradict)
        if any(v < 0 or v > 1 for v in vals) or abs(sum(vals) - 1.0) > 1e-6:
            raise ProviderError(f"invalid NLI verdict {vals}")


class Backend(Protocol):
    """What a concrete provider has to offer; any subset may raise CapabilityError."""

    name: str

    def chat_raw(self, request: ChatRequest) -> tuple[str, TokenLogprobs | None]: ...

    def embed_raw(self, texts: Sequence[str]) -> list[list[float]]: ...

    def nli_raw(self, premise: str, hypothesis: str) -> tuple[float, float, float]: ...


# ------------------------------------------------------------------ math helpers


def restricted_softmax(logits: Sequence[float]) -> list[float]:
    """Softmax over a small logit vector, shifted by its max for stability."""
    if not logits:
        raise ArgumentError("softmax of an empty vector")
    top = max(logits)
    exps = [math.exp(z - top) for z in logits]
    total = math.fsum(exps)
    return [e / total for e in exps]


def _label_of(token: str) -> str:
    return token.strip().lstrip("|").strip()


def locate_answer_position(logprobs: TokenLogprobs, labels: Sequence[str]) -> int:
    """Index of the generated position that carries the option letter.

    Preference order: the token right after an ``Answer|`` prefix, then the
    first position whose sampled token is a label, then the first position
    whose candidates contain any label, else position 0.
    """
    label_set = set(labels)
    positions = logprobs.positions
    prefix = ""
    for i, pos in enumerate(positions):
        if prefix.rstrip().endswith("|") and _label_of(pos.token) in label_set:
            return i
        prefix += pos.token
    for i, pos in enumerate(positions):
        if _label_of(pos.token) in label_set:
            return i
    for i, pos in enumerate(positions):
        if any(_label_of(t) in label_set for t, _ in pos.candidates):
            return i
    return 0


def parse_answer_letter(text: str) -> str | None:
    m = _ANSWER_RE.search(text)
    return m.group(1) if m else None


# ----------------------------------------------------------------------- clients


@dataclass
class Telemetry:
    requests: int = 0
    retries: int = 0
    failures: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def bump(self, **counts: int) -> None:
        with self._lock:
            for k, v in counts.items():
                setattr(self, k, getattr(self, k) + v)


class ChatClient:
    def __init__(
        self,
        backend: Backend,
        model: str = "",
        temperature: float = DEFAULT_TEMPERATURE,
        max_in_flight: int = 8,
        floor_rule: bool = True,
        one_hot_fallback: bool = False,
        top_n: int = 20,
    ):
        self.backend = backend
        self.model = model
        self.temperature = temperature
        self.floor_rule = floor_rule
        self.one_hot_fallback = one_hot_fallback
        self.top_n = top_n
        self._sem = threading.BoundedSemaphore(max_in_flight)

    def chat(self, request: ChatRequest) -> ChatResult:
        with self._sem:
            text, lps = self.backend.chat_raw(request)
        if text is None:
            raise ProviderError("backend returned a null completion")
        if request.want_logprobs and lps is None and not self.one_hot_fallback:
            raise CapabilityError(f"{self.backend.name} returned no logprobs")
        return ChatResult(text, lps, request.digest(self.model))

    def generate(self, prompt: str, system: str | None = None, temperature: float | None = None,
                 max_tokens: int = 512) -> str:
        req = ChatRequest.user(
            prompt,
            system=system,
            temperature=self.temperature if temperature is None else temperature,
            max_tokens=max_tokens,
        )
        return self.chat(req).text

    def score_options(self, question_prompt: str, option_labels: Sequence[str]) -> OptionDistribution:
        """Option probabilities from the label-token logprobs at the answer position."""
        return self.score_options_detailed(question_prompt, option_labels)[0]

    def score_options_detailed(
        self, question_prompt: str, option_labels: Sequence[str]
    ) -> tuple[OptionDistribution, ChatResult]:
        labels = list(option_labels)
        if len(labels) < 2 or len(set(labels)) != len(labels):
            raise ArgumentError(f"need >= 2 distinct labels, got {labels}")
        if any(len(lab) != 1 for lab in labels):
            raise ArgumentError(f"labels must be single characters, got {labels}")
        req = ChatRequest.user(
            question_prompt,
            temperature=self.temperature,
            max_tokens=8,
            want_logprobs=True,
            logprob_top_n=max(self.top_n, len(labels)),
        )
        result = self.chat(req)
        if result.logprobs is None or not result.logprobs.positions:
            return self._one_hot(result.text, labels), result
        return distribution_from_logprobs(result.logprobs, labels, floor_rule=self.floor_rule), result

    def _one_hot(self, text: str, labels: list[str]) -> OptionDistribution:
        if not self.one_hot_fallback:
            raise CapabilityError(f"{self.backend.name} returned no logprobs")
        letter = parse_answer_letter(text)
        if letter not in labels:
            raise ProviderError(f"cannot parse an answer letter from {text!r}")
        probs = [1.0 if lab == letter else 0.0 for lab in labels]
        return OptionDistribution(tuple(probs), (FLAG_ONE_HOT,))


def distribution_from_logprobs(logprobs: TokenLogprobs, labels: Sequence[str], floor_rule: bool = True) -> OptionDistribution:
    pos = logprobs.positions[locate_answer_position(logprobs, labels)]
    found: dict[str, float] = {}
    for tok, lp in pos.candidates:
        lab = _label_of(tok)
        if lab in labels and (lab not in found or lp > found[lab]):
            found[lab] = lp
    flags: tuple[str, ...] = ()
    missing = [lab for lab in labels if lab not in found]
    if missing:
        if not floor_rule or not pos.candidates:
            raise CapabilityError(f"labels {missing} absent from the top candidates")
        floor = min(lp for _, lp in pos.candidates) - FLOOR_OFFSET
        for lab in missing:
            found[lab] = floor
        flags = (FLAG_FLOOR,)
    probs = restricted_softmax([found[lab] for lab in labels])
    return OptionDistribution.from_weights(probs, flags)


class Embedder:
    def __init__(self, backend: Backend, max_in_flight: int = 8):
        self.backend = backend
        self._sem = threading.BoundedSemaphore(max_in_flight)

    def embed(self, texts: Sequence[str]) -> list[tuple[float, ...]]:
        texts = list(texts)
        if not texts:
            raise ArgumentError("embed needs at least one text")
        for i, t in enumerate(texts):
            if not isinstance(t, str) or not t.strip():
                raise ArgumentError(f"text {i} is empty")
        with self._sem:
            raw = self.backend.embed_raw(texts)
        if len(raw) != len(texts):
            raise ProviderError(f"expected {len(texts)} vectors, got {len(raw)}")
        dims = {len(v) for v in raw}
        if len(dims) != 1:
            raise ProviderError(f"mixed embedding dimensions {sorted(dims)} in one batch")
        out = []
        for v in raw:
            norm = math.sqrt(math.fsum(float(x) * float(x) for x in v))
            if norm == 0.0:
                raise ProviderError("backend returned a zero vector")
            out.append(tuple(float(x) / norm for x in v))
        return out

    def embed_one(self, text: str) -> tuple[float, ...]:
        return self.embed([text])[0]


NLI_CHAT_PROMPT = (
    "Decide whether the premise entails the hypothesis.\n"
    "Premise: {premise}\nHypothesis: {hypothesis}\n"
    'Reply with JSON only: {{"entail": p1, "neutral": p2, "contradict": p3}} where the three '
    "probabilities sum to 1."
)


class NliClient:
    """NLI via a dedicated backend, or via chat prompting when none is configured."""

    def __init__(self, backend: Backend | None = None, chat: ChatClient | None = None, max_in_flight: int = 8):
        if backend is None and chat is None:
            raise ArgumentError("NLI needs a backend or a chat client")
        self.backend = backend
        self.chat = chat
        self._sem = threading.BoundedSemaphore(max_in_flight)

    def nli(self, premise: str, hypothesis: str) -> NliVerdict:
        if not premise.strip() or not hypothesis.strip():
            raise ArgumentError("premise and hypothesis must be non-empty")
        with self._sem:
            if self.backend is not None:
                raw = self.backend.nli_raw(premise, hypothesis)
            else:
                raw = self._via_chat(premise, hypothesis)
        return verdict_from_raw(raw)

    def _via_chat(self, premise: str, hypothesis: str) -> tuple[float, float, float]:
        text = self.chat.generate(NLI_CHAT_PROMPT.format(premise=premise, hypothesis=hypothesis), max_tokens=64)
        m = re.search(r"\{.*\}", text, re.S)
        try:
            rec = json.loads(m.group(0)) if m else None
            return float(rec["entail"]), float(rec["neutral"]), float(rec["contradict"])
        except (TypeError, KeyError, ValueError, json.JSONDecodeError) as exc:
            raise ProviderError(f"malformed NLI reply {text!r}") from exc


def verdict_from_raw(raw: Sequence[float]) -> NliVerdict:
    try:
        e, n, c = (float(x) for x in raw)
    except (TypeError, ValueError) as exc:
        raise ProviderError(f"malformed NLI output {raw!r}") from exc
    vals = (e, n, c)
    if any(math.isnan(v) or v < 0 for v in vals):
        raise ProviderError(f"malformed NLI output {vals}")
    total = e + n + c
    if total <= 0:
        raise ProviderError(f"NLI output has no mass: {vals}")
    if abs(total - 1.0) > 1e-6:
        log.warning("NLI probabilities sum to %.6f; renormalizing", total)
        return NliVerdict(e / total, n / total, c / total, (FLAG_NLI_RENORM,))
    return NliVerdict(e, n, c)

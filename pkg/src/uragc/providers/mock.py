"""Deterministic scripted backend.

Script layout (JSON)::

    {
      "chat": {
        "by_hash": {"<sha256 of request body>": RESPONSE},
        "keyed":   {"pattern": "<regex with one group>", "entries": {"<key>": RESPONSE}},
        "rules":   [{"contains": "<substring>" | ["<all>", "<of these>"], "response": RESPONSE}, ...],
        "default": RESPONSE
      },
      "embed": {"dimension": 64, "vectors": {"<text>": [..]}},
      "nli":   {"rules": [{"premise_contains": "..", "hypothesis_contains": "..",
                           "verdict": [e, n, c]}], "default": [e, n, c]}
    }

RESPONSE is ``{"text": str, "logprobs": {token: logprob}}``; ``"logits"`` may
replace ``"logprobs"`` (converted by log-softmax), ``"positions"`` gives full
per-position control, and ``{"error": "retryable"|"provider"|"capability"}``
raises.  Lookup order is hash, keyed pattern, first matching rule, default,
then a hash-derived fallback, so identical requests always get identical replies.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import threading
from pathlib import Path
from typing import Sequence

from ..errors import CapabilityError, ProviderError, RetryableProviderError
from .base import ChatRequest, TokenLogprobs, TokenPosition

_WORD = re.compile(r"\w+")
FALLBACK_LABELS = "ABCDEFGH"


def _digest(text: str) -> bytes:
    return hashlib.sha256(text.encode("utf-8")).digest()


def hashed_bow_vector(text: str, dimension: int = 64) -> list[float]:
    """Signed feature-hashing of lowercase word tokens (unnormalized)."""
    vec = [0.0] * dimension
    for tok in _WORD.findall(text.lower()):
        d = _digest(tok)
        idx = int.from_bytes(d[:4], "little") % dimension
        vec[idx] += 1.0 if d[4] & 1 else -1.0
    if not any(vec):
        d = _digest(text)
        vec[int.from_bytes(d[:4], "little") % dimension] = 1.0
    return vec


def _log_softmax(logits: dict[str, float]) -> dict[str, float]:
    top = max(logits.values())
    lse = top + math.log(math.fsum(math.exp(v - top) for v in logits.values()))
    return {k: v - lse for k, v in logits.items()}


class MockBackend:
    def __init__(self, script: dict | None = None, record: bool = False):
        self.name = "mock"
        script = script or {}
        chat = script.get("chat", {})
        self._by_hash = chat.get("by_hash", {})
        keyed = chat.get("keyed")
        self._key_re = re.compile(keyed["pattern"]) if keyed else None
        self._keyed = keyed.get("entries", {}) if keyed else {}
        self._rules = chat.get("rules", [])
        self._default = chat.get("default")
        embed = script.get("embed", {})
        self.dimension = int(embed.get("dimension", 64))
        self._vectors = embed.get("vectors", {})
        nli = script.get("nli", {})
        self._nli_rules = nli.get("rules", [])
        self._nli_default = nli.get("default")
        self.record = record
        self.calls: list[dict] = []
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path, record: bool = False) -> "MockBackend":
        with open(Path(path), encoding="utf-8") as fh:
            return cls(json.load(fh), record=record)

    def _log(self, kind: str, payload) -> None:
        if self.record:
            with self._lock:
                self.calls.append({"kind": kind, "payload": payload})

    # ------------------------------------------------------------------ chat

    def _lookup(self, request: ChatRequest) -> dict | None:
        h = request.digest()
        if h in self._by_hash:
            return self._by_hash[h]
        text = "\n".join(t for _, t in request.messages)
        if self._key_re is not None:
            m = self._key_re.search(text)
            if m and m.group(1) in self._keyed:
                return self._keyed[m.group(1)]
        for rule in self._rules:
            needles = rule["contains"]
            if isinstance(needles, str):
                needles = [needles]
            if all(n in text for n in needles):
                return rule["response"]
        return self._default

    def chat_raw(self, request: ChatRequest) -> tuple[str, TokenLogprobs | None]:
        self._log("chat", request.to_body())
        resp = self._lookup(request)
        if resp is None:
            return self._fallback(request)
        err = resp.get("error")
        if err:
            raise {"retryable": RetryableProviderError, "capability": CapabilityError}.get(err, ProviderError)(
                f"scripted {err} error"
            )
        text = resp.get("text", "")
        if not request.want_logprobs:
            return text, None
        if "positions" in resp:
            positions = tuple(
                TokenPosition(p["token"], tuple(p["top"].items())) for p in resp["positions"]
            )
            return text, TokenLogprobs(positions)
        if "logits" in resp:
            lps = _log_softmax({k: float(v) for k, v in resp["logits"].items()})
        elif "logprobs" in resp:
            lps = {k: float(v) for k, v in resp["logprobs"].items()}
        else:
            return text, None
        ranked = sorted(lps.items(), key=lambda kv: -kv[1])[: request.logprob_top_n]
        return text, TokenLogprobs((TokenPosition(ranked[0][0], tuple(ranked)),))

    def _fallback(self, request: ChatRequest) -> tuple[str, TokenLogprobs | None]:
        d = _digest(request.digest())
        if not request.want_logprobs:
            return f"mock-{d.hex()[:12]}", None
        logits = {lab: (d[i] / 255.0) * 4.0 for i, lab in enumerate(FALLBACK_LABELS)}
        lps = _log_softmax(logits)
        ranked = sorted(lps.items(), key=lambda kv: (-kv[1], kv[0]))
        return f"Answer|{ranked[0][0]}", TokenLogprobs((TokenPosition(ranked[0][0], tuple(ranked)),))

    # ----------------------------------------------------------------- embed

    def embed_raw(self, texts: Sequence[str]) -> list[list[float]]:
        self._log("embed", list(texts))
        out = []
        for t in texts:
            if t in self._vectors:
                out.append([float(x) for x in self._vectors[t]])
            else:
                out.append(hashed_bow_vector(t, self.dimension))
        return out

    # ------------------------------------------------------------------- nli

    def nli_raw(self, premise: str, hypothesis: str) -> tuple[float, float, float]:
        self._log("nli", {"premise": premise, "hypothesis": hypothesis})
        for rule in self._nli_rules:
            if rule.get("premise_contains", "") in premise and rule.get("hypothesis_contains", "") in hypothesis:
                if rule.get("error"):
                    raise ProviderError("scripted NLI failure")
                return tuple(rule["verdict"])
        if self._nli_default is not None:
            return tuple(self._nli_default)
        a = set(_WORD.findall(premise.lower()))
        b = set(_WORD.findall(hypothesis.lower()))
        overlap = len(a & b) / len(a | b) if a | b else 1.0
        entail = 0.05 + 0.9 * overlap
        rest = 1.0 - entail
        return entail, 0.6 * rest, 0.4 * rest

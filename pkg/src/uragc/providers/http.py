"""HTTP backend speaking the common chat-completions / embeddings JSON shapes."""

from __future__ import annotations

import logging
import time
from typing import Sequence

import httpx

from ..errors import CapabilityError, ProviderError, RetryableProviderError
from .base import ChatRequest, Telemetry, TokenLogprobs, TokenPosition

log = logging.getLogger(__name__)

CHAT_PATH = "/v1/chat/completions"
EMBED_PATH = "/v1/embeddings"
RETRY_STATUSES = frozenset({429, 500, 502, 503, 504})


def _endpoint(base: str, path: str) -> str:
    base = base.rstrip("/")
    return base if base.endswith(path) else base + path


class HttpBackend:
    """Talks to chat, embedding and NLI endpoints; any of the three may be unset.

    Retries transport errors and 429/5xx with exponential backoff; every
    other non-2xx status is surfaced as a ProviderError carrying the body.
    """

    def __init__(
        self,
        chat_url: str | None = None,
        embed_url: str | None = None,
        nli_url: str | None = None,
        api_key: str | None = None,
        chat_model: str = "",
        embed_model: str = "",
        attempts: int = 3,
        backoff: float = 0.5,
        timeout: float = 60.0,
        transport: httpx.BaseTransport | None = None,
    ):
        self.name = "http"
        self.chat_url = _endpoint(chat_url, CHAT_PATH) if chat_url else None
        self.embed_url = _endpoint(embed_url, EMBED_PATH) if embed_url else None
        self.nli_url = nli_url
        self.chat_model = chat_model
        self.embed_model = embed_model
        self.attempts = attempts
        self.backoff = backoff
        self.telemetry = Telemetry()
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = httpx.Client(headers=headers, timeout=timeout, transport=transport)

    def close(self) -> None:
        self._client.close()

    def _post(self, url: str | None, body: dict) -> dict:
        if url is None:
            raise CapabilityError("endpoint not configured")
        self.telemetry.bump(requests=1)
        last: Exception | None = None
        for attempt in range(self.attempts):
            if attempt:
                self.telemetry.bump(retries=1)
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self._client.post(url, json=body)
            except httpx.TransportError as exc:
                last = RetryableProviderError(f"transport failure talking to {url}: {exc}")
                log.warning("attempt %d/%d: %s", attempt + 1, self.attempts, last)
                continue
            if resp.status_code in RETRY_STATUSES:
                last = RetryableProviderError(
                    f"{url} answered {resp.status_code}", status=resp.status_code, body=resp.text
                )
                log.warning("attempt %d/%d: %s", attempt + 1, self.attempts, last)
                continue
            if not 200 <= resp.status_code < 300:
                self.telemetry.bump(failures=1)
                raise ProviderError(f"{url} answered {resp.status_code}", status=resp.status_code, body=resp.text)
            try:
                return resp.json()
            except ValueError as exc:
                self.telemetry.bump(failures=1)
                raise ProviderError(f"{url} returned non-JSON body", status=resp.status_code, body=resp.text) from exc
        self.telemetry.bump(failures=1)
        raise last

    def chat_raw(self, request: ChatRequest) -> tuple[str, TokenLogprobs | None]:
        data = self._post(self.chat_url, request.to_body(self.chat_model))
        try:
            choice = data["choices"][0]
            text = choice["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"malformed chat response: {data!r}"[:500]) from exc
        lp_block = (choice.get("logprobs") or {}).get("content") if isinstance(choice.get("logprobs"), dict) else None
        if not lp_block:
            return text, None
        positions = []
        for entry in lp_block:
            cands = [(c["token"], c["logprob"]) for c in entry.get("top_logprobs") or []]
            if not cands:
                cands = [(entry["token"], entry["logprob"])]
            positions.append(TokenPosition(entry["token"], tuple(cands)))
        return text, TokenLogprobs(tuple(positions))

    def embed_raw(self, texts: Sequence[str]) -> list[list[float]]:
        data = self._post(self.embed_url, {"model": self.embed_model, "input": list(texts)})
        try:
            rows = sorted(data["data"], key=lambda r: r.get("index", 0))
            return [list(map(float, r["embedding"])) for r in rows]
        except (KeyError, TypeError, ValueError) as exc:
            raise ProviderError("malformed embeddings response") from exc

    def nli_raw(self, premise: str, hypothesis: str) -> tuple[float, float, float]:
        data = self._post(self.nli_url, {"premise": premise, "hypothesis": hypothesis})
        return parse_nli_payload(data)


_NLI_KEYS = {
    "entail": "entail", "entailment": "entail",
    "neutral": "neutral",
    "contradict": "contradict", "contradiction": "contradict",
}


def parse_nli_payload(data) -> tuple[float, float, float]:
    """Accepts {entail, neutral, contradict} (or the -ment/-ion spellings) or a
    list of {label, score} entries, as classifier servers commonly return."""
    scores: dict[str, float] = {}
    if isinstance(data, dict) and "scores" in data:
        data = data["scores"]
    if isinstance(data, list) and data and isinstance(data[0], list):
        data = data[0]
    try:
        if isinstance(data, dict):
            for k, v in data.items():
                if k.lower() in _NLI_KEYS:
                    scores[_NLI_KEYS[k.lower()]] = float(v)
        elif isinstance(data, list):
            for entry in data:
                label = str(entry["label"]).lower()
                if label in _NLI_KEYS:
                    scores[_NLI_KEYS[label]] = float(entry["score"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ProviderError(f"malformed NLI response {data!r}") from exc
    if set(scores) != {"entail", "neutral", "contradict"}:
        raise ProviderError(f"malformed NLI response {data!r}")
    return scores["entail"], scores["neutral"], scores["contradict"]

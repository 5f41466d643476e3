from .base import (
    ChatClient,
    ChatRequest,
    ChatResult,
    Embedder,
    NliClient,
    NliVerdict,
    Telemetry,
    TokenLogprobs,
    TokenPosition,
    distribution_from_logprobs,
    locate_answer_position,
    parse_answer_letter,
    request_hash,
    restricted_softmax,
)
from .http import HttpBackend
from .mock import MockBackend, hashed_bow_vector

__all__ = [
    "ChatClient",
    "ChatRequest",
    "ChatResult",
    "Embedder",
    "HttpBackend",
    "MockBackend",
    "NliClient",
    "NliVerdict",
    "Telemetry",
    "TokenLogprobs",
    "TokenPosition",
    "distribution_from_logprobs",
    "hashed_bow_vector",
    "locate_answer_position",
    "parse_answer_letter",
    "request_hash",
    "restricted_softmax",
]

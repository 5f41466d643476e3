"""Split-conformal calibration with LAC and APS nonconformity scores."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .core import OptionDistribution, stable_argmax
from .errors import ArgumentError

LAC = "LAC"
APS = "APS"
METHODS = (LAC, APS)
INF = math.inf


def _probs(distribution) -> Sequence[float]:
    return distribution.probs if isinstance(distribution, OptionDistribution) else distribution


def _check_index(probs: Sequence[float], option_index: int) -> None:
    if not 0 <= option_index < len(probs):
        raise ArgumentError(f"option index {option_index} out of range for {len(probs)} options")


def lac_score(distribution, option_index: int) -> float:
    probs = _probs(distribution)
    _check_index(probs, option_index)
    return 1.0 - probs[option_index]


def aps_score(distribution, option_index: int) -> float:
    """Total mass of every option at least as probable as ``option_index``.

    Summed in descending-probability order so that repeated calls and the
    membership test in :func:`predict_set` agree to the last bit.
    """
    probs = _probs(distribution)
    _check_index(probs, option_index)
    pc = probs[option_index]
    total = 0.0
    for q in sorted(probs, reverse=True):
        if q >= pc:
            total += q
    return total


SCORERS = {LAC: lac_score, APS: aps_score}


def score(method: str, distribution, option_index: int) -> float:
    try:
        return SCORERS[method](distribution, option_index)
    except KeyError:
        raise ArgumentError(f"unknown score method {method!r}") from None


@dataclass(frozen=True)
class CalibrationModel:
    method: str
    alpha: float
    n: int
    q_hat: float

    def __post_init__(self):
        if self.method not in METHODS:
            raise ArgumentError(f"unknown score method {self.method!r}")
        if not 0.0 < self.alpha < 1.0:
            raise ArgumentError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.n < 1:
            raise ArgumentError("calibration needs n >= 1")
        if not (self.q_hat == INF or 0.0 - 1e-12 <= self.q_hat <= 1.0 + 1e-12):
            raise ArgumentError(f"q_hat {self.q_hat} outside [0, 1]")

    @property
    def overflow(self) -> bool:
        return self.q_hat == INF

    def to_record(self) -> dict:
        return {
            "method": self.method,
            "alpha": self.alpha,
            "n": self.n,
            "q_hat": "inf" if self.overflow else self.q_hat,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "CalibrationModel":
        q = rec["q_hat"]
        return cls(rec["method"], float(rec["alpha"]), int(rec["n"]), INF if q == "inf" else float(q))


def save_models(models: Sequence[CalibrationModel], path) -> None:
    Path(path).write_text(json.dumps([m.to_record() for m in models], indent=2) + "\n", encoding="utf-8")


def load_models(path) -> list[CalibrationModel]:
    return [CalibrationModel.from_record(r) for r in json.loads(Path(path).read_text(encoding="utf-8"))]


def quantile_rank(n: int, alpha: float) -> int:
    # the epsilon absorbs representation error, e.g. 10 * (1 - 0.1) = 9.000000000000002
    return math.ceil((n + 1) * (1.0 - alpha) - 1e-9)


def conformal_quantile(scores: Sequence[float], alpha: float) -> float:
    """The ceil((n+1)(1-alpha))-th smallest score, or +inf when that rank exceeds n."""
    n = len(scores)
    if n == 0:
        raise ArgumentError("no calibration scores")
    rank = quantile_rank(n, alpha)
    if rank > n:
        return INF
    return sorted(scores)[max(rank, 1) - 1]


@dataclass(frozen=True)
class ScoredInstance:
    instance_id: str
    distribution: OptionDistribution
    gold_index: int

    def __post_init__(self):
        _check_index(self.distribution.probs, self.gold_index)


def calibrate(scored: Sequence[ScoredInstance], method: str, alpha: float) -> CalibrationModel:
    if not scored:
        raise ArgumentError("calibration set is empty")
    if not 0.0 < alpha < 1.0:
        raise ArgumentError(f"alpha must lie in (0, 1), got {alpha}")
    scores = [score(method, s.distribution, s.gold_index) for s in scored]
    return CalibrationModel(method, alpha, len(scores), conformal_quantile(scores, alpha))


@dataclass(frozen=True)
class PredictionSet:
    method: str
    threshold: float
    members: tuple[int, ...]
    forced: bool = False

    def __len__(self) -> int:
        return len(self.members)

    def __contains__(self, index: int) -> bool:
        return index in self.members


def predict_set(model: CalibrationModel, distribution, force_nonempty: bool = False) -> PredictionSet:
    probs = _probs(distribution)
    if not probs:
        raise ArgumentError("empty distribution")
    if model.overflow:
        return PredictionSet(model.method, model.q_hat, tuple(range(len(probs))))
    scorer = SCORERS[model.method]
    members = tuple(c for c in range(len(probs)) if scorer(probs, c) <= model.q_hat)
    if not members and force_nonempty:
        return PredictionSet(model.method, model.q_hat, (stable_argmax(probs),), forced=True)
    return PredictionSet(model.method, model.q_hat, members)

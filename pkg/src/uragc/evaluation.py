"""Protocol orchestration: run a strategy over a split, calibrate, aggregate."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

from .conformal import APS, LAC, METHODS, CalibrationModel, ScoredInstance, calibrate, predict_set
from .core import McqaInstance, SplitSpec, StrategyTrace, stable_argmax
from .errors import ArgumentError, ProtocolError, StrategyError, UragcError
from .strategies import STRATEGIES, NoiseInjection, StrategyConfig, StrategyEnv

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

NORMAL = "normal"
SELF_AWARE = "self_aware"
WRONG_AWARE = "wrong_aware"
IRRELEVANT = "irrelevant_context"
ISOLATION = "knowledge_isolation"
DEPTH_SWEEP = "depth_sweep"
PROTOCOLS = (NORMAL, SELF_AWARE, WRONG_AWARE, IRRELEVANT, ISOLATION, DEPTH_SWEEP)

WRONG_AWARE_NOTE = (
    "wrong-aware display swaps the top option with the lowest one (swap_mode=max_min); "
    "the top-with-second reading is available as swap_mode=max_second"
)


@dataclass(frozen=True)
class ProtocolSpec:
    kind: str = NORMAL
    injected_count: int = 10
    injection_mode: str = "fresh"
    k_list: tuple[int, ...] = ()
    swap_mode: str = "max_min"

    def __post_init__(self):
        object.__setattr__(self, "k_list", tuple(int(k) for k in self.k_list))
        if self.kind not in PROTOCOLS:
            raise ArgumentError(f"unknown protocol {self.kind!r}; choose from {PROTOCOLS}")
        if self.kind == IRRELEVANT and self.injected_count < 1:
            raise ArgumentError("irrelevant-context protocol needs injected_count >= 1")
        if self.kind == DEPTH_SWEEP:
            ks = self.k_list
            if not ks or any(k < 1 for k in ks) or any(b <= a for a, b in zip(ks, ks[1:])):
                raise ArgumentError(f"k_list must be non-empty and strictly increasing, got {ks}")
        if self.swap_mode not in ("max_min", "max_second"):
            raise ArgumentError(f"unknown swap_mode {self.swap_mode!r}")

    def to_record(self) -> dict:
        return {
            "kind": self.kind,
            "injected_count": self.injected_count,
            "injection_mode": self.injection_mode,
            "k_list": list(self.k_list),
            "swap_mode": self.swap_mode,
        }


@dataclass(frozen=True)
class EvalConfig:
    alpha: float = 0.1
    seed: int = 0
    concurrency: int = 8
    exclude_flagged: bool = True
    force_nonempty: bool = False
    keep_traces: bool = True

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ArgumentError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.concurrency < 1:
            raise ArgumentError("concurrency must be >= 1")


@dataclass
class InstanceRecord:
    instance_id: str
    split: str
    strategy: str
    gold: int
    probs: tuple[float, ...] | None
    flags: tuple[str, ...] = ()
    sets: dict[str, tuple[int, ...]] = field(default_factory=dict)
    subset: str | None = None
    error: str | None = None
    trace: dict | None = None

    @property
    def ok(self) -> bool:
        return self.error is None and self.probs is not None

    @property
    def predicted(self) -> int:
        return stable_argmax(self.probs)

    @property
    def correct(self) -> bool:
        return self.predicted == self.gold

    def covered(self, method: str) -> bool:
        return self.gold in self.sets[method]

    def to_record(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "split": self.split,
            "strategy": self.strategy,
            "gold": self.gold,
            "probs": list(self.probs) if self.probs is not None else None,
            "predicted": self.predicted if self.ok else None,
            "correct": self.correct if self.ok else None,
            "flags": list(self.flags),
            "sets": {m: list(s) for m, s in self.sets.items()},
            "subset": self.subset,
            "error": self.error,
            "trace": self.trace,
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "InstanceRecord":
        return cls(
            instance_id=rec["instance_id"],
            split=rec["split"],
            strategy=rec["strategy"],
            gold=rec["gold"],
            probs=tuple(rec["probs"]) if rec["probs"] is not None else None,
            flags=tuple(rec.get("flags", ())),
            sets={m: tuple(s) for m, s in rec.get("sets", {}).items()},
            subset=rec.get("subset"),
            error=rec.get("error"),
            trace=rec.get("trace"),
        )


@dataclass(frozen=True)
class Aggregate:
    strategy: str
    method: str
    subset: str
    acc: float
    cr: float
    ss: float
    n: int

    def to_record(self) -> dict:
        return {"strategy": self.strategy, "method": self.method, "subset": self.subset,
                "acc": self.acc, "cr": self.cr, "ss": self.ss, "n": self.n}


@dataclass
class RunReport:
    metadata: dict
    records: list[InstanceRecord]
    calibration: list[CalibrationModel]
    aggregates: list[Aggregate]
    quality: dict

    def aggregate_for(self, method: str = "mean", subset: str = "all") -> Aggregate:
        for a in self.aggregates:
            if a.method == method and a.subset == subset:
                return a
        raise KeyError((method, subset))

    def summary_record(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "metadata": self.metadata,
            "calibration": [m.to_record() for m in self.calibration],
            "aggregates": [a.to_record() for a in self.aggregates],
            "quality": self.quality,
        }


def config_hash(obj) -> str:
    canonical = json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# ------------------------------------------------------------------ displays


def apply_wrong_aware(probs: Sequence[float], swap_mode: str = "max_min") -> list[float]:
    """Permuted copy for display only: the first maximum trades places with the
    last minimum (or with the runner-up under ``max_second``)."""
    if len(probs) < 2:
        raise ArgumentError("wrong-aware display needs at least 2 options")
    out = list(probs)
    hi = stable_argmax(out)
    if swap_mode == "max_min":
        lo_val = min(out)
        lo = max(i for i, p in enumerate(out) if p == lo_val)
    elif swap_mode == "max_second":
        order = sorted(range(len(out)), key=lambda i: (-out[i], i))
        lo = order[1]
    else:
        raise ArgumentError(f"unknown swap_mode {swap_mode!r}")
    out[hi], out[lo] = out[lo], out[hi]
    return out


# ------------------------------------------------------------------- metrics


def aggregate(records: Sequence[InstanceRecord], score_method: str) -> tuple[float, float, float]:
    """(accuracy, coverage rate, mean set size) over the given records."""
    if not records:
        raise ArgumentError("cannot aggregate zero records")
    n = len(records)
    acc = sum(1 for r in records if r.correct) / n
    cr = sum(1 for r in records if r.covered(score_method)) / n
    ss = math.fsum(len(r.sets[score_method]) for r in records) / n
    return acc, cr, ss


def _aggregates_for(strategy: str, subset: str, records: Sequence[InstanceRecord]) -> list[Aggregate]:
    if not records:
        return []
    out = []
    per = {}
    for m in METHODS:
        acc, cr, ss = aggregate(records, m)
        per[m] = (acc, cr, ss)
        out.append(Aggregate(strategy, m, subset, acc, cr, ss, len(records)))
    acc = per[LAC][0]
    out.append(Aggregate(strategy, "mean", subset, acc, (per[LAC][1] + per[APS][1]) / 2,
                         (per[LAC][2] + per[APS][2]) / 2, len(records)))
    return out


# ----------------------------------------------------------------- execution


def execute(instances: Sequence[McqaInstance], strategy: str, env: StrategyEnv, config: StrategyConfig,
            concurrency: int = 1) -> dict[str, StrategyTrace | StrategyError]:
    fn = STRATEGIES[strategy]

    def one(inst: McqaInstance):
        try:
            return fn(inst, env, config)
        except StrategyError as exc:
            log.warning("%s", exc)
            return exc

    if concurrency == 1:
        results = [one(i) for i in instances]
    else:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            results = list(pool.map(one, instances))
    return {inst.id: res for inst, res in zip(instances, results)}


def _check_split(dataset: Sequence[McqaInstance], split: SplitSpec) -> None:
    ids = [i.id for i in dataset]
    if not split.calibration_ids:
        raise ArgumentError("calibration split is empty")
    covered = list(split.calibration_ids) + list(split.test_ids)
    if sorted(covered) != sorted(ids):
        raise ArgumentError("split does not cover the dataset exactly once")


def _provider_identity(env: StrategyEnv) -> dict:
    return {
        "chat": f"{env.chat.backend.name}:{env.chat.model}",
        "embed": env.embedder.backend.name if env.embedder is not None else None,
        "chat_temperature": env.chat.temperature,
        "one_hot_fallback": env.chat.one_hot_fallback,
    }


def _prior_pass(dataset, strategy, env, config, eval_config) -> dict[str, tuple[float, ...]]:
    results = execute(dataset, strategy, env, config, eval_config.concurrency)
    return {i: r.final_distribution.probs for i, r in results.items() if isinstance(r, StrategyTrace)}


def knowledge_isolation_split(dataset: Sequence[McqaInstance], baseline: RunReport) -> tuple[list[str], list[str]]:
    """Partition dataset ids by whether the retrieval-free baseline got them right."""
    by_id = {r.instance_id: r for r in baseline.records if r.ok}
    missing = [i.id for i in dataset if i.id not in by_id]
    if missing:
        raise ProtocolError(f"baseline report lacks instances: {missing}")
    correct = [i.id for i in dataset if by_id[i.id].correct]
    incorrect = [i.id for i in dataset if not by_id[i.id].correct]
    return correct, incorrect


def run_protocol(
    dataset: Sequence[McqaInstance],
    split: SplitSpec,
    strategy: str,
    protocol: ProtocolSpec,
    env: StrategyEnv,
    config: StrategyConfig | None = None,
    eval_config: EvalConfig | None = None,
    baseline: RunReport | None = None,
    metadata: Mapping | None = None,
) -> RunReport:
    if strategy not in STRATEGIES:
        raise ArgumentError(f"unknown strategy {strategy!r}; choose from {sorted(STRATEGIES)}")
    if protocol.kind == DEPTH_SWEEP:
        raise ArgumentError("depth sweeps produce one report per k; call depth_sweep")
    config = config or StrategyConfig(name=strategy)
    eval_config = eval_config or EvalConfig()
    _check_split(dataset, split)

    notes: list[str] = []
    skipped: dict[str, str] = {}
    subsets: dict[str, str] = {}
    run_env = env
    work = list(dataset)

    if protocol.kind == IRRELEVANT:
        run_env = replace(env, noise=NoiseInjection(protocol.injected_count, protocol.injection_mode, eval_config.seed))
        notes.append(f"injected {protocol.injected_count} irrelevant documents per retrieval ({protocol.injection_mode})")
    elif protocol.kind in (SELF_AWARE, WRONG_AWARE):
        priors = _prior_pass(dataset, strategy, env, config, eval_config)
        if protocol.kind == WRONG_AWARE:
            display = {i: tuple(apply_wrong_aware(p, protocol.swap_mode)) for i, p in priors.items()}
            notes.append(WRONG_AWARE_NOTE)
        else:
            display = dict(priors)
        notes.append("confidence block taken from a fresh normal pass with its own retrieval")
        for inst in dataset:
            if inst.id not in display:
                skipped[inst.id] = "prior normal pass failed"
        work = [i for i in dataset if i.id in display]
        run_env = replace(env, display=display)
    elif protocol.kind == ISOLATION:
        if baseline is None:
            baseline = run_protocol(dataset, split, "no_retrieve", ProtocolSpec(NORMAL), env,
                                    replace(config, name="no_retrieve"), eval_config)
        correct, incorrect = knowledge_isolation_split(dataset, baseline)
        subsets.update({i: "llm_correct" for i in correct})
        subsets.update({i: "llm_incorrect" for i in incorrect})

    results = execute(work, strategy, run_env, config, eval_config.concurrency)

    cal_ids = set(split.calibration_ids)
    records: list[InstanceRecord] = []
    failed: dict[str, str] = {}
    for inst in dataset:
        part = "calibration" if inst.id in cal_ids else "test"
        if inst.id in skipped:
            records.append(InstanceRecord(inst.id, part, strategy, inst.answer_index, None,
                                          error=f"skipped: {skipped[inst.id]}"))
            continue
        res = results[inst.id]
        if isinstance(res, StrategyError):
            failed[inst.id] = str(res)
            trace = res.trace.to_record() if (res.trace is not None and eval_config.keep_traces) else None
            records.append(InstanceRecord(inst.id, part, strategy, inst.answer_index, None,
                                          error=str(res), trace=trace, subset=subsets.get(inst.id)))
            continue
        dist = res.final_distribution
        if len(dist) != inst.k:
            raise ProtocolError(f"{inst.id}: strategy returned {len(dist)} probabilities for {inst.k} options")
        records.append(InstanceRecord(
            inst.id, part, strategy, inst.answer_index, dist.probs, dist.flags,
            subset=subsets.get(inst.id),
            trace=res.to_record() if eval_config.keep_traces else None,
        ))

    def usable(r: InstanceRecord) -> bool:
        return r.ok and not (eval_config.exclude_flagged and r.flags)

    cal_scored = [
        ScoredInstance(r.instance_id, _dist(r), r.gold) for r in records if r.split == "calibration" and usable(r)
    ]
    if not cal_scored:
        raise ArgumentError("no usable calibration records (calibration split empty or all failed)")
    models = [calibrate(cal_scored, m, eval_config.alpha) for m in METHODS]
    forced = False
    for r in records:
        if r.ok:
            for model in models:
                ps = predict_set(model, r.probs, force_nonempty=eval_config.force_nonempty)
                forced = forced or ps.forced
                r.sets[model.method] = ps.members

    test = [r for r in records if r.split == "test" and usable(r)]
    aggregates = _aggregates_for(strategy, "all", test)
    if protocol.kind == ISOLATION:
        for name in ("llm_correct", "llm_incorrect"):
            aggregates += _aggregates_for(strategy, name, [r for r in test if r.subset == name])

    flagged = [r.instance_id for r in records if r.ok and r.flags]
    quality = {
        "n_test": sum(1 for r in records if r.split == "test"),
        "n_used": len(test),
        "flagged": flagged if eval_config.exclude_flagged else [],
        "flagged_kept": [] if eval_config.exclude_flagged else flagged,
        "failed": failed,
        "skipped": skipped,
    }
    watermarks = []
    if env.chat.one_hot_fallback:
        watermarks.append("one-hot fallback enabled: distributions may be degenerate")
    if eval_config.force_nonempty:
        watermarks.append("force-nonempty prediction sets enabled")
    if strategy == "raptor":
        notes.append("RAPTOR clustering uses principal-components reduction in place of UMAP")

    meta = {
        "strategy": strategy,
        "protocol": protocol.to_record(),
        "alpha": eval_config.alpha,
        "seed": eval_config.seed,
        "split_seed": split.seed,
        "strategy_config": config.to_record(),
        "providers": _provider_identity(env),
        "notes": notes,
        "watermarks": watermarks,
        "forced_nonempty_used": forced,
    }
    meta.update(metadata or {})
    meta["config_hash"] = config_hash({
        k: v for k, v in meta.items() if k not in ("notes", "watermarks", "forced_nonempty_used")
    } | {"ids": [i.id for i in dataset], "calibration_ids": list(split.calibration_ids)})
    if baseline is not None:
        meta["baseline_config_hash"] = baseline.metadata.get("config_hash")
    return RunReport(meta, records, models, aggregates, quality)


def _dist(record: InstanceRecord):
    from .core import OptionDistribution

    return OptionDistribution(record.probs, record.flags)


def depth_sweep(
    dataset: Sequence[McqaInstance],
    split: SplitSpec,
    strategy: str,
    k_list: Sequence[int],
    env: StrategyEnv,
    config: StrategyConfig | None = None,
    eval_config: EvalConfig | None = None,
    base: ProtocolSpec | None = None,
) -> dict[int, RunReport]:
    """One full run per retrieval depth; everything else held fixed."""
    ProtocolSpec(DEPTH_SWEEP, k_list=tuple(k_list))  # validates the list
    config = config or StrategyConfig(name=strategy)
    base = base or ProtocolSpec(NORMAL)
    reports: dict[int, RunReport] = {}
    for k in k_list:
        cfg = replace(config, retrieval_depth=k)
        try:
            reports[k] = run_protocol(dataset, split, strategy, base, env, cfg, eval_config,
                                      metadata={"retrieval_depth": k})
        except UragcError as exc:
            log.error("depth %d failed: %s", k, exc)
            reports[k] = RunReport({"strategy": strategy, "retrieval_depth": k, "error": str(exc)},
                                   [], [], [], {"failed": {"*": str(exc)}})
    return reports


Runner = Callable[..., RunReport]

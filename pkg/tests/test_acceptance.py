"""Acceptance suite: one PASS/FAIL line per criterion.

Run under pytest (lines are echoed in the terminal summary) or directly with
``python3 tests/test_acceptance.py``.
"""

import bisect
import hashlib
import json
import math
import random
import sys
import time
from fractions import Fraction
from pathlib import Path

import mpmath
import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import FIXTURES, make_env  # noqa: E402
from uragc.conformal import APS, INF, LAC, ScoredInstance, calibrate, lac_score  # noqa: E402
from uragc.core import Document, OptionDistribution, load_corpus, load_dataset, save_dataset, split, split_by_count  # noqa: E402
from uragc.evaluation import (  # noqa: E402
    EvalConfig,
    ProtocolSpec,
    depth_sweep,
    knowledge_isolation_split,
    run_protocol,
)
from uragc.forge import ForgeSeed, forge_dataset, forge_report  # noqa: E402
from uragc.prompts import CONFIDENCE_HEADER  # noqa: E402
from uragc.providers import ChatClient, MockBackend, NliClient  # noqa: E402
from uragc.providers.base import restricted_softmax  # noqa: E402
from uragc.report import write_report  # noqa: E402
from uragc.retrieval import Ranking, rrf_fuse  # noqa: E402
from uragc.strategies import STRATEGIES, StrategyConfig, StrategyEnv, bic, build_raptor_tree, replug_mixture  # noqa: E402
from uragc.strategies.raptor import select_components  # noqa: E402
from uragc.synth import SynthParams, synth_world  # noqa: E402

RESULTS: list[str] = []


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)


# ------------------------------------------------------- 1 + 2: synthetic worlds

_SYNTH: dict = {}


def synth_runs():
    """n_cal = 1000, n_test = 10000, K = 4, alpha = 0.1 on seeds 1..10 (computed once)."""
    if not _SYNTH:
        start = time.perf_counter()
        rows = []
        for seed in range(1, 11):
            insts, script, _ = synth_world(SynthParams(n=11000, k=4, seed=seed))
            env = StrategyEnv(ChatClient(MockBackend(script)), None)
            sp = split_by_count(insts, 1000, seed)
            rep = run_protocol(insts, sp, "no_retrieve", ProtocolSpec(), env,
                               eval_config=EvalConfig(alpha=0.1, seed=seed, concurrency=1, keep_traces=False))
            rows.append((seed, rep.aggregate_for(LAC), rep.aggregate_for(APS)))
        _SYNTH["rows"] = rows
        _SYNTH["elapsed"] = time.perf_counter() - start
    return _SYNTH["rows"], _SYNTH["elapsed"]


def test_criterion_01_coverage():
    rows, elapsed = synth_runs()
    bad = [(s, m.method, round(m.cr, 4)) for s, lac, aps in rows for m in (lac, aps) if not 0.88 <= m.cr <= 0.92]
    ok = not bad and elapsed < 30.0
    crs = " ".join(f"s{s}:{lac.cr:.4f}/{aps.cr:.4f}" for s, lac, aps in rows)
    report(1, ok, f"CR LAC/APS {crs}; outside band {bad}; {elapsed:.1f}s")
    assert not bad, f"coverage outside [0.88, 0.92]: {bad}"
    assert elapsed < 30.0


def test_criterion_02_lac_vs_aps():
    rows, _ = synth_runs()
    bad = [(s, round(lac.ss, 4), round(aps.ss, 4)) for s, lac, aps in rows if lac.ss > aps.ss + 0.05]
    report(2, not bad, "SS LAC/APS " + " ".join(f"s{s}:{lac.ss:.3f}/{aps.ss:.3f}" for s, lac, aps in rows))
    assert not bad


# ------------------------------------------------------------ 3: quantile oracle


def _oracle_threshold(scores, alpha: Fraction):
    """Smallest observed score t with #{s <= t} >= (n+1)(1-alpha); +inf when none exists."""
    ordered = sorted(scores)
    need = (len(scores) + 1) * (1 - alpha)
    for t in ordered:
        if bisect.bisect_right(ordered, t) >= need:
            return t
    return INF


def test_criterion_03_quantile_oracle():
    rng = random.Random(3)
    mismatches = overflow_seen = 0
    for n in range(1, 201):
        for _ in range(50):
            alpha = Fraction(rng.randint(1, 99), 100)
            # coarse grid so ties occur
            gold = [rng.choice([0.05 * i for i in range(1, 20)]) for _ in range(n)]
            scored = [ScoredInstance(str(i), OptionDistribution((g, 1 - g)), 0) for i, g in enumerate(gold)]
            scores = [lac_score(s.distribution, 0) for s in scored]
            expected = _oracle_threshold(scores, alpha)
            overflow_seen += expected == INF
            if calibrate(scored, LAC, float(alpha)).q_hat != expected:
                mismatches += 1
    ok = mismatches == 0 and overflow_seen > 0
    report(3, ok, f"10000 calibrations, {mismatches} mismatches, {overflow_seen} overflow cases")
    assert ok


# ---------------------------------------------------------------- 4: RRF oracle


def _rrf_oracle(rankings, k):
    scores = {}
    for ranking in rankings:
        for pos, d in enumerate(ranking, start=1):
            scores[d] = scores.get(d, Fraction(0)) + Fraction(1, k + pos)
    return sorted(scores, key=lambda d: (-scores[d], d)), scores


def _random_rankings(rng):
    pool = [f"d{i}" for i in range(rng.randint(1, 30))]
    return [rng.sample(pool, rng.randint(1, len(pool))) for _ in range(rng.randint(1, 6))]


def test_criterion_04_rrf():
    rng = random.Random(4)
    bad_oracle = bad_order = bad_mono = 0
    for _ in range(1000):
        lists = _random_rankings(rng)
        k = rng.choice([1, 10, 60, 100])
        fused = rrf_fuse([Ranking(tuple(r)) for r in lists], k)
        order, scores = _rrf_oracle(lists, k)
        if list(fused.doc_ids) != order or any(
                abs(s - float(scores[d])) > 1e-12 for d, s in zip(fused.doc_ids, fused.scores)):
            bad_oracle += 1
        shuffled = lists[:]
        rng.shuffle(shuffled)
        if rrf_fuse([Ranking(tuple(r)) for r in shuffled], k).doc_ids != fused.doc_ids:
            bad_order += 1
        # promote one document by one place in one list: its fused score must not drop
        li = rng.randrange(len(lists))
        if len(lists[li]) > 1:
            j = rng.randrange(1, len(lists[li]))
            moved = [r[:] for r in lists]
            moved[li][j - 1], moved[li][j] = moved[li][j], moved[li][j - 1]
            d = lists[li][j]
            before = dict(zip(fused.doc_ids, fused.scores))[d]
            after_f = rrf_fuse([Ranking(tuple(r)) for r in moved], k)
            after = dict(zip(after_f.doc_ids, after_f.scores))[d]
            if after < before or after_f.doc_ids.index(d) > fused.doc_ids.index(d):
                bad_mono += 1
    ok = bad_oracle == bad_order == bad_mono == 0
    report(4, ok, f"1000 inputs: oracle mismatches {bad_oracle}, order-invariance {bad_order}, monotonicity {bad_mono}")
    assert ok


# ------------------------------------------------------------- 5: REPLUG mixture


def test_criterion_05_replug():
    mpmath.mp.dps = 40
    rng = random.Random(5)
    worst = 0.0
    bound_violations = 0
    for _ in range(1000):
        m, k = rng.randint(1, 10), rng.randint(2, 8)
        sims = [rng.uniform(-1, 1) for _ in range(m)]
        dists = []
        for _ in range(m):
            w = [rng.random() + 1e-6 for _ in range(k)]
            dists.append([x / sum(w) for x in w])
        out = replug_mixture(sims, dists)
        e = [mpmath.exp(mpmath.mpf(s)) for s in sims]
        lam = [x / mpmath.fsum(e) for x in e]
        for c in range(k):
            ref = mpmath.fsum(lam[d] * mpmath.mpf(dists[d][c]) for d in range(m))
            worst = max(worst, abs(float(ref) - out[c]))
            lo, hi = min(p[c] for p in dists), max(p[c] for p in dists)
            bound_violations += not (lo - 1e-12 <= out[c] <= hi + 1e-12)
    ok = worst <= 1e-9 and bound_violations == 0
    report(5, ok, f"1000 draws: max abs error {worst:.2e}, bound violations {bound_violations}")
    assert ok


# ---------------------------------------------------------- 6: RAPTOR selection


def test_criterion_06_bic():
    sigma = 0.01
    centers = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])  # separation 100 sigma
    hits = 0
    for trial in range(100):
        rng = np.random.default_rng(trial)
        x = np.vstack([c + rng.normal(scale=sigma, size=(20, 2)) for c in centers])
        k, _, _ = select_components(x, 8, seed=trial)
        hits += k == 3
    spot = bic(100, 10, -50.0)
    ok = hits >= 95 and abs(spot - 146.052) <= 1e-3
    report(6, ok, f"K = 3 recovered in {hits}/100 trials; BIC(100, 10, -50) = {spot:.4f}")
    assert ok


# ------------------------------------------------------------- 7: softmax oracle


def test_criterion_07_softmax():
    mpmath.mp.dps = 50
    rng = random.Random(7)
    worst = worst_shift = 0.0
    for _ in range(1000):
        logits = [rng.uniform(-30, 30) for _ in range(rng.randint(2, 10))]
        out = restricted_softmax(logits)
        e = [mpmath.exp(mpmath.mpf(z)) for z in logits]
        total = mpmath.fsum(e)
        worst = max(worst, max(abs(float(x / total) - y) for x, y in zip(e, out)))
        c = rng.uniform(-500, 500)
        shifted = restricted_softmax([z + c for z in logits])
        worst_shift = max(worst_shift, max(abs(a - b) for a, b in zip(out, shifted)))
    ok = worst <= 1e-9 and worst_shift <= 1e-9
    report(7, ok, f"1000 vectors: max error {worst:.2e}, max shift deviation {worst_shift:.2e}")
    assert ok


# ----------------------------------------------------------- 8: determinism


def _fixture_run(strategy, kind, out):
    dataset = load_dataset(FIXTURES / "dataset.jsonl")
    corpus = load_corpus(FIXTURES / "corpus.jsonl")
    env = make_env(corpus=corpus)
    cfg = StrategyConfig(name=strategy, retrieval_depth=3)
    if strategy == "raptor":
        env.raptor_tree = build_raptor_tree(corpus, cfg, env.embedder, env.chat)
    sp = split(dataset, 0.5, 0)
    ec = EvalConfig(concurrency=4)
    if kind == "depth_sweep":
        for k, rep in depth_sweep(dataset, sp, strategy, [1, 2, 4], env, cfg, ec).items():
            write_report(rep, out / f"k{k}")
        return
    spec = ProtocolSpec(kind, injected_count=2)
    write_report(run_protocol(dataset, sp, strategy, spec, env, cfg, ec), out)


def _tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode() + b"\0" + p.read_bytes())
    return h.hexdigest()


def test_criterion_08_determinism(tmp_path):
    kinds = ("normal", "self_aware", "wrong_aware", "irrelevant_context", "knowledge_isolation", "depth_sweep")
    differing = []
    for strategy in sorted(STRATEGIES):
        for kind in kinds:
            digests = []
            for rep in ("a", "b"):
                out = tmp_path / strategy / kind / rep
                _fixture_run(strategy, kind, out)
                digests.append(_tree_digest(out))
            if digests[0] != digests[1]:
                differing.append(f"{strategy}/{kind}")
    n = len(STRATEGIES) * len(kinds)
    report(8, not differing, f"{n} strategy x protocol runs byte-identical across two runs; differing {differing}")
    assert not differing


# -------------------------------------------------------- 9: wrong-aware integrity


def _probs_hash(records):
    return hashlib.sha256(json.dumps({r.instance_id: list(r.probs) for r in records if r.ok},
                                     sort_keys=True).encode()).hexdigest()


def test_criterion_09_wrong_aware(dataset, corpus):
    sp = split(dataset, 0.5, 0)
    normal = run_protocol(dataset, sp, "naive", ProtocolSpec(), make_env(corpus=corpus), eval_config=EvalConfig())
    env = make_env(corpus=corpus, record=True)
    wrong = run_protocol(dataset, sp, "naive", ProtocolSpec("wrong_aware"), env, eval_config=EvalConfig())
    prompts = [c["payload"]["messages"][-1]["content"] for c in env.chat.backend.calls if c["kind"] == "chat"]
    prior = {r.instance_id: r.probs for r in normal.records}
    bad_blocks = []
    for inst in dataset:
        p = list(prior[inst.id])
        hi = p.index(max(p))  # first maximum
        lo = len(p) - 1 - p[::-1].index(min(p))  # last minimum
        p[hi], p[lo] = p[lo], p[hi]
        block = CONFIDENCE_HEADER + "\n" + "\n".join(f"{'ABCD'[i]}. {x:.2f}" for i, x in enumerate(p))
        if not any(block in q and inst.question in q for q in prompts):
            bad_blocks.append(inst.id)
    # the fixture mock ignores the block, so the stored distributions must match the normal pass exactly
    untouched = _probs_hash(wrong.records) == _probs_hash(normal.records)
    ok = not bad_blocks and untouched
    report(9, ok, f"{len(dataset)} instances: block mismatches {bad_blocks}, stored distributions untouched {untouched}")
    assert ok


# ------------------------------------------------------ 10: knowledge isolation


def test_criterion_10_isolation(dataset, corpus):
    env = make_env(corpus=corpus)
    sp = split(dataset, 0.5, 0)
    ec = EvalConfig()
    base = run_protocol(dataset, sp, "no_retrieve", ProtocolSpec(), env, eval_config=ec)
    correct, incorrect = knowledge_isolation_split(dataset, base)
    partition = sorted(correct + incorrect) == sorted(i.id for i in dataset) and not set(correct) & set(incorrect)
    rep = run_protocol(dataset, sp, "naive", ProtocolSpec("knowledge_isolation"), env, eval_config=ec, baseline=base)
    worst = 0.0
    for method in (LAC, APS, "mean"):
        whole = rep.aggregate_for(method, "all")
        parts = [a for a in rep.aggregates if a.method == method and a.subset in ("llm_correct", "llm_incorrect")]
        if sum(a.n for a in parts) != whole.n:
            worst = math.inf
        for key in ("acc", "cr", "ss"):
            combined = sum(getattr(a, key) * a.n for a in parts) / whole.n
            worst = max(worst, abs(combined - getattr(whole, key)))
    ok = partition and worst <= 1e-9
    report(10, ok, f"partition exact {partition} ({len(correct)} correct / {len(incorrect)} incorrect); "
                   f"max recombination error {worst:.1e}")
    assert ok


# ------------------------------------------------------------ 11: forge trend


def test_criterion_11_forge(tmp_path):
    targets = [0, 1, 2, 3, 3]  # iteration at which each seed's distractor first passes the gate
    seeds = [ForgeSeed(f"s{i}", f"Question {i} about item {i}?", f"Answer {i}") for i in range(len(targets))]
    rules = [{"contains": f'Previously, you generated "Level-{j}"',
              "response": {"text": json.dumps({"fake_answer": f"Level-{j + 1}", "similarity_type": "role-similar",
                                               "fake_document_title": "Report", "fake_document_excerpt": "Text."})}}
             for j in range(5)]
    rules.append({"contains": "fake answer", "response": {"text": json.dumps({"fake_answer": "Level-0"})}})
    nli_rules = [{"premise_contains": s.question, "hypothesis_contains": f"Level-{j}",
                  "verdict": [0.9, 0.05, 0.05] if j >= t else [0.1, 0.6, 0.3]}
                 for s, t in zip(seeds, targets) for j in range(5)]
    backend = MockBackend({"chat": {"rules": rules}, "nli": {"rules": nli_rules}})
    results = forge_dataset(seeds, ChatClient(backend), NliClient(backend=backend), max_iterations=3, count=1)
    row = forge_report([r.verdict for r in results], 3)
    values = list(row.values())
    monotone = all(b >= a for a, b in zip(values, values[1:]))
    invariant_errors = []
    # reloading re-runs every core-model check on the emitted records
    save_dataset([r.instance for r in results], tmp_path / "forged.jsonl")
    reloaded = load_dataset(tmp_path / "forged.jsonl")
    if reloaded != [r.instance for r in results]:
        invariant_errors.append("round trip changed the instances")
    for seed, inst in zip(seeds, reloaded):
        if inst.options[inst.answer_index] != seed.answer or len(set(inst.options)) != len(inst.options):
            invariant_errors.append(inst.id)
    ok = monotone and values[-1] == 100.0 and not invariant_errors
    report(11, ok, f"table {row}; invariant errors {invariant_errors}")
    assert ok


# --------------------------------------------------------------- 12: depth sweep


def test_criterion_12_depth_sweep(dataset, corpus):
    ks = [10, 50, 100, 500]
    sp = split(dataset, 0.5, 0)
    small = depth_sweep(dataset, sp, "naive", ks, make_env(corpus=corpus), eval_config=EvalConfig())
    metrics = {k: [(a.method, a.acc, a.cr, a.ss) for a in r.aggregates] for k, r in small.items()}
    identical = len(small) == 4 and all(m == metrics[10] for m in metrics.values()) and metrics[10]

    rng = random.Random(12)
    words = [f"w{i}" for i in range(300)]
    big_corpus = [Document(f"b{i:04d}", " ".join(rng.choices(words, k=12))) for i in range(600)]
    big = depth_sweep(dataset, sp, "naive", ks, make_env(corpus=big_corpus),
                      eval_config=EvalConfig(), config=StrategyConfig(name="naive", max_context_tokens=100000))
    id_sets = {}
    for k, r in big.items():
        id_sets[k] = {tuple(s["doc_ids"]) for rec in r.records for s in rec.trace["steps"] if s["kind"] == "search"}
    sizes = {k: sorted({len(t) for t in v}) for k, v in id_sets.items()}
    differ = all(id_sets[a] != id_sets[b] for a, b in zip(ks, ks[1:])) and all(sizes[k] == [k] for k in ks)
    ok = bool(identical) and differ
    report(12, ok, f"8-doc corpus: 4 reports identical {bool(identical)}; 600-doc corpus: "
                   f"retrieved-id lengths {sizes}, sets differ across k {differ}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))

import math
import random

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_env
from uragc.core import Document, McqaInstance
from uragc.errors import ArgumentError, StrategyError
from uragc.prompts import CONFIDENCE_HEADER
from uragc.strategies import (
    STRATEGIES,
    NoiseInjection,
    ReflectionScores,
    StrategyConfig,
    assemble_context,
    bic,
    build_raptor_tree,
    chunk_text,
    collapsed_retrieve,
    parse_reflection,
    replug_mixture,
    run_fusion,
    run_hyde,
    run_naive,
    run_no_retrieve,
    run_raptor,
    run_rat,
    run_replug,
    run_selfrag,
    select_components,
    utility_score,
)
from uragc.strategies.raptor import RaptorNode, RaptorTree
from uragc.strategies.selfrag import select_candidate

Q = "Which one?"
INST = McqaInstance("t1", Q, ("w", "x", "y", "z"), 2)
LOGITS = {"A": 0.5, "B": 0.0, "C": 2.0, "D": -1.0}
DOCS = [Document("d1", "alpha doc"), Document("d2", "beta doc"), Document("d3", "gamma doc"),
        Document("d4", "delta doc")]
VECTORS = {"alpha doc": [1, 0, 0], "beta doc": [0, 1, 0], "gamma doc": [0, 0, 1], "delta doc": [1, 1, 0],
           Q: [0, 0.2, 1]}


def world(rules=(), vectors=None, nli=None):
    script = {
        "chat": {"rules": list(rules) + [{"contains": "Answer|X", "response": {"text": "Answer|C", "logits": LOGITS}}]},
        "embed": {"dimension": 3, "vectors": {**VECTORS, **(vectors or {})}},
    }
    if nli:
        script["nli"] = nli
    return make_env(script=script, corpus=DOCS)


def softmax(logits):
    m = max(logits)
    e = [math.exp(x - m) for x in logits]
    return [x / sum(e) for x in e]


CFG = StrategyConfig()


# --------------------------------------------------------------- no retrieve


def test_no_retrieve_passthrough():
    tr = run_no_retrieve(INST, world(), CFG)
    assert tr.final_distribution.probs == pytest.approx(softmax(list(LOGITS.values())), abs=1e-12)
    assert len(tr.steps) == 1 and tr.retrieved_ids == []
    assert len(tr.final_distribution) == 4
    assert "Context:" not in tr.steps[0].prompt


# --------------------------------------------------------------------- naive


def test_naive_retrieves_min_k_n(dataset, env):
    tr = run_naive(dataset[0], env, StrategyConfig(retrieval_depth=10))
    assert len(tr.steps[0].doc_ids) == min(10, len(env.corpus))


def test_naive_ranking_passthrough():
    tr = run_naive(INST, world(), CFG)
    assert tr.steps[0].doc_ids[0] == "d3"
    assert tr.steps[-1].prompt.index("gamma doc") < tr.steps[-1].prompt.index("beta doc")


def test_naive_truncation_noted():
    tr = run_naive(INST, world(), StrategyConfig(max_context_tokens=4))
    assert "truncated" in tr.steps[0].note
    context = tr.steps[-1].prompt.split("Context:\n")[1].split("\n\nQuestion:")[0]
    assert len(context) <= 16


def test_assemble_context_budget():
    ctx, used, cut = assemble_context([("a", "x" * 30), ("b", "y" * 30)], 10)
    assert len(ctx) == 40 and cut and used == ["a", "b"]


def test_naive_without_index():
    env = world()
    env.index = None
    with pytest.raises(StrategyError, match="t1"):
        run_naive(INST, env, CFG)


# -------------------------------------------------------------------- fusion


def test_fusion_structure():
    tr = run_fusion(INST, world(), StrategyConfig(query_count=4))
    kinds = [s.kind for s in tr.steps]
    assert kinds.count("search") == 4 and kinds.count("fuse") == 1 and kinds.count("reformulate") == 3


def test_fusion_reformulations_at_high_temperature():
    env = world()
    env.chat.backend.record = True
    run_fusion(INST, env, StrategyConfig(query_count=3))
    temps = [c["payload"]["temperature"] for c in env.chat.backend.calls
             if c["kind"] == "chat" and not c["payload"].get("logprobs")]
    assert temps == [0.9, 0.9]


def test_fusion_identical_reformulations_equal_single_query():
    env = world(rules=[{"contains": "Output only the query.", "response": {"text": Q}}])
    tr = run_fusion(INST, env, StrategyConfig(query_count=4))
    naive = run_naive(INST, world(), CFG)
    fuse = [s for s in tr.steps if s.kind == "fuse"][0]
    assert fuse.doc_ids == naive.steps[0].doc_ids


def test_fusion_rrf_oracle():
    env = world(rules=[
        {"contains": "Output only the query.", "response": {"text": "alpha doc"}},
    ])
    tr = run_fusion(INST, env, StrategyConfig(query_count=2, fusion_smoothing_k=60))
    searches = [s.doc_ids for s in tr.steps if s.kind == "search"]
    scores = {}
    for ranking in searches:
        for r, d in enumerate(ranking):
            scores[d] = scores.get(d, 0.0) + 1.0 / (60 + r + 1)
    oracle = sorted(scores, key=lambda d: (-scores[d], d))
    assert list([s for s in tr.steps if s.kind == "fuse"][0].doc_ids) == oracle


def test_fusion_n1_equals_naive():
    a = run_fusion(INST, world(), StrategyConfig(query_count=1)).to_record()
    b = run_naive(INST, world(), CFG).to_record()
    a.pop("strategy"), b.pop("strategy")
    assert a == b


def test_fusion_failed_reformulation_flagged():
    env = world(rules=[{"contains": "Output only the query.", "response": {"error": "provider"}}])
    tr = run_fusion(INST, env, StrategyConfig(query_count=3))
    assert "fusion_reformulation_failed" in tr.flags
    assert tr.final_distribution.flags


# ---------------------------------------------------------------------- hyde


def test_hyde_uses_passage_embedding():
    env = world(rules=[{"contains": "informative passages", "response": {"text": "P"}}],
                vectors={"P": [1, 0, 0.1]})
    tr = run_hyde(INST, env, CFG)
    assert tr.steps[0].completion == "P"
    # the question alone would rank d3 first
    assert tr.steps[1].doc_ids[0] == "d1"
    assert tr.steps[1].query == "P"


def test_hyde_empty_passage_falls_back():
    env = world(rules=[{"contains": "informative passages", "response": {"text": "  "}}])
    tr = run_hyde(INST, env, CFG)
    assert "hyde_fallback" in tr.flags and tr.steps[1].doc_ids[0] == "d3"


# -------------------------------------------------------------------- raptor


def test_bic_spot_value():
    assert bic(100, 10, -50) == pytest.approx(146.052, abs=1e-3)
    assert bic(100, 10, -50) == pytest.approx(float(mpmath.log(100) * 10 + 100), abs=1e-12)


def test_bic_recovers_three_clusters():
    rng = np.random.default_rng(0)
    centers = np.array([[0, 0], [1, 0], [0, 1]], dtype=float)
    x = np.vstack([c + rng.normal(scale=0.01, size=(20, 2)) for c in centers])
    k, _, bics = select_components(x, 6, seed=0)
    assert k == 3 and len(bics) == 6


def test_chunk_text():
    text = " ".join(["word"] * 300)
    chunks = chunk_text(text, 100)
    assert all(len(c) <= 400 for c in chunks) and " ".join(chunks) == text


def test_single_chunk_tree():
    env = world()
    tree = build_raptor_tree([Document("only", "short text")], StrategyConfig(), env.embedder, env.chat)
    assert len(tree.layers) == 1 and [n.id for n in tree.nodes] == ["only#0"]


def test_tree_layers_and_summaries(corpus):
    env = make_env(corpus=corpus)
    tree = build_raptor_tree(corpus, StrategyConfig(raptor_max_depth=2), env.embedder, env.chat)
    assert all(n.depth == 0 and not n.children for n in tree.layers[0])
    for layer in tree.layers[1:]:
        for n in layer:
            assert n.children and n.text.startswith("mock-")


def _tree():
    def node(i, v, depth=0, text="x" * 40):
        v = np.asarray(v, float)
        return RaptorNode(i, text, tuple(v / np.linalg.norm(v)), (), depth)

    leaves = [node("a", [1, 0, 0]), node("b", [0.9, 0.1, 0]), node("c", [0.8, 0.2, 0]), node("d", [0, 1, 0])]
    parent = node("P", [0, 0, 1], depth=1)
    return RaptorTree([leaves, [parent]])


def test_collapsed_budget_three_nodes():
    picked = collapsed_retrieve(_tree(), [1, 0, 0], k=10, max_tokens=30)
    assert [n.id for n in picked] == ["a", "b", "c"]


def test_collapsed_parent_self_similarity():
    assert collapsed_retrieve(_tree(), [0, 0, 1], k=2, max_tokens=4000)[0].id == "P"


def test_raptor_leaf_only_tree_behaves_like_chunk_naive():
    env = world()
    env.raptor_tree = build_raptor_tree(DOCS[:2], StrategyConfig(), env.embedder, env.chat)
    tr = run_raptor(INST, env, CFG)
    assert set(tr.steps[0].doc_ids) == {"d1#0", "d2#0"}


def test_raptor_without_tree():
    with pytest.raises(StrategyError):
        run_raptor(INST, world(), CFG)


# -------------------------------------------------------------------- replug


def test_replug_equal_similarity():
    assert replug_mixture([0.3, 0.3], [[0.8, 0.2], [0.4, 0.6]]) == pytest.approx([0.6, 0.4], abs=1e-12)


def test_replug_fixed_point():
    p = [0.1, 0.2, 0.7]
    assert replug_mixture([0.9, 0.1, -0.3], [p, p, p]) == pytest.approx(p, abs=1e-12)


def test_replug_mpmath_oracle():
    mpmath.mp.dps = 50
    sims = [0.9, 0.1]
    dists = [[0.7, 0.2, 0.1], [0.1, 0.3, 0.6]]
    e = [mpmath.e ** mpmath.mpf(s) for s in sims]
    lam = [x / sum(e) for x in e]
    oracle = [float(sum(lam[d] * mpmath.mpf(dists[d][c]) for d in range(2))) for c in range(3)]
    assert replug_mixture(sims, dists) == pytest.approx(oracle, abs=1e-9)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.floats(-1, 1), st.lists(st.floats(0.01, 1), min_size=3, max_size=3)),
                min_size=1, max_size=10))
def test_replug_convex_bounds(draws):
    sims = [s for s, _ in draws]
    dists = [[w / sum(ws) for w in ws] for _, ws in draws]
    out = replug_mixture(sims, dists)
    for c in range(3):
        lo = min(p[c] for p in dists)
        hi = max(p[c] for p in dists)
        assert lo - 1e-12 <= out[c] <= hi + 1e-12


def test_replug_strategy_matches_mixture():
    env = world()
    tr = run_replug(INST, env, StrategyConfig(retrieval_depth=2))
    # identical per-document distributions -> mixture is that distribution
    assert tr.final_distribution.probs == pytest.approx(softmax(list(LOGITS.values())), abs=1e-9)
    assert len([s for s in tr.steps if s.kind == "score"]) == 2


def test_replug_drops_failed_doc():
    env = world(rules=[{"contains": ["Answer|X", "alpha doc"], "response": {"error": "provider"}}])
    tr = run_replug(INST, env, StrategyConfig(retrieval_depth=4))
    assert "replug_doc_dropped" in tr.flags
    assert abs(sum(tr.final_distribution.probs) - 1) < 1e-9


def test_replug_all_fail():
    env = world(rules=[{"contains": ["Answer|X", "doc"], "response": {"error": "provider"}}])
    with pytest.raises(StrategyError) as exc:
        run_replug(INST, env, StrategyConfig(retrieval_depth=2))
    assert exc.value.trace is not None and exc.value.trace.steps


# ------------------------------------------------------------------- selfrag


def test_utility_mapping():
    assert utility_score(3) == pytest.approx(0.6)
    assert [utility_score(i) for i in range(1, 6)] == pytest.approx([0.2, 0.4, 0.6, 0.8, 1.0])


def test_composite_equal_weights():
    s = ReflectionScores(1.0, 0.7, 0.6).composite((1 / 3, 1 / 3, 1 / 3))
    assert s == pytest.approx(0.7667, abs=1e-4)


def test_parse_reflection_paths():
    sc, bad = parse_reflection("Relevance: <|relevant|>\nSupport: <|fully_supported|>\nUtility: <|utility:5|>")
    assert (sc.s_rel, sc.s_sup, sc.s_use, bad) == (1.0, 1.0, 1.0, False)
    sc, bad = parse_reflection("Relevance: <|irrelevant|>")
    assert (sc.s_rel, sc.s_sup, sc.s_use, bad) == (0.0, 0.5, 0.5, False)
    sc, bad = parse_reflection("no idea")
    assert (sc.s_rel, sc.s_sup, sc.s_use, bad) == (0.5, 0.5, 0.6, True)


def test_select_ties_lowest_index():
    assert select_candidate([0.5, 0.7, 0.7]) == 1


def test_selfrag_no_retrieve_branch():
    env = world(rules=[{"contains": "<|no_retrieve|>", "response": {"text": "<|no_retrieve|>"}}])
    tr = run_selfrag(INST, env, CFG)
    assert tr.retrieved_ids == [] and tr.steps[0].action == "no_retrieve"


def test_selfrag_retrieve_branch():
    env = world(rules=[
        {"contains": "<|no_retrieve|>", "response": {"text": "<|retrieve|>"}},
        {"contains": ["Candidate answer:", "(none)"], "response": {"text": "Relevance: <|irrelevant|>"}},
        {"contains": "Candidate answer:", "response": {"text": "Relevance: <|relevant|> Support: <|fully_supported|> Utility: <|utility:4|>"}},
    ])
    tr = run_selfrag(INST, env, CFG)
    kinds = [s.kind for s in tr.steps]
    assert kinds.count("candidate") == 3 and kinds.count("reflect") == 3
    assert tr.steps[1].kind == "search" and len(tr.steps[1].doc_ids) == 4
    assert tr.steps[-1].note.startswith("candidate=1")


def test_selfrag_malformed_flagged():
    env = world(rules=[{"contains": "<|no_retrieve|>", "response": {"text": "<|retrieve|>"}},
                       {"contains": "Candidate answer:", "response": {"text": "???"}}])
    tr = run_selfrag(INST, env, CFG)
    assert "selfrag_reflection_malformed" in tr.flags


def test_selfrag_weight_rescaling_invariance():
    rng = random.Random(2)
    for _ in range(500):
        w = [rng.random() + 1e-3 for _ in range(3)]
        cands = [ReflectionScores(rng.random(), rng.random(), rng.random()) for _ in range(3)]
        base = [c.composite([x / sum(w) for x in w]) for c in cands]
        c = rng.uniform(0.1, 10)
        scaled = [x * c for x in w]
        again = [cd.composite([x / sum(scaled) for x in scaled]) for cd in cands]
        if sorted(base)[-1] - sorted(base)[-2] > 1e-9:
            assert select_candidate(base) == select_candidate(again)


def test_selfrag_weights_validated():
    with pytest.raises(ArgumentError):
        StrategyConfig(selfrag_weights=(0.5, 0.5, 0.5))


# ----------------------------------------------------------------------- rat


def test_rat_structure():
    tr = run_rat(INST, world(), StrategyConfig(iterations=3))
    kinds = [s.kind for s in tr.steps]
    assert kinds == ["draft", "retrieve", "retrieve", "retrieve", "score"]


def test_rat_identity_revision():
    env = world(rules=[
        {"contains": "Think step by step", "response": {"text": "DRAFT-ZERO"}},
        {"contains": "Output only the revised draft.", "response": {"text": "DRAFT-ZERO"}},
    ])
    tr = run_rat(INST, env, StrategyConfig(iterations=1))
    assert "DRAFT-ZERO" in tr.steps[-1].prompt


def test_rat_scripted_queries_drive_retrieval():
    env = world(rules=[
        {"contains": "Think step by step", "response": {"text": "D0"}},
        {"contains": ["Output only the query.", "D0"], "response": {"text": "alpha doc"}},
        {"contains": ["Output only the query.", "D1"], "response": {"text": "beta doc"}},
        {"contains": ["Output only the revised draft.", "D0"], "response": {"text": "D1"}},
        {"contains": ["Output only the revised draft.", "D1"], "response": {"text": "D2"}},
    ])
    tr = run_rat(INST, env, StrategyConfig(iterations=2, retrieval_depth=1))
    rounds = [s for s in tr.steps if s.kind == "retrieve"]
    assert [r.doc_ids for r in rounds] == [("d1",), ("d2",)]
    assert "D2" in tr.steps[-1].prompt


def test_rat_partial_trace_on_failure():
    env = world(rules=[{"contains": "Output only the revised draft.", "response": {"error": "provider"}}])
    with pytest.raises(StrategyError) as exc:
        run_rat(INST, env, CFG)
    assert [s.kind for s in exc.value.trace.steps] == ["draft"]


# ------------------------------------------------------------------- shared


def test_noise_injection_fresh_per_step():
    env = world()
    env.noise = NoiseInjection(count=2, mode="fresh", seed=1)
    tr = run_rat(INST, env, StrategyConfig(iterations=2, retrieval_depth=1))
    notes = [s.note for s in tr.steps if s.kind == "retrieve"]
    assert all("injected=" in n for n in notes)


def test_confidence_block_rendered():
    env = world()
    env.display = {"t1": (0.7, 0.2, 0.05, 0.05)}
    tr = run_no_retrieve(INST, env, CFG)
    prompt = tr.steps[0].prompt
    assert prompt.count(CONFIDENCE_HEADER) == 1
    assert "A. 0.70\nB. 0.20\nC. 0.05\nD. 0.05" in prompt


@pytest.mark.parametrize("name", sorted(STRATEGIES))
def test_every_strategy_deterministic_and_normalized(name, dataset, corpus):
    cfg = StrategyConfig(name=name)

    def once():
        env = make_env(corpus=corpus)
        if name == "raptor":
            env.raptor_tree = build_raptor_tree(corpus, cfg, env.embedder, env.chat)
        return [STRATEGIES[name](inst, env, cfg).to_record() for inst in dataset[:4]]

    a, b = once(), once()
    assert a == b
    for rec in a:
        assert abs(math.fsum(rec["final_distribution"]) - 1) <= 1e-9
        assert rec["steps"]

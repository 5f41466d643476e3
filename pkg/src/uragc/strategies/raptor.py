"""Recursive cluster-and-summarize tree with collapsed-tree retrieval."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.decomposition import PCA
from sklearn.exceptions import ConvergenceWarning
from sklearn.mixture import GaussianMixture

from ..core import Document, McqaInstance, Step, StrategyTrace, derive_seed
from ..errors import ArgumentError, ProviderError, StrategyError
from ..prompts import PromptLibrary, fill
from .base import CHARS_PER_TOKEN, StrategyConfig, StrategyEnv, approx_tokens, finish, inject

log = logging.getLogger(__name__)


def bic(n_samples: int, n_params: int, log_likelihood: float) -> float:
    return math.log(n_samples) * n_params - 2.0 * log_likelihood


def gmm_param_count(n_components: int, n_features: int, covariance_type: str = "full") -> int:
    k, d = n_components, n_features
    if covariance_type == "full":
        cov = k * d * (d + 1) // 2
    elif covariance_type == "diag":
        cov = k * d
    else:
        raise ArgumentError(f"unsupported covariance type {covariance_type!r}")
    return k * d + cov + (k - 1)


def _fit(x: np.ndarray, k: int, seed: int, covariance_type: str) -> GaussianMixture:
    gm = GaussianMixture(
        n_components=k, covariance_type=covariance_type, reg_covar=1e-6, n_init=2, random_state=seed
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        gm.fit(x)
    return gm


def fit_mixture(x: np.ndarray, k: int, seed: int) -> tuple[GaussianMixture, str]:
    """Full-covariance fit, falling back to ridged diagonal covariance when singular."""
    try:
        return _fit(x, k, seed, "full"), "full"
    except ValueError:
        log.info("singular covariance at K=%d; refitting with diagonal covariance", k)
        return _fit(x, k, seed, "diag"), "diag"


def select_components(x: np.ndarray, max_components: int, seed: int) -> tuple[int, GaussianMixture, list[float]]:
    """Fit K = 1..max_components and keep the BIC minimizer (ties -> smaller K)."""
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    upper = max(1, min(max_components, n - 1))
    best = None
    bics = []
    for k in range(1, upper + 1):
        gm, cov = fit_mixture(x, k, seed)
        value = bic(n, gmm_param_count(k, d, cov), float(gm.score(x)) * n)
        bics.append(value)
        if best is None or value < best[0]:
            best = (value, k, gm)
    return best[1], best[2], bics


def reduce_dimension(x: np.ndarray, target: int, reducer: str, seed: int) -> np.ndarray:
    if reducer == "none":
        return x
    n, d = x.shape
    dims = max(1, min(target, d, n - 2))
    if dims >= d:
        return x
    return PCA(n_components=dims, random_state=seed).fit_transform(x)


def chunk_text(text: str, chunk_tokens: int) -> list[str]:
    """Word-boundary chunks of at most ``chunk_tokens`` (4-chars-per-token proxy)."""
    limit = chunk_tokens * CHARS_PER_TOKEN
    chunks, current = [], ""
    for word in text.split():
        candidate = f"{current} {word}" if current else word
        if len(candidate) > limit and current:
            chunks.append(current)
            current = word
        else:
            current = candidate
    if current:
        chunks.append(current)
    return chunks


@dataclass(frozen=True)
class RaptorNode:
    id: str
    text: str
    vector: tuple[float, ...]
    children: tuple[str, ...]
    depth: int


@dataclass
class RaptorTree:
    layers: list[list[RaptorNode]] = field(default_factory=list)
    # parents whose summary fell back to concatenated child text
    fallback_ids: set[str] = field(default_factory=set)
    selected_k: list[int] = field(default_factory=list)

    @property
    def nodes(self) -> list[RaptorNode]:
        return [n for layer in self.layers for n in layer]

    def node(self, node_id: str) -> RaptorNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def __contains__(self, node_id: str) -> bool:
        return any(n.id == node_id for n in self.nodes)


def _summarize(chat, prompts: PromptLibrary, texts: Sequence[str], budget_tokens: int) -> tuple[str, bool]:
    joined = "\n\n".join(texts)
    try:
        summary = chat.generate(fill(prompts.text("raptor_summary.txt"), {"context": joined})).strip()
    except ProviderError as exc:
        log.warning("summarization failed (%s); concatenating children", exc)
        summary = ""
    if not summary:
        return joined[: budget_tokens * CHARS_PER_TOKEN], True
    return summary, False


def build_raptor_tree(corpus: Sequence[Document], config: StrategyConfig, embedder, chat,
                      prompts: PromptLibrary | None = None) -> RaptorTree:
    if not corpus:
        raise ArgumentError("cannot build a tree over an empty corpus")
    prompts = prompts or PromptLibrary()
    leaves_text = []
    for doc in corpus:
        for j, chunk in enumerate(chunk_text(doc.text, config.raptor_chunk_tokens)):
            leaves_text.append((f"{doc.id}#{j}", chunk))
    vectors = embedder.embed([t for _, t in leaves_text])
    tree = RaptorTree([[RaptorNode(i, t, tuple(v), (), 0) for (i, t), v in zip(leaves_text, vectors)]])

    depth = 0
    while len(tree.layers[-1]) > 2 and depth < config.raptor_max_depth:
        layer = tree.layers[-1]
        depth += 1
        seed = derive_seed(config.seed, "raptor", depth) % (2**32)
        x = np.array([n.vector for n in layer])
        x = reduce_dimension(x, config.raptor_reduce_dim, config.raptor_reducer, seed)
        k, gm, _ = select_components(x, config.raptor_max_clusters, seed)
        tree.selected_k.append(k)
        resp = gm.predict_proba(x)
        members: list[list[int]] = [[] for _ in range(k)]
        for i, row in enumerate(resp):
            joined = [c for c in range(k) if row[c] >= config.raptor_threshold]
            for c in joined or [int(np.argmax(row))]:
                members[c].append(i)
        clusters = [m for m in members if m]
        if len(clusters) >= len(layer):
            break
        texts = []
        for j, m in enumerate(clusters):
            text, fell_back = _summarize(chat, prompts, [layer[i].text for i in m], config.max_context_tokens)
            texts.append(text)
            if fell_back:
                tree.fallback_ids.add(f"L{depth}:{j}")
        vecs = embedder.embed(texts)
        tree.layers.append([
            RaptorNode(f"L{depth}:{j}", text, tuple(v), tuple(layer[i].id for i in m), depth)
            for j, (m, text, v) in enumerate(zip(clusters, texts, vecs))
        ])
    return tree


def collapsed_retrieve(tree: RaptorTree, query_vector, k: int, max_tokens: int) -> list[RaptorNode]:
    """All layers ranked together by cosine; greedily take until k nodes or the budget runs out."""
    nodes = tree.nodes
    q = np.asarray(query_vector, dtype=np.float64)
    sims = np.array([n.vector for n in nodes]) @ q
    order = sorted(range(len(nodes)), key=lambda i: (-sims[i], nodes[i].id))
    picked, used = [], 0
    for i in order:
        if len(picked) >= k:
            break
        cost = approx_tokens(nodes[i].text)
        if used + cost > max_tokens:
            break
        picked.append(nodes[i])
        used += cost
    return picked


def raptor(instance: McqaInstance, env: StrategyEnv, config: StrategyConfig, trace: StrategyTrace):
    tree = env.raptor_tree
    if tree is None:
        raise StrategyError(f"{instance.id}: RAPTOR needs a built tree")
    picked = collapsed_retrieve(tree, env.embedder.embed_one(instance.question),
                                config.retrieval_depth, config.max_context_tokens)
    texts = {n.id: n.text for n in picked}
    ids = [n.id for n in picked]
    note = None
    if env.noise is not None and env.index is not None:
        ids, injected = inject(env, instance, ids, step_no=0)
        for d in injected:
            texts[d] = env.doc_text(d)
        note = f"injected={','.join(injected)}"
    trace.add(Step("search", query=instance.question, action="retrieve", doc_ids=tuple(ids), note=note))
    if any(n.id in tree.fallback_ids for n in picked):
        trace.flag("raptor_summary_fallback")
    context = "\n\n".join(f"[{i}] {texts[d]}" for i, d in enumerate(ids, start=1))
    return finish(trace, env, instance, context)

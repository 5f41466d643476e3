"""RAG strategies as interchangeable policies producing a StrategyTrace.

Every ``run_*`` function has the signature ``(instance, env, config) -> StrategyTrace``
and raises :class:`~uragc.errors.StrategyError` (carrying the partial trace) on failure.
"""

from .base import (
    NoiseInjection,
    StrategyConfig,
    StrategyEnv,
    approx_tokens,
    assemble_context,
    guarded,
)
from .raptor import (
    RaptorNode,
    RaptorTree,
    bic,
    build_raptor_tree,
    chunk_text,
    collapsed_retrieve,
    gmm_param_count,
    raptor,
    select_components,
)
from .rat import rat
from .replug import replug, replug_mixture, similarity_weights
from .selfrag import ReflectionScores, parse_reflection, selfrag, utility_score
from .simple import fusion, hyde, naive, no_retrieve

run_no_retrieve = guarded("no_retrieve", no_retrieve)
run_naive = guarded("naive", naive)
run_fusion = guarded("fusion", fusion)
run_hyde = guarded("hyde", hyde)
run_raptor = guarded("raptor", raptor)
run_replug = guarded("replug", replug)
run_selfrag = guarded("selfrag", selfrag)
run_rat = guarded("rat", rat)

STRATEGIES = {
    "no_retrieve": run_no_retrieve,
    "naive": run_naive,
    "fusion": run_fusion,
    "hyde": run_hyde,
    "raptor": run_raptor,
    "replug": run_replug,
    "selfrag": run_selfrag,
    "rat": run_rat,
}

NEEDS_INDEX = frozenset({"naive", "fusion", "hyde", "replug", "selfrag", "rat"})

__all__ = [
    "NEEDS_INDEX",
    "NoiseInjection",
    "RaptorNode",
    "RaptorTree",
    "ReflectionScores",
    "STRATEGIES",
    "StrategyConfig",
    "StrategyEnv",
    "approx_tokens",
    "assemble_context",
    "bic",
    "build_raptor_tree",
    "chunk_text",
    "collapsed_retrieve",
    "gmm_param_count",
    "parse_reflection",
    "replug_mixture",
    "run_fusion",
    "run_hyde",
    "run_naive",
    "run_no_retrieve",
    "run_raptor",
    "run_rat",
    "run_replug",
    "run_selfrag",
    "select_components",
    "similarity_weights",
    "utility_score",
]

import json
from pathlib import Path

import pytest

from uragc.core import load_corpus, load_dataset
from uragc.prompts import PromptLibrary
from uragc.providers import ChatClient, Embedder, MockBackend
from uragc.retrieval import build_index
from uragc.strategies import StrategyEnv

FIXTURES = Path(__file__).parent / "fixtures"


def fixture_script() -> dict:
    return json.loads((FIXTURES / "mock.json").read_text(encoding="utf-8"))


def make_env(script=None, corpus=None, with_index=True, record=False, **chat_kw) -> StrategyEnv:
    backend = MockBackend(fixture_script() if script is None else script, record=record)
    chat = ChatClient(backend, **chat_kw)
    embedder = Embedder(backend)
    env = StrategyEnv(chat, embedder, prompts=PromptLibrary())
    if corpus is not None:
        env.corpus = {d.id: d for d in corpus}
        if with_index:
            env.index = build_index(corpus, embedder)
    return env


@pytest.fixture
def dataset():
    return load_dataset(FIXTURES / "dataset.jsonl")


@pytest.fixture
def corpus():
    return load_corpus(FIXTURES / "corpus.jsonl")


@pytest.fixture
def env(corpus):
    return make_env(corpus=corpus)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)

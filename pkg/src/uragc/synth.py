"""Synthetic exchangeable worlds: gold labels drawn from the very distributions the mock replays."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import McqaInstance, dump_record, option_letters
from .errors import ArgumentError

KEY_PATTERN = r"\[(syn-\d+)\]"
# stand-in for log(0), keeps the script valid JSON
LOG_ZERO = -1000.0


@dataclass(frozen=True)
class SynthParams:
    n: int = 11000
    k: int = 4
    concentration: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 2:
            raise ArgumentError(f"n must be >= 2, got {self.n}")
        if not 2 <= self.k <= 26:
            raise ArgumentError(f"k must lie in [2, 26], got {self.k}")
        if not self.concentration > 0 or math.isinf(self.concentration):
            raise ArgumentError(f"concentration must be a positive finite real, got {self.concentration}")


def synth_world(params: SynthParams) -> tuple[list[McqaInstance], dict, np.ndarray]:
    """(instances, mock script, probability matrix)."""
    rng = np.random.default_rng(params.seed)
    probs = rng.dirichlet(np.full(params.k, params.concentration), size=params.n)
    width = max(6, len(str(params.n - 1)))
    labels = option_letters(params.k)
    instances = []
    entries = {}
    for i, p in enumerate(probs):
        key = f"syn-{i:0{width}d}"
        gold = int(rng.choice(params.k, p=p / p.sum()))
        options = tuple(f"Option {lab} of {key}" for lab in labels)
        instances.append(McqaInstance(key, f"Synthetic question [{key}]?", options, gold, "synthetic", ("synthetic",)))
        lps = {lab: (math.log(float(x)) if x > 0 else LOG_ZERO) for lab, x in zip(labels, p)}
        top = labels[int(np.argmax(p))]
        entries[key] = {"text": f"Answer|{top}", "logprobs": lps}
    script = {"chat": {"keyed": {"pattern": KEY_PATTERN, "entries": entries}}}
    return instances, script, probs


def write_world(params: SynthParams, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    instances, script, _ = synth_world(params)
    data_path = out / "dataset.jsonl"
    mock_path = out / "mock.json"
    with open(data_path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(dump_record(inst.to_record()) + "\n")
    with open(mock_path, "w", encoding="utf-8") as fh:
        json.dump(script, fh, ensure_ascii=False, sort_keys=True)
        fh.write("\n")
    return data_path, mock_path

"""Prompt templates (plain text files next to this module) and rendering."""

from __future__ import annotations

import json
import re
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

from ..core import McqaInstance, option_letters
from ..errors import ProtocolError

_PLACEHOLDER = re.compile(r"\{(\w+)\}")
CONFIDENCE_HEADER = "Knowing that your previous answer had the following confidence:"
_ANCHOR = "Do not explain your reasoning."


class PromptLibrary:
    """Loads templates from the packaged defaults, optionally shadowed by a directory."""

    def __init__(self, override_dir=None):
        self.override_dir = Path(override_dir) if override_dir else None

    def text(self, name: str) -> str:
        if self.override_dir is not None:
            candidate = self.override_dir / name
            if candidate.exists():
                return candidate.read_text(encoding="utf-8")
        return _packaged(name)

    def fusion_pool(self) -> dict:
        return json.loads(self.text("fusion_queries.json"))


@lru_cache(maxsize=None)
def _packaged(name: str) -> str:
    return resources.files(__name__).joinpath(name).read_text(encoding="utf-8")


def fill(template: str, values: Mapping[str, str]) -> str:
    """Single-pass substitution of ``{name}`` for the given names only; other
    braces (JSON examples, user text) are left alone."""
    return _PLACEHOLDER.sub(lambda m: str(values[m.group(1)]) if m.group(1) in values else m.group(0), template)


def _drop_blank_placeholder(template: str, name: str) -> str:
    return template.replace("{" + name + "}\n", "")


def render_options(options: Sequence[str]) -> str:
    return "\n".join(f"{lab}. {opt}" for lab, opt in zip(option_letters(len(options)), options))


def confidence_block(probs: Sequence[float]) -> str:
    lines = [f"{lab}. {p:.2f}" for lab, p in zip(option_letters(len(probs)), probs)]
    return CONFIDENCE_HEADER + "\n" + "\n".join(lines)


def apply_self_aware(prompt: str, probs: Sequence[float]) -> str:
    """Insert the confidence block ahead of the no-explanation instruction."""
    if CONFIDENCE_HEADER in prompt:
        raise ProtocolError("prompt already carries a confidence block")
    block = confidence_block(probs)
    if _ANCHOR in prompt:
        return prompt.replace(_ANCHOR, block + "\n" + _ANCHOR, 1)
    return block + "\n\n" + prompt


def render_mcqa(
    lib: PromptLibrary,
    instance: McqaInstance,
    context: str | None,
    confidence: Sequence[float] | None = None,
) -> str:
    """MCQA scoring prompt; ``context=None`` selects the no-context variant."""
    name = "mcqa_no_context.txt" if context is None else "mcqa.txt"
    template = _drop_blank_placeholder(lib.text(name), "confidence_block")
    prompt = fill(
        template,
        {"context": context or "", "question": instance.question, "options": render_options(instance.options)},
    )
    if confidence is not None:
        prompt = apply_self_aware(prompt, confidence)
    return prompt

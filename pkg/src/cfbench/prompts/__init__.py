"""Versioned agent prompt templates."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources


@dataclass(frozen=True)
class Prompt:
    name: str
    version: int
    template: str

    def render(self, **fields) -> str:
        return self.template.format(**fields) if fields else self.template


@lru_cache(maxsize=None)
def load_prompt(name: str) -> Prompt:
    raw = resources.files(__name__).joinpath(f"{name}.txt").read_text(encoding="utf-8")
    header, _, body = raw.partition("\n")
    if not header.startswith("# version:"):
        raise ValueError(f"prompt {name!r} lacks a version header")
    return Prompt(name, int(header.split(":", 1)[1]), body.strip())


VERIFIER_FEW_SHOT_1 = (
    'Example 1: cause "turn on the stove", effect "boil the water". Abduction: boiling needs heat and '
    "the stove is the only heat source shown. Counterfactual: without the stove on, the water stays cold. "
    "Backdoor: no common cause drives both. "
    'Output: {"causal": true, "confidence": 0.92, "rationale": "heat from the stove is required for boiling"}'
)
VERIFIER_FEW_SHOT_2 = (
    'Example 2: cause "put on an apron", effect "chop the onion". Abduction: chopping does not require an '
    "apron. Counterfactual: the onion is chopped either way. Backdoor: both follow from the plan to cook. "
    'Output: {"causal": false, "confidence": 0.15, "rationale": "temporal order only; a shared plan explains both"}'
)
CRITIC_FEW_SHOT_1 = (
    'Example 1: Verifier accepted "open the fridge" -> "take out the milk" at 0.90. Challenge: could the '
    "milk have been on the counter? The video shows it inside, so the link survives. "
    'Output: {"causal": true, "confidence": 0.85, "rationale": "no alternative access path to the milk"}'
)
CRITIC_FEW_SHOT_2 = (
    'Example 2: Verifier accepted "wash hands" -> "crack the egg" at 0.70. Challenge: cracking an egg is '
    "possible with unwashed hands; the order reflects hygiene habit, not mechanism. "
    'Output: {"causal": false, "confidence": 0.20, "rationale": "habitual ordering mistaken for causation"}'
)

"""Causal-graph and visual-grounding rewards with group-relative advantages."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from cfbench._io import compact
from cfbench.annotations import VideoAnnotation
from cfbench.graph import CausalGraph
from cfbench.llm import LlmError, LlmGateway, LlmRequest, Role, cosine
from cfbench.prompts import load_prompt
from cfbench.qgen import Answer, CounterfactualQuestion, Level, chain_nodes, normalize_answer, normalize_text

logger = logging.getLogger(__name__)

ALPHA = 0.5
BETA = 0.5
K_SAMPLES = 4
GROUNDING_MIN_COSINE = 0.8
STD_FLOOR = 1e-8


class ExtractionError(RuntimeError):
    pass


@dataclass(frozen=True)
class MentionedEvent:
    text: str
    step_id: int | None = None

    @property
    def grounded(self) -> bool:
        return self.step_id is not None


@dataclass(frozen=True)
class ModelOutput:
    question_id: str
    cot_text: str
    answer: str
    claims: tuple[tuple[int, int], ...] = ()
    mentioned_events: tuple[MentionedEvent, ...] = ()


@dataclass(frozen=True)
class RewardScore:
    r_causal: float
    r_visual: float
    alpha: float
    beta: float
    total: float


@dataclass(frozen=True)
class GroupResult:
    rewards: tuple[float, ...]
    advantages: tuple[float, ...] = field(default_factory=tuple)


def ground_event(text: str, v: VideoAnnotation, embed: Callable[[str], np.ndarray] | None, min_cosine: float = GROUNDING_MIN_COSINE) -> int | None:
    """Step id an event refers to, by exact normalized text, else by best cosine >= ``min_cosine``."""
    norm = normalize_text(text)
    if not norm:
        return None
    for step in v.steps:
        if normalize_text(step.text) == norm:
            return step.id
    if embed is None:
        return None
    vec = embed(text)
    best_id, best = None, -1.0
    for step in v.steps:
        c = cosine(vec, embed(step.text))
        if c > best:
            best_id, best = step.id, c
    return best_id if best >= min_cosine else None


def extract_claims(
    cot_text: str,
    v: VideoAnnotation,
    gateway: LlmGateway,
    seed: int = 0,
) -> tuple[list[tuple[int, int]], list[MentionedEvent]]:
    """Ask the judge for cause->effect claims and mentioned events, then ground each event."""
    if not cot_text.strip():
        return [], []
    payload = {
        "steps": [{"id": s.id, "text": s.text} for s in v.steps],
        "reasoning": cot_text,
        "response_format": {"claims": [{"cause": "step id", "effect": "step id"}], "events": ["str"]},
    }
    req = LlmRequest(Role.JUDGE, load_prompt("judge_claims").render(), compact(payload), seed=seed)
    try:
        parsed = gateway.complete(req).parsed
    except LlmError as exc:
        raise ExtractionError(f"claim extraction failed: {exc}") from exc
    raw_claims, raw_events = parsed.get("claims"), parsed.get("events")
    if not isinstance(raw_claims, list) or not isinstance(raw_events, list):
        raise ExtractionError("judge output needs 'claims' and 'events' lists")
    ids = set(v.step_ids)
    claims: list[tuple[int, int]] = []
    for c in raw_claims:
        try:
            pair = (int(c["cause"]), int(c["effect"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ExtractionError(f"malformed claim {c!r}") from exc
        if pair[0] not in ids or pair[1] not in ids:
            logger.warning("claim %s references unknown steps; ignored", pair)
            continue
        if pair not in claims:
            claims.append(pair)
    events = [
        MentionedEvent(str(e), ground_event(str(e), v, gateway.embed_array))
        for e in raw_events
        if str(e).strip()
    ]
    return claims, events


def focus_nodes(q: CounterfactualQuestion, g: CausalGraph) -> set[int]:
    """Nodes whose induced edges a correct answer should reason over."""
    if q.level is Level.L3:
        return set()
    a, b = int(q.intervention), int(q.target)
    if q.level is Level.L2:
        return chain_nodes(g, a, b)
    # Adjacent sites carry no edge by construction; their immediate causes and effects do.
    local = {a, b}
    for n in (a, b):
        local.update(g.predecessors(n))
        local.update(g.successors(n))
    return local


def r_causal(
    claims: Sequence[tuple[int, int]],
    g: CausalGraph,
    focus: set[int] | None = None,
    gold_answer: Answer | None = None,
) -> float:
    """F1 between claimed links and the graph edges induced on ``focus`` (all edges when ``None``)."""
    claimed = set(claims)
    if not claimed:
        return 1.0 if gold_answer is Answer.PREMISE_INVALID else 0.0
    reference = {e for e in g.edge_pairs if focus is None or (e[0] in focus and e[1] in focus)}
    tp = len(claimed & reference)
    if tp == 0:
        return 0.0
    precision = tp / len(claimed)
    recall = tp / len(reference)
    return 2 * precision * recall / (precision + recall)


def r_visual(mentioned_events: Sequence[MentionedEvent], v: VideoAnnotation) -> float:
    """Fraction of mentioned events grounded in a real step; 1.0 when nothing is mentioned."""
    if not mentioned_events:
        return 1.0
    ids = set(v.step_ids)
    return sum(1 for e in mentioned_events if e.step_id in ids) / len(mentioned_events)


def combine(r_c: float, r_v: float, alpha: float = ALPHA, beta: float = BETA) -> RewardScore:
    if alpha < 0 or beta < 0:
        raise ValueError(f"reward weights must be non-negative, got alpha={alpha}, beta={beta}")
    return RewardScore(r_c, r_v, alpha, beta, alpha * r_c + beta * r_v)


def total_reward(
    o: ModelOutput,
    v: VideoAnnotation,
    q: CounterfactualQuestion,
    g: CausalGraph,
    alpha: float = ALPHA,
    beta: float = BETA,
) -> RewardScore:
    rc = r_causal(o.claims, g, focus_nodes(q, g), q.gold_answer)
    rv = r_visual(o.mentioned_events, v)
    return combine(rc, rv, alpha, beta)


def group_advantages(rewards: Sequence[float], ddof: int = 0, std_floor: float = STD_FLOOR) -> GroupResult:
    """Standardize rewards within one sampled group (population std by default)."""
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or r.size < 2:
        raise ValueError(f"a group needs at least 2 rewards, got {r.size}")
    centered = r - r.mean()
    if r.max() == r.min():
        return GroupResult(tuple(r.tolist()), tuple(0.0 for _ in r))
    std = max(float(r.std(ddof=ddof)), std_floor)
    return GroupResult(tuple(r.tolist()), tuple((centered / std).tolist()))


def score_group(
    outputs: Sequence[ModelOutput],
    v: VideoAnnotation,
    q: CounterfactualQuestion,
    g: CausalGraph,
    alpha: float = ALPHA,
    beta: float = BETA,
    ddof: int = 0,
) -> tuple[list[RewardScore], GroupResult]:
    scores = [total_reward(o, v, q, g, alpha, beta) for o in outputs]
    return scores, group_advantages([s.total for s in scores], ddof=ddof)


def reward_report(question_id: str, sample_ids: Sequence[str], scores: Sequence[RewardScore], group: GroupResult, alpha: float, beta: float) -> dict:
    return {
        "question_id": question_id,
        "samples": [
            {"sample_id": sid, "r_causal": s.r_causal, "r_visual": s.r_visual, "total": s.total, "advantage": adv}
            for sid, s, adv in zip(sample_ids, scores, group.advantages)
        ],
        "alpha": alpha,
        "beta": beta,
        "k": len(scores),
    }


class GroupRewardScorer(BaseEstimator):
    """Score K sampled outputs per question and standardize within each group.

    ``transform`` takes an iterable of ``(outputs, annotation, question, graph)``
    groups and returns one advantage array per group.
    """

    def __init__(self, alpha=ALPHA, beta=BETA, ddof=0):
        self.alpha = alpha
        self.beta = beta
        self.ddof = ddof

    def fit(self, X=None, y=None):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("reward weights must be non-negative")
        if self.ddof not in (0, 1):
            raise ValueError("ddof must be 0 (population) or 1 (sample)")
        return self

    def score_groups(self, X) -> list[tuple[list[RewardScore], GroupResult]]:
        self.fit()
        return [score_group(outs, v, q, g, self.alpha, self.beta, self.ddof) for outs, v, q, g in X]

    def transform(self, X) -> list[np.ndarray]:
        return [np.asarray(group.advantages) for _, group in self.score_groups(X)]

    def fit_transform(self, X, y=None):
        return self.transform(X)

    def __sklearn_is_fitted__(self):
        return True


def answer_is_correct(o: ModelOutput, q: CounterfactualQuestion) -> bool:
    return normalize_answer(o.answer) == q.gold_answer

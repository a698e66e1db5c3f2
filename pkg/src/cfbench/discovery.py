"""Four-agent causal discovery: observe, shortlist, verify, critique, synthesize."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

from sklearn.base import BaseEstimator, TransformerMixin

from cfbench._io import compact
from cfbench.annotations import VideoAnnotation
from cfbench.graph import CausalEdge, CausalGraph, GraphError, build_graph
from cfbench.llm import LlmError, LlmGateway, LlmRequest, Role
from cfbench.prompts import (
    CRITIC_FEW_SHOT_1,
    CRITIC_FEW_SHOT_2,
    VERIFIER_FEW_SHOT_1,
    VERIFIER_FEW_SHOT_2,
    load_prompt,
)

logger = logging.getLogger(__name__)

TOP_FRACTION = 0.2


class DiscoveryError(RuntimeError):
    def __init__(self, message: str, video_id: str = "", stage: str = "", pair: tuple[int, int] | None = None):
        super().__init__(message)
        self.message = message
        self.video_id = video_id
        self.stage = stage
        self.pair = pair

    def __str__(self) -> str:
        where = f" pair {self.pair[0]}->{self.pair[1]}" if self.pair else ""
        return f"[{self.video_id or '?'}] {self.stage or 'discovery'}{where}: {self.message}"

    def to_record(self) -> dict:
        return {
            "video_id": self.video_id,
            "stage": self.stage,
            "pair": list(self.pair) if self.pair else None,
            "error": str(self),
        }


class MalformedVerdictError(DiscoveryError):
    pass


@dataclass(frozen=True, order=True)
class CandidateRelation:
    from_id: int
    to_id: int
    observer_confidence: float = 0.0

    def __post_init__(self):
        if self.from_id >= self.to_id:
            raise ValueError(f"candidate ({self.from_id}, {self.to_id}) must point forward")

    @property
    def pair(self) -> tuple[int, int]:
        return (self.from_id, self.to_id)

    @property
    def adjacent(self) -> bool:
        return self.to_id == self.from_id + 1


@dataclass(frozen=True)
class AgentVerdict:
    stage: str
    is_causal: bool
    confidence: float
    rationale: str = ""
    raw: Any = field(default=None, compare=False)

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "is_causal": self.is_causal,
            "confidence": self.confidence,
            "rationale": self.rationale,
            "raw": self.raw,
        }


def _clamp_confidence(value: Any, stage: str, pair) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or math.isnan(value):
        raise MalformedVerdictError(f"confidence {value!r} is not a number", stage=stage, pair=pair)
    if value < 0.0 or value > 1.0:
        clamped = min(1.0, max(0.0, float(value)))
        logger.warning("%s confidence %s for %s clamped to %s", stage, value, pair, clamped)
        return clamped
    return float(value)


def _steps_payload(v: VideoAnnotation) -> list[dict]:
    return [{"id": s.id, "text": s.text, "timestamp": s.timestamp_s} for s in v.steps]


def _step_ref(v: VideoAnnotation, step_id: int) -> dict:
    s = v.step(step_id)
    return {"id": s.id, "text": s.text, "timestamp": s.timestamp_s}


def forward_pairs(v: VideoAnnotation, window: int | None = None) -> list[tuple[int, int]]:
    n = len(v.steps)
    span = n if window is None else window
    if span < 1:
        raise ValueError("window must be >= 1")
    return [(i, j) for i in range(1, n + 1) for j in range(i + 1, min(n, i + span) + 1)]


def _ask(gateway: LlmGateway, role: Role, system: str, payload: dict, seed: int, temperature: float, stage: str, pair=None):
    req = LlmRequest(role, system, compact(payload), temperature=temperature, seed=seed)
    try:
        return gateway.complete(req).parsed
    except LlmError as exc:
        raise DiscoveryError(str(exc), stage=stage, pair=pair) from exc


def _rank_key(c: CandidateRelation):
    return (-c.observer_confidence, c.from_id, c.to_id)


def propose_candidates(
    v: VideoAnnotation,
    gateway: LlmGateway,
    window: int | None = None,
    batched: bool = True,
    seed: int = 0,
    temperature: float = 0.0,
) -> list[CandidateRelation]:
    """Score every forward pair within ``window`` steps with the observer.

    Returns candidates sorted by (confidence desc, from_id, to_id). Pairs the
    observer leaves out score 0.
    """
    pairs = forward_pairs(v, window)
    system = load_prompt("observer").render()
    groups = [pairs] if batched else [[p] for p in pairs]
    scores: dict[tuple[int, int], float] = {}
    for group in groups:
        payload = {
            "task_name": v.task_name,
            "steps": _steps_payload(v),
            "pairs": [list(p) for p in group],
            "response_format": {"scores": [{"from": "int", "to": "int", "confidence": "float in [0, 1]"}]},
        }
        parsed = _ask(gateway, Role.OBSERVER, system, payload, seed, temperature, "observer")
        entries = parsed.get("scores")
        if not isinstance(entries, list):
            raise MalformedVerdictError("observer output lacks a 'scores' list", stage="observer")
        wanted = set(group)
        for entry in entries:
            try:
                key = (int(entry["from"]), int(entry["to"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise MalformedVerdictError(f"bad observer entry {entry!r}", stage="observer") from exc
            if key not in wanted:
                logger.warning("observer scored unrequested pair %s; ignored", key)
                continue
            scores[key] = _clamp_confidence(entry.get("confidence"), "observer", key)
        for key in wanted - scores.keys():
            logger.warning("observer skipped pair %s in %s; scored 0", key, v.video_id)
            scores[key] = 0.0
    return sorted((CandidateRelation(a, b, scores[(a, b)]) for a, b in pairs), key=_rank_key)


def select_top(
    candidates: Sequence[CandidateRelation],
    fraction: float = TOP_FRACTION,
    force_adjacent: bool = True,
) -> list[CandidateRelation]:
    """Keep the best ``max(1, floor(fraction * n))`` candidates, plus every adjacent pair.

    Ranked picks come first in rank order, then forced adjacent pairs by id.
    """
    if not candidates:
        raise ValueError("cannot shortlist an empty candidate list")
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    ranked = sorted(candidates, key=_rank_key)
    k = max(1, math.floor(round(fraction * len(ranked), 9)))
    shortlist = ranked[:k]
    if force_adjacent:
        chosen = {c.pair for c in shortlist}
        shortlist += sorted((c for c in ranked[k:] if c.adjacent and c.pair not in chosen), key=lambda c: c.pair)
    return shortlist


def _parse_verdict(stage: str, parsed: dict, pair, causal_key: str, require_causal: bool) -> AgentVerdict:
    if "confidence" not in parsed:
        raise MalformedVerdictError("verdict lacks 'confidence'", stage=stage, pair=pair)
    if require_causal and causal_key not in parsed:
        raise MalformedVerdictError(f"verdict lacks {causal_key!r}", stage=stage, pair=pair)
    causal = parsed.get(causal_key, False)
    if not isinstance(causal, bool):
        raise MalformedVerdictError(f"{causal_key!r} must be a boolean, got {causal!r}", stage=stage, pair=pair)
    return AgentVerdict(
        stage=stage,
        is_causal=causal,
        confidence=_clamp_confidence(parsed["confidence"], stage, pair),
        rationale=str(parsed.get("rationale", "")),
        raw=parsed,
    )


def _pair_payload(pair: CandidateRelation, v: VideoAnnotation) -> dict:
    return {
        "task_name": v.task_name,
        "steps": _steps_payload(v),
        "cause": _step_ref(v, pair.from_id),
        "effect": _step_ref(v, pair.to_id),
        "observer_confidence": pair.observer_confidence,
    }


def verify_relation(pair: CandidateRelation, v: VideoAnnotation, gateway: LlmGateway, seed: int = 0, temperature: float = 0.0) -> AgentVerdict:
    system = load_prompt("verifier").render(few_shot_1=VERIFIER_FEW_SHOT_1, few_shot_2=VERIFIER_FEW_SHOT_2)
    payload = _pair_payload(pair, v)
    payload["response_format"] = {"causal": "bool", "confidence": "float in [0, 1]", "rationale": "str"}
    parsed = _ask(gateway, Role.VERIFIER, system, payload, seed, temperature, "verifier", pair.pair)
    return _parse_verdict("verifier", parsed, pair.pair, "causal", require_causal=False)


def critique(
    pair: CandidateRelation,
    verifier_verdict: AgentVerdict,
    v: VideoAnnotation,
    gateway: LlmGateway,
    seed: int = 0,
    temperature: float = 0.0,
) -> AgentVerdict:
    system = load_prompt("critic").render(few_shot_1=CRITIC_FEW_SHOT_1, few_shot_2=CRITIC_FEW_SHOT_2)
    payload = _pair_payload(pair, v)
    payload["verifier_analysis"] = verifier_verdict.raw
    payload["response_format"] = {"causal": "bool", "confidence": "float in [0, 1]", "rationale": "str"}
    parsed = _ask(gateway, Role.CRITIC, system, payload, seed, temperature, "critic", pair.pair)
    return _parse_verdict("critic", parsed, pair.pair, "causal", require_causal=False)


def synthesize(
    pair: CandidateRelation,
    verifier_verdict: AgentVerdict,
    critic_verdict: AgentVerdict,
    v: VideoAnnotation,
    gateway: LlmGateway,
    seed: int = 0,
    temperature: float = 0.0,
) -> AgentVerdict:
    """Final adjudication; both upstream transcripts are embedded in the system prompt.

    The decision may name the edge explicitly via ``from``/``to``; when it
    does, that orientation is what reaches graph assembly.
    """
    system = load_prompt("synthesizer").render(
        verifier_statements="Verifier: " + compact(verifier_verdict.raw),
        critic_statements="Critic: " + compact(critic_verdict.raw),
    )
    payload = _pair_payload(pair, v)
    payload["response_format"] = {"is_causal": "bool", "confidence": "float in [0, 1]", "rationale": "str"}
    parsed = _ask(gateway, Role.SYNTHESIZER, system, payload, seed, temperature, "synthesizer", pair.pair)
    return _parse_verdict("synthesizer", parsed, pair.pair, "is_causal", require_causal=True)


def _adjudicated_edge(pair: CandidateRelation, verdict: AgentVerdict, video_id: str) -> CausalEdge:
    raw = verdict.raw if isinstance(verdict.raw, dict) else {}
    try:
        a = int(raw.get("from", pair.from_id))
        b = int(raw.get("to", pair.to_id))
    except (TypeError, ValueError) as exc:
        raise MalformedVerdictError("non-integer edge endpoints", stage="synthesizer", pair=pair.pair) from exc
    return CausalEdge(a, b, verdict.confidence, provenance=f"transcripts/{video_id}.json#{pair.from_id}-{pair.to_id}")


@dataclass
class DiscoveryResult:
    video_id: str
    graph: CausalGraph | None
    transcript: dict
    failure: dict | None = None


def discover_graph(
    v: VideoAnnotation,
    gateway: LlmGateway,
    top_fraction: float = TOP_FRACTION,
    window: int | None = None,
    force_adjacent: bool = True,
    batched_observer: bool = True,
    n_jobs: int = 1,
    seed: int = 0,
    temperature: float = 0.0,
) -> tuple[CausalGraph, dict]:
    """Run the full protocol for one video and return the graph plus its transcript bundle."""
    try:
        candidates = propose_candidates(v, gateway, window, batched_observer, seed, temperature)
        shortlist = select_top(candidates, top_fraction, force_adjacent)

        def adjudicate(pair: CandidateRelation):
            ver = verify_relation(pair, v, gateway, seed, temperature)
            crit = critique(pair, ver, v, gateway, seed, temperature)
            syn = synthesize(pair, ver, crit, v, gateway, seed, temperature)
            return pair, ver, crit, syn

        if n_jobs > 1:
            with ThreadPoolExecutor(max_workers=n_jobs) as pool:
                outcomes = list(pool.map(adjudicate, shortlist))
        else:
            outcomes = [adjudicate(p) for p in shortlist]
        outcomes.sort(key=lambda o: o[0].pair)

        accepted = [_adjudicated_edge(p, syn, v.video_id) for p, _, _, syn in outcomes if syn.is_causal]
        try:
            graph = build_graph(v.video_id, v.step_ids, accepted)
        except GraphError as exc:
            raise DiscoveryError(str(exc), stage="build_graph") from exc
    except DiscoveryError as exc:
        exc.video_id = exc.video_id or v.video_id
        raise
    transcript = {
        "video_id": v.video_id,
        "pairs": [
            {
                "from": p.from_id,
                "to": p.to_id,
                "observer_conf": p.observer_confidence,
                "verifier": ver.to_dict(),
                "critic": crit.to_dict(),
                "synthesizer": syn.to_dict(),
            }
            for p, ver, crit, syn in outcomes
        ],
    }
    return graph, transcript


def discover_many(annotations: Sequence[VideoAnnotation], gateway: LlmGateway, n_jobs: int = 1, **kwargs) -> list[DiscoveryResult]:
    """Discover graphs for many videos; a failing video yields a failure record, not an exception."""

    def one(v: VideoAnnotation) -> DiscoveryResult:
        try:
            graph, transcript = discover_graph(v, gateway, n_jobs=1, **kwargs)
        except DiscoveryError as exc:
            logger.error("discovery failed: %s", exc)
            return DiscoveryResult(v.video_id, None, {"video_id": v.video_id, "pairs": []}, exc.to_record())
        return DiscoveryResult(v.video_id, graph, transcript)

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(one, annotations))
    else:
        results = [one(v) for v in annotations]
    return sorted(results, key=lambda r: r.video_id)


class CausalGraphDiscoverer(BaseEstimator, TransformerMixin):
    """Estimator wrapper: ``transform`` maps annotations to causal graphs.

    Failed videos map to ``None``; details land in ``failures_`` and the
    per-video transcripts in ``transcripts_`` after each call.
    """

    def __init__(self, gateway=None, top_fraction=TOP_FRACTION, window=None, force_adjacent=True,
                 batched_observer=True, n_jobs=1, seed=0, temperature=0.0):
        self.gateway = gateway
        self.top_fraction = top_fraction
        self.window = window
        self.force_adjacent = force_adjacent
        self.batched_observer = batched_observer
        self.n_jobs = n_jobs
        self.seed = seed
        self.temperature = temperature

    def fit(self, X, y=None):
        if self.gateway is None:
            raise ValueError("CausalGraphDiscoverer needs a gateway")
        if not 0 < self.top_fraction <= 1:
            raise ValueError("top_fraction must be in (0, 1]")
        return self

    def transform(self, X) -> list[CausalGraph | None]:
        self.fit(X)
        by_id = {v.video_id: i for i, v in enumerate(X)}
        if len(by_id) != len(X):
            raise ValueError("duplicate video_id in input")
        results = discover_many(
            list(X), self.gateway, n_jobs=self.n_jobs, top_fraction=self.top_fraction, window=self.window,
            force_adjacent=self.force_adjacent, batched_observer=self.batched_observer, seed=self.seed,
            temperature=self.temperature,
        )
        out: list[CausalGraph | None] = [None] * len(X)
        self.transcripts_ = {}
        self.failures_ = []
        for r in results:
            out[by_id[r.video_id]] = r.graph
            self.transcripts_[r.video_id] = r.transcript
            if r.failure:
                self.failures_.append(r.failure)
        return out

    def __sklearn_is_fitted__(self):
        return True

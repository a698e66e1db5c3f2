"""Counterfactual question generation at three levels, and paired verification."""

from __future__ import annotations

import hashlib
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Mapping, Sequence

import numpy as np

from cfbench._io import compact
from cfbench.annotations import InteractionType, VideoAnnotation, adjacent_pairs
from cfbench.graph import CausalGraph
from cfbench.llm import LlmError, LlmGateway, LlmRequest, Role, cosine, tokenize
from cfbench.prompts import load_prompt

logger = logging.getLogger(__name__)

CANDIDATES_PER_LEVEL = 10
DECOY_MAX_COSINE = 0.95
N_VERIFIERS = 2


class Level(str, Enum):
    L1 = "L1"
    L2 = "L2"
    L3 = "L3"

    @property
    def number(self) -> int:
        return int(self.value[1])


class Answer(str, Enum):
    YES = "yes"
    NO = "no"
    PREMISE_INVALID = "premise_invalid"


class Status(str, Enum):
    CANDIDATE = "candidate"
    KEPT = "kept"
    DROPPED = "dropped"


class GenerationError(RuntimeError):
    pass


_PREMISE = re.compile(r"^\W*(premise[\s_-]*invalid|invalid[\s_-]*premise|the premise is invalid)\b")
_YES_NO = re.compile(r"^\W*(yes|no)\b")


def normalize_answer(text: str | None) -> Answer | None:
    """Map a free-text answer onto the answer enum by its leading verdict; ``None`` if unrecognized."""
    if text is None:
        return None
    t = text.strip().lower()
    if _PREMISE.match(t):
        return Answer.PREMISE_INVALID
    m = _YES_NO.match(t)
    if m:
        return Answer(m.group(1))
    return None


def normalize_text(text: str) -> str:
    return " ".join(tokenize(text))


def question_id(video_id: str, level: Level, intervention, target) -> str:
    digest = hashlib.sha256(compact([video_id, Level(level).value, intervention, target]).encode()).hexdigest()
    return f"q_{digest[:16]}"


@dataclass(frozen=True)
class CounterfactualQuestion:
    question_id: str
    video_id: str
    level: Level
    intervention: int | str
    target: int | str
    question_text: str
    gold_answer: Answer
    rationale: str = ""
    status: Status = Status.CANDIDATE
    drop_reason: str | None = None

    def to_dict(self) -> dict:
        return {
            "question_id": self.question_id,
            "video_id": self.video_id,
            "level": self.level.value,
            "intervention": self.intervention,
            "target": self.target,
            "question_text": self.question_text,
            "gold_answer": self.gold_answer.value,
            "rationale": self.rationale,
            "status": self.status.value,
            "drop_reason": self.drop_reason,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CounterfactualQuestion":
        return cls(
            question_id=d["question_id"],
            video_id=d["video_id"],
            level=Level(d["level"]),
            intervention=d["intervention"],
            target=d["target"],
            question_text=d["question_text"],
            gold_answer=Answer(d["gold_answer"]),
            rationale=d.get("rationale", ""),
            status=Status(d.get("status", "candidate")),
            drop_reason=d.get("drop_reason"),
        )


@dataclass(frozen=True)
class VerificationRecord:
    question_id: str
    verdicts: tuple[dict, ...]
    kept: bool
    drop_reason: str | None = None
    blind_verdicts: tuple[dict, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "question_id": self.question_id,
            "verdicts": list(self.verdicts),
            "blind_verdicts": list(self.blind_verdicts),
            "kept": self.kept,
            "drop_reason": self.drop_reason,
        }


def enumerate_l1_sites(g: CausalGraph, v: VideoAnnotation) -> list[tuple[int, int]]:
    """Temporally adjacent step pairs with no causal edge between them."""
    if g.node_ids != frozenset(v.step_ids):
        raise ValueError(f"graph {g.video_id!r} is not aligned with its annotation")
    edges = g.edge_pairs
    return [(a.id, b.id) for a, b in adjacent_pairs(v) if (a.id, b.id) not in edges]


def enumerate_l2_sites(g: CausalGraph) -> list[tuple[int, int]]:
    """Pairs joined by a directed path of two or more edges but no direct edge."""
    edges = g.edge_pairs
    sites = []
    for s in sorted(g.node_ids):
        far: set[int] = set()
        for child in g.successors(s):
            far |= g.descendants(child)
        sites.extend((s, t) for t in sorted(far) if (s, t) not in edges)
    return sites


def chain_nodes(g: CausalGraph, source: int, target: int) -> set[int]:
    """Every node on some directed path from ``source`` to ``target``, both ends included."""
    ancestors_of_target = {n for n in g.node_ids if target in g.descendants(n)}
    return (g.descendants(source) & ancestors_of_target) | {source, target}


def l2_gold_answer(g: CausalGraph, source: int, target: int) -> Answer:
    """``no`` when all of the target's direct causes flow from the intervention; else ``yes``."""
    downstream = g.descendants(source)
    for parent in g.predecessors(target):
        if parent != source and parent not in downstream:
            return Answer.YES
    return Answer.NO


def key_actions(g: CausalGraph, limit: int = 3) -> list[int]:
    """Steps that head the largest downstream cascades."""
    ranked = sorted(g.node_ids, key=lambda n: (-len(g.descendants(n)), n))
    return [n for n in ranked[:limit] if g.successors(n)]


def _steps_payload(v: VideoAnnotation) -> list[dict]:
    return [{"id": s.id, "text": s.text, "timestamp": s.timestamp_s} for s in v.steps]


_LEVEL_KEYS = {Level.L1: "level1", Level.L2: "level2", Level.L3: "level3"}


def _as_step_id(value) -> int | None:
    if isinstance(value, bool):
        return None
    if isinstance(value, int):
        return value
    if isinstance(value, str) and value.strip().isdigit():
        return int(value)
    return None


def decoy_is_absent(decoy: str, v: VideoAnnotation, embed: Callable[[str], np.ndarray], max_cosine: float = DECOY_MAX_COSINE) -> bool:
    """True when the decoy matches no step by normalized text and stays below ``max_cosine`` to each."""
    norm = normalize_text(decoy)
    if not norm:
        return False
    vec = embed(decoy)
    for step in v.steps:
        if normalize_text(step.text) == norm:
            return False
        if cosine(vec, embed(step.text)) >= max_cosine:
            return False
    return True


def generate_candidates(
    v: VideoAnnotation,
    g: CausalGraph,
    gateway: LlmGateway,
    per_level: int = CANDIDATES_PER_LEVEL,
    seed: int = 0,
    temperature: float = 0.0,
) -> list[CounterfactualQuestion]:
    """One generator call, then structural post-validation of every returned candidate.

    Candidates that break their level's invariant are kept in the output but
    marked dropped with reason ``structural``. Gold answers come from the graph.
    """
    if g.video_id != v.video_id:
        raise GenerationError(f"graph {g.video_id!r} does not belong to video {v.video_id!r}")
    system = load_prompt("generator").render(per_level=per_level, total=3 * per_level)
    payload = {
        "task_name": v.task_name,
        "steps": _steps_payload(v),
        "causal_links": [[e.from_id, e.to_id] for e in g.edges],
        "key_actions": key_actions(g),
        "response_format": {
            "level1": [{"intervention": "step id", "target": "step id", "question": "str", "answer": "str"}],
            "level2": [{"intervention": "step id", "target": "step id", "question": "str", "answer": "str"}],
            "level3": [{"decoy": "str", "goal": "str", "question": "str", "answer": "str"}],
        },
    }
    req = LlmRequest(Role.GENERATOR, system, compact(payload), temperature=temperature, seed=seed)
    try:
        parsed = gateway.complete(req).parsed
    except LlmError as exc:
        raise GenerationError(f"[{v.video_id}] generator failed: {exc}") from exc

    l1 = set(enumerate_l1_sites(g, v))
    l2 = set(enumerate_l2_sites(g))
    out: list[CounterfactualQuestion] = []
    seen: set[str] = set()
    for level, key in _LEVEL_KEYS.items():
        items = parsed.get(key, [])
        if not isinstance(items, list):
            raise GenerationError(f"[{v.video_id}] generator field {key!r} is not a list")
        if len(items) > per_level:
            logger.warning("%s: generator returned %d %s candidates; keeping %d", v.video_id, len(items), key, per_level)
            items = items[:per_level]
        for item in items:
            if not isinstance(item, dict) or not isinstance(item.get("question"), str):
                logger.warning("%s: discarding malformed %s candidate %r", v.video_id, key, item)
                continue
            q = _validate_candidate(level, item, v, g, l1, l2, gateway)
            if q.question_id in seen:
                q = replace(q, status=Status.DROPPED, drop_reason="duplicate")
            seen.add(q.question_id)
            out.append(q)
    return out


def _validate_candidate(level, item, v, g, l1_sites, l2_sites, gateway) -> CounterfactualQuestion:
    text = item["question"]
    rationale = str(item.get("answer", ""))
    if level is Level.L3:
        intervention = str(item.get("decoy", ""))
        target = str(item.get("goal") or v.task_name)
        ok = bool(intervention.strip()) and decoy_is_absent(intervention, v, gateway.embed_array)
        gold = Answer.PREMISE_INVALID
    else:
        a, b = _as_step_id(item.get("intervention")), _as_step_id(item.get("target"))
        intervention = a if a is not None else item.get("intervention")
        target = b if b is not None else item.get("target")
        if level is Level.L1:
            ok = (a, b) in l1_sites
            gold = Answer.YES
        else:
            ok = (a, b) in l2_sites
            gold = l2_gold_answer(g, a, b) if ok else Answer.NO
    q = CounterfactualQuestion(
        question_id=question_id(v.video_id, level, intervention, target),
        video_id=v.video_id,
        level=level,
        intervention=intervention,
        target=target,
        question_text=text,
        gold_answer=gold,
        rationale=rationale,
    )
    if not ok:
        return replace(q, status=Status.DROPPED, drop_reason="structural")
    return q


def _annotation_payload(v: VideoAnnotation) -> dict:
    out = {"task_name": v.task_name, "steps": _steps_payload(v)}
    if v.captions:
        out["captions"] = v.captions
    return out


def _answer(q: CounterfactualQuestion, v: VideoAnnotation | None, slot: int, gateway, seed, temperature) -> dict:
    payload = {
        "verifier_slot": slot,
        "question": q.question_text,
        "annotation": _annotation_payload(v) if v is not None else None,
        "response_format": {"answer": "yes | no | premise_invalid", "explanation": "str"},
    }
    req = LlmRequest(Role.ANSWERER, load_prompt("answerer").render(), compact(payload), temperature=temperature, seed=seed)
    parsed = gateway.complete(req).parsed
    answer = parsed.get("answer")
    return {"answer": answer, "correct": normalize_answer(answer if isinstance(answer, str) else None) == q.gold_answer}


def verify_questions(
    candidates: Sequence[CounterfactualQuestion],
    v: VideoAnnotation,
    gateway: LlmGateway,
    difficulty_mode: bool = False,
    n_jobs: int = 1,
    seed: int = 0,
    temperature: float = 0.0,
) -> list[VerificationRecord]:
    """Two independent text-only answerers per question; keep only on unanimous correct answers.

    With ``difficulty_mode`` a question both answerers get right without the
    annotation is also dropped (``caption_leakage``). Candidates already
    dropped upstream are skipped.
    """

    def one(q: CounterfactualQuestion) -> VerificationRecord:
        try:
            verdicts = tuple(_answer(q, v, slot, gateway, seed, temperature) for slot in range(1, N_VERIFIERS + 1))
        except LlmError as exc:
            logger.warning("verifier failed on %s: %s", q.question_id, exc)
            return VerificationRecord(q.question_id, (), False, "verifier_error")
        if not all(x["correct"] for x in verdicts):
            return VerificationRecord(q.question_id, verdicts, False, "verifier_disagreement")
        if difficulty_mode:
            try:
                blind = tuple(_answer(q, None, slot, gateway, seed, temperature) for slot in range(1, N_VERIFIERS + 1))
            except LlmError as exc:
                logger.warning("blind verifier failed on %s: %s", q.question_id, exc)
                return VerificationRecord(q.question_id, verdicts, False, "verifier_error")
            if all(x["correct"] for x in blind):
                return VerificationRecord(q.question_id, verdicts, False, "caption_leakage", blind)
            return VerificationRecord(q.question_id, verdicts, True, None, blind)
        return VerificationRecord(q.question_id, verdicts, True)

    todo = [q for q in candidates if q.status is Status.CANDIDATE]
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            records = list(pool.map(one, todo))
    else:
        records = [one(q) for q in todo]
    return sorted(records, key=lambda r: r.question_id)


def apply_verification(
    candidates: Sequence[CounterfactualQuestion], records: Sequence[VerificationRecord]
) -> list[CounterfactualQuestion]:
    by_id = {r.question_id: r for r in records}
    out = []
    for q in candidates:
        r = by_id.get(q.question_id)
        if r is None or q.status is not Status.CANDIDATE:
            out.append(q)
        elif r.kept:
            out.append(replace(q, status=Status.KEPT, drop_reason=None))
        else:
            out.append(replace(q, status=Status.DROPPED, drop_reason=r.drop_reason))
    return sorted(out, key=lambda q: q.question_id)


def check_structure(q: CounterfactualQuestion, v: VideoAnnotation, g: CausalGraph, embed) -> bool:
    if q.level is Level.L1:
        return (q.intervention, q.target) in set(enumerate_l1_sites(g, v))
    if q.level is Level.L2:
        return (q.intervention, q.target) in set(enumerate_l2_sites(g))
    return isinstance(q.intervention, str) and decoy_is_absent(q.intervention, v, embed)


def package_dataset(
    kept: Sequence[CounterfactualQuestion],
    annotations: Mapping[str, VideoAnnotation],
    graphs: Mapping[str, CausalGraph],
    embed: Callable[[str], np.ndarray] | None = None,
) -> dict:
    """Assemble the benchmark bundle from kept questions, re-checking each against its graph."""
    if not kept:
        raise GenerationError("empty dataset")
    seen: set[str] = set()
    for q in kept:
        if q.status is not Status.KEPT:
            raise GenerationError(f"question {q.question_id} is {q.status.value}, not kept")
        if q.question_id in seen:
            raise GenerationError(f"duplicate question_id {q.question_id}")
        seen.add(q.question_id)
        if q.video_id not in annotations or q.video_id not in graphs:
            raise GenerationError(f"question {q.question_id} refers to unknown video {q.video_id!r}")
        if q.level is not Level.L3 or embed is not None:
            if not check_structure(q, annotations[q.video_id], graphs[q.video_id], embed):
                raise GenerationError(f"question {q.question_id} violates its {q.level.value} invariant")
    ordered = sorted(kept, key=lambda q: q.question_id)
    per_level = {lvl.value: 0 for lvl in Level}
    per_interaction = {it.value: 0 for it in InteractionType}
    questions = []
    for q in ordered:
        itype = annotations[q.video_id].interaction_type.value
        per_level[q.level.value] += 1
        per_interaction[itype] += 1
        questions.append({
            "question_id": q.question_id,
            "video_id": q.video_id,
            "level": q.level.value,
            "interaction_type": itype,
            "question_text": q.question_text,
            "gold_answer": q.gold_answer.value,
            "rationale": q.rationale,
            "intervention": q.intervention,
            "target": q.target,
        })
    return {
        "videos": sorted({q.video_id for q in ordered}),
        "questions": questions,
        "stats": {"per_level": per_level, "per_interaction": per_interaction},
    }

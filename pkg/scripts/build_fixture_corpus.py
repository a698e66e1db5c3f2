#!/usr/bin/env python3
"""Regenerate the bundled 3-video corpus and its strict-mock fixtures.

Every agent reply is scripted below by hand (edges, verdicts, questions,
answerer behaviour). The pipeline runs once against a recording backend and
the digest -> reply map is written to ``fixtures.json``. Re-run this after
changing any prompt or payload layout:

    python scripts/build_fixture_corpus.py [OUT_DIR]
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

from cfbench import _io
from cfbench.annotations import annotation_from_dict, serialize_annotation
from cfbench.discovery import discover_many
from cfbench.graph import GraphComplexityFilter
from cfbench.llm import LlmGateway, LlmRequest, RecordingBackend, Role
from cfbench.qgen import Status, apply_verification, generate_candidates, verify_questions

DEFAULT_OUT = Path(__file__).resolve().parents[1] / "src" / "cfbench" / "data" / "corpus"

VIDEOS = [
    {
        "video_id": "coffee_01",
        "task_name": "make a cup of coffee",
        "interaction_type": "H2O",
        "duration_s": 240.0,
        "steps": [
            {"id": 1, "text": "grab the coffee mug", "timestamp_s": 5.0},
            {"id": 2, "text": "place the mug under the espresso machine", "timestamp_s": 18.0},
            {"id": 3, "text": "brew a shot of espresso into the mug", "timestamp_s": 30.0},
            {"id": 4, "text": "pour milk into the cup", "timestamp_s": 75.0},
            {"id": 5, "text": "add hot water into the coffee mug", "timestamp_s": 110.0},
            {"id": 6, "text": "stir the coffee with a spoon", "timestamp_s": 150.0},
        ],
        "captions": "A person prepares a coffee drink at a kitchen counter.",
    },
    {
        "video_id": "hoops_02",
        "task_name": "run a give-and-go play",
        "interaction_type": "H2H",
        "duration_s": 95.0,
        "steps": [
            {"id": 1, "text": "player A dribbles the ball up the court", "timestamp_s": 2.0},
            {"id": 2, "text": "player B calls for the ball", "timestamp_s": 9.5},
            {"id": 3, "text": "player A passes the ball to player B", "timestamp_s": 12.0},
            {"id": 4, "text": "player B catches the pass", "timestamp_s": 13.0},
            {"id": 5, "text": "player C sets a screen near the baseline", "timestamp_s": 20.0},
            {"id": 6, "text": "player B shoots a jumper", "timestamp_s": 24.0},
            {"id": 7, "text": "the shot goes through the hoop", "timestamp_s": 25.5},
            {"id": 8, "text": "the teammates celebrate together", "timestamp_s": 30.0},
        ],
    },
    {
        # deliberately shallow: fails the causal-depth threshold
        "video_id": "table_03",
        "task_name": "clean the kitchen table",
        "interaction_type": "H2O",
        "duration_s": 120.0,
        "steps": [
            {"id": 1, "text": "spray cleaner on the table", "timestamp_s": 4.0},
            {"id": 2, "text": "wipe the table with a cloth", "timestamp_s": 15.0},
            {"id": 3, "text": "rinse the cloth in the sink", "timestamp_s": 60.0},
            {"id": 4, "text": "hang the cloth up to dry", "timestamp_s": 90.0},
        ],
    },
]

# True causal edges per task; the synthesizer accepts exactly these.
EDGES = {
    "make a cup of coffee": {(1, 2), (2, 3), (3, 5), (4, 6), (5, 6)},
    "run a give-and-go play": {(1, 3), (3, 4), (4, 6), (5, 6), (6, 7), (7, 8)},
    "clean the kitchen table": {(1, 2), (3, 4)},
}

# Observer confidences; unlisted pairs get 0.1. Non-adjacent true edges sit in the top 20%.
OBSERVER = {
    "make a cup of coffee": {(3, 5): 0.95, (4, 6): 0.9, (2, 3): 0.88, (1, 2): 0.8, (5, 6): 0.7, (4, 5): 0.45, (3, 4): 0.3},
    "run a give-and-go play": {(1, 3): 0.93, (4, 6): 0.91, (6, 7): 0.9, (7, 8): 0.87, (3, 4): 0.85,
                               (5, 6): 0.6, (2, 3): 0.5, (1, 2): 0.2, (4, 5): 0.15},
    "clean the kitchen table": {(1, 2): 0.9, (3, 4): 0.7, (2, 3): 0.4},
}

# Pairs where the verifier leans causal but the critic talks the synthesizer out of it.
CONTESTED = {("make a cup of coffee", (4, 5)), ("run a give-and-go play", (2, 3))}

GOALS = {"make a cup of coffee": "finish making the coffee", "run a give-and-go play": "score a basket"}

# (level, intervention, target, gold, kept). Gold values are derived by hand from EDGES.
QUESTIONS = {
    "make a cup of coffee": [
        ("L1", 3, 4, "yes", False),
        ("L1", 4, 5, "yes", True),
        ("L2", 1, 3, "no", False),
        ("L2", 1, 5, "no", False),
        ("L2", 1, 6, "yes", True),
        ("L2", 2, 5, "no", False),
        ("L2", 2, 6, "yes", False),
        ("L2", 3, 6, "yes", False),
        ("L3", "grind the coffee beans", None, "premise_invalid", True),
        ("L3", "froth the milk with a steam wand", None, "premise_invalid", False),
        ("L3", "add sugar to the drink", None, "premise_invalid", False),
        ("L3", "rinse the mug in the sink", None, "premise_invalid", False),
    ],
    "run a give-and-go play": [
        ("L1", 1, 2, "yes", False),
        ("L1", 2, 3, "yes", True),
        ("L1", 4, 5, "yes", False),
        ("L2", 1, 4, "no", False),
        ("L2", 1, 6, "yes", False),
        ("L2", 1, 7, "no", True),
        ("L2", 1, 8, "no", False),
        ("L2", 3, 6, "yes", False),
        ("L2", 3, 7, "no", False),
        ("L2", 4, 7, "no", False),
        ("L2", 5, 7, "no", False),
        ("L3", "the coach calls a timeout", None, "premise_invalid", True),
        ("L3", "player B fakes a shot before driving", None, "premise_invalid", False),
        ("L3", "the referee blows the whistle for a foul", None, "premise_invalid", False),
        ("L3", "player C grabs the rebound", None, "premise_invalid", False),
        ("L3", "player A crosses over a defender", None, "premise_invalid", False),
        ("L3", "player B dunks the ball", None, "premise_invalid", False),
        ("L3", "player A inbounds the ball", None, "premise_invalid", False),
    ],
}

_WRONG = {"yes": "no", "no": "yes", "premise_invalid": "yes"}


def _step_text(task: str, step_id: int) -> str:
    video = next(v for v in VIDEOS if v["task_name"] == task)
    return video["steps"][step_id - 1]["text"]


def question_text(task: str, level: str, a, b) -> str:
    if level == "L3":
        return f"If the agent did not {a}, would they still {GOALS[task]}?"
    return f"If the agent did not {_step_text(task, a)}, would they still {_step_text(task, b)}?"


def _brief(level: str, gold: str, a) -> str:
    if level == "L3":
        return f"The premise is invalid: '{a}' never happens in the video."
    if gold == "yes":
        return "Yes. The target step does not depend on the intervened step."
    return "No. Without it the causal chain leading to the target collapses."


def _generator_reply(task: str) -> dict:
    out = {"level1": [], "level2": [], "level3": []}
    for level, a, b, gold, _ in QUESTIONS.get(task, []):
        item = {"question": question_text(task, level, a, b), "answer": _brief(level, gold, a)}
        if level == "L3":
            item.update(decoy=a, goal=GOALS[task])
        else:
            item.update(intervention=a, target=b)
        out[{"L1": "level1", "L2": "level2", "L3": "level3"}[level]].append(item)
    return out


def _answer_plan() -> dict[str, tuple[str, bool, int]]:
    """question text -> (gold, kept, index) so dropped questions vary in how they fail."""
    plan = {}
    for task, rows in QUESTIONS.items():
        for i, (level, a, b, gold, kept) in enumerate(rows):
            plan[question_text(task, level, a, b)] = (gold, kept, i)
    return plan


PLAN = _answer_plan()


def responder(req: LlmRequest) -> dict:
    payload = json.loads(req.user_payload)
    role = req.role_tag
    if role is Role.OBSERVER:
        table = OBSERVER[payload["task_name"]]
        return {"scores": [{"from": a, "to": b, "confidence": table.get((a, b), 0.1)} for a, b in payload["pairs"]]}
    if role in (Role.VERIFIER, Role.CRITIC, Role.SYNTHESIZER):
        task = payload["task_name"]
        pair = (payload["cause"]["id"], payload["effect"]["id"])
        causal = pair in EDGES[task]
        contested = (task, pair) in CONTESTED
        if role is Role.VERIFIER:
            lean = causal or contested
            return {"causal": lean, "confidence": 0.82 if lean else 0.2,
                    "rationale": "cause enables effect" if lean else "temporal order only"}
        if role is Role.CRITIC:
            if contested:
                return {"causal": False, "confidence": 0.25, "rationale": "the effect happens without the cause"}
            return {"causal": causal, "confidence": 0.78 if causal else 0.15,
                    "rationale": "no alternative explanation" if causal else "agree: not causal"}
        return {"is_causal": causal, "confidence": 0.86 if causal else 0.12,
                "rationale": "both agents support the link" if causal else "critic's objection stands"}
    if role is Role.GENERATOR:
        return _generator_reply(payload["task_name"])
    if role is Role.ANSWERER:
        gold, kept, index = PLAN[payload["question"]]
        slot = payload["verifier_slot"]
        if kept:
            answer = gold
        elif index % 3 == 0:
            answer = _WRONG[gold]  # both verifiers wrong
        else:
            answer = gold if slot == 1 else _WRONG[gold]  # verifiers disagree
        return {"answer": answer, "explanation": "scripted"}
    raise ValueError(f"unscripted role {role.value}")


def build(out_dir: Path) -> dict:
    out_dir = Path(out_dir)
    annotations = [annotation_from_dict(v) for v in VIDEOS]
    for v in annotations:
        _io.write_text(out_dir / "annotations" / f"{v.video_id}.json", serialize_annotation(v).decode())

    backend = RecordingBackend(responder)
    gateway = LlmGateway(backend)
    results = discover_many(annotations, gateway)
    by_id = {v.video_id: v for v in annotations}
    flt = GraphComplexityFilter(gateway.embed_array)
    summary = {"generated": 0, "kept": 0, "passed": []}
    for r in results:
        if r.failure:
            raise RuntimeError(f"scripted discovery failed: {r.failure}")
        v = by_id[r.video_id]
        expected = EDGES[v.task_name]
        if r.graph.edge_pairs != expected:
            raise RuntimeError(f"{r.video_id}: graph {sorted(r.graph.edge_pairs)} != scripted {sorted(expected)}")
        if not flt.score_video(r.graph, v).pass_filter:
            continue
        summary["passed"].append(r.video_id)
        questions = generate_candidates(v, r.graph, gateway)
        records = verify_questions(questions, v, gateway)
        final = apply_verification(questions, records)
        summary["generated"] += len(final)
        summary["kept"] += sum(q.status is Status.KEPT for q in final)

    _io.write_json(out_dir / "fixtures.json", dict(sorted(backend.recorded.items())))
    _io.write_json(out_dir / "config.json", {
        "paths": {"annotations": "annotations", "fixtures": "fixtures.json"},
        "flags": {"mock": True, "strict_mock": True},
    })
    return summary


if __name__ == "__main__":
    target = Path(sys.argv[1]) if len(sys.argv) > 1 else DEFAULT_OUT
    print(json.dumps(build(target), indent=2))

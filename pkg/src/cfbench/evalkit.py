"""Scoring prediction files: accuracy tables, graph-quality metrics, error categories."""

from __future__ import annotations

import csv
import io
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from cfbench._io import compact
from cfbench.annotations import InteractionType
from cfbench.graph import CausalGraph
from cfbench.llm import LlmGateway, LlmRequest, Role
from cfbench.prompts import load_prompt
from cfbench.qgen import Answer, Level, normalize_answer

logger = logging.getLogger(__name__)

LEVELS = (1, 2, 3)
INTERACTIONS = ("H2H", "H2O")
ERROR_CATEGORIES = ("direct_inference", "nonexistent_action", "cannot_infer", "other")


class EvalValidationError(ValueError):
    pass


@dataclass(frozen=True)
class PredictionRecord:
    question_id: str
    predicted_answer: str
    raw_output: str | None = None


def load_predictions(doc) -> list[PredictionRecord]:
    if not isinstance(doc, list):
        raise EvalValidationError("predictions file must hold a JSON list")
    out = []
    for i, item in enumerate(doc):
        if not isinstance(item, dict) or not isinstance(item.get("question_id"), str) or "predicted_answer" not in item:
            raise EvalValidationError(f"prediction #{i} needs question_id and predicted_answer")
        out.append(PredictionRecord(item["question_id"], str(item["predicted_answer"]), item.get("raw_output")))
    return out


@dataclass
class Cell:
    correct: int = 0
    total: int = 0

    @property
    def accuracy(self) -> float | None:
        """Percentage rounded to one decimal; ``None`` for an empty cell."""
        return round(100.0 * self.correct / self.total, 1) if self.total else None

    def __add__(self, other: "Cell") -> "Cell":
        return Cell(self.correct + other.correct, self.total + other.total)


@dataclass
class AccuracyTable:
    cells: dict[tuple[int, str], Cell] = field(default_factory=dict)
    missing: int = 0

    def cell(self, level: int, interaction: str) -> Cell:
        return self.cells.get((level, interaction), Cell())

    def level_marginal(self, level: int) -> Cell:
        return sum((self.cell(level, it) for it in INTERACTIONS), Cell())

    def interaction_marginal(self, interaction: str) -> Cell:
        return sum((self.cell(lv, interaction) for lv in LEVELS), Cell())

    def grand(self) -> Cell:
        return sum(self.cells.values(), Cell())

    def to_dict(self) -> dict:
        def d(c: Cell):
            return {"correct": c.correct, "total": c.total, "accuracy": c.accuracy}

        return {
            "cells": {f"L{lv}/{it}": d(self.cell(lv, it)) for it in INTERACTIONS for lv in LEVELS},
            "per_level": {f"L{lv}": d(self.level_marginal(lv)) for lv in LEVELS},
            "per_interaction": {it: d(self.interaction_marginal(it)) for it in INTERACTIONS},
            "total": d(self.grand()),
            "missing_predictions": self.missing,
        }


def _gold_questions(gold) -> list[Mapping]:
    questions = gold["questions"] if isinstance(gold, Mapping) else gold
    return list(questions)


def score_predictions(preds: Sequence[PredictionRecord], gold) -> AccuracyTable:
    """Count-weighted accuracy per (level, interaction) cell over every gold question.

    A gold question without a prediction counts as wrong.
    """
    if not preds:
        raise EvalValidationError("no predictions to score")
    questions = {q["question_id"]: q for q in _gold_questions(gold)}
    counts = Counter(p.question_id for p in preds)
    dupes = sorted(qid for qid, n in counts.items() if n > 1)
    if dupes:
        raise EvalValidationError(f"duplicate predictions for: {', '.join(dupes)}")
    unknown = sorted(p.question_id for p in preds if p.question_id not in questions)
    if unknown:
        raise EvalValidationError(f"unknown question_id(s): {', '.join(unknown)}")
    by_id = {p.question_id: p for p in preds}
    table = AccuracyTable()
    for qid, q in sorted(questions.items()):
        key = (Level(q["level"]).number, InteractionType(q["interaction_type"]).value)
        cell = table.cells.setdefault(key, Cell())
        cell.total += 1
        p = by_id.get(qid)
        if p is None:
            table.missing += 1
            continue
        if normalize_answer(p.predicted_answer) == Answer(q["gold_answer"]):
            cell.correct += 1
    if table.missing:
        logger.warning("%d gold question(s) have no prediction; scored as wrong", table.missing)
    return table


def _fmt(value: float | None) -> str:
    return "-" if value is None else f"{value:.1f}"


def table_header() -> list[str]:
    cols = ["Model"]
    for block in ("H2H", "H2O", "Total"):
        cols += [f"{block} Level 1", f"{block} Level 2", f"{block} Level 3", f"{block} Avg."]
    return cols


def table_row(name: str, t: AccuracyTable) -> list[str]:
    row = [name]
    for it in INTERACTIONS:
        row += [_fmt(t.cell(lv, it).accuracy) for lv in LEVELS]
        row.append(_fmt(t.interaction_marginal(it).accuracy))
    row += [_fmt(t.level_marginal(lv).accuracy) for lv in LEVELS]
    row.append(_fmt(t.grand().accuracy))
    return row


def format_table(tables: AccuracyTable | Mapping[str, AccuracyTable], name: str = "model") -> tuple[str, str]:
    """Render benchmark accuracy rows as ``(csv_text, aligned_text)``.

    Each model gets one row of 12 numbers: Level 1-3 and Avg. for H2H, H2O and Total.
    """
    if isinstance(tables, AccuracyTable):
        tables = {name: tables}
    rows = [table_row(n, t) for n, t in tables.items()]

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(table_header())
    writer.writerows(rows)

    first = ["", "Human to Human", "", "", "", "Human to Object", "", "", "", "Total", "", "", ""]
    second = ["Models"] + ["Level 1", "Level 2", "Level 3", "Avg."] * 3
    grid = [first, second] + rows
    widths = [max(len(r[i]) for r in grid) for i in range(len(second))]
    lines = []
    for r in grid:
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append(" | ".join(cells).rstrip())
    lines.insert(2, "-" * len(lines[1]))
    return buf.getvalue(), "\n".join(lines) + "\n"


@dataclass(frozen=True)
class GraphEvalReport:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    @property
    def accuracy(self) -> float:
        n = self.tp + self.fp + self.fn + self.tn
        return (self.tp + self.tn) / n if n else 0.0

    def to_dict(self) -> dict:
        return {
            "tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn,
            "precision": self.precision, "recall": self.recall, "f1": self.f1, "accuracy": self.accuracy,
        }

    def format(self) -> str:
        header = f"{'Precision':>9}  {'Recall':>9}  {'F1-Score':>9}  {'Accuracy':>9}"
        values = f"{self.precision:>9.4f}  {self.recall:>9.4f}  {self.f1:>9.4f}  {self.accuracy:>9.4f}"
        return f"{header}\n{values}\n"


def graph_eval(predicted: CausalGraph | Iterable[tuple[int, int]], human_labels: Mapping[tuple[int, int], bool]) -> GraphEvalReport:
    """Confusion counts of predicted edges against human judgments, over labeled pairs only."""
    edges = predicted.edge_pairs if isinstance(predicted, CausalGraph) else {tuple(e) for e in predicted}
    labels = {tuple(k): bool(v) for k, v in human_labels.items()}
    unlabeled = sorted(e for e in edges if e not in labels)
    if unlabeled:
        raise EvalValidationError(f"predicted edge(s) without human label: {unlabeled}")
    tp = fp = fn = tn = 0
    for pair, truth in labels.items():
        pred = pair in edges
        if pred and truth:
            tp += 1
        elif pred:
            fp += 1
        elif truth:
            fn += 1
        else:
            tn += 1
    return GraphEvalReport(tp, fp, fn, tn)


def f1_discrepancy(precision: float, recall: float, reported_f1: float) -> float:
    """Harmonic mean of ``precision`` and ``recall`` minus a separately reported F1."""
    harmonic = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return harmonic - reported_f1


@dataclass(frozen=True)
class ErrorBreakdown:
    counts: dict[str, int]

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def fractions(self) -> dict[str, float]:
        n = self.total
        return {c: self.counts.get(c, 0) / n for c in ERROR_CATEGORIES}

    def to_dict(self) -> dict:
        return {"counts": {c: self.counts.get(c, 0) for c in ERROR_CATEGORIES}, "fractions": self.fractions}


def categorize_errors(records: Sequence[Mapping], gateway: LlmGateway, seed: int = 0) -> ErrorBreakdown:
    """Have the judge place each wrong answer in one error category.

    Each record needs ``raw_output`` and should carry ``question_text``,
    ``gold_answer`` and ``predicted_answer``; ``steps`` gives the judge the
    annotation when available.
    """
    if not records:
        raise EvalValidationError("no wrong answers to categorize")
    system = load_prompt("judge_errors").render()
    counts = Counter({c: 0 for c in ERROR_CATEGORIES})
    for rec in records:
        if rec.get("raw_output") is None:
            raise EvalValidationError(f"record {rec.get('question_id')!r} lacks raw_output")
        payload = {
            "question": rec.get("question_text", ""),
            "gold_answer": rec.get("gold_answer", ""),
            "predicted_answer": rec.get("predicted_answer", ""),
            "model_output": rec["raw_output"],
            "steps": rec.get("steps", []),
            "response_format": {"category": "|".join(ERROR_CATEGORIES)},
        }
        parsed = gateway.complete(LlmRequest(Role.JUDGE, system, compact(payload), seed=seed)).parsed
        category = str(parsed.get("category", "")).strip().lower()
        if category not in ERROR_CATEGORIES:
            logger.warning("judge returned unknown category %r for %s; counted as other", category, rec.get("question_id"))
            category = "other"
        counts[category] += 1
    return ErrorBreakdown(dict(counts))

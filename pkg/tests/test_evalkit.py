import logging
import random

import pytest

from cfbench.evalkit import (
    ERROR_CATEGORIES,
    Cell,
    ErrorBreakdown,
    EvalValidationError,
    GraphEvalReport,
    PredictionRecord,
    categorize_errors,
    f1_discrepancy,
    format_table,
    graph_eval,
    load_predictions,
    score_predictions,
    table_header,
)

from conftest import make_graph
from scripted import scripted


def gold_q(qid, level, itype, gold="yes"):
    return {"question_id": qid, "level": f"L{level}", "interaction_type": itype, "gold_answer": gold}


def build(cells):
    """cells: {(level, itype): (correct, total)} -> (gold, predictions)."""
    gold, preds = [], []
    for (level, itype), (correct, total) in cells.items():
        for i in range(total):
            qid = f"{level}{itype}{i}"
            gold.append(gold_q(qid, level, itype))
            preds.append(PredictionRecord(qid, "yes" if i < correct else "no"))
    return gold, preds


def test_cell_accuracy():
    gold, preds = build({(1, "H2H"): (7, 10)})
    assert score_predictions(preds, gold).cell(1, "H2H").accuracy == 70.0


def test_count_weighted_marginal():
    gold, preds = build({(1, "H2H"): (5, 10), (2, "H2H"): (10, 10)})
    assert score_predictions(preds, gold).interaction_marginal("H2H").accuracy == 75.0
    gold, preds = build({(1, "H2H"): (5, 10), (2, "H2H"): (1, 1)})
    t = score_predictions(preds, gold)
    assert t.interaction_marginal("H2H").accuracy == 54.5  # 6/11, not mean(50, 100)
    assert t.grand().correct == 6 and t.grand().total == 11


def test_prediction_errors():
    gold, preds = build({(1, "H2O"): (1, 2)})
    with pytest.raises(EvalValidationError):
        score_predictions([], gold)
    with pytest.raises(EvalValidationError, match="nope"):
        score_predictions([PredictionRecord("nope", "yes")], gold)
    with pytest.raises(EvalValidationError, match="duplicate"):
        score_predictions(preds + preds[:1], gold)
    with pytest.raises(EvalValidationError):
        load_predictions({"question_id": "x"})
    with pytest.raises(EvalValidationError):
        load_predictions([{"question_id": "x"}])


def test_missing_prediction_counts_wrong(caplog):
    gold, preds = build({(1, "H2O"): (2, 4)})
    with caplog.at_level(logging.WARNING):
        t = score_predictions(preds[:3], gold)
    assert (t.cell(1, "H2O").correct, t.cell(1, "H2O").total, t.missing) == (2, 4, 1)
    assert "no prediction" in caplog.text


def test_marginals_match_brute_force():
    rng = random.Random(9)
    answers = ["yes", "no", "premise_invalid"]
    for _ in range(100):
        gold, preds = [], []
        for i in range(rng.randint(1, 60)):
            level, itype, ans = rng.randint(1, 3), rng.choice(["H2H", "H2O"]), rng.choice(answers)
            gold.append(gold_q(f"q{i}", level, itype, ans))
            preds.append(PredictionRecord(f"q{i}", rng.choice(answers)))
        t = score_predictions(preds, gold)
        right = {p.question_id: p.predicted_answer == g["gold_answer"] for p, g in zip(preds, gold)}

        def recount(keep):
            sel = [g for g in gold if keep(g)]
            return Cell(sum(right[g["question_id"]] for g in sel), len(sel))

        for lv in (1, 2, 3):
            assert t.level_marginal(lv) == recount(lambda g: g["level"] == f"L{lv}")
            for it in ("H2H", "H2O"):
                assert t.cell(lv, it) == recount(lambda g: g["level"] == f"L{lv}" and g["interaction_type"] == it)
        for it in ("H2H", "H2O"):
            assert t.interaction_marginal(it) == recount(lambda g: g["interaction_type"] == it)
        assert t.grand() == recount(lambda g: True)


def test_graph_eval_hand_examples():
    r = graph_eval(make_graph(3, [(1, 2)]), {(1, 2): True, (2, 3): False})
    assert (r.tp, r.fp, r.fn, r.tn) == (1, 0, 0, 1)
    assert (r.precision, r.recall, r.f1, r.accuracy) == (1.0, 1.0, 1.0, 1.0)
    r = graph_eval([(1, 2), (2, 3)], {(1, 2): True, (2, 3): False, (1, 3): True})
    assert (r.tp, r.fp, r.fn, r.tn) == (1, 1, 1, 0)
    assert (r.precision, r.recall, r.f1) == (0.5, 0.5, 0.5)
    assert r.accuracy == pytest.approx(1 / 3, abs=1e-15)
    r = graph_eval([], {(1, 2): False, (2, 3): False})
    assert r.precision == 0.0 and r.accuracy == 1.0
    with pytest.raises(EvalValidationError):
        graph_eval([(1, 3)], {(1, 2): True})


def test_graph_eval_formulas_randomized():
    rng = random.Random(5)
    for _ in range(200):
        tp, fp, fn, tn = (rng.randint(0, 20) for _ in range(4))
        r = GraphEvalReport(tp, fp, fn, tn)
        p = tp / (tp + fp) if tp + fp else 0.0
        rc = tp / (tp + fn) if tp + fn else 0.0
        assert r.precision == p and r.recall == rc
        assert r.f1 == (2 * p * rc / (p + rc) if p + rc else 0.0)
        n = tp + fp + fn + tn
        assert r.accuracy == ((tp + tn) / n if n else 0.0)


def test_graph_quality_format():
    text = GraphEvalReport(1, 1, 1, 0).format()
    header, values = text.splitlines()
    assert header.split() == ["Precision", "Recall", "F1-Score", "Accuracy"]
    assert values.split() == ["0.5000", "0.5000", "0.5000", "0.3333"]


def test_f1_discrepancy():
    assert f1_discrepancy(0.5, 0.5, 0.5) == 0.0
    assert f1_discrepancy(1.0, 0.5, 0.6) == pytest.approx(2 / 3 - 0.6)


def test_error_categories():
    verdicts = iter(["direct_inference"] * 7 + ["nonexistent_action", "cannot_infer", "weird"])
    gw, _ = scripted({"judge": lambda p: {"category": next(verdicts)}})
    recs = [{"question_id": f"q{i}", "raw_output": "x"} for i in range(10)]
    b = categorize_errors(recs, gw)
    assert b.fractions == {"direct_inference": 0.7, "nonexistent_action": 0.1, "cannot_infer": 0.1, "other": 0.1}
    assert abs(sum(b.fractions.values()) - 1) <= 1e-9
    with pytest.raises(EvalValidationError):
        categorize_errors([{"question_id": "q"}], gw)


def test_category_routing_by_output():
    def classify(p):
        out = p["model_output"].lower()
        if "cannot be determined" in out:
            return {"category": "cannot_infer"}
        if any(word in out for word in ("oven",)) and not any("oven" in s for s in p["steps"]):
            return {"category": "nonexistent_action"}
        return {"category": "direct_inference"}

    gw, backend = scripted({"judge": classify})
    recs = [
        {"question_id": "a", "raw_output": "They opened the oven, so no.", "steps": ["knead the dough"]},
        {"question_id": "b", "raw_output": "This cannot be determined from the video.", "steps": []},
    ]
    b = categorize_errors(recs, gw)
    assert b.counts["nonexistent_action"] == 1 and b.counts["cannot_infer"] == 1
    assert set(backend.calls[0][1]["response_format"]["category"].split("|")) == set(ERROR_CATEGORIES)
    assert ErrorBreakdown({"other": 2}).fractions["other"] == 1.0


def test_table_layout():
    gold, preds = build({(1, "H2H"): (1, 2)})
    csv_text, plain = format_table(score_predictions(preds, gold), "m")
    lines = csv_text.splitlines()
    assert len(lines) == 2 and lines[1].startswith("m,50.0")
    assert len(table_header()) == 13

    cells = {(lv, it): (lv, 3) for lv in (1, 2, 3) for it in ("H2H", "H2O")}
    gold, preds = build(cells)
    t = score_predictions(preds, gold)
    csv_text, plain = format_table({"a": t, "b": t})
    rows = [r.split(",") for r in csv_text.splitlines()]
    assert len(rows) == 3 and all(len(r) == 13 for r in rows)
    assert rows[1][1:] == ["33.3", "66.7", "100.0", "66.7"] * 3
    assert "Human to Human" in plain and "Human to Object" in plain and "Total" in plain
    assert format_table({"a": t, "b": t}) == (csv_text, plain)

import random

import numpy as np
import pytest
from sklearn.base import clone

from cfbench.llm import TransportError
from cfbench.qgen import Answer, CounterfactualQuestion, Level, question_id
from cfbench.reward import (
    ALPHA,
    BETA,
    ExtractionError,
    GroupRewardScorer,
    MentionedEvent,
    ModelOutput,
    combine,
    extract_claims,
    focus_nodes,
    group_advantages,
    r_causal,
    r_visual,
    score_group,
    total_reward,
)

from conftest import make_annotation, make_graph
from scripted import scripted

DRAWER = ["open the drawer", "take the bowl out", "put the cucumber into the bowl"]


def judge(reply):
    return scripted({"judge": lambda p: reply})


def test_extract_drawer_claim():
    v = make_annotation(DRAWER)
    gw, backend = judge({"claims": [{"cause": 1, "effect": 2}], "events": ["take the bowl out"]})
    claims, events = extract_claims("opening the drawer let them take the bowl out", v, gw)
    assert claims == [(1, 2)]
    assert events == [MentionedEvent("take the bowl out", 2)]
    assert backend.calls[0][1]["reasoning"] == "opening the drawer let them take the bowl out"


def test_extract_hallucinated_event():
    v = make_annotation(DRAWER)
    gw, _ = judge({"claims": [], "events": ["kneading the dough", "Open the drawer."]})
    _, events = extract_claims("after kneading the dough they open the drawer", v, gw)
    assert [e.grounded for e in events] == [False, True]
    assert r_visual(events, v) == 0.5


def test_extract_empty_and_errors():
    v = make_annotation(DRAWER)
    gw, backend = judge({})
    assert extract_claims("   ", v, gw) == ([], [])
    assert backend.calls == []
    with pytest.raises(ExtractionError):
        extract_claims("text", v, gw)
    gw, _ = judge({"claims": [{"cause": "x"}], "events": []})
    with pytest.raises(ExtractionError):
        extract_claims("text", v, gw)

    def down(p):
        raise TransportError("boom")

    gw, _ = scripted({"judge": down}, transport_retries=1)
    with pytest.raises(ExtractionError):
        extract_claims("text", v, gw)


def test_r_causal_examples():
    g = make_graph(3, [(1, 2), (2, 3)])
    assert r_causal([(1, 2), (2, 3)], g) == 1.0
    assert r_causal([(1, 2)], g) == pytest.approx(2 / 3, abs=1e-12)
    assert r_causal([(2, 1)], g) == 0.0
    assert r_causal([], g, gold_answer=Answer.PREMISE_INVALID) == 1.0
    assert r_causal([], g, gold_answer=Answer.NO) == 0.0


def test_r_causal_restricted_to_chain():
    g = make_graph(5, [(1, 2), (2, 3), (4, 5)])
    q = CounterfactualQuestion(question_id("v", Level.L2, 1, 3), "vid", Level.L2, 1, 3, "?", Answer.NO, "")
    assert focus_nodes(q, g) == {1, 2, 3}
    assert r_causal([(1, 2), (2, 3)], g, focus_nodes(q, g)) == 1.0


def events(n_grounded, n_total):
    return [MentionedEvent(f"e{i}", 1 if i < n_grounded else None) for i in range(n_total)]


def test_r_visual_examples():
    v = make_annotation(DRAWER)
    assert r_visual(events(3, 3), v) == 1.0
    assert r_visual(events(3, 4), v) == 0.75
    assert r_visual(events(0, 1), v) == 0.0
    assert r_visual([], v) == 1.0


def test_combine_examples():
    assert combine(0.8, 0.6).total == pytest.approx(0.7, abs=1e-12)
    assert combine(1, 1).total == 1.0
    assert combine(0.4, 0.9, alpha=1, beta=0).total == 0.4
    assert (ALPHA, BETA) == (0.5, 0.5)
    with pytest.raises(ValueError):
        combine(0.5, 0.5, alpha=-0.1)


def test_linearity():
    rng = random.Random(0)
    for _ in range(1000):
        a, b, rc, rv = (rng.random() for _ in range(4))
        assert abs(combine(rc, rv, a, b).total - (a * rc + b * rv)) <= 1e-12


def test_bounded_under_random_claims():
    rng = random.Random(1)
    for _ in range(1000):
        n = rng.randint(2, 8)
        edges = [(a, b) for a in range(1, n + 1) for b in range(a + 1, n + 1) if rng.random() < 0.3]
        g = make_graph(n, edges)
        claims = [(rng.randint(1, n), rng.randint(1, n)) for _ in range(rng.randint(0, 6))]
        focus = set(rng.sample(range(1, n + 1), rng.randint(1, n))) if rng.random() < 0.5 else None
        rc = r_causal(claims, g, focus, rng.choice(list(Answer)))
        k = rng.randint(0, 6)
        rv = r_visual(events(rng.randint(0, k), k), make_annotation([f"s{i}" for i in range(n)]))
        assert 0.0 <= rc <= 1.0 and 0.0 <= rv <= 1.0


def test_advantage_examples():
    assert group_advantages([1, 0, 0, 1]).advantages == (1.0, -1.0, -1.0, 1.0)
    assert group_advantages([0.7] * 4).advantages == (0.0,) * 4
    assert np.allclose(group_advantages([0.9, 0.1]).advantages, [1, -1], atol=1e-12)
    with pytest.raises(ValueError):
        group_advantages([0.5])


def test_advantage_invariances():
    rng = np.random.default_rng(3)
    for _ in range(500):
        k = int(rng.integers(2, 9))
        r = rng.random(k)
        base = np.array(group_advantages(r).advantages)
        assert abs(base.sum()) <= 1e-9
        shifted = np.array(group_advantages(r + rng.uniform(-5, 5)).advantages)
        scaled = np.array(group_advantages(r * rng.uniform(0.01, 100)).advantages)
        assert np.max(np.abs(base - shifted)) <= 1e-9
        assert np.max(np.abs(base - scaled)) <= 1e-9


def test_sample_std_option():
    a = np.array(group_advantages([1, 0, 0, 1], ddof=1).advantages)
    assert np.allclose(a, np.array([1, -1, -1, 1]) * 0.5 / np.std([1, 0, 0, 1], ddof=1))


def test_score_group_and_estimator():
    v = make_annotation(DRAWER)
    g = make_graph(3, [(1, 2), (2, 3)])
    q = CounterfactualQuestion(question_id("v", Level.L2, 1, 3), "vid", Level.L2, 1, 3, "?", Answer.NO, "")
    outs = [
        ModelOutput(q.question_id, "c", "no", ((1, 2), (2, 3)), (MentionedEvent("open the drawer", 1),)),
        ModelOutput(q.question_id, "c", "no", ((1, 2),), ()),
        ModelOutput(q.question_id, "c", "yes", (), (MentionedEvent("kneading", None),)),
        ModelOutput(q.question_id, "c", "no", ((2, 3),), ()),
    ]
    scores, group = score_group(outs, v, q, g)
    assert [s.total for s in scores] == pytest.approx([1.0, 0.5 * 2 / 3 + 0.5, 0.0, 0.5 * 2 / 3 + 0.5])
    assert total_reward(outs[0], v, q, g).total == 1.0
    est = GroupRewardScorer()
    (adv,) = est.fit_transform([(outs, v, q, g)])
    assert np.allclose(adv, group.advantages)
    assert clone(est).get_params() == {"alpha": 0.5, "beta": 0.5, "ddof": 0}
    with pytest.raises(ValueError):
        GroupRewardScorer(ddof=2).fit()

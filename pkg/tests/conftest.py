import json
from pathlib import Path

import pytest

from cfbench.annotations import annotation_from_dict
from cfbench.graph import CausalEdge, build_graph

CORPUS = Path(__file__).resolve().parents[1] / "src" / "cfbench" / "data" / "corpus"


def make_annotation(texts, video_id="vid", itype="H2O", task="task", duration=None, captions=None):
    steps = [{"id": i, "text": t, "timestamp_s": float(i)} for i, t in enumerate(texts, start=1)]
    doc = {
        "video_id": video_id,
        "task_name": task,
        "interaction_type": itype,
        "duration_s": float(duration or len(texts) + 1),
        "steps": steps,
    }
    if captions is not None:
        doc["captions"] = captions
    return annotation_from_dict(doc)


def make_graph(n, edges, video_id="vid"):
    return build_graph(video_id, range(1, n + 1), [CausalEdge(a, b, 1.0) for a, b in edges])


@pytest.fixture
def corpus_dir():
    return CORPUS


@pytest.fixture
def corpus_fixtures():
    return json.loads((CORPUS / "fixtures.json").read_text())


# acceptance criteria register here; the summary prints one line per criterion
ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, line = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{status}] criterion {n}: {line}")

"""Causal graphs over action steps and the three video-complexity metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from cfbench.annotations import VideoAnnotation, adjacent_pairs

logger = logging.getLogger(__name__)

ANCD_MIN = 0.2
DEPTH_MIN = 3
CNDA_MIN = 0.12


class GraphError(ValueError):
    pass


class BackwardEdgeError(GraphError):
    def __init__(self, from_id: int, to_id: int):
        self.edge = (from_id, to_id)
        kind = "self-loop" if from_id == to_id else "backward edge"
        super().__init__(f"{kind} ({from_id}, {to_id}) rejected: edges must point forward in time")


class UnknownNodeError(GraphError):
    pass


@dataclass(frozen=True)
class CausalEdge:
    from_id: int
    to_id: int
    confidence: float = 1.0
    provenance: str = ""

    @property
    def pair(self) -> tuple[int, int]:
        return (self.from_id, self.to_id)


@dataclass(frozen=True)
class CausalGraph:
    video_id: str
    node_ids: frozenset[int]
    edges: tuple[CausalEdge, ...]

    @property
    def edge_pairs(self) -> frozenset[tuple[int, int]]:
        return frozenset(e.pair for e in self.edges)

    def has_edge(self, a: int, b: int) -> bool:
        return (a, b) in self.edge_pairs

    def successors(self, node: int) -> list[int]:
        return sorted(e.to_id for e in self.edges if e.from_id == node)

    def predecessors(self, node: int) -> list[int]:
        return sorted(e.from_id for e in self.edges if e.to_id == node)

    def descendants(self, node: int) -> set[int]:
        seen: set[int] = set()
        stack = [node]
        while stack:
            for nxt in self.successors(stack.pop()):
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        return seen


def build_graph(video_id: str, node_ids: Iterable[int], accepted: Iterable[CausalEdge]) -> CausalGraph:
    """Assemble a graph, merging duplicate edges by keeping the highest confidence."""
    nodes = frozenset(node_ids)
    merged: dict[tuple[int, int], CausalEdge] = {}
    for edge in accepted:
        if edge.from_id >= edge.to_id:
            raise BackwardEdgeError(edge.from_id, edge.to_id)
        missing = {edge.from_id, edge.to_id} - nodes
        if missing:
            raise UnknownNodeError(f"edge {edge.pair} references unknown node(s) {sorted(missing)}")
        if not 0.0 <= edge.confidence <= 1.0:
            raise GraphError(f"edge {edge.pair} confidence {edge.confidence} outside [0, 1]")
        prev = merged.get(edge.pair)
        if prev is None or edge.confidence > prev.confidence:
            merged[edge.pair] = edge
    return CausalGraph(video_id, nodes, tuple(merged[k] for k in sorted(merged)))


def _check_aligned(g: CausalGraph, v: VideoAnnotation) -> None:
    if g.node_ids != frozenset(v.step_ids):
        raise GraphError(
            f"graph {g.video_id!r} nodes {sorted(g.node_ids)} do not match "
            f"annotation steps 1..{len(v.steps)}"
        )


def ancd(g: CausalGraph, v: VideoAnnotation) -> float:
    """Fraction of temporally adjacent step pairs with no causal edge between them."""
    _check_aligned(g, v)
    pairs = adjacent_pairs(v)
    edges = g.edge_pairs
    non_causal = sum(1 for a, b in pairs if (a.id, b.id) not in edges)
    return non_causal / len(pairs)


def causal_depth(g: CausalGraph) -> int:
    """Edge count of the longest directed path.

    Edges always point to a larger id, so ascending id order is a topological
    order and a single relaxation pass is exact.
    """
    longest = {n: 0 for n in g.node_ids}
    for edge in sorted(g.edges, key=lambda e: (e.to_id, e.from_id)):
        longest[edge.to_id] = max(longest[edge.to_id], longest[edge.from_id] + 1)
    return max(longest.values(), default=0)


def _as_matrix(vectors: Iterable) -> np.ndarray:
    return np.asarray([np.asarray(getattr(x, "values", x), dtype=float) for x in vectors])


def outlier_score(node_id: int, context_embeddings: Mapping[int, Sequence[float]]) -> float:
    """One minus the cosine between a node's embedding and its context centroid.

    The centroid averages every embedding in the context, the node's own included.
    """
    if node_id not in context_embeddings:
        raise KeyError(f"node {node_id} has no embedding in its context")
    ids = sorted(context_embeddings)
    mat = _as_matrix(context_embeddings[i] for i in ids)
    if mat.ndim != 2:
        raise ValueError("context embeddings must share one dimension")
    vec = mat[ids.index(node_id)]
    centroid = mat.mean(axis=0)
    vnorm = np.linalg.norm(vec)
    cnorm = np.linalg.norm(centroid)
    if vnorm == 0:
        raise ValueError(f"node {node_id} has a zero-norm embedding")
    if cnorm == 0:
        raise ValueError("context centroid is the zero vector")
    cos = float(np.dot(vec, centroid) / (vnorm * cnorm))
    return float(1.0 - min(1.0, max(-1.0, cos)))


def avg_cnda(g: CausalGraph, embeddings: Mapping[int, Sequence[float]]) -> float:
    """Mean outlier score over the graph's nodes; all nodes share the video as context."""
    missing = sorted(n for n in g.node_ids if n not in embeddings)
    if missing:
        raise KeyError(f"missing embedding for node(s) {missing} in graph {g.video_id!r}")
    context = {n: embeddings[n] for n in sorted(g.node_ids)}
    if not context:
        raise GraphError(f"graph {g.video_id!r} has no nodes")
    return float(np.mean([outlier_score(n, context) for n in context]))


@dataclass(frozen=True)
class GraphMetrics:
    ancd: float
    causal_depth: int
    avg_cnda: float
    pass_filter: bool = False
    fail_reasons: tuple[str, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "ancd": self.ancd,
            "causal_depth": self.causal_depth,
            "avg_cnda": self.avg_cnda,
            "pass_filter": self.pass_filter,
            "fail_reasons": list(self.fail_reasons),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GraphMetrics":
        return cls(
            ancd=float(d["ancd"]),
            causal_depth=int(d["causal_depth"]),
            avg_cnda=float(d["avg_cnda"]),
            pass_filter=bool(d["pass_filter"]),
            fail_reasons=tuple(d["fail_reasons"]),
        )


def filter_video(
    ancd_value: float,
    depth: int,
    cnda: float,
    ancd_min: float = ANCD_MIN,
    depth_min: int = DEPTH_MIN,
    cnda_min: float = CNDA_MIN,
) -> GraphMetrics:
    """Apply the inclusive thresholds and record one reason per failed comparison."""
    reasons = []
    if not ancd_value >= ancd_min:
        reasons.append(f"ANCD {ancd_value:.2f} < {ancd_min:.2f}")
    if not depth >= depth_min:
        reasons.append(f"Causal-Depth {depth} < {depth_min}")
    if not cnda >= cnda_min:
        reasons.append(f"Avg-CNDA {cnda:.2f} < {cnda_min:.2f}")
    return GraphMetrics(ancd_value, int(depth), cnda, not reasons, tuple(reasons))


def graph_to_dict(g: CausalGraph, metrics: GraphMetrics | None = None) -> dict:
    return {
        "video_id": g.video_id,
        "nodes": sorted(g.node_ids),
        "edges": [{"from": e.from_id, "to": e.to_id, "confidence": e.confidence} for e in g.edges],
        "metrics": metrics.to_dict() if metrics is not None else None,
    }


def graph_from_dict(d: Mapping) -> tuple[CausalGraph, GraphMetrics | None]:
    edges = [CausalEdge(int(e["from"]), int(e["to"]), float(e.get("confidence", 1.0))) for e in d["edges"]]
    g = build_graph(d["video_id"], d["nodes"], edges)
    m = d.get("metrics")
    return g, (GraphMetrics.from_dict(m) if m else None)


class GraphComplexityFilter(BaseEstimator, TransformerMixin):
    """Score (graph, annotation) pairs on ANCD, causal depth and Avg-CNDA.

    ``transform`` returns an ``(n, 3)`` array of the raw metrics and
    ``predict`` the boolean keep-mask. ``embed`` maps a step text to a vector;
    it is required because Avg-CNDA is defined on embeddings.

    Parameters
    ----------
    embed : callable
        Text to embedding vector.
    ancd_min, depth_min, cnda_min : float, int, float
        Inclusive keep thresholds.
    """

    def __init__(self, embed=None, ancd_min=ANCD_MIN, depth_min=DEPTH_MIN, cnda_min=CNDA_MIN):
        self.embed = embed
        self.ancd_min = ancd_min
        self.depth_min = depth_min
        self.cnda_min = cnda_min

    def _validate(self):
        if self.embed is None:
            raise ValueError("GraphComplexityFilter needs an embedding function")
        if min(self.ancd_min, self.depth_min, self.cnda_min) < 0:
            raise ValueError("thresholds must be non-negative")

    def fit(self, X, y=None):
        self._validate()
        self.n_videos_seen_ = len(X)
        return self

    def score_video(self, graph: CausalGraph, annotation: VideoAnnotation) -> GraphMetrics:
        self._validate()
        embeddings = {s.id: self.embed(s.text) for s in annotation.steps}
        return filter_video(
            ancd(graph, annotation),
            causal_depth(graph),
            avg_cnda(graph, embeddings),
            self.ancd_min,
            self.depth_min,
            self.cnda_min,
        )

    def metrics(self, X) -> list[GraphMetrics]:
        return [self.score_video(g, v) for g, v in X]

    def transform(self, X) -> np.ndarray:
        return np.array(
            [[m.ancd, m.causal_depth, m.avg_cnda] for m in self.metrics(X)], dtype=float
        ).reshape(-1, 3)

    def predict(self, X) -> np.ndarray:
        return np.array([m.pass_filter for m in self.metrics(X)], dtype=bool)

    def __sklearn_is_fitted__(self):
        return True

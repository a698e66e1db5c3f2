"""Counterfactual video QA from causal graphs of action annotations."""

from cfbench.annotations import (
    ActionStep,
    DatasetStats,
    InteractionType,
    VideoAnnotation,
    adjacent_pairs,
    dataset_stats,
    parse_annotation,
    serialize_annotation,
)
from cfbench.discovery import CausalGraphDiscoverer, discover_graph
from cfbench.graph import (
    CausalEdge,
    CausalGraph,
    GraphComplexityFilter,
    GraphMetrics,
    ancd,
    avg_cnda,
    build_graph,
    causal_depth,
    filter_video,
    outlier_score,
)
from cfbench.llm import LlmGateway, LlmRequest, MockBackend
from cfbench.reward import GroupRewardScorer, group_advantages, total_reward

__version__ = "0.1.0"

__all__ = [
    "ActionStep",
    "CausalEdge",
    "CausalGraph",
    "CausalGraphDiscoverer",
    "DatasetStats",
    "GraphComplexityFilter",
    "GraphMetrics",
    "GroupRewardScorer",
    "InteractionType",
    "LlmGateway",
    "LlmRequest",
    "MockBackend",
    "VideoAnnotation",
    "adjacent_pairs",
    "ancd",
    "avg_cnda",
    "build_graph",
    "causal_depth",
    "dataset_stats",
    "discover_graph",
    "filter_video",
    "group_advantages",
    "outlier_score",
    "parse_annotation",
    "serialize_annotation",
    "total_reward",
]

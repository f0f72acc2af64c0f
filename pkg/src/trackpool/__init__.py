"""Aggregate per-frame face embeddings into fixed-size templates with self-attention quality weighting."""

from .aggregator import AggregationResult, QualityHead, aggregate, average_pool
from .encoder import EncoderConfig, encode
from .model import ModelWeights, aggregate_track, aggregate_tracks, init_model
from .multi_identity import aggregate_multi, build_mask, extract_tracks, greedy_postprocess, select_component

__all__ = [
    "AggregationResult",
    "EncoderConfig",
    "ModelWeights",
    "QualityHead",
    "aggregate",
    "aggregate_multi",
    "aggregate_track",
    "aggregate_tracks",
    "average_pool",
    "build_mask",
    "encode",
    "extract_tracks",
    "greedy_postprocess",
    "init_model",
    "select_component",
]

"""Query-based adaptive aggregation of patch features into place descriptors."""

from .aggregator import (
    Descriptor,
    FeatureMap,
    ImageSpec,
    InferenceCache,
    QaaConfig,
    QaaParams,
    aggregate,
    aggregate_batch,
    build_reference_codebook,
    cache_queries,
    cross_query_similarity,
    normalize_descriptor,
    predict_query_features,
    refine_feature_queries,
)
from .attention_export import export_attention_maps
from .coding_rate import CodingRateConfig, RateHistogram, coding_rate, rate_histogram
from .flops import FlopProfile, count_flops
from .paradigms import ParadigmKind, SinkhornConfig, paradigm_aggregate, sinkhorn_normalize

__version__ = "0.1.0"

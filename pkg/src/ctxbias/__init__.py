"""Desk-scale tooling for contextualized speech recognition.

Builds biasing keyword lists, clusters slide contexts, compresses context
embeddings with speech-weighted window pooling, prunes keyword lists against
speech, and scores hypotheses with the biased/unbiased error-rate suite.
"""

from .corpus import (
    BiasingList,
    ContextStats,
    JaccardClustering,
    Slide,
    Utterance,
    VocabResources,
    WindowClustering,
    build_bias_list,
    cluster_slides,
    context_stats,
    jaccard,
    load_manifest,
    sample_distractor_count,
)
from .errors import (
    CtxBiasError,
    ParseError,
    ProtocolError,
    ResourceError,
    ShapeError,
    TransportError,
)
from .kernel import SplitMix64, load_matrix, matmul, random_init, row_softmax, save_matrix
from .pooling import (
    PooledContext,
    PoolingConfig,
    PoolingGradients,
    ProjectionParams,
    attention_scores,
    pool_forward,
    pool_vjp,
    project_heads,
    time_aggregate,
    window_pool,
)
from .pruning import (
    EndpointConfig,
    JpiResponse,
    PruneRequest,
    PruneResult,
    RenderedPrompt,
    model_prune,
    oracle_prune,
    parse_joint_response,
    prune_f1,
    render_joint_response,
    render_prompt,
    similarity_prune,
)
from .scoring import Alignment, EditOp, ScoreReport, aggregate, align, normalize, score

__version__ = "0.1.0"

__all__ = [
    "Alignment",
    "BiasingList",
    "ContextStats",
    "CtxBiasError",
    "EditOp",
    "EndpointConfig",
    "JaccardClustering",
    "JpiResponse",
    "ParseError",
    "PooledContext",
    "PoolingConfig",
    "PoolingGradients",
    "ProjectionParams",
    "ProtocolError",
    "PruneRequest",
    "PruneResult",
    "RenderedPrompt",
    "ResourceError",
    "ScoreReport",
    "ShapeError",
    "Slide",
    "SplitMix64",
    "TransportError",
    "Utterance",
    "VocabResources",
    "WindowClustering",
    "aggregate",
    "align",
    "attention_scores",
    "build_bias_list",
    "cluster_slides",
    "context_stats",
    "jaccard",
    "load_manifest",
    "load_matrix",
    "matmul",
    "model_prune",
    "normalize",
    "oracle_prune",
    "parse_joint_response",
    "pool_forward",
    "pool_vjp",
    "project_heads",
    "prune_f1",
    "random_init",
    "render_joint_response",
    "render_prompt",
    "row_softmax",
    "sample_distractor_count",
    "save_matrix",
    "score",
    "similarity_prune",
    "time_aggregate",
    "window_pool",
]

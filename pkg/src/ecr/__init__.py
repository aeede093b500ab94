"""Anchor-conditioned embedding toolkit.

Derives fixed anchor vectors from a teacher embedding space, encodes any
embedding as a short discrete control-token prefix (cosine projection
onto the anchors plus scalar quantization), and provides the
surrounding measurement and experiment machinery: approximate cosine
top-k retrieval, embedding-geometry metrics, and a desk-scale training
harness demonstrating the conditioning signal end to end.
"""

from .anchors import (
    AnchorError,
    AnchorSet,
    FactorGroup,
    build_anchor_set,
    kmeans,
    kmeans_fit,
    label_centroids,
    load_anchors,
    save_anchors,
)
from .codec import (
    AffinityVector,
    CodecError,
    ControlCode,
    ControlPrefix,
    ControlToken,
    TokenVocabulary,
    build_input,
    decode_tokens,
    emit_tokens,
    encode,
    parse_token,
    project,
    quantize,
    quantize_value,
    token_vocabulary,
    topk_anchors,
)
from .corpus import (
    Corpus,
    CorpusError,
    CorpusHeader,
    CorpusRecord,
    EmbeddingMatrix,
    load_corpus,
    load_embeddings,
    normalize,
    save_corpus,
    save_embeddings,
)
from .geometry import (
    GeometryError,
    GeometryReport,
    ManifoldPartition,
    compute_geometry,
    crosslingual_consistency,
    geometry_ratio,
    intra_compactness,
    inter_separation,
    partition_from_anchors,
    partition_from_labels,
    purity,
    retrieval_consistency,
    spread,
    teacher_similarity,
)
from .retrieval import (
    HnswIndex,
    PcaModel,
    RetrievalError,
    bench_query_latency,
    brute_force_topk,
    build_index,
    fit_pca,
    load_index,
    load_pca,
    pca_project,
    pca_reconstruct,
    query,
    save_index,
    save_pca,
)
from .toytrain import (
    EcrSettings,
    ExperimentReport,
    Sample,
    ToyModel,
    ToyTrainError,
    TrainConfig,
    embed_sequence,
    make_synthetic_corpus,
    nll_eval,
    run_ablation,
    run_experiment,
    run_training,
    task_accuracy,
    train_step,
)

__version__ = "0.1.0"

__all__ = [
    "AffinityVector",
    "AnchorError",
    "AnchorSet",
    "CodecError",
    "ControlCode",
    "ControlPrefix",
    "ControlToken",
    "Corpus",
    "CorpusError",
    "CorpusHeader",
    "CorpusRecord",
    "EcrSettings",
    "EmbeddingMatrix",
    "ExperimentReport",
    "FactorGroup",
    "GeometryError",
    "GeometryReport",
    "HnswIndex",
    "ManifoldPartition",
    "PcaModel",
    "RetrievalError",
    "Sample",
    "TokenVocabulary",
    "ToyModel",
    "ToyTrainError",
    "TrainConfig",
    "bench_query_latency",
    "brute_force_topk",
    "build_anchor_set",
    "build_index",
    "build_input",
    "compute_geometry",
    "crosslingual_consistency",
    "decode_tokens",
    "embed_sequence",
    "emit_tokens",
    "encode",
    "fit_pca",
    "geometry_ratio",
    "intra_compactness",
    "inter_separation",
    "kmeans",
    "kmeans_fit",
    "label_centroids",
    "load_anchors",
    "load_corpus",
    "load_embeddings",
    "load_index",
    "load_pca",
    "make_synthetic_corpus",
    "nll_eval",
    "normalize",
    "parse_token",
    "partition_from_anchors",
    "partition_from_labels",
    "pca_project",
    "pca_reconstruct",
    "project",
    "purity",
    "quantize",
    "quantize_value",
    "query",
    "retrieval_consistency",
    "run_ablation",
    "run_experiment",
    "run_training",
    "save_anchors",
    "save_corpus",
    "save_embeddings",
    "save_index",
    "save_pca",
    "spread",
    "task_accuracy",
    "teacher_similarity",
    "token_vocabulary",
    "topk_anchors",
    "train_step",
]

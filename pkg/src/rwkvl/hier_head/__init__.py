"""Hierarchical output head: embedding clusters, cluster head, token shards."""
from .clustering import ClusterAssignment, kmeans_embeddings
from .head import (
    HierHead,
    HierOutput,
    SelectionPolicy,
    aggregate_cluster_probs,
    build_shards,
    hier_forward,
    kl_loss,
    pseudo_logit,
    reassemble_head,
    select_clusters,
)
from .training import (
    ClusterHeadReport,
    build_hier_head,
    cluster_targets,
    fit_cluster_head,
    init_cluster_head,
    mean_kl,
    train_cluster_head,
)

__all__ = [
    "ClusterAssignment",
    "ClusterHeadReport",
    "HierHead",
    "HierOutput",
    "SelectionPolicy",
    "aggregate_cluster_probs",
    "build_hier_head",
    "build_shards",
    "cluster_targets",
    "fit_cluster_head",
    "hier_forward",
    "init_cluster_head",
    "kl_loss",
    "kmeans_embeddings",
    "mean_kl",
    "pseudo_logit",
    "reassemble_head",
    "select_clusters",
    "train_cluster_head",
]

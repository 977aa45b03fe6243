"""Unsupervised relation extraction: masked-prompt embeddings, clustering
with automatic estimation of the number of relations, and external
evaluation against optional gold labels."""

__version__ = "0.1.0"

from .corpus import Dataset, EntitySpan, RelationInstance, load_fewrel, load_unlabeled, strip_labels
from .prompt import RenderedPrompt, TemplateId, get_template, render, render_all
from .backends import FileBackend, InferenceBackend, MlmBackend, StubBackend
from .encoder import EmbeddingMatrix, encode, load_cache, save_cache, top_tokens_for
from .clustering import (
    ClusterAssignment,
    ClusterMethod,
    ElbowCurve,
    cluster_auto,
    estimate_k_elbow,
    kmeans,
    optics,
    silhouette,
)
from .evalmetrics import EvaluationReport, ari, b_cubed, evaluate, v_measure
from .analysis import (
    ClusterReport,
    ConfusionMatrix,
    cluster_composition,
    confusion,
    diagonalize,
    name_clusters,
)

__all__ = [
    "Dataset", "EntitySpan", "RelationInstance",
    "load_fewrel", "load_unlabeled", "strip_labels",
    "RenderedPrompt", "TemplateId", "get_template", "render", "render_all",
    "MlmBackend", "StubBackend", "FileBackend", "InferenceBackend",
    "EmbeddingMatrix", "encode", "save_cache", "load_cache", "top_tokens_for",
    "ClusterAssignment", "ClusterMethod", "ElbowCurve",
    "kmeans", "optics", "silhouette", "estimate_k_elbow", "cluster_auto",
    "EvaluationReport", "b_cubed", "v_measure", "ari", "evaluate",
    "ConfusionMatrix", "ClusterReport",
    "confusion", "diagonalize", "cluster_composition", "name_clusters",
]

"""Prototype-ball image classifiers with multi-patch concept visualizations.

Prototypes are balls in latent space rather than single points: every
training patch contained in a ball scores the same clamped similarity, so
a learned concept is visualized by all of the patches it contains instead
of one nearest neighbor. The package covers the clamped similarity
geometry, the training losses and staged pipeline, empty-ball pruning,
sparse last-layer finetuning, and gallery/scoresheet explanation reports,
plus a synthetic shapes dataset for desk-scale verification.
"""

from .config import ConfigError, RunConfig, default_config, load_config
from .geometry import (
    Geometry,
    GeometryConfig,
    LatentPatchGrid,
    PrototypeBall,
    SimilarityMap,
    ball_distance,
    cos_ball_similarity,
    effective_radius,
    is_member,
    log_ball_similarity,
    max_pool_similarity,
    similarity_map,
)
from .losses import ClassAssignmentView, LossWeights, composite_objective, radius_loss, separation_loss, topk_cluster_loss
from .model import ProtoConceptsNet, build_net, load_checkpoint, logit_decomposition, save_checkpoint
from .training import run_pipeline

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "RunConfig",
    "default_config",
    "load_config",
    "Geometry",
    "GeometryConfig",
    "LatentPatchGrid",
    "PrototypeBall",
    "SimilarityMap",
    "ball_distance",
    "cos_ball_similarity",
    "effective_radius",
    "is_member",
    "log_ball_similarity",
    "max_pool_similarity",
    "similarity_map",
    "ClassAssignmentView",
    "LossWeights",
    "composite_objective",
    "radius_loss",
    "separation_loss",
    "topk_cluster_loss",
    "ProtoConceptsNet",
    "build_net",
    "load_checkpoint",
    "logit_decomposition",
    "save_checkpoint",
    "run_pipeline",
    "__version__",
]

"""One-shot, gradient-free pruning for transformer LMs with multilingual-aware
importance criteria and layerwise sparsity allocation."""

from .container import Container, ContainerError, load, save
from .graph import (
    ModelGraph,
    SiteActivations,
    TokenBatch,
    WeightStore,
    byte_tokenize,
    forward,
    perplexity,
)
from .calib import CalibStats, SiteLangStats, language_diversity
from .criteria import (
    CriterionConfig,
    ImportanceTensor,
    enhanced_activation,
    score_magnitude,
    score_matrix,
    score_mria,
    score_mwanda,
    score_ria,
    score_wanda,
)
from .allocation import (
    AllocConfig,
    SparsityPlan,
    build_plan,
    cwl_importance,
    owl_importance,
    pearson,
    rescale_to_plan,
    uniform_plan,
)
from .masker import MaskSet, apply, build_mask, build_mask_set, verify

__version__ = "0.1.0"

__all__ = [
    "AllocConfig",
    "CalibStats",
    "Container",
    "ContainerError",
    "CriterionConfig",
    "ImportanceTensor",
    "MaskSet",
    "ModelGraph",
    "SiteActivations",
    "SiteLangStats",
    "SparsityPlan",
    "TokenBatch",
    "WeightStore",
    "apply",
    "build_mask",
    "build_mask_set",
    "build_plan",
    "byte_tokenize",
    "cwl_importance",
    "enhanced_activation",
    "forward",
    "language_diversity",
    "load",
    "owl_importance",
    "pearson",
    "perplexity",
    "rescale_to_plan",
    "save",
    "score_magnitude",
    "score_matrix",
    "score_mria",
    "score_mwanda",
    "score_ria",
    "score_wanda",
    "uniform_plan",
    "verify",
]

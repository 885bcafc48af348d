"""Personalized item-to-item metric learning.

A Siamese ensemble over item meta-data channels defines a distance ``D``;
``exp(-D/2)`` is the kernel of a Gaussian process fit to per-item
surrogate ratings by its marginal likelihood, and the ensemble weights are
meta-learned so that one gradient step on a user's ratings personalizes
the metric.
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, parse_config
from .data import (
    Annotations,
    InteractionLog,
    ItemCatalog,
    ItemFeatures,
    MetaChannel,
    PairExample,
    TimeSplit,
    build_ground_truth,
    generate_pair_annotations,
    load_channel,
    load_interactions,
    load_manifest,
    split_by_time,
    surrogate_targets,
    user_targets,
)
from .evaluation import CatalogMetric, RankedList, RankingReport, evaluate, hr_at_k, mrr_at_k, ndcg_at_k, rank_items
from .exceptions import (
    CheckpointError,
    ConfigError,
    DataError,
    DivergenceError,
    DomainError,
    ItemMetricError,
    NumericalError,
)
from .gp import GPState, InducingSet, fitted_values, gram, kernel, nll, nll_grad, nystrom_grad, nystrom_nll, predict
from .personalize import (
    FrozenMetric,
    MetaConfig,
    UserContext,
    build_user_contexts,
    fit_meta,
    local_loss,
    local_update,
    meta_gradient,
    personalize_user,
    post_update_loss,
    update_jacobian,
)
from .siamese import (
    BaselineConfig,
    EnsembleParams,
    PairBatch,
    backward,
    channel_distance,
    contrastive_loss,
    distance_matrix,
    ensemble_distance,
    init_params,
    train_siamese_baseline,
)
from .ssl import TrainConfig, TrainTrace, fit_ssl

__version__ = "0.1.0"

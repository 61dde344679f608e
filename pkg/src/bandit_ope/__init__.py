"""Offline evaluation of nonstationary contextual-bandit policies.

The central estimator is :func:`drns_evaluate`, a doubly robust replay
that builds a simulated history of the target policy from logged
exploration data.  Baselines (DM, IPS, DR, rejection sampling, WC), an
exact oracle for enumerable worlds and an experiment harness live in the
submodules.
"""

from __future__ import annotations

from .core import (
    EMPTY_HISTORY,
    BanditOPEError,
    ConstantEstimator,
    DataParseError,
    ExplorationEvent,
    Features,
    InvalidArgumentError,
    NoAcceptedSamplesError,
    NoDataError,
    Policy,
    RewardEstimator,
    TableEstimator,
    TargetHistory,
    constant_estimator,
)
from .datagen import TinyWorld, convert_supervised, read_events, sample_world_log, write_events
from .evaluators import (
    EvalResult,
    RunTrace,
    dm_evaluate,
    dr_evaluate,
    drns_evaluate,
    drns_step,
    ips_evaluate,
    rs_evaluate,
    wc_evaluate,
)
from .harness import ExperimentConfig, TrialTable, run_experiment, summarize
from .policies import (
    AdaptivePolicy,
    EpsGreedyPolicy,
    LinearModel,
    UniformPolicy,
    train_logistic_ova,
)
from .quantile import QuantileTracker, quantile_query

__version__ = "0.1.0"

__all__ = [
    "EMPTY_HISTORY",
    "AdaptivePolicy",
    "BanditOPEError",
    "ConstantEstimator",
    "DataParseError",
    "EpsGreedyPolicy",
    "EvalResult",
    "ExperimentConfig",
    "ExplorationEvent",
    "Features",
    "InvalidArgumentError",
    "LinearModel",
    "NoAcceptedSamplesError",
    "NoDataError",
    "Policy",
    "QuantileTracker",
    "RewardEstimator",
    "RunTrace",
    "TableEstimator",
    "TargetHistory",
    "TinyWorld",
    "TrialTable",
    "UniformPolicy",
    "constant_estimator",
    "convert_supervised",
    "dm_evaluate",
    "dr_evaluate",
    "drns_evaluate",
    "drns_step",
    "ips_evaluate",
    "quantile_query",
    "read_events",
    "rs_evaluate",
    "run_experiment",
    "sample_world_log",
    "summarize",
    "train_logistic_ova",
    "wc_evaluate",
    "write_events",
]

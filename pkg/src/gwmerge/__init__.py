"""Gromov-Wasserstein similarity guided model merging.

Modules: ``tensor_io`` (file formats), ``gw`` (entropic GW solver),
``similarity``, ``planner``, ``merger``, ``metrics`` and ``cli``.
"""

from .gw import GwConfig, MetricSpace, build_metric_space, gw_entropic
from .merger import assemble_bundle, merge_average, merge_fisher, merge_task_arithmetic, merge_ties
from .metrics import paired_t_test, task_metrics, weighted_mean
from .planner import MergePlan, plan_exact, plan_greedy, plan_loss
from .similarity import pairwise_gw, to_similarity

__version__ = "0.1.0"

__all__ = [
    "GwConfig",
    "MergePlan",
    "MetricSpace",
    "assemble_bundle",
    "build_metric_space",
    "gw_entropic",
    "merge_average",
    "merge_fisher",
    "merge_task_arithmetic",
    "merge_ties",
    "paired_t_test",
    "pairwise_gw",
    "plan_exact",
    "plan_greedy",
    "plan_loss",
    "task_metrics",
    "to_similarity",
    "weighted_mean",
]

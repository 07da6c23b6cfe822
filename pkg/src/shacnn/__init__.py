"""Hierarchy-aware CNN classifiers over label trees: a branched baseline and a
shared-FC variant, two-phase training, catastrophic-distance evaluation and
static parameter/MAC accounting."""

from .label_tree import LabelTree, TreeError, leaf_distance, level_class_counts, labels_for_leaf, load_tree, parse_tree
from .model import (ArchConfig, HierarchicalModel, WeightBundle, build_bcnn, build_sha, extract_weights,
                    forward_levels, predict)
from .training import LossWeightSchedule, TrainConfig, total_loss, train_phase1, train_phase2, weights_at
from .metrics import CostReport, EvalReport, compare_costs, count_macs, count_params, evaluate

__version__ = "0.1.0"

__all__ = [
    "LabelTree", "TreeError", "leaf_distance", "level_class_counts", "labels_for_leaf", "load_tree", "parse_tree",
    "ArchConfig", "HierarchicalModel", "WeightBundle", "build_bcnn", "build_sha", "extract_weights",
    "forward_levels", "predict",
    "LossWeightSchedule", "TrainConfig", "total_loss", "train_phase1", "train_phase2", "weights_at",
    "CostReport", "EvalReport", "compare_costs", "count_macs", "count_params", "evaluate",
]

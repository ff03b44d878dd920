"""Swarm-tuned transformer classification toolkit for tabular heart-risk data.

Modules:
    datasets    - CSV ingestion, splitting, scaling, correlation, synthesis
    pso         - global-best particle swarm optimizer over bounded spaces
    transformer - encoder classifier with hand-written backprop and Adam
    baselines   - CART tree, bagged forest, gradient-boosted trees
    search      - PSO over transformer hyperparameters
    report      - confusion matrices, metrics, comparison tables
    pixmap      - plain-text grayscale (PGM) heatmap export
    cli         - experiment command line (correlate/baselines/search/report)
"""

from .datasets import (
    Dataset,
    FEATURE_NAMES,
    Scaler,
    apply_scaler,
    fit_scaler,
    load_csv,
    pearson_matrix,
    stratified_split,
    synthesize_dataset,
)
from .pso import Dimension, OptimizationResult, SearchSpace, SwarmConfig, optimize
from .report import EvaluationReport, comparison_report, confusion, evaluate, metrics
from .search import HyperSearchSpec, SearchResult
from .transformer import TransformerConfig, predict, train

__all__ = [
    "Dataset",
    "FEATURE_NAMES",
    "Scaler",
    "apply_scaler",
    "fit_scaler",
    "load_csv",
    "pearson_matrix",
    "stratified_split",
    "synthesize_dataset",
    "Dimension",
    "OptimizationResult",
    "SearchSpace",
    "SwarmConfig",
    "optimize",
    "EvaluationReport",
    "comparison_report",
    "confusion",
    "evaluate",
    "metrics",
    "HyperSearchSpec",
    "SearchResult",
    "TransformerConfig",
    "predict",
    "train",
]

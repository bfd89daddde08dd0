"""Semi-supervised forecasting of a per-location scalar on a learned
dynamic graph: attention message passing plus per-node recurrence, trained
jointly with adjacency reconstruction from node embeddings."""

from .data import (
    NormalizationStats,
    SensorDataset,
    SyntheticSpec,
    generate_synthetic,
    load_csv,
    mask_labels,
    normalize_features,
    save_csv,
)
from .errors import (
    DataError,
    DglrError,
    DimensionError,
    DivergenceError,
    NumericError,
)
from .graph import (
    TemporalGraph,
    build_initial_graph,
    reconstruct_adjacency,
    suggest_threshold,
)
from .losses import (
    LossBreakdown,
    auto_balance_weights,
    loss_feature_smoothness,
    loss_graph_closeness,
    loss_stsm,
    loss_target_smoothness,
)
from .metrics import EvalReport, evaluate
from .model import (
    ModelParams,
    forward_all,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .training import TrainConfig, TrainResult, compute_gradients, forecast, train

__version__ = "0.1.0"

__all__ = [
    "DataError",
    "DglrError",
    "DimensionError",
    "DivergenceError",
    "EvalReport",
    "LossBreakdown",
    "ModelParams",
    "NormalizationStats",
    "NumericError",
    "SensorDataset",
    "SyntheticSpec",
    "TemporalGraph",
    "TrainConfig",
    "TrainResult",
    "auto_balance_weights",
    "build_initial_graph",
    "compute_gradients",
    "evaluate",
    "forecast",
    "forward_all",
    "generate_synthetic",
    "init_params",
    "load_checkpoint",
    "load_csv",
    "loss_feature_smoothness",
    "loss_graph_closeness",
    "loss_stsm",
    "loss_target_smoothness",
    "mask_labels",
    "normalize_features",
    "reconstruct_adjacency",
    "save_checkpoint",
    "save_csv",
    "suggest_threshold",
    "train",
]

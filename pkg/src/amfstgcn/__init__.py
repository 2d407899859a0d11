"""Spatial-temporal graph forecasting with multi-receptive-field branch attention."""
from .data import DatasetSplit, make_windows, normalize, spatial_lag_ring
from .decoders import forecast
from .graph import TrafficGraph, build_adjacency_spearman, ring_graph
from .model import ModelConfig, init_params
from .training import TrainConfig, evaluate, ha_baseline, train

__version__ = "0.1.0"

__all__ = ["DatasetSplit", "ModelConfig", "TrafficGraph", "TrainConfig", "build_adjacency_spearman",
           "evaluate", "forecast", "ha_baseline", "init_params", "make_windows", "normalize",
           "ring_graph", "spatial_lag_ring", "train"]

"""Spatially sparse two-column segmentation networks in NumPy."""
from .builders import (build_backbone, build_decoder, build_single_column, build_two_column,
                       decoder_widths, optimize_structure, remove_identity_unit,
                       ResidualStagePlan)
from .cost import CostReport, mac_of_conv, mac_of_pipeline
from .data import ConfusionMatrix, gen_scene, make_dataset, metrics
from .estimator import SparseSegmenter
from .graph import Context, GraphError, ModelGraph, backward, forward, load, save
from .inference import InferenceResult, classic_infer, crop_grid, fast_infer, uncrop_grid
from .sparsity import RegionGrid, select_wta, sparsity_penalty, update_q
from .tensor import ParameterError
from .train import TrainConfig, TrainingDiverged, gradcheck, train

__version__ = "0.1.0"

__all__ = [
    "build_backbone", "build_decoder", "build_single_column", "build_two_column",
    "decoder_widths", "optimize_structure", "remove_identity_unit", "ResidualStagePlan",
    "CostReport", "mac_of_conv", "mac_of_pipeline", "ConfusionMatrix", "gen_scene",
    "make_dataset", "metrics", "SparseSegmenter", "Context", "GraphError", "ModelGraph",
    "backward", "forward", "load", "save", "InferenceResult", "classic_infer", "crop_grid",
    "fast_infer", "uncrop_grid", "RegionGrid", "select_wta", "sparsity_penalty", "update_q",
    "ParameterError", "TrainConfig", "TrainingDiverged", "gradcheck", "train",
]

"""Anchored unsigned distance fields for open-surface reconstruction.

The pipeline: exact distance queries on triangle meshes (``geometry``),
training samples around the surface (``sampling``), k-means anchor targets
(``anchors``), a small reverse-mode autodiff engine (``autodiff``), the
anchored field network (``model``), its losses and training loop
(``training``), dense point-cloud extraction by projection (``extraction``)
and evaluation metrics (``metrics``). ``cli`` wires them together.
"""

from .anchors import AnchorSet, chamfer_sq, kmeans, kmeans_anchors
from .errors import DataError, ExtractionError, NonFiniteLossError, NumericError
from .extraction import ExtractConfig, extract_dense_cloud, load_ply, project_point, save_ply
from .geometry import (SpatialIndex, TriangleMesh, build_index, closest_point, grad_dir_exact, load_obj,
                       make_synthetic, normalize_mesh, save_obj, udf_exact)
from .metrics import chamfer_eval, p2s
from .model import AnchorUDF, ModelConfig
from .sampling import SamplingMixture, TrainingSet, generate_training_set, load_training_set, save_training_set
from .training import Checkpoint, TrainConfig, fit, prepare_shape

__version__ = "0.1.0"

__all__ = [
    "AnchorSet", "AnchorUDF", "Checkpoint", "DataError", "ExtractConfig", "ExtractionError", "ModelConfig",
    "NonFiniteLossError", "NumericError", "SamplingMixture", "SpatialIndex", "TrainConfig", "TrainingSet",
    "TriangleMesh", "build_index", "chamfer_eval", "chamfer_sq", "closest_point", "extract_dense_cloud", "fit",
    "generate_training_set", "grad_dir_exact", "kmeans", "kmeans_anchors", "load_obj", "load_ply",
    "load_training_set", "make_synthetic", "normalize_mesh", "p2s", "prepare_shape", "project_point",
    "save_obj", "save_ply", "save_training_set", "udf_exact",
]

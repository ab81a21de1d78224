"""meshvox: parameter-efficient whole-brain lesion segmentation with MeshNet."""

from .engine import MemoryPlan, infer, plan
from .kernels import BatchNormState, ConvSpec, ConvWeights, LossSpec
from .meshnet import (
    MeshNetConfig,
    Model,
    WeightSet,
    build,
    count_parameters,
    fold_batchnorm,
    init_model,
    init_weights,
    load_model,
    load_weights,
    receptive_field,
    save_model,
    save_weights,
)
from .metrics import Confusion, avd, confusion, dice, mcc
from .nifti import read_label_mask, read_volume, write_volume
from .voxel import LabelMask, Volume, conform, lesion_volume

__version__ = "0.1.0"

__all__ = [
    "MemoryPlan",
    "infer",
    "plan",
    "BatchNormState",
    "ConvSpec",
    "ConvWeights",
    "LossSpec",
    "MeshNetConfig",
    "Model",
    "WeightSet",
    "build",
    "count_parameters",
    "fold_batchnorm",
    "init_model",
    "init_weights",
    "load_model",
    "load_weights",
    "receptive_field",
    "save_model",
    "save_weights",
    "Confusion",
    "avd",
    "confusion",
    "dice",
    "mcc",
    "read_label_mask",
    "read_volume",
    "write_volume",
    "LabelMask",
    "Volume",
    "conform",
    "lesion_volume",
]

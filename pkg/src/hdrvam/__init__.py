"""Segmentation-guided multi-exposure HDR fusion on a small numpy autodiff engine."""

from .errors import HdrVamError
from .imageio import ExposureStack, HdrImage, LdrImage, load_scene, read_pfm, write_pfm
from .metrics import evaluate, mu_psnr, psnr
from .network import ModelConfig, ModelWeights, forward, init_weights, predict
from .segmentation import otsu_threshold, segment_stack
from .training import TrainConfig, fit, inverse_sigmoid, sigmoid_map

__version__ = "0.1.0"

__all__ = [
    "ExposureStack", "HdrImage", "HdrVamError", "LdrImage", "ModelConfig", "ModelWeights",
    "TrainConfig", "evaluate", "fit", "forward", "init_weights", "inverse_sigmoid",
    "load_scene", "mu_psnr", "otsu_threshold", "predict", "psnr", "read_pfm",
    "segment_stack", "sigmoid_map", "write_pfm",
]

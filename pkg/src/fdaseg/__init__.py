"""Dual-stream airway segmentation on synthetic phantoms."""

__version__ = "0.1.0"

from .volcore import Volume, load_volume, save_volume, clamp_normalize, largest_component
from .phantom import PhantomSpec, NoiseSpec, PhantomSample, generate_phantom, corrupt_to_noisy
from .sdm import SdmVolume, sdm_compute, sdm_normalize, extract_surface
from .model import FdaConfig, FdaModel
from .losses import LossConfig, l_reg, l_seg, l_total
from .metrics import MetricsReport, evaluate, skeletonize, parse_branches

__all__ = [
    "Volume", "load_volume", "save_volume", "clamp_normalize", "largest_component",
    "PhantomSpec", "NoiseSpec", "PhantomSample", "generate_phantom", "corrupt_to_noisy",
    "SdmVolume", "sdm_compute", "sdm_normalize", "extract_surface",
    "FdaConfig", "FdaModel",
    "LossConfig", "l_reg", "l_seg", "l_total",
    "MetricsReport", "evaluate", "skeletonize", "parse_branches",
    "__version__",
]

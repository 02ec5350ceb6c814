"""Wide-field NV-center spin-coherence mapping: simulate M/L/B Rabi acquisitions
and recover per-pixel T2* maps."""

from .fitting import FitOptions, FitParams, FitResult, RabiFitter, fit_trace, initial_guess
from .mapping import CoherenceMap, CoherenceMapper, fit_map, quality_mask
from .pipeline import FramePipeline, TraceCube, load_acquisition
from .scene import AcquisitionPlan, AntennaModel, CameraModel, SceneMap, build_scene, synthesize_stack
from .spin import SpinParams, normalized_pl_model, odmr_frequencies

__version__ = "0.1.0"

__all__ = [
    "AcquisitionPlan",
    "AntennaModel",
    "CameraModel",
    "CoherenceMap",
    "CoherenceMapper",
    "FitOptions",
    "FitParams",
    "FitResult",
    "FramePipeline",
    "RabiFitter",
    "SceneMap",
    "SpinParams",
    "TraceCube",
    "build_scene",
    "fit_map",
    "fit_trace",
    "initial_guess",
    "load_acquisition",
    "normalized_pl_model",
    "odmr_frequencies",
    "quality_mask",
    "synthesize_stack",
]

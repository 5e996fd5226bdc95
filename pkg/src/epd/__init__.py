"""Energy-plan denoising for stochastic pedestrian trajectory prediction.

A guidance encoder summarizes observed trajectories; an energy model with
Langevin sampling proposes a coarse plan over per-step Gaussian parameters;
a conditional denoiser refines the plan in a few reverse-diffusion steps; the
refined distribution is sampled for the final predictions.
"""

from .config import Config
from .data import Scene, SceneWindow, build_windows, normalize, parse_dataset
from .distribution import GaussianSeq, from_unconstrained, to_unconstrained
from .evaluate import MetricRecord, ablate, bench_relative, evaluate
from .metrics import ade_fde
from .model import EPDModel
from .pipeline import Prediction, predict, predict_batch, train

__all__ = [
    "Config",
    "EPDModel",
    "GaussianSeq",
    "MetricRecord",
    "Prediction",
    "Scene",
    "SceneWindow",
    "ablate",
    "ade_fde",
    "bench_relative",
    "build_windows",
    "evaluate",
    "from_unconstrained",
    "normalize",
    "parse_dataset",
    "predict",
    "predict_batch",
    "to_unconstrained",
    "train",
]

__version__ = "0.1.0"

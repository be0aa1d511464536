"""Semi-supervised staging: autoencoder latents, graph label propagation
and entropic optimal transport between ordered classes."""

from .dataset import FeatureTable, SemiLabels, SynthConfig, load_csv, synth_generate
from .errors import MatchADError, NumericalError
from .metrics import MetricsReport, evaluate
from .pipeline import FittedModel, JointConfig, fit, predict
from .preprocessing import preprocess

__version__ = "0.1.0"

__all__ = [
    "FeatureTable",
    "FittedModel",
    "JointConfig",
    "MatchADError",
    "MetricsReport",
    "NumericalError",
    "SemiLabels",
    "SynthConfig",
    "evaluate",
    "fit",
    "load_csv",
    "predict",
    "preprocess",
    "synth_generate",
]

"""Parametric body fitting toolkit: body model, projection, priors, fitting
and mesh evaluation, in numpy with hand-written gradients."""

from .body_model import BodyModel, Parameters, pose_model, pose_model_backward
from .camera import WeakPerspectiveCamera, project
from .estimators import GenderShapePrior, KeypointFitter, ModeratorFusion
from .exceptions import BodyFitError, IoError, NumericError, ValidationError
from .fitter import FitConfig, FitProblem, FitResult, Observations, Stage, fit, objective
from .losses import GenderPrior, LossWeights
from .metrics import EvalReport, evaluate, mpjpe, p2s, procrustes_align, v2v
from .synthetic import sample_parameters, synth_model

__version__ = "0.1.0"

__all__ = [
    "BodyFitError",
    "BodyModel",
    "EvalReport",
    "FitConfig",
    "FitProblem",
    "FitResult",
    "GenderPrior",
    "GenderShapePrior",
    "IoError",
    "KeypointFitter",
    "LossWeights",
    "ModeratorFusion",
    "NumericError",
    "Observations",
    "Parameters",
    "Stage",
    "ValidationError",
    "WeakPerspectiveCamera",
    "evaluate",
    "fit",
    "mpjpe",
    "objective",
    "p2s",
    "pose_model",
    "pose_model_backward",
    "procrustes_align",
    "project",
    "sample_parameters",
    "synth_model",
    "v2v",
]

"""Inverse rendering: analytic gradients, Adam and the staged fitting cascade."""

from .estimators import CascadeFitter, Capture, IlluminationEstimator, JointRefiner, SvbrdfEstimator
from .fitting import fit_illumination, fit_svbrdf, initial_maps, irradiance_albedo_proxy, refine_joint
from .gradcheck import GradientReport, grad_check
from .gradients import PARAM_CLASSES, FitParams, LossSpec, RenderProblem, Target, grad_render_loss
from .optim import FitConfig, FitResult, adam_fit

__all__ = [
    "CascadeFitter", "Capture", "IlluminationEstimator", "JointRefiner", "SvbrdfEstimator",
    "fit_illumination", "fit_svbrdf", "initial_maps", "irradiance_albedo_proxy", "refine_joint",
    "GradientReport", "grad_check", "PARAM_CLASSES", "FitParams", "LossSpec", "RenderProblem", "Target",
    "grad_render_loss", "FitConfig", "FitResult", "adam_fit",
]

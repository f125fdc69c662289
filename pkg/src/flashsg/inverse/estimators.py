"""scikit-learn style wrappers around the fitting stages.

Each estimator takes a :class:`Capture` as ``X``; hyperparameters live in
``__init__`` so ``get_params``/``set_params``/``clone`` work as usual and
fitted state carries a trailing underscore.
"""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ..errors import ContractError
from ..geometry import Camera, GBuffer, reproject_to_view
from ..sg import SgBank
from ..shading import FlashLight, RenderOptions, SvbrdfMaps, render
from .fitting import _illumination, _joint, _svbrdf
from .gradients import Target
from .optim import FitConfig


@dataclass
class Capture:
    """A two-shot capture with known shape.

    ``noflash_camera`` is the pose of the (possibly shaken) second shot; when
    it differs from ``camera`` the no-flash image is warped into the flash
    view before fitting.
    """

    flash: np.ndarray
    noflash: np.ndarray
    gbuffer: GBuffer
    camera: Camera
    flash_light: FlashLight = None
    noflash_camera: Camera = None

    def __post_init__(self):
        shape = self.gbuffer.mask.shape
        for name in ("flash", "noflash"):
            img = np.asarray(getattr(self, name))
            if img.shape != shape + (3,):
                raise ContractError(f"{name} image {img.shape} does not match the G-buffer {shape}")
        if not np.asarray(self.gbuffer.mask).any():
            raise ContractError("the object mask is empty")
        self.flash_light = self.flash_light or FlashLight()

    @property
    def env_rotation(self):
        return self.camera.rotation

    def noflash_target(self):
        """The no-flash shot in the flash view, with a validity mask."""
        if self.noflash_camera is None or self.noflash_camera == self.camera:
            return Target(self.noflash, "env")
        nf = np.asarray(self.noflash)
        warped, valid = reproject_to_view(nf.astype(np.float64), self.gbuffer, self.camera, self.noflash_camera)
        if nf.dtype == np.uint8:
            warped = np.clip(np.round(warped), 0, 255).astype(np.uint8)
        return Target(warped, "env", valid)


def _config(stage, iterations, learning_rate, smoothness_weight=0.01):
    return FitConfig(stage, learning_rate=learning_rate, iterations=iterations,
                     smoothness_weight=smoothness_weight)


class IlluminationEstimator(BaseEstimator):
    """Fits the SG environment bank with shape and an albedo proxy fixed."""

    def __init__(self, iterations=2000, learning_rate=2e-4):
        self.iterations = iterations
        self.learning_rate = learning_rate

    def fit(self, X: Capture, y=None, albedo=None):
        bank, res = _illumination(X.flash, X.noflash_target(), X.gbuffer, albedo,
                                  _config("illumination", self.iterations, self.learning_rate),
                                  X.flash_light, X.env_rotation)
        self.bank_ = bank
        self.loss_curve_ = res.losses
        return self

    def predict(self, X: Capture, maps: SvbrdfMaps = None):
        """Environment-only render of ``X`` (grey diffuse unless ``maps`` is given)."""
        check_is_fitted(self, "bank_")
        h, w = X.gbuffer.mask.shape
        maps = maps or SvbrdfMaps(np.full((h, w, 3), 0.5), np.zeros((h, w, 3)), np.ones((h, w)))
        return render(X.gbuffer, maps, self.bank_, X.flash_light, RenderOptions.from_mode("env"),
                      env_rotation=X.env_rotation)


class SvbrdfEstimator(BaseEstimator):
    """Fits per-pixel diffuse, specular and roughness with shape and lighting fixed."""

    def __init__(self, iterations=5000, learning_rate=2e-4, smoothness_weight=0.01, use_noflash=True):
        self.iterations = iterations
        self.learning_rate = learning_rate
        self.smoothness_weight = smoothness_weight
        self.use_noflash = use_noflash

    def fit(self, X: Capture, y=None, bank: SgBank = None):
        if bank is None:
            raise ContractError("SvbrdfEstimator.fit needs the environment bank")
        cfg = _config("svbrdf", self.iterations, self.learning_rate, self.smoothness_weight)
        noflash = X.noflash_target() if self.use_noflash else None
        maps, res = _svbrdf(X.flash, X.gbuffer, bank, X.flash_light, cfg, X.env_rotation, noflash=noflash)
        self.maps_ = maps
        self.bank_ = bank
        self.loss_curve_ = res.losses
        return self

    def predict(self, X: Capture):
        """Re-rendered flash shot (HDR) from the fitted maps."""
        check_is_fitted(self, "maps_")
        return render(X.gbuffer, self.maps_, self.bank_, X.flash_light, env_rotation=X.env_rotation)


class JointRefiner(BaseEstimator):
    """Refines normals and SVBRDF together, tied to the fixed depth."""

    def __init__(self, iterations=2000, learning_rate=2e-4, smoothness_weight=0.01, freeze_maps=False,
                 use_noflash=True):
        self.iterations = iterations
        self.learning_rate = learning_rate
        self.smoothness_weight = smoothness_weight
        self.freeze_maps = freeze_maps
        self.use_noflash = use_noflash

    def fit(self, X: Capture, y=None, maps: SvbrdfMaps = None, bank: SgBank = None, normals=None):
        if maps is None or bank is None:
            raise ContractError("JointRefiner.fit needs the current maps and environment bank")
        cfg = _config("joint", self.iterations, self.learning_rate, self.smoothness_weight)
        noflash = X.noflash_target() if self.use_noflash else None
        (n, m), res = _joint(X.flash, X.gbuffer, maps, bank, X.flash_light, cfg, X.env_rotation, X.camera,
                             self.freeze_maps, normals, noflash)
        self.normals_ = n
        self.maps_ = m
        self.bank_ = bank
        self.loss_curve_ = res.losses
        return self

    def predict(self, X: Capture):
        check_is_fitted(self, "normals_")
        return render(X.gbuffer, self.maps_, self.bank_, X.flash_light, env_rotation=X.env_rotation,
                      normals=self.normals_)


class CascadeFitter(BaseEstimator):
    """Illumination, then SVBRDF, then joint refinement on one capture.

    ``stages`` is any ordered subset of ("illumination", "svbrdf", "joint");
    stages that are skipped take their inputs from ``fit`` keyword arguments.
    """

    def __init__(self, stages=("illumination", "svbrdf", "joint"), illumination_iterations=2000,
                 svbrdf_iterations=5000, joint_iterations=2000, learning_rate=2e-4, smoothness_weight=0.01):
        self.stages = stages
        self.illumination_iterations = illumination_iterations
        self.svbrdf_iterations = svbrdf_iterations
        self.joint_iterations = joint_iterations
        self.learning_rate = learning_rate
        self.smoothness_weight = smoothness_weight

    def fit(self, X: Capture, y=None, bank: SgBank = None, maps: SvbrdfMaps = None):
        unknown = set(self.stages) - {"illumination", "svbrdf", "joint"}
        if unknown:
            raise ContractError(f"unknown stages {sorted(unknown)}")
        self.loss_curves_ = {}
        if "illumination" in self.stages:
            est = IlluminationEstimator(self.illumination_iterations, self.learning_rate).fit(X)
            bank = est.bank_
            self.loss_curves_["illumination"] = est.loss_curve_
        if bank is None:
            raise ContractError("no environment bank: run the illumination stage or pass bank=")
        if "svbrdf" in self.stages:
            est = SvbrdfEstimator(self.svbrdf_iterations, self.learning_rate, self.smoothness_weight).fit(X, bank=bank)
            maps = est.maps_
            self.loss_curves_["svbrdf"] = est.loss_curve_
        if maps is None:
            raise ContractError("no SVBRDF maps: run the svbrdf stage or pass maps=")
        normals = np.where(X.gbuffer.mask[..., None], X.gbuffer.normal, 0.0)
        if "joint" in self.stages:
            est = JointRefiner(self.joint_iterations, self.learning_rate, self.smoothness_weight).fit(
                X, maps=maps, bank=bank)
            normals, maps = est.normals_, est.maps_
            self.loss_curves_["joint"] = est.loss_curve_
        self.bank_ = bank
        self.maps_ = maps
        self.normals_ = normals
        return self

    def predict(self, X: Capture):
        check_is_fitted(self, "maps_")
        return render(X.gbuffer, self.maps_, self.bank_, X.flash_light, env_rotation=X.env_rotation,
                      normals=self.normals_)

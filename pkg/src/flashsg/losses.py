"""Training losses and evaluation metrics over masked maps.

Every reduction is a mean over the masked pixels (and channels, where the
map has them). numpy's pairwise summation keeps results independent of how
callers chunk work.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .geometry import normals_from_depth
from .sg import SgBank
from .validation import check_mask, check_same_shape


@dataclass(frozen=True)
class ShapeLossWeights:
    depth: float = 1.0
    angular: float = 1.0
    consistency: float = 0.5

    def __post_init__(self):
        if min(self.depth, self.angular, self.consistency) < 0:
            raise ContractError("shape loss weights must be non-negative")


@dataclass
class MaskedMapPair:
    predicted: np.ndarray
    reference: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        self.predicted = np.asarray(self.predicted, dtype=np.float64)
        self.reference = np.asarray(self.reference, dtype=np.float64)
        check_same_shape(self.predicted, self.reference)
        if self.predicted.ndim < 2:
            raise ContractError("maps must be at least 2-D")
        shape = self.predicted.shape[:2]
        if self.mask is None:
            self.mask = np.ones(shape, bool)
        self.mask = check_mask(self.mask, shape)

    def values(self):
        """Masked (pred, ref) arrays of shape (N,) or (N, C)."""
        return self.predicted[self.mask], self.reference[self.mask]


def _pair(predicted, reference, mask):
    return MaskedMapPair(predicted, reference, mask).values()


def loss_depth_l2(predicted, reference, mask=None):
    p, r = _pair(predicted, reference, mask)
    return float(np.mean((p - r) ** 2))


def angular_error(predicted, reference):
    # atan2 form stays exact for (nearly) identical vectors, unlike arccos of the dot product
    cross = np.linalg.norm(np.cross(predicted, reference), axis=-1)
    return np.arctan2(cross, np.sum(predicted * reference, axis=-1))


def loss_normal_angular(predicted, reference, mask=None):
    """Mean angle in radians between predicted and reference unit normals."""
    p, r = _pair(predicted, reference, mask)
    return float(np.mean(angular_error(p, r)))


def consistency_residual(normals, depth, mask=None, width=None):
    """Per-pixel ``n / |n| - n* / |n*|`` with ``n*`` derived from ``depth``."""
    normals = np.asarray(normals, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if normals.shape[:2] != depth.shape:
        raise ContractError(f"normal map {normals.shape[:2]} and depth map {depth.shape} differ in size")
    derived = normals_from_depth(depth, width, mask)
    length = np.linalg.norm(normals, axis=-1)
    sel = np.ones(depth.shape, bool) if mask is None else np.asarray(mask, bool)
    if np.any(length[sel] == 0):
        raise ContractError("zero-length normal inside the mask")
    # vectors already unit to rounding are kept as given, so normalize(n*) has an exactly zero residual
    keep = np.abs(length - 1.0) <= 4e-16
    unit = np.where(keep[..., None], normals, normals / np.where(length > 0, length, 1.0)[..., None])
    return unit - derived


def loss_consistency(normals, depth, mask=None, width=None):
    """Mean squared norm of the depth/normal consistency residual."""
    res = consistency_residual(normals, depth, mask, width)
    sel = np.ones(np.shape(depth), bool) if mask is None else check_mask(mask, np.shape(depth))
    return float(np.mean(np.sum(res[sel] ** 2, axis=-1)))


def loss_shape_total(depth_pred, depth_ref, normal_pred, normal_ref, mask=None,
                     weights: ShapeLossWeights = None, width=None):
    w = weights or ShapeLossWeights()
    total = 0.0
    if w.depth:
        total += w.depth * loss_depth_l2(depth_pred, depth_ref, mask)
    if w.angular:
        total += w.angular * loss_normal_angular(normal_pred, normal_ref, mask)
    if w.consistency:
        total += w.consistency * loss_consistency(normal_pred, depth_pred, mask, width)
    return total


def loss_render_log(rendered, reference, mask=None):
    """MAE between ``log(1 + x)`` of two non-negative HDR images."""
    p, r = _pair(rendered, reference, mask)
    if np.any(p < 0) or np.any(r < 0):
        raise ContractError("radiance must be non-negative for the log rendering loss")
    return float(np.mean(np.abs(np.log1p(p) - np.log1p(r))))


def loss_sg_l2(bank_pred: SgBank, bank_ref: SgBank):
    if bank_pred.axes.shape != bank_ref.axes.shape or not np.allclose(bank_pred.axes, bank_ref.axes, atol=1e-9):
        raise ContractError("SG banks must share identical axes")
    return float(np.mean((bank_pred.amplitudes - bank_ref.amplitudes) ** 2))


def metric_mse(predicted, reference, mask=None):
    p, r = _pair(predicted, reference, mask)
    return float(np.mean((p - r) ** 2))


def scale_shift_alignment(p, r):
    """Least-squares (s, t) minimising ``sum((s * p + t - r)**2)``.

    A constant prediction cannot be scaled; it falls back to shift only.
    """
    p = p.ravel()
    r = r.ravel()
    n = p.size
    pm = p.mean()
    rm = r.mean()
    var = np.sum((p - pm) ** 2)
    if var <= 1e-300 * max(n, 1):
        return 1.0, float(rm - pm)
    s = np.sum((p - pm) * (r - rm)) / var
    return float(s), float(rm - s * pm)


def metric_mse_scale_shift(predicted, reference, mask=None):
    p, r = _pair(predicted, reference, mask)
    s, t = scale_shift_alignment(p, r)
    return float(np.mean((s * p + t - r) ** 2))


def scale_alignment(p, r):
    den = np.sum(p * p)
    if den <= 0:
        return 0.0
    return float(np.sum(p * r) / den)


def metric_mse_scale(predicted, reference, mask=None):
    """MSE after the least-squares scale of the prediction (no shift)."""
    p, r = _pair(predicted, reference, mask)
    s = scale_alignment(p, r)
    return float(np.mean((s * p - r) ** 2))


def evaluate_maps(pred, ref, mask):
    """Metric report over whichever of depth/normal/diffuse/specular/roughness both sides have."""
    report = {}
    if "depth" in pred and "depth" in ref:
        report["depth_mse"] = metric_mse(pred["depth"], ref["depth"], mask)
        report["depth_mse_scale_shift"] = metric_mse_scale_shift(pred["depth"], ref["depth"], mask)
    if "normal" in pred and "normal" in ref:
        report["normal_mse"] = metric_mse(pred["normal"], ref["normal"], mask)
        report["normal_angular"] = loss_normal_angular(pred["normal"], ref["normal"], mask)
    if "diffuse" in pred and "diffuse" in ref:
        report["diffuse_mse"] = metric_mse(pred["diffuse"], ref["diffuse"], mask)
        report["diffuse_mse_scale"] = metric_mse_scale(pred["diffuse"], ref["diffuse"], mask)
    for key in ("specular", "roughness"):
        if key in pred and key in ref:
            report[f"{key}_mse"] = metric_mse(pred[key], ref[key], mask)
    return report

"""Finite-difference verification of the analytic rendering-loss gradients."""

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError
from ..geometry import Camera, Primitive, consistent_depth_range, consistent_width, quat_to_matrix, trace_gbuffer
from ..sg import make_bank
from ..shading import FlashLight, RenderOptions, SvbrdfMaps, render
from ..validation import normalize
from .gradients import PARAM_CLASSES, FitParams, LossSpec, RenderProblem, Target, tangent_frame

STAGE_CLASSES = {
    "illumination": ("sg_amplitudes",),
    "svbrdf": ("diffuse", "specular", "roughness"),
    "joint": ("diffuse", "specular", "roughness", "normals"),
    "all": PARAM_CLASSES,
}
TOLERANCE = 1e-3
REL_STEP = 1e-4
# gradients smaller than this are compared in absolute terms
MAGNITUDE_FLOOR = 1e-7
# a step-halving disagreement above this marks a kink inside the stencil
KINK_TOL = 1e-4


@dataclass
class GradientReport:
    stage: str
    seed: int
    max_rel_error: dict = field(default_factory=dict)
    checked: dict = field(default_factory=dict)
    skipped: dict = field(default_factory=dict)
    tolerance: float = TOLERANCE

    @property
    def passed(self):
        return bool(self.max_rel_error) and all(
            self.checked[k] > 0 and self.max_rel_error[k] <= self.tolerance for k in self.max_rel_error)

    def to_text(self):
        lines = [f"stage {self.stage}", f"seed {self.seed}", f"tolerance {self.tolerance:.3g}"]
        for k in self.max_rel_error:
            lines.append(f"{k} max_rel_error {self.max_rel_error[k]:.6e} checked {self.checked[k]} "
                         f"skipped {self.skipped[k]}")
        lines.append(f"passed {str(self.passed).lower()}")
        return "\n".join(lines) + "\n"


def random_problem(seed, size=16):
    """A small random sphere scene, random parameters and mismatched targets."""
    rng = np.random.default_rng(seed)
    cam = Camera(size, size, 50.0)
    z = rng.uniform(1.5, 3.0)
    radius = 0.3 * z * np.tan(np.radians(25.0)) * 2.0
    near, far = consistent_depth_range(z, cam, span=(z - 2 * radius, z + 2 * radius))
    cam = Camera(size, size, 50.0, near=near, far=far)
    prim = Primitive("sphere", np.array([rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), -z]),
                     np.array([1.0, 0.0, 0.0, 0.0]), np.full(3, radius), 0, 1.0)
    gb = trace_gbuffer([prim], cam)
    h, w = gb.mask.shape
    bank = make_bank(rng.uniform(0.05, 1.0, (24, 3)))
    flash = FlashLight(np.full(3, 0.5 * np.pi * (z - radius) ** 2))
    q = normalize(rng.normal(size=4))
    rot = quat_to_matrix(q)

    def draw():
        n = gb.normal + rng.normal(0.0, 0.1, gb.normal.shape)
        n = np.where(gb.mask[..., None], normalize(n), 0.0)
        return FitParams(rng.uniform(0.05, 1.5, (24, 3)), rng.uniform(0.05, 0.95, (h, w, 3)),
                         rng.uniform(0.05, 0.9, (h, w, 3)), rng.uniform(0.15, 0.95, (h, w)), n)

    params = draw()
    other = draw()
    maps = SvbrdfMaps(other.diffuse, other.specular, other.roughness)
    target_full = render(gb, maps, bank.with_amplitudes(other.sg_amplitudes), flash, env_rotation=rot,
                         normals=other.normals)
    target_env = render(gb, maps, bank.with_amplitudes(other.sg_amplitudes), flash,
                        RenderOptions.from_mode("env"), env_rotation=rot, normals=other.normals)
    z_ref = float(np.median(-gb.position[gb.mask][:, 2]))
    problem = RenderProblem(gb, bank.axes, bank.sharpness, flash, rot,
                            width=consistent_width(z_ref, cam, near, far))
    targets = [Target(target_full, "full"), Target(target_env, "env")]
    return problem, params, targets


def _loss_fn(problem, spec):
    def f(packed):
        return problem.loss(packed, spec, with_grad=False)[0]
    return f


def grad_check(stage="all", seed=0, samples=200, corrupt=None, size=16) -> GradientReport:
    """Compare analytic and central-difference gradients on a random scene.

    ``corrupt`` names a parameter class whose analytic gradient is scaled by
    1.01 before comparison (a negative control for the checker itself).
    """
    if stage not in STAGE_CLASSES:
        raise ContractError(f"unknown stage {stage!r}; expected one of {sorted(STAGE_CLASSES)}")
    classes = STAGE_CLASSES[stage]
    if corrupt is not None and corrupt not in classes:
        raise ContractError(f"cannot corrupt {corrupt!r}: not a class of stage {stage!r}")
    problem, params, targets = random_problem(seed, size)
    maps_active = any(c in classes for c in ("diffuse", "specular", "roughness"))
    spec = LossSpec(targets, active=classes, consistency_weight=0.5 if "normals" in classes else 0.0,
                    smoothness_weight=0.01 if maps_active else 0.0)
    packed = problem.pack(params)
    _, grads = problem.loss(packed, spec)
    if corrupt is not None:
        grads[corrupt] = grads[corrupt] * 1.01
    f = _loss_fn(problem, spec)
    rng = np.random.default_rng([seed, 1])
    report = GradientReport(stage, seed)
    for name in classes:
        arr = packed[name]
        g = grads[name]
        worst, checked, skipped = 0.0, 0, 0
        # distinct coordinates: a pixel for normals (one tangent direction), an entry otherwise
        shape = arr.shape[:1] if name == "normals" else arr.shape
        order = rng.permutation(int(np.prod(shape)))[:samples * 3]
        for idx in zip(*(c.tolist() for c in np.unravel_index(order, shape))):
            if checked >= samples:
                break
            if name == "normals":
                pix = idx[0]
                n0 = arr[pix].copy()
                t1, _ = tangent_frame(n0[None])
                direction = t1[0]
                analytic = float(g[pix] @ direction)
                step = REL_STEP

                def at(e):
                    arr[pix] = normalize(n0 + e * direction)
                    val = f(packed)
                    arr[pix] = n0
                    return val
            else:
                x0 = float(arr[idx])
                analytic = float(g[idx])
                step = REL_STEP * max(abs(x0), 1e-2)

                def at(e):
                    arr[idx] = x0 + e
                    val = f(packed)
                    arr[idx] = x0
                    return val
            fd = (at(step) - at(-step)) / (2.0 * step)
            fd_half = (at(0.5 * step) - at(-0.5 * step)) / step
            scale = max(abs(fd), abs(fd_half), abs(analytic), MAGNITUDE_FLOOR)
            if abs(fd - fd_half) > KINK_TOL * scale:
                skipped += 1
                continue
            worst = max(worst, abs(analytic - fd) / scale)
            checked += 1
        report.max_rel_error[name] = worst
        report.checked[name] = checked
        report.skipped[name] = skipped
    return report

"""Staged per-scene fitting: illumination, then SVBRDF, then joint refinement."""

import numpy as np
from scipy.optimize import minimize

from ..errors import ContractError, NumericalError
from ..geometry import Camera, consistent_width
from ..sg import SgBank, bank_axes, bank_eval_unchecked, default_axes, default_sharpness
from ..shading import MIN_ROUGHNESS, FlashLight, SvbrdfMaps, ldr_to_linear
from .gradients import AMPLITUDE_RANGE, FitParams, LossSpec, RenderProblem, Target, grad_render_loss
from .optim import FitConfig, adam_fit

INIT_SPECULAR_GRID = (0.0, 0.02, 0.05, 0.1, 0.2, 0.35, 0.5, 0.75, 1.0)
INIT_ROUGHNESS_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
JOINT_CONSISTENCY = 0.5
# radiance of a unit-amplitude bank averaged over the sphere; used to turn an
# irradiance estimate into starting amplitudes
_FLAT_SAMPLES = 2000


def _flat_bank_radiance(axes, sharpness):
    dirs = bank_axes(_FLAT_SAMPLES)
    return float(np.mean(bank_eval_unchecked(axes, sharpness, np.ones((len(axes), 1)), dirs)))


def _as_linear(image):
    img = np.asarray(image)
    return ldr_to_linear(img) if img.dtype == np.uint8 else np.asarray(img, dtype=np.float64)


def _check_gbuffer(gbuffer):
    mask = np.asarray(gbuffer.mask, dtype=bool)
    if not mask.any():
        raise ContractError("the object mask is empty")
    return mask


def _consistency_width(gbuffer, camera):
    if camera is None:
        return None
    z = -gbuffer.position[gbuffer.mask][:, 2]
    return consistent_width(float(np.median(z)), camera, gbuffer.near, gbuffer.far)


def _problem(gbuffer, bank, flash, env_rotation, camera=None):
    return RenderProblem(gbuffer, bank.axes, bank.sharpness, flash, env_rotation,
                         width=_consistency_width(gbuffer, camera))


def _params(gbuffer, amplitudes, maps: SvbrdfMaps, normals=None):
    h, w = gbuffer.mask.shape
    return FitParams(
        np.array(amplitudes, dtype=np.float64),
        np.array(maps.diffuse, dtype=np.float64).reshape(h, w, 3),
        np.array(maps.specular, dtype=np.float64).reshape(h, w, 3),
        np.array(maps.roughness, dtype=np.float64).reshape(h, w),
        np.array(gbuffer.normal if normals is None else normals, dtype=np.float64),
    ).project()


def _run(problem, params, spec, config, stage):
    def fn(p):
        return grad_render_loss(problem, p, spec)

    try:
        return adam_fit(params, fn, config, active=spec.active)
    except NumericalError as exc:
        exc.stage = stage
        raise


def _as_target(image, mode):
    if isinstance(image, Target):
        return Target(image.image, mode, image.valid)
    return Target(image, mode)


def irradiance_albedo_proxy(noflash, gbuffer, flash_image=None, flash: FlashLight = None):
    """Lambertian albedo proxy ``noflash / E`` with one uniform irradiance ``E`` per channel.

    When the flash image is available, the flash-only difference gives a
    per-pixel albedo estimate that pins ``E``; otherwise the proxy assumes a
    mid-grey (0.5) mean albedo. ``noflash`` may be a :class:`Target` whose
    validity mask marks usable pixels.
    """
    mask = _check_gbuffer(gbuffer)
    target = _as_target(noflash, "env")
    valid = mask if target.valid is None else mask & target.valid
    if not valid.any():
        raise ContractError("no valid no-flash pixels inside the mask")
    nf = target.linear[valid]
    irr = None
    if flash_image is not None:
        flash = flash or FlashLight()
        fl = _as_linear(flash_image)[valid]
        pos = gbuffer.position[valid]
        to_light = flash.position - pos
        d2 = np.sum(to_light * to_light, axis=1)
        cos = np.sum(gbuffer.normal[valid] * to_light, axis=1) / np.sqrt(d2)
        geom = np.maximum(cos, 0.0) / (np.pi * d2)
        ok = (geom > 1e-3 * geom.max()) & np.all(fl < 0.98, axis=1)
        if ok.sum() >= 8:
            kd = (fl - nf)[ok] / (flash.intensity * geom[ok, None])
            irr = np.full(3, np.nan)
            for c in range(3):
                good = kd[:, c] > 1e-3
                if good.any():
                    irr[c] = np.median(nf[ok, c][good] / kd[good, c])
    if irr is None or not np.all(np.isfinite(irr)) or np.any(irr <= 0):
        irr = np.maximum(np.mean(nf, axis=0) / 0.5, 1e-6)
    albedo = np.clip(nf / irr, 0.0, 1.0)
    proxy = np.zeros(mask.shape + (3,))
    proxy[mask] = np.median(albedo, axis=0)
    proxy[valid] = albedo
    return proxy, irr


def _constant_bank_start(problem, maps, target, irr, flat, gbuffer):
    """Starting amplitudes: the constant bank that best explains the target.

    Rendering is linear in the amplitudes, so the least-squares scale of a
    unit-amplitude render is exact for a constant environment and accounts
    for specular reflection. Saturated LDR pixels carry no information on
    the level and are left out.
    """
    count = len(problem.axes)
    packed = problem.pack(_params(gbuffer, np.ones((count, 3)), maps))
    unit, _ = problem.shade(packed, "env")
    tgt = problem.pack_image(target.linear)
    use = np.ones(problem.n_pix, dtype=bool) if target.valid is None else problem.pack_image(target.valid)
    if target.ldr:
        use &= np.all(tgt < 0.98, axis=1)
    num = np.sum((tgt * unit)[use], axis=0)
    den = np.sum((unit * unit)[use], axis=0)
    if irr is None:
        irr = np.full(3, 0.5 * flat)
    fallback = np.asarray(irr) / flat
    scale = np.where(den > 0, num / np.where(den > 0, den, 1.0), fallback)
    return np.repeat(scale[None, :], count, axis=0)


def _illumination(flash_image, noflash, gbuffer, albedo=None, config=None, flash=None, env_rotation=None,
                  init_bank=None):
    mask = _check_gbuffer(gbuffer)
    config = config or FitConfig("illumination")
    target = _as_target(noflash, "env")
    h, w = mask.shape
    axes, sharp = default_axes(), default_sharpness()
    irr = None
    if isinstance(albedo, SvbrdfMaps):
        maps = albedo
    else:
        if albedo is None:
            albedo, irr = irradiance_albedo_proxy(target, gbuffer, flash_image, flash)
        maps = SvbrdfMaps(np.asarray(albedo, dtype=np.float64), np.zeros((h, w, 3)), np.ones((h, w)))
    problem = _problem(gbuffer, SgBank(np.ones((len(axes), 3)), axes, sharp), flash, env_rotation)
    if init_bank is not None:
        amps = np.array(init_bank.amplitudes)
    else:
        amps = _constant_bank_start(problem, maps, target, irr, _flat_bank_radiance(axes, sharp), gbuffer)
    amps = np.clip(amps, *AMPLITUDE_RANGE)
    bank = SgBank(amps, axes, sharp)
    spec = LossSpec([target], active=("sg_amplitudes",))
    params = _params(gbuffer, amps, maps)
    res = _run(problem, params, spec, config, "illumination")
    return bank.with_amplitudes(res.params.sg_amplitudes), res


def fit_illumination(flash_image, noflash, gbuffer, albedo=None, config=None, flash=None,
                     env_rotation=None) -> SgBank:
    """Fit the 24 SG amplitudes to the no-flash image with shape (and albedo) fixed.

    ``albedo`` may be an (H, W, 3) diffuse map, full :class:`SvbrdfMaps`, or
    None for the irradiance-normalised proxy.
    """
    return _illumination(flash_image, noflash, gbuffer, albedo, config, flash, env_rotation)[0]


def _diffuse_solve(problem, packed, targets):
    """Per-pixel least-squares diffuse for fixed specular/roughness (render is linear in it)."""
    num = np.zeros((problem.n_pix, 3))
    den = np.zeros((problem.n_pix, 3))
    zero = dict(packed, diffuse=np.zeros_like(packed["diffuse"]))
    unit = dict(packed, diffuse=np.ones_like(packed["diffuse"]))
    for target in targets:
        y = problem.pack_image(target.linear)
        base, _ = problem.shade(zero, target.mode)
        gain = problem.shade(unit, target.mode)[0] - base
        use = y < 1.0 if target.ldr else np.ones_like(y, dtype=bool)
        if target.valid is not None:
            use = use & problem.pack_image(target.valid)[:, None]
        num += np.where(use, gain * (y - base), 0.0)
        den += np.where(use, gain * gain, 0.0)
    return np.clip(np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.5), 0.0, 1.0)


def initial_maps(flash_image, gbuffer, bank: SgBank, flash=None, env_rotation=None, noflash=None,
                 problem=None):
    """Starting SVBRDF from a global search.

    Specular level and roughness are searched as two object-wide scalars
    (coarse grid, then a bounded Powell refinement); for each candidate the
    diffuse map is solved per pixel in closed form. The best candidate is
    the one with the lowest rendering loss.
    """
    mask = _check_gbuffer(gbuffer)
    h, w = mask.shape
    problem = problem or _problem(gbuffer, bank, flash, env_rotation)
    targets = [Target(flash_image, "full")]
    if noflash is not None:
        targets.append(_as_target(noflash, "env"))
    spec = LossSpec(targets, active=("diffuse", "specular", "roughness"))
    n = problem.n_pix
    base = {"sg_amplitudes": np.array(bank.amplitudes, dtype=np.float64),
            "normals": gbuffer.normal.reshape(-1, 3)[problem.idx].astype(np.float64)}

    def candidate(x):
        ks, r = float(np.clip(x[0], 0.0, 1.0)), float(np.clip(x[1], MIN_ROUGHNESS, 1.0))
        packed = dict(base, specular=np.full((n, 3), ks), roughness=np.full(n, r), diffuse=np.zeros((n, 3)))
        packed["diffuse"] = _diffuse_solve(problem, packed, targets)
        return packed

    def objective(x):
        return problem.loss(candidate(x), spec, with_grad=False)[0]

    grid = [(ks, r) for ks in INIT_SPECULAR_GRID for r in INIT_ROUGHNESS_GRID]
    scores = [objective(x) for x in grid]
    x0 = np.array(grid[int(np.argmin(scores))])
    best = minimize(objective, x0, method="Powell", bounds=[(0.0, 1.0), (MIN_ROUGHNESS, 1.0)],
                    options={"xtol": 1e-3, "ftol": 1e-7, "maxfev": 200})
    x = best.x if best.fun <= min(scores) else x0
    packed = candidate(x)
    out = FitParams(np.array(bank.amplitudes), np.zeros((h, w, 3)), np.zeros((h, w, 3)), np.zeros((h, w)),
                    np.array(gbuffer.normal, dtype=np.float64))
    out = problem.unpack(packed, out)
    return _masked_maps(out, mask)


def _masked_maps(p: FitParams, mask):
    m = mask[..., None]
    return SvbrdfMaps(np.where(m, p.diffuse, 0.0), np.where(m, p.specular, 0.0),
                      np.where(mask, p.roughness, 0.0))


def _svbrdf(flash_image, gbuffer, bank, flash=None, config=None, env_rotation=None, init=None, noflash=None):
    mask = _check_gbuffer(gbuffer)
    config = config or FitConfig("svbrdf")
    problem = _problem(gbuffer, bank, flash, env_rotation)
    if init is None:
        init = initial_maps(flash_image, gbuffer, bank, flash, env_rotation, noflash, problem)
    targets = [Target(flash_image, "full")]
    if noflash is not None:
        targets.append(_as_target(noflash, "env"))
    spec = LossSpec(targets, active=("diffuse", "specular", "roughness"),
                    smoothness_weight=config.smoothness_weight)
    params = _params(gbuffer, bank.amplitudes, init)
    res = _run(problem, params, spec, config, "svbrdf")
    return _masked_maps(res.params, mask), res


def fit_svbrdf(flash_image, gbuffer, bank: SgBank, flash: FlashLight = None, config=None,
               env_rotation=None, init: SvbrdfMaps = None, noflash=None) -> SvbrdfMaps:
    """Fit per-pixel diffuse, specular and roughness to the flash image.

    ``noflash`` (aligned to the flash view, or a :class:`Target` carrying a
    validity mask) adds the environment-only shot as a second target, which
    separates diffuse from specular far better than the flash shot alone.
    """
    return _svbrdf(flash_image, gbuffer, bank, flash, config, env_rotation, init, noflash)[0]


def _joint(flash_image, gbuffer, maps, bank, flash=None, config=None, env_rotation=None, camera=None,
           freeze_maps=False, normals=None, noflash=None):
    mask = _check_gbuffer(gbuffer)
    config = config or FitConfig("joint")
    active = ("normals",) if freeze_maps else ("diffuse", "specular", "roughness", "normals")
    smooth = 0.0 if freeze_maps else config.smoothness_weight
    problem = _problem(gbuffer, bank, flash, env_rotation, camera)
    targets = [Target(flash_image, "full")]
    if noflash is not None:
        targets.append(_as_target(noflash, "env"))
    spec = LossSpec(targets, active=active, consistency_weight=JOINT_CONSISTENCY, smoothness_weight=smooth)
    params = _params(gbuffer, bank.amplitudes, maps, normals)
    res = _run(problem, params, spec, config, "joint")
    out_normals = np.where(mask[..., None], res.params.normals, 0.0)
    return (out_normals, _masked_maps(res.params, mask)), res


def refine_joint(flash_image, gbuffer, maps: SvbrdfMaps, bank: SgBank, flash: FlashLight = None,
                 config=None, env_rotation=None, camera: Camera = None, freeze_maps=False, normals=None,
                 noflash=None):
    """Jointly refine normals and SVBRDF; depth and lighting stay fixed.

    ``normals`` overrides the G-buffer normals as the starting point. With
    ``camera`` given, the consistency term uses the width that makes
    depth-derived normals metric for the G-buffer's depth range. ``noflash``
    adds the aligned no-flash shot as a second target.
    """
    return _joint(flash_image, gbuffer, maps, bank, flash, config, env_rotation, camera, freeze_maps,
                  normals, noflash)[0]

"""Analytic gradients of the rendering objective.

The forward formulas mirror :mod:`flashsg.shading` exactly (same kernels,
same clamps); the backward passes are written out by hand. Normal gradients
are returned in ambient 3-space; only their tangential part is meaningful
because normals are re-normalised after every update.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from ..errors import ContractError
from ..geometry import normals_from_depth
from ..sg import integral_factor, integral_factor_derivative, product_log_scale, product_sharpness
from ..shading import (COSINE_AMPLITUDE, COSINE_SHARPNESS, MIN_ROUGHNESS, MIN_WARP_COS, FlashLight,
                       fresnel_dspecular, fresnel_grazing, fresnel_schlick, ldr_to_linear)
from ..validation import normalize

PARAM_CLASSES = ("sg_amplitudes", "diffuse", "specular", "roughness", "normals")
MAP_CLASSES = ("diffuse", "specular", "roughness")
AMPLITUDE_RANGE = (0.0, 2.0)


@dataclass
class FitParams:
    """Free variables of the inverse problem (image-shaped maps plus the SG bank)."""

    sg_amplitudes: np.ndarray
    diffuse: np.ndarray
    specular: np.ndarray
    roughness: np.ndarray
    normals: np.ndarray

    def copy(self):
        return FitParams(*(np.array(getattr(self, k), dtype=np.float64, copy=True) for k in PARAM_CLASSES))

    def get(self, name):
        return getattr(self, name)

    def project(self, mask=None):
        """Clamp every class onto its box and re-normalise normals, in place."""
        np.clip(self.sg_amplitudes, *AMPLITUDE_RANGE, out=self.sg_amplitudes)
        np.clip(self.diffuse, 0.0, 1.0, out=self.diffuse)
        np.clip(self.specular, 0.0, 1.0, out=self.specular)
        np.clip(self.roughness, MIN_ROUGHNESS, 1.0, out=self.roughness)
        length = np.linalg.norm(self.normals, axis=-1, keepdims=True)
        self.normals /= np.where(length > 0, length, 1.0)
        return self


@dataclass
class Target:
    """One image the rendering loss compares against.

    ``mode`` selects the light transport terms (``full``, ``flash``, ``env``).
    LDR targets (uint8) are linearised and the prediction is clipped at 1 to
    model sensor saturation. ``valid`` optionally restricts the pixels that
    count (e.g. after warping a second shot into this view).
    """

    image: np.ndarray
    mode: str = "full"
    valid: np.ndarray = None

    def __post_init__(self):
        if self.mode not in ("full", "flash", "env"):
            raise ContractError(f"unknown target mode {self.mode!r}")
        img = np.asarray(self.image)
        self.ldr = img.dtype == np.uint8
        self.linear = ldr_to_linear(img) if self.ldr else np.asarray(img, dtype=np.float64)
        if np.any(self.linear < 0) or not np.all(np.isfinite(self.linear)):
            raise ContractError("target radiance must be finite and non-negative")
        if self.valid is not None:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.linear.shape[:2]:
                raise ContractError("target validity mask does not match the image size")


@dataclass
class LossSpec:
    targets: list
    active: tuple = PARAM_CLASSES
    consistency_weight: float = 0.0
    smoothness_weight: float = 0.0

    def __post_init__(self):
        unknown = set(self.active) - set(PARAM_CLASSES)
        if unknown:
            raise ContractError(f"unknown parameter classes {sorted(unknown)}")
        if self.consistency_weight and "normals" not in self.active:
            raise ContractError("the consistency term references normals, which are frozen")
        if self.smoothness_weight and not set(MAP_CLASSES) & set(self.active):
            raise ContractError("the smoothness term references SVBRDF maps, which are all frozen")
        if self.consistency_weight < 0 or self.smoothness_weight < 0:
            raise ContractError("loss weights must be non-negative")


def _kernel_and_grads(lam1, lam2, cos12):
    """SG inner-product kernel and its derivatives w.r.t. cos12 and lam2."""
    m = product_sharpness(lam1, lam2, cos12)
    q = product_log_scale(lam1, lam2, cos12, m)
    e = np.exp(q)
    hf = integral_factor(m)
    dh = integral_factor_derivative(m)
    k = 2.0 * math.pi * e * hf
    safe_m = np.where(m > 0, m, 1.0)
    dm_dc = np.where(m > 0, lam1 * lam2 / safe_m, 0.0)
    dm_dl2 = np.where(m > 0, (lam2 + lam1 * cos12) / safe_m, 0.0)
    dk_dc = 2.0 * math.pi * e * (hf + dh) * dm_dc
    dk_dl2 = 2.0 * math.pi * e * (hf * (dm_dl2 - 1.0) + dh * dm_dl2)
    return k, dk_dc, dk_dl2, m


class RenderProblem:
    """Fixed geometry and lighting context for evaluating the objective.

    Works on the masked pixels of a G-buffer; maps are packed to (N, C).
    """

    def __init__(self, gbuffer, bank_axes, bank_sharpness, flash: FlashLight = None,
                 env_rotation=None, depth=None, width=None):
        self.mask = np.asarray(gbuffer.mask, dtype=bool)
        if not self.mask.any():
            raise ContractError("the object mask is empty")
        self.shape = self.mask.shape
        self.idx = np.flatnonzero(self.mask)
        self.n_pix = self.idx.size
        self.position = gbuffer.position.reshape(-1, 3)[self.idx]
        self.view = normalize(-self.position)
        self.axes = np.asarray(bank_axes, dtype=np.float64)
        self.bank_sharpness = float(bank_sharpness)
        self.flash = flash or FlashLight()
        self.env_rotation = None if env_rotation is None else np.asarray(env_rotation, dtype=np.float64)
        to_light = self.flash.position - self.position
        self.dist2 = np.sum(to_light * to_light, axis=1)
        self.light = to_light / np.sqrt(self.dist2)[:, None]
        self.half = normalize(self.light + self.view)
        self.vdh = np.clip(np.sum(self.view * self.half, axis=1), 0.0, 1.0)
        depth = gbuffer.depth if depth is None else depth
        self.width = self.shape[1] if width is None else width
        self.derived_normals = normals_from_depth(depth, self.width, self.mask).reshape(-1, 3)[self.idx]
        self._pairs = self._neighbour_pairs()
        self._geo_cache = None
        self._lobe_cache = None
        self._target_cache = {}

    def _neighbour_pairs(self):
        h, w = self.shape
        pos = np.full(h * w, -1)
        pos[self.idx] = np.arange(self.n_pix)
        pos = pos.reshape(h, w)
        a = np.concatenate([pos[:, :-1].ravel(), pos[:-1, :].ravel()])
        b = np.concatenate([pos[:, 1:].ravel(), pos[1:, :].ravel()])
        keep = (a >= 0) & (b >= 0)
        return a[keep], b[keep]

    # -- packing ---------------------------------------------------------

    def pack(self, params: FitParams):
        return {
            "sg_amplitudes": np.array(params.sg_amplitudes, dtype=np.float64),
            "diffuse": params.diffuse.reshape(-1, 3)[self.idx].astype(np.float64),
            "specular": params.specular.reshape(-1, 3)[self.idx].astype(np.float64),
            "roughness": params.roughness.reshape(-1)[self.idx].astype(np.float64),
            "normals": params.normals.reshape(-1, 3)[self.idx].astype(np.float64),
        }

    def unpack(self, packed, template: FitParams) -> FitParams:
        out = template.copy()
        out.sg_amplitudes = np.array(packed["sg_amplitudes"], dtype=np.float64)
        for name in ("diffuse", "specular", "roughness", "normals"):
            arr = getattr(out, name)
            flat = arr.reshape(-1, *arr.shape[2:])
            flat[self.idx] = packed[name]
            setattr(out, name, flat.reshape(arr.shape))
        return out

    def pack_image(self, image):
        img = np.asarray(image)
        return img.reshape(-1, img.shape[-1])[self.idx] if img.ndim == 3 else img.reshape(-1)[self.idx]

    # -- forward / backward ----------------------------------------------

    def components(self, p, modes):
        """Forward pass of the light components needed by ``modes``.

        Returns ``{"flash"|"env": (radiance, backward)}``; each backward maps
        an upstream (N, 3) gradient into a gradient dict.
        """
        n = p["normals"]
        kd, ks = p["diffuse"], p["specular"]
        r = np.maximum(p["roughness"], MIN_ROUGHNESS)
        parts = {}
        if any(m in ("full", "flash") for m in modes):
            parts["flash"] = self._flash(n, kd, ks, r)
        if any(m in ("full", "env") for m in modes):
            parts["env"] = self._env(n, kd, ks, r, p["sg_amplitudes"])
        return parts

    @staticmethod
    def _uses(mode):
        return {"full": ("flash", "env"), "flash": ("flash",), "env": ("env",)}[mode]

    def _backward(self, p, parts, upstream, active):
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        for name, g in upstream.items():
            parts[name][1](g, grads, active)
        grads["roughness"] *= p["roughness"] >= MIN_ROUGHNESS
        return grads

    def shade(self, p, mode="full"):
        """Radiance of the packed parameters and a closure mapping an upstream
        gradient (N, 3) to gradients of every packed class."""
        parts = self.components(p, (mode,))
        out = sum(parts[c][0] for c in self._uses(mode))

        def backward(g, active=PARAM_CLASSES):
            return self._backward(p, parts, {c: g for c in self._uses(mode)}, active)

        return out, backward

    def _flash(self, n, kd, ks, r):
        l, v, h = self.light, self.view, self.half
        ndl = np.sum(n * l, axis=1)
        ndv = np.sum(n * v, axis=1)
        ndh = np.sum(n * h, axis=1)
        a2 = r**4
        den = ndh * ndh * (a2 - 1.0) + 1.0
        d = a2 / (math.pi * den * den)
        f5 = (1.0 - self.vdh) ** 5
        fres = fresnel_schlick(ks, f5)
        pl = np.maximum(ndl, 0.0)
        pv = np.maximum(ndv, 0.0)
        sl = np.sqrt(pv * pv * (1.0 - a2) + a2)
        sv = np.sqrt(pl * pl * (1.0 - a2) + a2)
        vd = pl * sl + pv * sv
        ok = (ndl > 0) & (ndv > 0)
        vis = 0.5 / np.where(ok, vd, 1.0)
        spec = d * vis
        brdf = kd / math.pi + spec[:, None] * fres
        cosw = pl / self.dist2
        inten = self.flash.intensity
        out = np.where(ok[:, None], inten * brdf * cosw[:, None], 0.0)

        def back(g, grads, active):
            g = np.where(ok[:, None], g, 0.0)
            g_brdf = g * inten * cosw[:, None]
            grads["diffuse"] += g_brdf / math.pi
            g_fres = g_brdf * spec[:, None]
            grads["specular"] += g_fres * fresnel_dspecular(ks, f5)
            g_spec = np.sum(g_brdf * fres, axis=1)
            g_pl = np.sum(g * inten * brdf, axis=1) / self.dist2
            g_d = g_spec * vis
            g_vis = g_spec * d
            g_vd = -g_vis * vis / np.where(ok, vd, 1.0)
            safe_sl = np.where(sl > 0, sl, 1.0)
            safe_sv = np.where(sv > 0, sv, 1.0)
            g_pl += g_vd * (sl + pv * pl * (1.0 - a2) / safe_sv)
            g_pv = g_vd * (pl * pv * (1.0 - a2) / safe_sl + sv)
            g_a2 = g_vd * (pl * (1.0 - pv * pv) / (2.0 * safe_sl) + pv * (1.0 - pl * pl) / (2.0 * safe_sv))
            g_a2 += g_d * (1.0 / (math.pi * den * den) - 2.0 * a2 * ndh * ndh / (math.pi * den**3))
            g_ndh = g_d * (-4.0 * a2 * ndh * (a2 - 1.0) / (math.pi * den**3))
            grads["roughness"] += g_a2 * 4.0 * r**3
            grads["normals"] += g_pl[:, None] * l + g_pv[:, None] * v + g_ndh[:, None] * h

        return out, back

    def _env_geometry(self, n):
        """Quantities that depend on the normals only (cached while they stay fixed)."""
        key = self._geo_cache
        if key is not None and np.array_equal(key[0], n):
            return key[1]
        rot = self.env_rotation
        nr, vr = (n, self.view) if rot is None else (n @ rot.T, self.view @ rot.T)
        c = np.sum(nr * vr, axis=1)
        tn = nr @ self.axes.T
        kdiff, dkdiff_dc, _, _ = _kernel_and_grads(self.bank_sharpness, COSINE_SHARPNESS, tn)
        axis_s = 2.0 * c[:, None] * nr - vr
        geo = dict(nr=nr, vr=vr, c=c, front=c > 0, cc=np.maximum(c, MIN_WARP_COS), tn=tn,
                   kdiff=COSINE_AMPLITUDE * kdiff, dkdiff_dc=COSINE_AMPLITUDE * dkdiff_dc,
                   axis_s=axis_s, t=axis_s @ self.axes.T)
        self._geo_cache = (n.copy(), geo)
        self._lobe_cache = None
        return geo

    def _env_lobes(self, geo, r):
        """Specular-lobe kernels; depend on normals and roughness."""
        key = self._lobe_cache
        if key is not None and np.array_equal(key[0], r):
            return key[1]
        lb = self.bank_sharpness
        c, cc, t, tn = geo["c"], geo["cc"], geo["t"], geo["tn"]
        a2 = r**4
        ls = 1.0 / (2.0 * a2 * cc)
        lsc = ls[:, None]
        kspec, dk_dt, dk_dls, m = _kernel_and_grads(lb, lsc, t)
        safe_m = np.where(m > 0, m, 1.0)
        num = lb * tn + lsc * c[:, None]
        cosr = num / safe_m
        kk = np.sqrt(cc * cc * (1.0 - a2) + a2)
        lobes = dict(a2=a2, ls=ls, kspec=kspec, dk_dt=dk_dt, dk_dls=dk_dls, m=m, safe_m=safe_m, num=num,
                     cosr=cosr, cosf=np.maximum(cosr, 0.0), kk=kk,
                     pscale=1.0 / (4.0 * math.pi * a2 * cc * kk))
        lobes["wsp"] = kspec * lobes["cosf"]
        self._lobe_cache = (r.copy(), lobes)
        return lobes

    def _env(self, n, kd, ks, r, amps):
        axes, lb = self.axes, self.bank_sharpness
        geo = self._env_geometry(n)
        lo = self._env_lobes(geo, r)
        c, cc, front = geo["c"], geo["cc"], geo["front"]
        kdiff, wsp = geo["kdiff"], lo["wsp"]
        e_diff = kdiff @ amps
        f5 = (1.0 - cc) ** 5
        fres = fresnel_schlick(ks, f5)
        pscale = lo["pscale"]
        amp = fres * pscale[:, None]
        s_spec = wsp @ amps
        out = np.where(front[:, None], kd / math.pi * e_diff + amp * s_spec, 0.0)

        def back(g, grads, active):
            nr, vr, tn, t = geo["nr"], geo["vr"], geo["tn"], geo["t"]
            a2, ls, kk, m, safe_m = lo["a2"], lo["ls"], lo["kk"], lo["m"], lo["safe_m"]
            lsc = ls[:, None]
            g = np.where(front[:, None], g, 0.0)
            # diffuse
            grads["diffuse"] += g * e_diff / math.pi
            g_ed = g * kd / math.pi
            grads["sg_amplitudes"] += kdiff.T @ g_ed
            g_s = g * amp
            grads["sg_amplitudes"] += wsp.T @ g_s
            g_amp = g * s_spec
            g_fres = g_amp * pscale[:, None]
            grads["specular"] += g_fres * fresnel_dspecular(ks, f5)
            if "roughness" not in active and "normals" not in active:
                return
            g_tn = (g_ed @ amps.T) * geo["dkdiff_dc"]
            # specular lobe
            g_w = g_s @ amps.T
            g_k = g_w * lo["cosf"]
            g_cosr = g_w * lo["kspec"] * (lo["cosr"] > 0)
            g_num = g_cosr / safe_m
            g_m = -g_cosr * lo["num"] / (safe_m * safe_m)
            g_tn += g_num * lb
            g_ls = np.sum(g_num * c[:, None], axis=1)
            g_c = np.sum(g_num * lsc, axis=1)
            g_ls += np.sum(g_m * np.where(m > 0, (lsc + lb * t) / safe_m, 0.0), axis=1)
            g_t = g_m * np.where(m > 0, lb * lsc / safe_m, 0.0)
            g_t += g_k * lo["dk_dt"]
            g_ls += np.sum(g_k * lo["dk_dls"], axis=1)
            g_axis = g_t @ axes
            g_n = 2.0 * c[:, None] * g_axis
            g_c += 2.0 * np.sum(nr * g_axis, axis=1)
            g_p = np.sum(g_amp * fres, axis=1)
            g_cc = np.sum(g_fres * (fresnel_grazing(ks) - ks), axis=1) * (-5.0) * (1.0 - cc) ** 4
            g_kk = -g_p * pscale / kk
            g_cc += -g_p * pscale / cc + g_kk * cc * (1.0 - a2) / kk
            g_a2 = -g_p * pscale / a2 + g_kk * (1.0 - cc * cc) / (2.0 * kk)
            g_a2 += -g_ls * ls / a2
            g_cc += -g_ls * ls / cc
            g_c += g_cc * (c > MIN_WARP_COS)
            g_n += g_c[:, None] * vr + g_tn @ axes
            grads["roughness"] += g_a2 * 4.0 * r**3
            if self.env_rotation is not None:
                g_n = g_n @ self.env_rotation
            grads["normals"] += g_n

        return out, back

    # -- objective -------------------------------------------------------

    def loss(self, p, spec: LossSpec, with_grad=True):
        """Objective value and (optionally) gradients of the packed parameters."""
        total = 0.0
        grads = {k: np.zeros_like(v) for k, v in p.items()} if with_grad else None
        parts = self.components(p, [t.mode for t in spec.targets])
        upstream = {}
        for target in spec.targets:
            ref, use, count = self._packed_target(target)
            if count == 0:
                continue
            norm = 1.0 / (3.0 * count)
            pred = sum(parts[c][0] for c in self._uses(target.mode))
            eff = np.minimum(pred, 1.0) if target.ldr else pred
            diff = np.log1p(eff) - np.log1p(ref)
            if target.valid is not None:
                diff = diff * use[:, None]
            total += float(np.sum(np.abs(diff))) * norm
            if with_grad:
                g_pred = np.sign(diff) / (1.0 + eff) * norm
                if target.ldr:
                    g_pred = g_pred * (pred < 1.0)
                for c in self._uses(target.mode):
                    upstream[c] = upstream[c] + g_pred if c in upstream else g_pred
        if with_grad and upstream:
            g = self._backward(p, parts, upstream, spec.active)
            for k in grads:
                grads[k] += g[k]
        if spec.consistency_weight:
            val, g_n = self._consistency(p["normals"], with_grad)
            total += spec.consistency_weight * val
            if with_grad:
                grads["normals"] += spec.consistency_weight * g_n
        if spec.smoothness_weight:
            val, g_maps = self._smoothness(p, spec.active, with_grad)
            total += spec.smoothness_weight * val
            if with_grad:
                for k, gk in g_maps.items():
                    grads[k] += spec.smoothness_weight * gk
        if with_grad:
            for k in PARAM_CLASSES:
                if k not in spec.active:
                    grads[k][...] = 0.0
        return total, grads

    def _packed_target(self, target):
        hit = self._target_cache.get(id(target))
        if hit is not None and hit[0] is target:
            return hit[1]
        ref = self.pack_image(target.linear)
        if ref.shape != (self.n_pix, 3):
            raise ContractError("target images must be RGB at the G-buffer resolution")
        use = None if target.valid is None else self.pack_image(target.valid)
        count = self.n_pix if use is None else int(use.sum())
        self._target_cache[id(target)] = (target, (ref, use, count))
        return ref, use, count

    def _consistency(self, n, with_grad):
        length = np.linalg.norm(n, axis=1)
        u = n / length[:, None]
        res = u - self.derived_normals
        val = float(np.mean(np.sum(res * res, axis=1)))
        if not with_grad:
            return val, None
        g_u = 2.0 * res / self.n_pix
        g_n = (g_u - u * np.sum(u * g_u, axis=1)[:, None]) / length[:, None]
        return val, g_n

    def _smoothness(self, p, active, with_grad):
        a, b = self._pairs
        if a.size == 0:
            return 0.0, {}
        val = 0.0
        grads = {}
        for name in MAP_CLASSES:
            if name not in active:
                continue
            arr = p[name]
            d = arr[a] - arr[b]
            val += float(np.sum(np.abs(d))) / a.size
            if with_grad:
                s = (np.sign(d) / a.size).reshape(a.size, -1)
                g = np.stack([np.bincount(a, s[:, k], self.n_pix) - np.bincount(b, s[:, k], self.n_pix)
                              for k in range(s.shape[1])], axis=-1)
                grads[name] = g.reshape(arr.shape)
        return val, grads


def tangent_frame(n):
    """Two unit tangents orthogonal to each (unit) normal, built deterministically."""
    helper = np.where(np.abs(n[:, :1]) < 0.9, np.array([[1.0, 0.0, 0.0]]), np.array([[0.0, 1.0, 0.0]]))
    t1 = normalize(np.cross(n, helper))
    t2 = np.cross(n, t1)
    return t1, t2


def grad_render_loss(problem: RenderProblem, params: FitParams, spec: LossSpec, classes=None):
    """Loss value and image-shaped gradients aligned with ``params``.

    ``classes`` restricts the request; asking for a class the spec freezes is
    a contract error.
    """
    if classes is not None:
        frozen = set(classes) - set(spec.active)
        if frozen:
            raise ContractError(f"requested gradients for frozen parameter classes {sorted(frozen)}")
    packed = problem.pack(params)
    value, g = problem.loss(packed, spec)
    zero = FitParams(np.zeros_like(params.sg_amplitudes), np.zeros_like(params.diffuse),
                     np.zeros_like(params.specular), np.zeros_like(params.roughness),
                     np.zeros_like(params.normals))
    return value, problem.unpack(g, zero)

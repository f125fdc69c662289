"""Cook-Torrance shading under a co-located flash and an SG environment.

The array kernels at the top operate on flattened pixel sets so the image
renderer and the gradient code share one set of formulas.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import math

import numpy as np

from .errors import ContractError, DegenerateGeometryError
from .sg import SgBank, SphericalGaussian, bank_axes, bank_eval_unchecked, inner_product_kernel, product_sharpness
from .validation import check_rgb, check_vectors, normalize

MIN_ROUGHNESS = 0.01
# clamped-cosine lobe as an SG; amplitude chosen so the lobe integrates to pi
COSINE_SHARPNESS = 2.133
COSINE_AMPLITUDE = COSINE_SHARPNESS / (2.0 * -math.expm1(-2.0 * COSINE_SHARPNESS))
# floor on dot(h, v) in the specular warp
MIN_WARP_COS = 1e-4
# reflectance below this has its grazing Fresnel boost faded out (F0 = 0 means no specular at all)
GRAZING_F0 = 0.02
# pixels per work item in render()
PIXEL_BLOCK = 4096


@dataclass(frozen=True)
class BrdfSample:
    diffuse: np.ndarray
    specular: np.ndarray
    roughness: float

    def __post_init__(self):
        object.__setattr__(self, "diffuse", check_rgb(self.diffuse, "diffuse", 0.0, 1.0))
        object.__setattr__(self, "specular", check_rgb(self.specular, "specular", 0.0, 1.0))
        r = float(self.roughness)
        if not (MIN_ROUGHNESS <= r <= 1.0):
            raise ContractError(f"roughness must lie in [{MIN_ROUGHNESS}, 1], got {r}")
        object.__setattr__(self, "roughness", r)


@dataclass(frozen=True)
class FlashLight:
    intensity: np.ndarray = (1.0, 1.0, 1.0)
    position: np.ndarray = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "intensity", check_rgb(self.intensity, "intensity", low=0.0))
        object.__setattr__(self, "position", check_vectors(self.position, "position"))

    def __eq__(self, other):
        if not isinstance(other, FlashLight):
            return NotImplemented
        return np.array_equal(self.intensity, other.intensity) and np.array_equal(self.position, other.position)

    __hash__ = None


@dataclass(frozen=True)
class ShadingPoint:
    position: np.ndarray
    normal: np.ndarray
    view: np.ndarray = None

    def __post_init__(self):
        p = check_vectors(self.position, "position")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "normal", check_vectors(self.normal, "normal", unit=True))
        view = self.view
        if view is None:
            dist = np.linalg.norm(p)
            if dist < 1e-12:
                raise DegenerateGeometryError("shading point coincides with the camera")
            view = -p / dist
        object.__setattr__(self, "view", check_vectors(view, "view", unit=True))


@dataclass
class SvbrdfMaps:
    """Per-pixel Cook-Torrance parameters: diffuse/specular (H, W, 3), roughness (H, W)."""

    diffuse: np.ndarray
    specular: np.ndarray
    roughness: np.ndarray

    def __post_init__(self):
        self.diffuse = np.asarray(self.diffuse, dtype=np.float64)
        self.specular = np.asarray(self.specular, dtype=np.float64)
        self.roughness = np.asarray(self.roughness, dtype=np.float64)
        h, w = self.roughness.shape
        if self.diffuse.shape != (h, w, 3) or self.specular.shape != (h, w, 3):
            raise ContractError("diffuse/specular must be (H, W, 3) matching roughness (H, W)")

    @property
    def shape(self):
        return self.roughness.shape

    def copy(self):
        return SvbrdfMaps(self.diffuse.copy(), self.specular.copy(), self.roughness.copy())


@dataclass(frozen=True)
class RenderOptions:
    flash: bool = True
    environment: bool = True
    # None selects the SG fast path; an integer selects brute-force quadrature
    reference_samples: int = None

    @classmethod
    def from_mode(cls, mode, reference_samples=None):
        modes = {"full": (True, True), "flash": (True, False), "env": (False, True)}
        if mode not in modes:
            raise ContractError(f"unknown render mode {mode!r}; expected one of {sorted(modes)}")
        f, e = modes[mode]
        return cls(flash=f, environment=e, reference_samples=reference_samples)


# ---------------------------------------------------------------------------
# array kernels (N pixels)


def _dot(a, b):
    return np.einsum("...i,...i->...", a, b)


def fresnel_grazing(specular):
    """Grazing reflectance of the Schlick curve: 1, fading linearly to 0 below ``GRAZING_F0``."""
    return np.minimum(1.0, specular / GRAZING_F0)


def fresnel_schlick(specular, f5):
    """Schlick Fresnel; ``f5`` is ``(1 - cos)**5`` with trailing channel axis added here."""
    return specular + (fresnel_grazing(specular) - specular) * f5[..., None]


def fresnel_dspecular(specular, f5):
    return 1.0 + ((specular < GRAZING_F0) / GRAZING_F0 - 1.0) * f5[..., None]


def cook_torrance(n, l, v, diffuse, specular, roughness):
    """Pointwise GGX / Schlick / height-correlated Smith BRDF, shape (N, 3)."""
    ndl = _dot(n, l)
    ndv = _dot(n, v)
    h = normalize(l + v)
    ndh = _dot(n, h)
    vdh = np.clip(_dot(v, h), 0.0, 1.0)
    a2 = roughness**4
    den = ndh * ndh * (a2 - 1.0) + 1.0
    d = a2 / (math.pi * den * den)
    f = fresnel_schlick(specular, (1.0 - vdh) ** 5)
    pl = np.maximum(ndl, 0.0)
    pv = np.maximum(ndv, 0.0)
    vis_den = pl * np.sqrt(pv * pv * (1.0 - a2) + a2) + pv * np.sqrt(pl * pl * (1.0 - a2) + a2)
    vis = 0.5 / np.where(vis_den > 0, vis_den, 1.0)
    value = diffuse / math.pi + (d * vis)[..., None] * f
    ok = (ndl > 0) & (ndv > 0)
    return np.where(ok[..., None], value, 0.0)


def flash_kernel(position, n, diffuse, specular, roughness, flash_position, intensity):
    to_light = flash_position - position
    dist2 = _dot(to_light, to_light)
    if np.any(dist2 < 1e-12):
        raise DegenerateGeometryError("shading point coincides with the flash")
    l = to_light / np.sqrt(dist2)[..., None]
    v = normalize(-position)
    f = cook_torrance(n, l, v, diffuse, specular, roughness)
    return intensity * f * (np.maximum(_dot(n, l), 0.0) / dist2)[..., None]


def specular_lobe_params(n, v, specular, roughness):
    """Axis, sharpness and RGB amplitude of the warped specular SG per pixel."""
    c = _dot(n, v)
    cc = np.maximum(c, MIN_WARP_COS)
    a2 = roughness**4
    sharp = 1.0 / (2.0 * a2 * cc)
    axis = 2.0 * c[..., None] * n - v
    k = np.sqrt(cc * cc * (1.0 - a2) + a2)
    vis = 1.0 / (4.0 * cc * k)
    fres = fresnel_schlick(specular, (1.0 - cc) ** 5)
    amp = fres * (vis / (math.pi * a2))[..., None]
    return axis, sharp, amp


def env_kernel(n, v, diffuse, specular, roughness, axes, bank_sharpness, amplitudes,
               include_diffuse=True, include_specular=True):
    c = _dot(n, v)
    out = np.zeros(n.shape[:-1] + (3,))
    tn = n @ axes.T
    if include_diffuse:
        k = COSINE_AMPLITUDE * inner_product_kernel(bank_sharpness, COSINE_SHARPNESS, tn)
        out += diffuse / math.pi * (k @ amplitudes)
    if include_specular:
        axis, sharp, amp = specular_lobe_params(n, v, specular, roughness)
        ls = sharp[..., None]
        t = axis @ axes.T
        k = inner_product_kernel(bank_sharpness, ls, t)
        m = product_sharpness(bank_sharpness, ls, t)
        cosf = np.maximum(0.0, (bank_sharpness * tn + ls * c[..., None]) / np.where(m > 0, m, 1.0))
        out += amp * ((k * cosf) @ amplitudes)
    return np.where((c > 0)[..., None], out, 0.0)


def quadrature_directions(samples):
    """Full-sphere Fibonacci set with equal weights ``4*pi/samples``."""
    return bank_axes(samples), 4.0 * math.pi / samples


def env_reference_kernel(n, v, diffuse, specular, roughness, bank, samples, budget=1 << 20):
    """Brute-force quadrature of the environment term; ``budget`` caps pixel x direction work per block."""
    dirs, weight = quadrature_directions(samples)
    radiance = bank_eval_unchecked(bank.axes, bank.sharpness, bank.amplitudes, dirs)
    out = np.zeros(n.shape[:-1] + (3,))
    count = len(n)
    dchunk = min(len(dirs), 2048)
    pchunk = max(1, budget // dchunk)
    for p0 in range(0, count, pchunk):
        ps = slice(p0, p0 + pchunk)
        np_, vp = n[ps], v[ps]
        acc = np.zeros((len(np_), 3))
        for start in range(0, len(dirs), dchunk):
            l = dirs[start:start + dchunk]
            cos = np_ @ l.T  # (P, S)
            active = np.any(cos > 0, axis=0)
            if not active.any():
                continue
            l = l[active]
            cos = cos[:, active]
            f = cook_torrance(np_[:, None, :], l[None, :, :], vp[:, None, :], diffuse[ps][:, None, :],
                              specular[ps][:, None, :], roughness[ps][:, None])
            w = np.maximum(cos, 0.0)[..., None] * radiance[start:start + dchunk][active][None]
            acc += np.sum(f * w, axis=1)
        out[ps] = acc * weight
    return out


# ---------------------------------------------------------------------------
# point operations


def brdf_eval(s: BrdfSample, n, l, v):
    n = check_vectors(n, "n", unit=True)
    l = check_vectors(l, "l", unit=True)
    v = check_vectors(v, "v", unit=True)
    return cook_torrance(n, l, v, s.diffuse, s.specular, np.float64(s.roughness))


def specular_sg_lobe(s: BrdfSample, n, v) -> SphericalGaussian:
    """Specular BRDF lobe as an SG over light directions.

    The GGX distribution is fit in half-vector space with sharpness
    ``2 / alpha**2`` and warped about the mirror direction. Fresnel and
    visibility are evaluated at the lobe centre. At grazing view
    (``dot(n, v) < 1e-4``) the warp uses the floored cosine.
    """
    n = check_vectors(n, "n", unit=True)
    v = check_vectors(v, "v", unit=True)
    axis, sharp, amp = specular_lobe_params(n, v, s.specular, np.float64(s.roughness))
    return SphericalGaussian(normalize(axis), float(sharp), amp)


def shade_flash(p: ShadingPoint, s: BrdfSample, flash: FlashLight):
    return flash_kernel(p.position, p.normal, s.diffuse, s.specular, np.float64(s.roughness),
                        flash.position, flash.intensity)


def shade_env(p: ShadingPoint, s: BrdfSample, bank: SgBank):
    return env_kernel(p.normal[None], p.view[None], s.diffuse[None], s.specular[None],
                      np.array([s.roughness]), bank.axes, bank.sharpness, bank.amplitudes)[0]


def shade_env_reference(p: ShadingPoint, s: BrdfSample, bank: SgBank, samples: int = 10000):
    if int(samples) < 1:
        raise ContractError("samples must be >= 1")
    return env_reference_kernel(p.normal[None], p.view[None], s.diffuse[None], s.specular[None],
                                np.array([s.roughness]), bank, int(samples))[0]


# ---------------------------------------------------------------------------
# images


def _shade_pixels(position, n, kd, ks, r, bank, flash, options, env_rotation):
    out = np.zeros(position.shape[:-1] + (3,))
    if options.flash:
        out += flash_kernel(position, n, kd, ks, r, flash.position, flash.intensity)
    if options.environment:
        v = normalize(-position)
        if env_rotation is not None:
            n = n @ env_rotation.T
            v = v @ env_rotation.T
        if options.reference_samples is None:
            out += env_kernel(n, v, kd, ks, r, bank.axes, bank.sharpness, bank.amplitudes)
        else:
            out += env_reference_kernel(n, v, kd, ks, r, bank, int(options.reference_samples))
    return out


def render(gbuffer, maps: SvbrdfMaps, bank: SgBank, flash: FlashLight = None,
           options: RenderOptions = None, env_rotation=None, normals=None, threads=1):
    """Render an HDR image from a G-buffer and SVBRDF maps.

    ``env_rotation`` maps camera-space directions into the environment
    frame. ``normals`` overrides the G-buffer normals (used when fitting).
    Pixels outside the mask are zero.
    """
    flash = flash or FlashLight()
    options = options or RenderOptions()
    mask = np.asarray(gbuffer.mask, dtype=bool)
    if maps.shape != mask.shape:
        raise ContractError(f"SVBRDF resolution {maps.shape} does not match G-buffer {mask.shape}")
    normal_map = gbuffer.normal if normals is None else normals
    if np.shape(normal_map)[:2] != mask.shape:
        raise ContractError("normal map resolution does not match the G-buffer")
    idx = np.flatnonzero(mask)
    position = gbuffer.position.reshape(-1, 3)[idx]
    n = np.asarray(normal_map).reshape(-1, 3)[idx]
    kd = maps.diffuse.reshape(-1, 3)[idx]
    ks = maps.specular.reshape(-1, 3)[idx]
    r = np.maximum(maps.roughness.reshape(-1)[idx], MIN_ROUGHNESS)
    out = np.zeros((mask.size, 3))
    if idx.size:
        # fixed-size blocks: BLAS results depend on batch shape, so the split must not follow the thread count
        chunks = [np.arange(i, min(i + PIXEL_BLOCK, idx.size)) for i in range(0, idx.size, PIXEL_BLOCK)]

        def work(c):
            return c, _shade_pixels(position[c], n[c], kd[c], ks[c], r[c], bank, flash, options, env_rotation)

        if int(threads) > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(min(int(threads), len(chunks))) as pool:
                results = list(pool.map(work, chunks))
        else:
            results = [work(c) for c in chunks]
        for c, vals in results:
            out[idx[c]] = vals
    return out.reshape(mask.shape + (3,))


GAMMA = 2.2


def tonemap_ldr(hdr):
    hdr = np.asarray(hdr, dtype=np.float64)
    if np.any(hdr < 0) or not np.all(np.isfinite(hdr)):
        raise ContractError("HDR values must be finite and non-negative")
    return np.round(255.0 * np.clip(hdr, 0.0, 1.0) ** (1.0 / GAMMA)).astype(np.uint8)


def ldr_to_linear(ldr):
    """Inverse of :func:`tonemap_ldr` up to quantisation (saturated pixels map to 1)."""
    return (np.asarray(ldr, dtype=np.float64) / 255.0) ** GAMMA

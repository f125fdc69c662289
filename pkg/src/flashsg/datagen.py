"""Synthetic two-shot dataset: materials, environments, scene sampling and records.

Everything is a pure function of its seeds. Scenes are assembled from the
analytic primitives, textured with augmented procedural materials and lit by
an SG environment plus a flash co-located with the camera.
"""

from dataclasses import dataclass, field, replace
from functools import lru_cache
import math
import os

import cv2
import numpy as np
from scipy.optimize import nnls
from scipy.spatial.transform import Rotation

from .errors import ContractError, RecordLoadError, SceneRejected
from .fileio import read_pfm, read_png, write_pfm, write_png
from .geometry import (KINDS, Camera, GBuffer, Primitive, gbuffer_from_depth, perturb_camera, rotation_angle,
                       trace_gbuffer)
from .sg import SgBank, bank_axes, bank_from_text, bank_to_text, default_axes, default_sharpness
from .shading import FlashLight, RenderOptions, SvbrdfMaps, ldr_to_linear, render, tonemap_ldr

CROP = 768
POOL_SIZE = 1024
AMPLITUDE_MAX = 2.0
EXPOSURE_PERCENTILE = 99.0
PROJECTION_SAMPLES = 4096
FLASH_GAIN = 0.6
NEAREST_RANGE = (0.3, 3.0)
PRIMITIVE_COUNTS = (6, 7)
RECORD_FILES = ("flash.png", "noflash.png", "mask.png", "direct.pfm", "depth.pfm", "normal.pfm",
                "diffuse.png", "specular.png", "roughness.png", "illum_sg.txt", "meta.txt")


# ---------------------------------------------------------------------------
# materials


@dataclass(eq=False)
class MaterialMaps:
    diffuse: np.ndarray    # (H, W, 3) linear RGB
    specular: np.ndarray   # (H, W, 3) linear RGB
    roughness: np.ndarray  # (H, W)
    name: str = ""

    def __post_init__(self):
        self.diffuse = np.asarray(self.diffuse, dtype=np.float32)
        self.specular = np.asarray(self.specular, dtype=np.float32)
        self.roughness = np.asarray(self.roughness, dtype=np.float32)
        h, w = self.roughness.shape
        if self.diffuse.shape != (h, w, 3) or self.specular.shape != (h, w, 3):
            raise ContractError("material maps must share one resolution")
        for arr in (self.diffuse, self.specular, self.roughness):
            if not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1:
                raise ContractError("material values must lie in [0, 1]")

    @property
    def shape(self):
        return self.roughness.shape

    def stack(self):
        return np.concatenate([self.diffuse, self.specular, self.roughness[..., None]], axis=-1)

    @classmethod
    def from_stack(cls, arr, name=""):
        arr = np.clip(arr, 0.0, 1.0)
        return cls(arr[..., 0:3], arr[..., 3:6], arr[..., 6], name)

    def __eq__(self, other):
        if not isinstance(other, MaterialMaps):
            return NotImplemented
        return (np.array_equal(self.diffuse, other.diffuse) and np.array_equal(self.specular, other.specular)
                and np.array_equal(self.roughness, other.roughness))

    __hash__ = None


def _smooth_noise(rng, size, cells):
    """Band-limited noise in [0, 1]: random values on a ``cells`` grid, bicubically upsampled."""
    base = rng.random((cells + 3, cells + 3)).astype(np.float32)
    up = cv2.resize(base, (size + 3 * size // cells, size + 3 * size // cells), interpolation=cv2.INTER_CUBIC)
    off = size // cells
    out = up[off:off + size, off:off + size]
    lo, hi = out.min(), out.max()
    return (out - lo) / max(hi - lo, 1e-6)


def _fbm(rng, size, octaves=(4, 8, 16, 32)):
    total = np.zeros((size, size), np.float32)
    amp, norm = 1.0, 0.0
    for cells in octaves:
        total += amp * _smooth_noise(rng, size, cells)
        norm += amp
        amp *= 0.5
    return total / norm


def _lerp(a, b, t):
    a = np.asarray(a, np.float32)
    b = np.asarray(b, np.float32)
    return a + (b - a) * t[..., None]


def _marble(rng, n, y, x):
    veins = 0.5 + 0.5 * np.sin(12.0 * x + 8.0 * _fbm(rng, n))
    t = veins ** 3
    diffuse = _lerp([0.82, 0.8, 0.76], [0.3, 0.32, 0.36], t)
    spec = np.full((n, n, 3), 0.045, np.float32)
    rough = 0.18 + 0.15 * _fbm(rng, n)
    return diffuse, spec, rough


def _tiles(rng, n, y, x):
    k = 6
    ty, tx = np.floor(y * k).astype(int), np.floor(x * k).astype(int)
    colors = rng.uniform(0.2, 0.8, (k + 1, k + 1, 3)).astype(np.float32)
    diffuse = colors[ty, tx]
    fy, fx = y * k - ty, x * k - tx
    grout = (np.minimum(np.minimum(fy, 1 - fy), np.minimum(fx, 1 - fx)) < 0.05).astype(np.float32)
    diffuse = _lerp(diffuse, [0.55, 0.55, 0.52], grout)
    spec = _lerp(np.full((n, n, 3), 0.06, np.float32), [0.02, 0.02, 0.02], grout)
    rough = 0.22 + 0.7 * grout + 0.05 * _smooth_noise(rng, n, 16)
    return diffuse, spec, rough


def _wood(rng, n, y, x):
    r = np.sqrt((x - 0.3) ** 2 + (y + 0.4) ** 2)
    rings = 0.5 + 0.5 * np.sin(60.0 * r + 4.0 * _fbm(rng, n))
    diffuse = _lerp([0.55, 0.35, 0.18], [0.32, 0.18, 0.08], rings)
    spec = np.full((n, n, 3), 0.04, np.float32)
    rough = 0.5 + 0.2 * rings
    return diffuse, spec, rough


def _metal(rng, n, y, x):
    streak = cv2.resize(rng.random((n, 8)).astype(np.float32), (n, n), interpolation=cv2.INTER_LINEAR)
    diffuse = np.full((n, n, 3), 0.04, np.float32) + 0.03 * streak[..., None]
    spec = _lerp([0.95, 0.75, 0.4], [0.8, 0.62, 0.32], streak)
    rough = 0.28 + 0.2 * _fbm(rng, n)
    return diffuse, spec, rough


def _fabric(rng, n, y, x):
    weave = 0.5 + 0.25 * (np.sin(400.0 * x) + np.sin(400.0 * y))
    hue = rng.uniform(0.2, 0.8, 3).astype(np.float32)
    diffuse = hue * (0.7 + 0.3 * weave[..., None]) * (0.8 + 0.2 * _fbm(rng, n)[..., None])
    spec = np.full((n, n, 3), 0.02, np.float32)
    rough = 0.85 + 0.1 * weave
    return diffuse, spec, rough


def _paint(rng, n, y, x):
    rust = (_fbm(rng, n) > 0.55).astype(np.float32)
    rust = cv2.GaussianBlur(rust, (0, 0), 3.0)
    paint = rng.uniform(0.15, 0.85, 3).astype(np.float32)
    diffuse = _lerp(np.broadcast_to(paint, (n, n, 3)), [0.35, 0.17, 0.08], rust)
    spec = _lerp(np.full((n, n, 3), 0.08, np.float32), [0.02, 0.02, 0.02], rust)
    rough = 0.3 + 0.6 * rust
    return diffuse, spec, rough


_PATTERNS = (("marble", _marble), ("tiles", _tiles), ("wood", _wood), ("metal", _metal),
             ("fabric", _fabric), ("paint", _paint))


@lru_cache(maxsize=4)
def procedural_materials(count=len(_PATTERNS), size=POOL_SIZE, seed=0):
    """Placeholder material pool: ``count`` procedural SVBRDFs at ``size``^2."""
    if count < 1:
        raise ContractError("the material pool needs at least one material")
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:size, 0:size].astype(np.float32) / size
    pool = []
    for i in range(count):
        name, fn = _PATTERNS[i % len(_PATTERNS)]
        d, s, r = fn(rng, size, y, x)
        pool.append(MaterialMaps(np.clip(d, 0, 1), np.clip(s, 0, 1), np.clip(r, 0, 1), f"{name}{i}"))
    return tuple(pool)


@dataclass(frozen=True)
class AugmentConfig:
    scale_range: tuple = (0.5, 1.5)
    overlay_probability: float = 0.5
    hue_degrees: float = 15.0
    contrast: float = 0.2
    brightness: float = 0.2
    crop: int = CROP

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ContractError("scale range must satisfy 0 < low <= high")
        if not 0 <= self.overlay_probability <= 1:
            raise ContractError("overlay probability must lie in [0, 1]")
        if min(self.hue_degrees, self.contrast, self.brightness) < 0:
            raise ContractError("jitter magnitudes must be non-negative")


IDENTITY_AUGMENT = AugmentConfig((1.0, 1.0), 0.0, 0.0, 0.0, 0.0)


def _scaled_crop(stack, rng, config):
    """Random uniform resize then a random crop, done as crop-then-resize."""
    h, w = stack.shape[:2]
    crop = config.crop
    lo, hi = config.scale_range
    lo = max(lo, crop / min(h, w))
    if lo > hi:
        raise ContractError(f"material of size {h}x{w} is too small for a {crop} crop at scale <= {hi}")
    scale = rng.uniform(lo, hi)
    win = min(int(round(crop / scale)), h, w)
    y0 = int(rng.integers(0, h - win + 1))
    x0 = int(rng.integers(0, w - win + 1))
    window = stack[y0:y0 + win, x0:x0 + win]
    if win == crop:
        return window.copy()
    return cv2.resize(window, (crop, crop), interpolation=cv2.INTER_LINEAR)


def _hue_matrix(degrees):
    """Rotation of RGB about the grey axis."""
    return Rotation.from_rotvec(np.radians(degrees) * np.ones(3) / math.sqrt(3.0)).as_matrix().astype(np.float32)


def augment_material(source: MaterialMaps, pool, seed, config: AugmentConfig = AugmentConfig()) -> MaterialMaps:
    """Resize, crop, optional overlay of a second pool material, diffuse colour jitter."""
    rng = np.random.default_rng(seed)
    out = _scaled_crop(source.stack(), rng, config)
    if rng.random() < config.overlay_probability and pool:
        other = pool[int(rng.integers(len(pool)))]
        layer = _scaled_crop(other.stack(), rng, config)
        cells = int(rng.integers(3, 9))
        alpha = _smooth_noise(rng, config.crop, cells)
        alpha = 1.0 / (1.0 + np.exp(-12.0 * (alpha - rng.uniform(0.35, 0.65))))
        out = out + (layer - out) * alpha[..., None]
    diffuse = out[..., 0:3]
    hue = rng.uniform(-config.hue_degrees, config.hue_degrees)
    contrast = 1.0 + rng.uniform(-config.contrast, config.contrast)
    brightness = 1.0 + rng.uniform(-config.brightness, config.brightness)
    if hue:
        diffuse = diffuse @ _hue_matrix(hue).T
    if contrast != 1.0:
        mean = diffuse.mean(axis=(0, 1), keepdims=True)
        diffuse = (diffuse - mean) * contrast + mean
    if brightness != 1.0:
        diffuse = diffuse * brightness
    out = np.concatenate([diffuse, out[..., 3:]], axis=-1)
    return MaterialMaps.from_stack(out.astype(np.float32), source.name)


# ---------------------------------------------------------------------------
# environments


def latlong_directions(height, width):
    """Unit directions of equirectangular pixel centres (y up, phi = 0 toward +z)."""
    theta = (np.arange(height) + 0.5) / height * math.pi
    phi = (np.arange(width) + 0.5) / width * 2.0 * math.pi - math.pi
    t, p = np.meshgrid(theta, phi, indexing="ij")
    return np.stack([np.sin(t) * np.sin(p), np.cos(t), np.sin(t) * np.cos(p)], axis=-1)


def sample_latlong(env, dirs):
    """Bilinear lookup of an equirectangular map in directions ``dirs`` (..., 3)."""
    env = np.asarray(env, dtype=np.float32)
    h, w = env.shape[:2]
    theta = np.arccos(np.clip(dirs[..., 1], -1.0, 1.0))
    phi = np.arctan2(dirs[..., 0], dirs[..., 2])
    row = theta / math.pi * h - 0.5
    col = (phi + math.pi) / (2.0 * math.pi) * w - 0.5
    padded = np.concatenate([env[:, -1:], env, env[:, :1]], axis=1)
    out = cv2.remap(padded, (col + 1.0).astype(np.float32).reshape(-1, 1), row.astype(np.float32).reshape(-1, 1),
                    interpolation=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)
    return out.reshape(dirs.shape[:-1] + (3,)).astype(np.float64)


def synthetic_environment(kind="sky", height=128, width=256, seed=0):
    """Placeholder HDR environments: ``sky``, ``studio``, ``sunset`` and ``overcast``."""
    d = latlong_directions(height, width)
    y = d[..., 1]
    rng = np.random.default_rng(seed)

    def lobe(direction, sharp, color):
        direction = np.asarray(direction, float) / np.linalg.norm(direction)
        return np.exp(sharp * (d @ direction - 1.0))[..., None] * np.asarray(color)

    if kind == "sky":
        up = np.clip(y, 0, 1)[..., None]
        env = (1 - up) * [0.45, 0.5, 0.55] + up * [0.25, 0.4, 0.75]
        env = np.where(y[..., None] < 0, [0.18, 0.15, 0.12], env)
        env = env + lobe([0.4, 0.7, 0.3], 400.0, [30.0, 27.0, 22.0])
    elif kind == "studio":
        env = np.full(d.shape, 0.05)
        env = env + lobe([1, 0.6, 0.4], 12.0, [2.2, 2.1, 2.0]) + lobe([-1, 0.4, 0.2], 20.0, [1.0, 1.1, 1.3])
        env = env + lobe([0, 1, 0], 4.0, [0.6, 0.6, 0.6])
    elif kind == "sunset":
        horizon = np.exp(-8.0 * y**2)[..., None]
        env = 0.1 + horizon * [1.2, 0.55, 0.25] + np.clip(y, 0, 1)[..., None] * [0.15, 0.2, 0.45]
        env = env + lobe([0.9, 0.05, -0.4], 200.0, [25.0, 12.0, 4.0])
    elif kind == "overcast":
        env = 0.35 + 0.3 * np.clip(y, 0, 1)[..., None] * [1.0, 1.02, 1.05]
        env = np.where(y[..., None] < 0, 0.2, env) * np.ones(3)
    else:
        raise ContractError(f"unknown synthetic environment {kind!r}")
    env = env * (1.0 + 0.05 * (rng.random(env.shape[:2])[..., None] - 0.5))
    return np.asarray(env, dtype=np.float32)


SYNTHETIC_ENVIRONMENTS = ("sky", "studio", "sunset", "overcast")


def projection_directions(samples=PROJECTION_SAMPLES):
    """Deterministic, equal-solid-angle direction grid for environment fitting."""
    return bank_axes(samples)


def nnls_amplitudes(env, axes=None, sharpness=None, samples=PROJECTION_SAMPLES):
    """Unconstrained-scale NNLS amplitudes; returns (amplitudes, design, targets)."""
    env = np.asarray(env, dtype=np.float64)
    if env.ndim != 3 or env.shape[2] != 3:
        raise ContractError("environment map must be (H, W, 3)")
    if not np.all(np.isfinite(env)):
        raise ContractError("environment map contains non-finite values")
    if np.any(env < 0):
        raise ContractError("environment radiance must be non-negative")
    axes = default_axes() if axes is None else np.asarray(axes, dtype=np.float64)
    sharpness = default_sharpness(len(axes)) if sharpness is None else float(sharpness)
    dirs = projection_directions(samples)
    design = np.exp(sharpness * (dirs @ axes.T - 1.0))
    targets = sample_latlong(env, dirs)
    amps = np.stack([nnls(design, targets[:, c])[0] for c in range(3)], axis=-1)
    return amps, design, targets


def project_env_to_sg(env, axes=None, sharpness=None, samples=PROJECTION_SAMPLES) -> SgBank:
    """Fit bank amplitudes to an equirectangular map, then normalise exposure.

    Equal-weight samples on a Fibonacci direction set make the squared error
    solid-angle weighted. When the 99th percentile of the reconstructed
    radiance exceeds 2 the amplitudes are scaled down to meet it; finally
    they are clamped to [0, 2].
    """
    axes = default_axes() if axes is None else np.asarray(axes, dtype=np.float64)
    sharpness = default_sharpness(len(axes)) if sharpness is None else float(sharpness)
    amps, design, _ = nnls_amplitudes(env, axes, sharpness, samples)
    recon = design @ amps
    p99 = float(np.percentile(recon, EXPOSURE_PERCENTILE))
    if p99 > AMPLITUDE_MAX:
        amps = amps * (AMPLITUDE_MAX / p99)
    return SgBank(np.clip(amps, 0.0, AMPLITUDE_MAX), axes, sharpness)


@lru_cache(maxsize=4)
def environment_pool(kinds=SYNTHETIC_ENVIRONMENTS):
    return tuple(project_env_to_sg(synthetic_environment(k)) for k in kinds)


# ---------------------------------------------------------------------------
# scenes


@dataclass(frozen=True)
class SceneConfig:
    fov: float = 50.0
    nearest_range: tuple = NEAREST_RANGE
    counts: tuple = PRIMITIVE_COUNTS
    probe_resolution: int = 64
    augment: AugmentConfig = AugmentConfig()


@dataclass(frozen=True, eq=False)
class SceneSpec:
    primitives: tuple
    camera: Camera
    environment: SgBank
    flash: FlashLight
    seed: int
    materials: tuple          # (pool index, augmentation seed) per primitive
    nearest_distance: float
    env_index: int = 0
    pool: tuple = field(default=(), repr=False)
    augment: AugmentConfig = AugmentConfig()

    def __post_init__(self):
        if len(self.primitives) not in PRIMITIVE_COUNTS:
            raise ContractError(f"a scene holds 6 or 7 primitives, got {len(self.primitives)}")
        if self.pool:
            for p in self.primitives:
                if not 0 <= p.material_id < len(self.pool):
                    raise ContractError(f"material_id {p.material_id} does not resolve in the pool")

    def __eq__(self, other):
        if not isinstance(other, SceneSpec):
            return NotImplemented
        return (tuple(self.primitives) == tuple(other.primitives) and self.camera == other.camera
                and self.environment == other.environment and self.flash == other.flash
                and self.seed == other.seed and self.materials == other.materials
                and self.nearest_distance == other.nearest_distance and self.env_index == other.env_index)

    __hash__ = None


def _random_quat(rng):
    x, y, z, w = Rotation.random(random_state=rng).as_quat()
    return np.array([w, x, y, z])


def sample_scene(materials, environments, seed, config: SceneConfig = SceneConfig()) -> SceneSpec:
    """Random 6-7 primitive scene in front of the camera.

    Primitives are placed in a unit-scale layout, a low-resolution probe
    trace measures the closest visible surface, and the whole layout is
    scaled about the camera so that distance equals a draw from
    ``nearest_range``. Scaling about the centre of projection leaves the
    image unchanged.
    """
    if not materials:
        raise ContractError("the material pool is empty")
    if not environments:
        raise ContractError("the environment pool is empty")
    rng = np.random.default_rng(seed)
    count = int(rng.choice(config.counts))
    yaw = rng.uniform(0.0, 2.0 * math.pi)
    pitch = math.radians(rng.uniform(-15.0, 15.0))
    cam_rot = Rotation.from_euler("YX", [yaw, pitch]).as_matrix()
    tan_half = math.tan(math.radians(config.fov) / 2.0)
    layout = []
    for _ in range(count):
        kind = KINDS[int(rng.integers(len(KINDS)))]
        ndc = rng.uniform(-0.6, 0.6, 2)
        direction = np.array([ndc[0] * tan_half, ndc[1] * tan_half, -1.0])
        direction /= np.linalg.norm(direction)
        dist = rng.uniform(1.0, 2.0)
        size = dist * tan_half * rng.uniform(0.2, 0.4)
        scale = size * rng.uniform(0.7, 1.3, 3)
        quat = _random_quat(rng)
        mat = int(rng.integers(len(materials)))
        aug_seed = int(rng.integers(2**31 - 1))
        uv_scale = float(rng.uniform(0.5, 2.0))
        layout.append((kind, cam_rot @ (direction * dist), quat, scale, mat, aug_seed, uv_scale))
    env_index = int(rng.integers(len(environments)))
    target = rng.uniform(*config.nearest_range)

    def build(k):
        return tuple(Primitive(kind, centre * k, quat, scale * k, mat, uv)
                     for kind, centre, quat, scale, mat, _, uv in layout)

    res = int(config.probe_resolution)
    probe_cam = Camera(res, res, config.fov, cam_rot, np.zeros(3))
    gb = trace_gbuffer(build(1.0), probe_cam)
    if not gb.mask.any():
        raise SceneRejected(f"scene {seed}: nothing visible")
    ranges = np.linalg.norm(gb.position[gb.mask], axis=-1)
    k = target / float(ranges.min())
    prims = build(k)
    depth_max = float((-gb.position[gb.mask][:, 2]).max()) * k
    camera = Camera(res, res, config.fov, cam_rot, np.zeros(3), near=0.5 * target,
                    far=max(1.25 * depth_max, target + 1.0))
    flash = FlashLight(np.full(3, FLASH_GAIN * math.pi * target**2))
    return SceneSpec(prims, camera, environments[env_index], flash, int(seed),
                     tuple((mat, aug) for _, _, _, _, mat, aug, _ in layout), float(target), env_index,
                     tuple(materials), config.augment)


# ---------------------------------------------------------------------------
# records


def encode_color(x):
    """Linear [0, 1] -> 8-bit gamma-encoded (the inverse of :func:`ldr_to_linear`)."""
    return tonemap_ldr(np.clip(x, 0.0, 1.0))


def encode_linear(x):
    return np.round(255.0 * np.clip(x, 0.0, 1.0)).astype(np.uint8)


def _fmt(values):
    return " ".join("%.17g" % float(v) for v in np.ravel(values))


def _camera_meta(prefix, cam: Camera):
    return {f"{prefix}_rotation": _fmt(cam.rotation), f"{prefix}_translation": _fmt(cam.translation)}


@dataclass(eq=False)
class DatasetRecord:
    flash: np.ndarray       # uint8 (H, W, 3), flash + environment
    noflash: np.ndarray     # uint8 (H, W, 3), environment only, shaken camera
    mask: np.ndarray        # bool (H, W)
    direct: np.ndarray      # float32 (H, W, 3), flash term only
    depth: np.ndarray       # float32 (H, W)
    normal: np.ndarray      # float32 (H, W, 3), camera space
    diffuse: np.ndarray     # uint8 (H, W, 3), gamma-encoded
    specular: np.ndarray    # uint8 (H, W, 3), gamma-encoded
    roughness: np.ndarray   # uint8 (H, W), linear
    bank: SgBank
    meta: dict

    ARRAYS = ("flash", "noflash", "mask", "direct", "depth", "normal", "diffuse", "specular", "roughness")

    @property
    def shape(self):
        return self.mask.shape

    def _float(self, key):
        return float(self.meta[key])

    def _floats(self, key):
        return np.array([float(v) for v in self.meta[key].split()])

    def _camera(self, prefix):
        h, w = self.shape
        return Camera(w, h, self._float("fov"), self._floats(f"{prefix}_rotation").reshape(3, 3),
                      self._floats(f"{prefix}_translation"), self._float("near"), self._float("far"))

    @property
    def camera(self):
        return self._camera("camera")

    @property
    def noflash_camera(self):
        return self._camera("noflash_camera")

    @property
    def flash_light(self):
        return FlashLight(self._floats("flash_intensity"))

    @property
    def maps(self) -> SvbrdfMaps:
        return SvbrdfMaps(ldr_to_linear(self.diffuse), ldr_to_linear(self.specular), self.roughness / 255.0)

    def gbuffer(self) -> GBuffer:
        """G-buffer rebuilt from the stored depth, normals and mask."""
        return gbuffer_from_depth(self.depth.astype(np.float64), self.normal.astype(np.float64), self.mask,
                                  self.camera)

    def violations(self):
        """List of broken invariants (empty when the record is valid)."""
        out = []
        h, w = self.shape
        shapes = {"flash": (h, w, 3), "noflash": (h, w, 3), "direct": (h, w, 3), "depth": (h, w),
                  "normal": (h, w, 3), "diffuse": (h, w, 3), "specular": (h, w, 3), "roughness": (h, w)}
        for key, shape in shapes.items():
            if getattr(self, key).shape != shape:
                out.append(f"{key} has shape {getattr(self, key).shape}, expected {shape}")
        if out:
            return out
        m = self.mask
        off = ~m
        for key in ("diffuse", "specular", "roughness", "normal", "direct"):
            if np.any(getattr(self, key)[off] != 0):
                out.append(f"{key} is non-zero outside the mask")
        if np.any(self.flash[off] != 0):
            out.append("flash image is non-zero outside the mask")
        amps = self.bank.amplitudes
        if amps.min() < 0 or amps.max() > AMPLITUDE_MAX:
            out.append("bank amplitudes leave [0, 2]")
        lengths = np.linalg.norm(self.normal[m].astype(np.float64), axis=-1)
        if lengths.size and np.max(np.abs(lengths - 1.0)) > 1e-5:
            out.append("normals are not unit length inside the mask")
        if self.depth.min() < 0 or self.depth.max() > 1:
            out.append("depth leaves [0, 1]")
        if np.any(self.depth[off] != 1):
            out.append("depth is not 1 outside the mask")
        if not np.all(np.isfinite(self.direct)) or self.direct.min() < 0:
            out.append("direct image must be finite and non-negative")
        if int(self.meta.get("primitive_count", 0)) not in PRIMITIVE_COUNTS:
            out.append("primitive count is not 6 or 7")
        if not m.any():
            out.append("mask is empty")
        return out

    def __eq__(self, other):
        if not isinstance(other, DatasetRecord):
            return NotImplemented
        same = all(getattr(self, k).dtype == getattr(other, k).dtype
                   and np.array_equal(getattr(self, k), getattr(other, k)) for k in self.ARRAYS)
        return same and self.bank == other.bank and self.meta == other.meta

    __hash__ = None


def material_lookup(gb: GBuffer, materials):
    """Per-pixel GT maps by nearest-texel lookup at wrapped UVs."""
    h, w = gb.mask.shape
    out = np.zeros((h, w, 7), np.float32)
    for idx, mat in enumerate(materials):
        sel = gb.mask & (gb.material_id == idx)
        if not sel.any():
            continue
        size = mat.shape[0]
        uv = np.mod(gb.uv[sel], 1.0)
        col = np.minimum((uv[:, 0] * size).astype(int), size - 1)
        row = np.minimum((uv[:, 1] * size).astype(int), size - 1)
        stack = np.concatenate([mat.diffuse[row, col], mat.specular[row, col], mat.roughness[row, col][:, None]],
                               axis=-1)
        out[sel] = stack
    return out


def _indexed(prims):
    # material_id in the G-buffer is the primitive's slot so each gets its own augmented maps
    return [replace(p, material_id=i) for i, p in enumerate(prims)]


def scene_materials(scene: SceneSpec):
    pool = scene.pool or procedural_materials()
    return [augment_material(pool[idx], pool, seed, scene.augment) for idx, seed in scene.materials]


def render_record(scene: SceneSpec, resolution=256, shake=(1.0, 0.005), threads=1) -> DatasetRecord:
    """Trace, shade and package one record (flash, shaken no-flash, direct HDR and GT maps)."""
    if int(resolution) < 1:
        raise ContractError("resolution must be positive")
    cam = replace(scene.camera, width=int(resolution), height=int(resolution))
    prims = _indexed(scene.primitives)
    gb = trace_gbuffer(prims, cam, threads)
    if not gb.mask.any():
        raise SceneRejected(f"scene {scene.seed}: empty mask")
    materials = scene_materials(scene)
    m = gb.mask
    gt = material_lookup(gb, materials)
    diffuse = np.where(m[..., None], encode_color(gt[..., 0:3]), 0).astype(np.uint8)
    specular = np.where(m[..., None], encode_color(gt[..., 3:6]), 0).astype(np.uint8)
    roughness = np.where(m, encode_linear(gt[..., 6]), 0).astype(np.uint8)
    maps = SvbrdfMaps(ldr_to_linear(diffuse), ldr_to_linear(specular), roughness / 255.0)
    bank = scene.environment
    flash = scene.flash
    direct = render(gb, maps, bank, flash, RenderOptions.from_mode("flash"), env_rotation=cam.rotation,
                    threads=threads)
    env = render(gb, maps, bank, flash, RenderOptions.from_mode("env"), env_rotation=cam.rotation,
                 threads=threads)
    cam2 = perturb_camera(cam, scene.seed, *shake)
    if cam2 is cam:
        env2 = env
    else:
        gb2 = trace_gbuffer(prims, cam2, threads)
        gt2 = material_lookup(gb2, materials)
        m2 = gb2.mask[..., None]
        maps2 = SvbrdfMaps(ldr_to_linear(np.where(m2, encode_color(gt2[..., 0:3]), 0).astype(np.uint8)),
                           ldr_to_linear(np.where(m2, encode_color(gt2[..., 3:6]), 0).astype(np.uint8)),
                           np.where(gb2.mask, encode_linear(gt2[..., 6]), 0) / 255.0)
        env2 = render(gb2, maps2, bank, flash, RenderOptions.from_mode("env"), env_rotation=cam2.rotation,
                      threads=threads)
    meta = {
        "seed": str(int(scene.seed)),
        "width": str(cam.width),
        "height": str(cam.height),
        "fov": _fmt([cam.fov]),
        "near": _fmt([cam.near]),
        "far": _fmt([cam.far]),
        **_camera_meta("camera", cam),
        **_camera_meta("noflash_camera", cam2),
        "shake_rotation_deg": _fmt([rotation_angle(cam.rotation, cam2.rotation)]),
        "shake_translation": _fmt([np.linalg.norm(cam2.translation - cam.translation)]),
        "flash_intensity": _fmt(flash.intensity),
        "primitive_count": str(len(prims)),
        "nearest_distance": _fmt([scene.nearest_distance]),
        "env_index": str(scene.env_index),
    }
    return DatasetRecord(
        flash=tonemap_ldr(direct + env),
        noflash=tonemap_ldr(env2),
        mask=m.copy(),
        direct=direct.astype(np.float32),
        depth=gb.depth.astype(np.float32),
        normal=np.where(m[..., None], gb.normal, 0.0).astype(np.float32),
        diffuse=diffuse,
        specular=specular,
        roughness=roughness,
        bank=bank,
        meta=meta,
    )


def write_record(record: DatasetRecord, directory):
    os.makedirs(directory, exist_ok=True)
    j = lambda name: os.path.join(directory, name)  # noqa: E731
    write_png(j("flash.png"), record.flash)
    write_png(j("noflash.png"), record.noflash)
    write_png(j("mask.png"), np.where(record.mask, 255, 0).astype(np.uint8))
    write_pfm(j("direct.pfm"), record.direct)
    write_pfm(j("depth.pfm"), record.depth)
    write_pfm(j("normal.pfm"), record.normal)
    write_png(j("diffuse.png"), record.diffuse)
    write_png(j("specular.png"), record.specular)
    write_png(j("roughness.png"), record.roughness)
    with open(j("illum_sg.txt"), "w", newline="\n") as fh:
        fh.write(bank_to_text(record.bank))
    with open(j("meta.txt"), "w", newline="\n") as fh:
        fh.write("".join(f"{k} {v}\n" for k, v in record.meta.items()))


def read_meta(path):
    if not os.path.isfile(path):
        raise RecordLoadError(f"{path}: file not found", path=path)
    meta = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            key, _, value = line.partition(" ")
            if not value:
                raise RecordLoadError(f"{path}:{lineno}: expected 'key value'", path=path)
            meta[key] = value
    for key in ("width", "height", "fov", "near", "far", "camera_rotation", "camera_translation"):
        if key not in meta:
            raise RecordLoadError(f"{path}: missing key {key!r}", path=path)
    return meta


def read_record(directory) -> DatasetRecord:
    j = lambda name: os.path.join(directory, name)  # noqa: E731
    if not os.path.isdir(directory):
        raise RecordLoadError(f"{directory}: record directory not found", path=directory)
    meta = read_meta(j("meta.txt"))
    try:
        h, w = int(meta["height"]), int(meta["width"])
    except ValueError:
        raise RecordLoadError(f"{j('meta.txt')}: bad width/height", path=j("meta.txt")) from None

    def png(name, channels):
        img = read_png(j(name), channels)
        want = (h, w, 3) if channels == 3 else (h, w)
        if img.shape != want:
            raise RecordLoadError(f"{j(name)}: expected shape {want}, got {img.shape}", path=j(name))
        return img

    mask_img = png("mask.png", 1)
    if not np.all((mask_img == 0) | (mask_img == 255)):
        raise RecordLoadError(f"{j('mask.png')}: mask must be binary", path=j("mask.png"))
    sg_path = j("illum_sg.txt")
    if not os.path.isfile(sg_path):
        raise RecordLoadError(f"{sg_path}: file not found", path=sg_path)
    try:
        with open(sg_path) as fh:
            bank = bank_from_text(fh.read(), sg_path)
    except ContractError as exc:
        raise RecordLoadError(str(exc), path=sg_path) from None
    return DatasetRecord(
        flash=png("flash.png", 3),
        noflash=png("noflash.png", 3),
        mask=mask_img == 255,
        direct=read_pfm(j("direct.pfm"), (h, w, 3)),
        depth=read_pfm(j("depth.pfm"), (h, w)),
        normal=read_pfm(j("normal.pfm"), (h, w, 3)),
        diffuse=png("diffuse.png", 3),
        specular=png("specular.png", 3),
        roughness=png("roughness.png", 1),
        bank=bank,
        meta=meta,
    )


def record_seed(seed, index, attempt=0):
    return int(np.random.SeedSequence([int(seed), int(index), int(attempt)]).generate_state(1)[0])


def generate_record(index, seed, resolution=256, materials=None, environments=None, max_attempts=50,
                    config: SceneConfig = SceneConfig(), threads=1):
    """Sample and render record ``index``; rejected scenes are resampled with a new attempt seed."""
    materials = materials or procedural_materials()
    environments = environments or environment_pool()
    for attempt in range(max_attempts):
        try:
            scene = sample_scene(materials, environments, record_seed(seed, index, attempt), config)
            return render_record(scene, resolution, threads=threads)
        except SceneRejected:
            continue
    raise SceneRejected(f"record {index}: no visible scene after {max_attempts} attempts")


def generate_dataset(out_dir, count, seed, resolution=256, threads=1, materials=None, environments=None):
    """Write ``count`` records to ``out_dir/scene_%06d``; returns their paths."""
    if count < 0:
        raise ContractError("count must be non-negative")
    paths = []
    for i in range(int(count)):
        rec = generate_record(i, seed, resolution, materials, environments, threads=threads)
        path = os.path.join(out_dir, "scene_%06d" % i)
        write_record(rec, path)
        paths.append(path)
    return paths

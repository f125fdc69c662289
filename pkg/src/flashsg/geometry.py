"""Camera, analytic ray/primitive intersection and G-buffer generation.

Camera space follows the OpenGL convention: x right, y up, the camera looks
down -z. Every primitive is defined canonically in object space and placed
by a rigid pose plus per-axis scale; rays are mapped into object space, so
solvers see unnormalised directions and ``t`` stays the world ray parameter.
"""

from dataclasses import dataclass, field, replace
import math

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.spatial.transform import Rotation

from .errors import ContractError
from .validation import check_vectors, normalize

KINDS = ("sphere", "box", "cylinder", "cone", "torus", "ellipsoid", "capsule", "disk", "rounded-box")
TORUS_MAJOR = 1.0
TORUS_MINOR = 0.35
CAPSULE_RADIUS = 0.5
CAPSULE_HALF_LENGTH = 0.5
ROUNDED_BOX_RADIUS = 0.25
T_EPS = 1e-7

# radius of a sphere bounding the canonical shape
_BOUND = {
    "sphere": 1.0, "ellipsoid": 1.0, "box": math.sqrt(3.0), "cylinder": math.sqrt(2.0),
    "cone": math.sqrt(2.0), "torus": TORUS_MAJOR + TORUS_MINOR, "capsule": 1.0, "disk": 1.0,
    "rounded-box": math.sqrt(3.0),
}
DEFAULT_FOV = 50.0
DEFAULT_NEAR = 0.1
DEFAULT_FAR = 10.0


def quat_to_matrix(q):
    """Rotation matrix from a (w, x, y, z) quaternion."""
    q = np.asarray(q, dtype=np.float64)
    return Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()


def matrix_to_quat(m):
    x, y, z, w = Rotation.from_matrix(m).as_quat()
    if w < 0:
        w, x, y, z = -w, -x, -y, -z
    return np.array([w, x, y, z])


@dataclass(frozen=True)
class Camera:
    width: int = 256
    height: int = 256
    fov: float = DEFAULT_FOV
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    near: float = DEFAULT_NEAR
    far: float = DEFAULT_FAR

    def __post_init__(self):
        if int(self.width) < 1 or int(self.height) < 1:
            raise ContractError("camera resolution must be positive")
        if not (10.0 < self.fov < 120.0):
            raise ContractError(f"vertical FOV must lie in (10, 120) degrees, got {self.fov}")
        if not (self.near > 0 and self.far > self.near):
            raise ContractError(f"need 0 < near < far, got near={self.near}, far={self.far}")
        rot = np.asarray(self.rotation, dtype=np.float64)
        if rot.shape != (3, 3) or not np.allclose(rot @ rot.T, np.eye(3), atol=1e-9):
            raise ContractError("camera rotation must be an orthonormal 3x3 matrix")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "fov", float(self.fov))
        object.__setattr__(self, "near", float(self.near))
        object.__setattr__(self, "far", float(self.far))
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", check_vectors(self.translation, "translation"))

    @property
    def resolution(self):
        return (self.width, self.height)

    def ray_directions(self):
        """Unit camera-space ray directions through pixel centres, (H, W, 3)."""
        tan_half = math.tan(math.radians(self.fov) / 2.0)
        aspect = self.width / self.height
        xs = ((np.arange(self.width) + 0.5) / self.width * 2.0 - 1.0) * tan_half * aspect
        ys = (1.0 - (np.arange(self.height) + 0.5) / self.height * 2.0) * tan_half
        x, y = np.meshgrid(xs, ys)
        d = np.stack([x, y, -np.ones_like(x)], axis=-1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def pixel_size_at(self, z):
        """Metric footprint of one pixel at planar depth ``z``."""
        return 2.0 * z * math.tan(math.radians(self.fov) / 2.0) / self.height

    def __eq__(self, other):
        if not isinstance(other, Camera):
            return NotImplemented
        return (self.resolution == other.resolution and self.fov == other.fov
                and self.near == other.near and self.far == other.far
                and np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    __hash__ = None


@dataclass(frozen=True)
class Primitive:
    kind: str
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    scale: np.ndarray = field(default_factory=lambda: np.ones(3))
    material_id: int = 0
    uv_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown primitive kind {self.kind!r}")
        scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        if np.any(scale <= 0) or not np.all(np.isfinite(scale)):
            raise ContractError("primitive scale must be positive per axis")
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        qn = np.linalg.norm(q)
        if not qn > 0:
            raise ContractError("rotation quaternion must be non-zero")
        if not self.uv_scale > 0:
            raise ContractError("uv_scale must be positive")
        object.__setattr__(self, "scale", scale)
        # leave unit quaternions untouched so text round trips are bit-exact
        object.__setattr__(self, "rotation", q if abs(qn - 1.0) <= 4e-16 else q / qn)
        object.__setattr__(self, "translation", check_vectors(self.translation, "translation"))
        object.__setattr__(self, "material_id", int(self.material_id))
        object.__setattr__(self, "uv_scale", float(self.uv_scale))

    @property
    def matrix(self):
        return quat_to_matrix(self.rotation)

    @property
    def bounding_radius(self):
        return _BOUND[self.kind] * float(np.max(self.scale))

    def __eq__(self, other):
        if not isinstance(other, Primitive):
            return NotImplemented
        return (self.kind == other.kind and self.material_id == other.material_id
                and self.uv_scale == other.uv_scale
                and np.array_equal(self.translation, other.translation)
                and np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.scale, other.scale))

    __hash__ = None


@dataclass
class GBuffer:
    depth: np.ndarray        # (H, W) normalised planar depth, 1 off-mask
    normal: np.ndarray       # (H, W, 3) camera space, 0 off-mask
    position: np.ndarray     # (H, W, 3) camera space metres
    mask: np.ndarray         # (H, W) bool
    uv: np.ndarray           # (H, W, 2)
    material_id: np.ndarray  # (H, W) int, -1 off-mask
    near: float = DEFAULT_NEAR
    far: float = DEFAULT_FAR

    @property
    def shape(self):
        return self.mask.shape

    @property
    def view(self):
        return normalize(-self.position)


@dataclass(frozen=True)
class Hit:
    t: float
    normal: np.ndarray
    uv: np.ndarray


# ---------------------------------------------------------------------------
# canonical solvers: o, d are (N, 3) object-space rays; return t (inf on miss),
# object-space normal (unnormalised) and uv


def _nearest(cands):
    """Pick the nearest positive candidate among (t, normal, uv) triples."""
    t = np.full(cands[0][0].shape, np.inf)
    n = np.zeros(t.shape + (3,))
    uv = np.zeros(t.shape + (2,))
    for ct, cn, cuv in cands:
        ct = np.where(ct > T_EPS, ct, np.inf)
        better = ct < t
        t = np.where(better, ct, t)
        n = np.where(better[:, None], cn, n)
        uv = np.where(better[:, None], cuv, uv)
    return t, n, uv


def _quadratic_roots(a, b, c):
    disc = b * b - 4.0 * a * c
    ok = (disc >= 0) & (np.abs(a) > 1e-300)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    # numerically stable pair
    q = -0.5 * (b + np.copysign(sq, b))
    safe_a = np.where(ok, a, 1.0)
    safe_q = np.where(q != 0, q, 1.0)
    t1 = np.where(ok, q / safe_a, np.inf)
    t2 = np.where(ok & (q != 0), c / safe_q, np.where(ok, t1, np.inf))
    lo = np.minimum(t1, t2)
    hi = np.maximum(t1, t2)
    return np.where(ok, lo, np.inf), np.where(ok, hi, np.inf)


def _sphere_uv(p):
    u = np.arctan2(p[:, 2], p[:, 0]) / (2 * math.pi) + 0.5
    v = np.arccos(np.clip(p[:, 1], -1.0, 1.0)) / math.pi
    return np.stack([u, v], axis=-1)


def _sphere_candidates(o, d, center, radius):
    oc = o - center
    a = np.sum(d * d, axis=1)
    b = 2.0 * np.sum(oc * d, axis=1)
    c = np.sum(oc * oc, axis=1) - radius * radius
    t1, t2 = _quadratic_roots(a, b, c)
    out = []
    for t in (t1, t2):
        p = oc + np.where(np.isfinite(t), t, 0.0)[:, None] * d
        out.append((t, p / radius, _sphere_uv(p / radius)))
    return out


def _box_uv(p, half):
    q = p / half
    ax = np.argmax(np.abs(q), axis=1)
    u = np.where(ax == 0, q[:, 2], q[:, 0])
    v = np.where(ax == 1, q[:, 2], q[:, 1])
    return np.stack([u * 0.5 + 0.5, v * 0.5 + 0.5], axis=-1)


def _box_candidates(o, d, half, center=np.zeros(3)):
    half = np.asarray(half, dtype=np.float64)
    oc = o - center
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (-half - oc) * inv
        t1 = (half - oc) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    # rays parallel to a slab: inside -> unbounded, outside -> miss
    parallel = d == 0
    inside = np.abs(oc) <= half
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
    near = np.max(tmin, axis=1)
    far = np.min(tmax, axis=1)
    hit = (near <= far) & (far > T_EPS)
    enter_axis = np.argmax(tmin, axis=1)
    exit_axis = np.argmin(tmax, axis=1)
    out = []
    for t, axis in ((near, enter_axis), (far, exit_axis)):
        t = np.where(hit, t, np.inf)
        p = oc + np.where(np.isfinite(t), t, 0.0)[:, None] * d
        n = np.zeros_like(p)
        rows = np.arange(len(p))
        n[rows, axis] = np.sign(p[rows, axis])
        out.append((t, n, _box_uv(p, half)))
    return out


def _cylinder_candidates(o, d, radius, half_length, axis=1, center=np.zeros(3), caps=True):
    """Finite cylinder of given radius along a coordinate axis."""
    oc = o - center
    i, j = [k for k in range(3) if k != axis]
    a = d[:, i] ** 2 + d[:, j] ** 2
    b = 2.0 * (oc[:, i] * d[:, i] + oc[:, j] * d[:, j])
    c = oc[:, i] ** 2 + oc[:, j] ** 2 - radius * radius
    out = []
    for t in _quadratic_roots(a, b, c):
        y = oc[:, axis] + np.where(np.isfinite(t), t, 0.0) * d[:, axis]
        t = np.where(np.abs(y) <= half_length, t, np.inf)
        p = oc + np.where(np.isfinite(t), t, 0.0)[:, None] * d
        n = p.copy()
        n[:, axis] = 0.0
        u = np.arctan2(p[:, j], p[:, i]) / (2 * math.pi) + 0.5
        v = (p[:, axis] / half_length) * 0.5 + 0.5
        out.append((t, n, np.stack([u, v], axis=-1)))
    if caps:
        for sign in (-1.0, 1.0):
            out.append(_cap(oc, d, axis, sign * half_length, radius, sign))
    return out


def _cap(o, d, axis, level, radius, sign):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (level - o[:, axis]) / d[:, axis]
    t = np.where(np.isfinite(t), t, np.inf)
    p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    i, j = [k for k in range(3) if k != axis]
    r2 = p[:, i] ** 2 + p[:, j] ** 2
    t = np.where(r2 <= radius * radius, t, np.inf)
    n = np.zeros_like(p)
    n[:, axis] = sign
    uv = np.stack([p[:, i] / radius * 0.5 + 0.5, p[:, j] / radius * 0.5 + 0.5], axis=-1)
    return t, n, uv


def _solve_sphere(o, d):
    return _nearest(_sphere_candidates(o, d, np.zeros(3), 1.0))


def _solve_box(o, d):
    return _nearest(_box_candidates(o, d, np.ones(3)))


def _solve_cylinder(o, d):
    return _nearest(_cylinder_candidates(o, d, 1.0, 1.0))


def _solve_cone(o, d):
    # apex at y = 1, base radius 1 at y = -1: x^2 + z^2 = ((1 - y) / 2)^2
    k = 1.0 - o[:, 1]
    a = d[:, 0] ** 2 + d[:, 2] ** 2 - 0.25 * d[:, 1] ** 2
    b = 2.0 * (o[:, 0] * d[:, 0] + o[:, 2] * d[:, 2]) + 0.5 * k * d[:, 1]
    c = o[:, 0] ** 2 + o[:, 2] ** 2 - 0.25 * k * k
    cands = []
    for t in _quadratic_roots(a, b, c):
        p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
        t = np.where((p[:, 1] >= -1.0) & (p[:, 1] <= 1.0), t, np.inf)
        n = np.stack([2.0 * p[:, 0], 0.5 * (1.0 - p[:, 1]), 2.0 * p[:, 2]], axis=-1)
        u = np.arctan2(p[:, 2], p[:, 0]) / (2 * math.pi) + 0.5
        cands.append((t, n, np.stack([u, (p[:, 1] + 1.0) * 0.5], axis=-1)))
    cands.append(_cap(o, d, 1, -1.0, 1.0, -1.0))
    return _nearest(cands)


def _torus_f(p):
    s = np.sum(p * p, axis=-1) + TORUS_MAJOR**2 - TORUS_MINOR**2
    return s * s - 4.0 * TORUS_MAJOR**2 * (p[..., 0] ** 2 + p[..., 2] ** 2)


def _torus_grad(p):
    s = np.sum(p * p, axis=-1) + TORUS_MAJOR**2 - TORUS_MINOR**2
    g = 4.0 * s[..., None] * p
    g[..., 0] -= 8.0 * TORUS_MAJOR**2 * p[..., 0]
    g[..., 2] -= 8.0 * TORUS_MAJOR**2 * p[..., 2]
    return g


def _solve_torus(o, d):
    n_rays = len(o)
    t_out = np.full(n_rays, np.inf)
    n_out = np.zeros((n_rays, 3))
    uv_out = np.zeros((n_rays, 2))
    scale = np.linalg.norm(d, axis=1)
    du = d / scale[:, None]
    # shift the origin to the point closest to the torus centre for conditioning
    t0 = -np.sum(o * du, axis=1)
    oo = o + t0[:, None] * du
    bound = TORUS_MAJOR + TORUS_MINOR
    cand = np.flatnonzero(np.sum(oo * oo, axis=1) <= bound * bound * (1 + 1e-9))
    if cand.size == 0:
        return t_out, n_out, uv_out
    oc, dc = oo[cand], du[cand]
    R2 = TORUS_MAJOR**2
    g = np.sum(oc * oc, axis=1) + R2 - TORUS_MINOR**2
    h = np.sum(oc * dc, axis=1)
    dxz = dc[:, 0] ** 2 + dc[:, 2] ** 2
    oxz = oc[:, 0] * dc[:, 0] + oc[:, 2] * dc[:, 2]
    c3 = 4.0 * h
    c2 = 4.0 * h * h + 2.0 * g - 4.0 * R2 * dxz
    c1 = 4.0 * h * g - 8.0 * R2 * oxz
    c0 = g * g - 4.0 * R2 * (oc[:, 0] ** 2 + oc[:, 2] ** 2)
    comp = np.zeros((cand.size, 4, 4))
    comp[:, 0, :] = -np.stack([c3, c2, c1, c0], axis=1)
    comp[:, 1, 0] = comp[:, 2, 1] = comp[:, 3, 2] = 1.0
    roots = np.linalg.eigvals(comp)
    real = np.abs(roots.imag) <= 1e-6 * (1.0 + np.abs(roots.real))
    s = np.where(real, roots.real, np.nan)

    def poly(x):
        return (((x + c3[:, None]) * x + c2[:, None]) * x + c1[:, None]) * x + c0[:, None]

    def dpoly(x):
        return ((4.0 * x + 3.0 * c3[:, None]) * x + 2.0 * c2[:, None]) * x + c1[:, None]

    for _ in range(3):
        dp = dpoly(s)
        step = np.where(np.abs(dp) > 1e-300, poly(s) / np.where(dp != 0, dp, 1.0), 0.0)
        s = s - step
    t_all = s + t0[cand][:, None]
    t_all = np.where(np.isfinite(t_all) & (t_all > T_EPS), t_all, np.inf)
    t_best = np.min(t_all, axis=1)
    hit = np.isfinite(t_best)
    p = oc + (t_best - t0[cand])[:, None] * dc
    p = np.where(hit[:, None], p, 0.0)
    n = _torus_grad(p)
    ring = np.sqrt(p[:, 0] ** 2 + p[:, 2] ** 2)
    uv = np.stack([np.arctan2(p[:, 2], p[:, 0]) / (2 * math.pi) + 0.5,
                   np.arctan2(p[:, 1], ring - TORUS_MAJOR) / (2 * math.pi) + 0.5], axis=-1)
    t_out[cand] = np.where(hit, t_best / scale[cand], np.inf)
    n_out[cand] = n
    uv_out[cand] = uv
    return t_out, n_out, uv_out


def _solve_capsule(o, d):
    cands = _cylinder_candidates(o, d, CAPSULE_RADIUS, CAPSULE_HALF_LENGTH, caps=False)
    for y in (-CAPSULE_HALF_LENGTH, CAPSULE_HALF_LENGTH):
        cands += _sphere_candidates(o, d, np.array([0.0, y, 0.0]), CAPSULE_RADIUS)
    return _nearest(cands)


def _solve_disk(o, d):
    t, n, uv = _cap(o, d, 1, 0.0, 1.0, 1.0)
    # two-sided: face the incoming ray
    flip = d[:, 1] > 0
    n[flip] = -n[flip]
    return t, n, uv


def _solve_rounded_box(o, d):
    t_out = np.full(len(o), np.inf)
    n_out = np.zeros((len(o), 3))
    uv_out = np.zeros((len(o), 2))
    # the shape lies inside the unit box; only rays entering it can hit
    outer = _box_candidates(o, d, np.ones(3))
    cand = np.flatnonzero(np.isfinite(outer[1][0]))
    if cand.size:
        t, n, uv = _rounded_box_hits(o[cand], d[cand])
        t_out[cand], n_out[cand], uv_out[cand] = t, n, uv
    return t_out, n_out, uv_out


def _rounded_box_hits(o, d):
    rad = ROUNDED_BOX_RADIUS
    b = 1.0 - rad
    cands = []
    for ax in range(3):
        half = np.full(3, b)
        half[ax] = 1.0
        cands += _box_candidates(o, d, half)
    for ax in range(3):
        i, j = [k for k in range(3) if k != ax]
        for si in (-b, b):
            for sj in (-b, b):
                c = np.zeros(3)
                c[i], c[j] = si, sj
                cands += _cylinder_candidates(o, d, rad, b, axis=ax, center=c, caps=False)
    for sx in (-b, b):
        for sy in (-b, b):
            for sz in (-b, b):
                cands += _sphere_candidates(o, d, np.array([sx, sy, sz]), rad)
    t, n, _ = _nearest(cands)
    p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    return t, n, _box_uv(p, np.ones(3))


_SOLVERS = {
    "sphere": _solve_sphere, "ellipsoid": _solve_sphere, "box": _solve_box,
    "cylinder": _solve_cylinder, "cone": _solve_cone, "torus": _solve_torus,
    "capsule": _solve_capsule, "disk": _solve_disk, "rounded-box": _solve_rounded_box,
}


def intersect_rays(prim: Primitive, origins, directions):
    """Vectorised nearest-hit query: returns t (inf on miss), world normal, uv."""
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    origins = np.broadcast_to(origins, directions.shape)
    rot = prim.matrix
    inv_scale = 1.0 / prim.scale
    o = ((origins - prim.translation) @ rot) * inv_scale
    d = (directions @ rot) * inv_scale
    t, n_obj, uv = _SOLVERS[prim.kind](o, d)
    n_world = normalize((n_obj * inv_scale) @ rot.T)
    hit = np.isfinite(t)
    n_world = np.where(hit[:, None], n_world, 0.0)
    return t, n_world, uv * prim.uv_scale


def ray_intersect(prim: Primitive, origin, direction):
    direction = check_vectors(direction, "direction", unit=True)
    origin = check_vectors(origin, "origin")
    t, n, uv = intersect_rays(prim, origin[None], direction[None])
    if not np.isfinite(t[0]):
        return None
    return Hit(float(t[0]), n[0], uv[0])


def trace_gbuffer(scene, camera: Camera, threads=1) -> GBuffer:
    """Primary-ray G-buffer over a list of primitives (nearest hit wins)."""
    scene = list(scene)
    if not scene:
        raise ContractError("scene must contain at least one primitive")
    h, w = camera.height, camera.width
    dirs_cam = camera.ray_directions().reshape(-1, 3)
    dirs = dirs_cam @ camera.rotation.T
    origin = camera.translation
    t_best = np.full(len(dirs), np.inf)
    n_best = np.zeros((len(dirs), 3))
    uv_best = np.zeros((len(dirs), 2))
    mat = np.full(len(dirs), -1, dtype=np.int64)
    for prim in scene:
        # bounding-sphere cull
        oc = origin - prim.translation
        rad = prim.bounding_radius
        b = dirs @ oc
        disc = b * b - (oc @ oc - rad * rad)
        cand = np.flatnonzero((disc >= 0) & (-b + np.sqrt(np.maximum(disc, 0)) > 0))
        if cand.size == 0:
            continue
        t, n, uv = _intersect_chunked(prim, origin, dirs[cand], threads)
        better = t < t_best[cand]
        idx = cand[better]
        t_best[idx] = t[better]
        n_best[idx] = n[better]
        uv_best[idx] = uv[better]
        mat[idx] = prim.material_id
    mask = np.isfinite(t_best)
    tt = np.where(mask, t_best, 0.0)
    position = dirs_cam * tt[:, None]
    normal = np.where(mask[:, None], n_best @ camera.rotation, 0.0)
    planar = -position[:, 2]
    depth = np.clip((planar - camera.near) / (camera.far - camera.near), 0.0, 1.0)
    depth = np.where(mask, depth, 1.0)
    return GBuffer(
        depth=depth.reshape(h, w),
        normal=normal.reshape(h, w, 3),
        position=position.reshape(h, w, 3),
        mask=mask.reshape(h, w),
        uv=np.where(mask[:, None], uv_best, 0.0).reshape(h, w, 2),
        material_id=mat.reshape(h, w),
        near=camera.near,
        far=camera.far,
    )


RAY_BLOCK = 8192


def _intersect_chunked(prim, origin, dirs, threads):
    # fixed-size blocks keep results independent of the thread count
    threads = max(1, int(threads))
    if threads == 1 or len(dirs) <= RAY_BLOCK:
        parts = [slice(i, i + RAY_BLOCK) for i in range(0, len(dirs), RAY_BLOCK)]
        res = [intersect_rays(prim, origin, dirs[p]) for p in parts]
    else:
        from concurrent.futures import ThreadPoolExecutor

        parts = [slice(i, i + RAY_BLOCK) for i in range(0, len(dirs), RAY_BLOCK)]
        with ThreadPoolExecutor(min(threads, len(parts))) as pool:
            res = list(pool.map(lambda p: intersect_rays(prim, origin, dirs[p]), parts))
    if len(res) == 1:
        return res[0]
    return tuple(np.concatenate([r[k] for r in res]) for k in range(3))


def gbuffer_from_depth(depth, normal, mask, camera: Camera) -> GBuffer:
    """Rebuild camera-space positions from normalised planar depth."""
    depth = np.asarray(depth, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    z = camera.near + depth * (camera.far - camera.near)
    dirs = camera.ray_directions()
    position = dirs * (z / -dirs[..., 2])[..., None]
    position = np.where(mask[..., None], position, 0.0)
    h, w = mask.shape
    return GBuffer(depth=np.where(mask, depth, 1.0), normal=np.where(mask[..., None], normal, 0.0),
                   position=position, mask=mask, uv=np.zeros((h, w, 2)),
                   material_id=np.where(mask, 0, -1), near=camera.near, far=camera.far)


def depth_gradients(depth, mask=None):
    """Per-pixel depth derivatives (d/dx to the right, d/dy upward).

    Central differences in the interior; one-sided where a neighbour lies
    outside the image (or outside ``mask`` when given); zero when isolated.
    """
    d = np.asarray(depth, dtype=np.float64)
    valid = np.ones(d.shape, bool) if mask is None else np.asarray(mask, bool)

    def along(arr, ok, axis):
        fwd = np.zeros_like(arr)
        bwd = np.zeros_like(arr)
        fwd_ok = np.zeros(arr.shape, bool)
        bwd_ok = np.zeros(arr.shape, bool)
        sl_a = [slice(None)] * 2
        sl_b = [slice(None)] * 2
        sl_a[axis] = slice(0, -1)
        sl_b[axis] = slice(1, None)
        diff = arr[tuple(sl_b)] - arr[tuple(sl_a)]
        pair = ok[tuple(sl_a)] & ok[tuple(sl_b)]
        fwd[tuple(sl_a)] = diff
        fwd_ok[tuple(sl_a)] = pair
        bwd[tuple(sl_b)] = diff
        bwd_ok[tuple(sl_b)] = pair
        both = fwd_ok & bwd_ok
        return np.where(both, 0.5 * (fwd + bwd), np.where(fwd_ok, fwd, np.where(bwd_ok, bwd, 0.0)))

    gx = along(d, valid, 1)
    gy = -along(d, valid, 0)
    return gx, gy


def normals_from_depth(depth, width=None, mask=None):
    """Normals ``normalize(dd/dx, dd/dy, 2 / width)`` from a depth map."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise ContractError("depth map must be 2-D")
    if not np.all(np.isfinite(depth)):
        raise ContractError("depth map contains non-finite values")
    width = depth.shape[1] if width is None else width
    gx, gy = depth_gradients(depth, mask)
    n = np.stack([gx, gy, np.full_like(gx, 2.0 / width)], axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def consistent_depth_range(z_ref, camera: Camera, span=None):
    """near/far for which depth-derived normals match geometric normals at ``z_ref``.

    With per-pixel gradients and a z term of ``2 / width``, normalised depth
    reproduces the true surface slope when ``far - near`` equals
    ``z_ref * tan(fov / 2) * width / height``. ``span`` (z_min, z_max) widens
    the range so every listed depth stays inside [0, 1].
    """
    rng_len = z_ref * math.tan(math.radians(camera.fov) / 2.0) * camera.width / camera.height
    near = z_ref - 0.5 * rng_len
    far = z_ref + 0.5 * rng_len
    if span is not None:
        near = min(near, span[0])
        far = max(far, span[1])
    return max(near, 1e-3), far


def consistent_width(z_ref, camera: Camera, near, far):
    """Width to use in :func:`normals_from_depth` so normals derived from depth
    normalised by (near, far) match the geometry at depth ``z_ref``."""
    if far <= near or z_ref <= 0:
        raise ContractError("need far > near and a positive reference depth")
    return (far - near) * camera.height / (z_ref * math.tan(math.radians(camera.fov) / 2.0))


def project_points(points_cam, camera: Camera):
    """Continuous (row, col) pixel coordinates of camera-space points."""
    tan_half = math.tan(math.radians(camera.fov) / 2.0)
    aspect = camera.width / camera.height
    z = -points_cam[..., 2]
    safe = np.where(z > 1e-12, z, np.nan)
    x_ndc = points_cam[..., 0] / safe / (tan_half * aspect)
    y_ndc = points_cam[..., 1] / safe / tan_half
    col = (x_ndc + 1.0) * 0.5 * camera.width - 0.5
    row = (1.0 - y_ndc) * 0.5 * camera.height - 0.5
    return row, col


def reproject_to_view(image, gbuffer: GBuffer, camera: Camera, source_camera: Camera, support=None):
    """Warp ``image`` seen by ``source_camera`` into the view of ``camera``.

    Every masked pixel of ``gbuffer`` (traced from ``camera``) is moved to
    world space, projected into the source view and sampled bilinearly.
    A pixel is valid when its whole bilinear footprint lies on ``support``
    (default: pixels of ``image`` with any non-zero channel).
    """
    img = np.asarray(image, dtype=np.float64)
    if img.shape[:2] != (source_camera.height, source_camera.width):
        raise ContractError("image size does not match the source camera")
    if support is None:
        support = np.any(img.reshape(img.shape[0], img.shape[1], -1) > 0, axis=-1)
    world = gbuffer.position @ camera.rotation.T + camera.translation
    local = (world - source_camera.translation) @ source_camera.rotation
    row, col = project_points(local, source_camera)
    ok = gbuffer.mask & np.isfinite(row) & np.isfinite(col)
    coords = np.stack([np.where(ok, row, -10.0), np.where(ok, col, -10.0)])
    cover = map_coordinates(np.asarray(support, dtype=np.float64), coords, order=1, mode="constant", cval=0.0)
    valid = ok & (cover >= 1.0 - 1e-9)
    chans = img.reshape(img.shape[0], img.shape[1], -1)
    out = np.stack([map_coordinates(chans[..., c], coords, order=1, mode="constant", cval=0.0)
                    for c in range(chans.shape[-1])], axis=-1)
    out = np.where(valid[..., None], out, 0.0).reshape(gbuffer.mask.shape + img.shape[2:])
    return out, valid


def perturb_camera(camera: Camera, seed, max_rotation=1.0, max_translation=0.005) -> Camera:
    """Camera shake: a rotation of at most ``max_rotation`` degrees about a random
    axis and a translation of at most ``max_translation`` metres."""
    if max_rotation < 0 or max_translation < 0:
        raise ContractError("shake magnitudes must be non-negative")
    if max_rotation == 0 and max_translation == 0:
        return camera
    rng = np.random.default_rng(seed)
    axis = normalize(rng.normal(size=3))
    angle = math.radians(rng.uniform(0.0, max_rotation))
    tdir = normalize(rng.normal(size=3))
    tmag = rng.uniform(0.0, max_translation)
    delta = Rotation.from_rotvec(axis * angle).as_matrix()
    return replace(camera, rotation=camera.rotation @ delta,
                   translation=camera.translation + camera.rotation @ (tdir * tmag))


def rotation_angle(a, b):
    """Angle in degrees between two rotation matrices."""
    rel = a.T @ b
    return math.degrees(math.acos(np.clip((np.trace(rel) - 1.0) / 2.0, -1.0, 1.0)))


# ---------------------------------------------------------------------------
# scene text format


def _fmt(values):
    return " ".join("%.17g" % float(v) for v in values)


def scene_to_text(primitives, camera: Camera = None, flash_intensity=None) -> str:
    lines = ["# kind tx ty tz qw qx qy qz sx sy sz material_id uv_scale"]
    if camera is not None:
        lines.append("camera %d %d %s %s" % (
            camera.width, camera.height,
            _fmt([camera.fov, camera.near, camera.far]),
            _fmt(list(camera.translation) + list(matrix_to_quat(camera.rotation)))))
    if flash_intensity is not None:
        lines.append("flash " + _fmt(flash_intensity))
    for p in primitives:
        lines.append("%s %s %d %s" % (
            p.kind, _fmt(list(p.translation) + list(p.rotation) + list(p.scale)),
            p.material_id, _fmt([p.uv_scale])))
    return "\n".join(lines) + "\n"


def scene_from_text(text, source="<string>"):
    """Parse a scene file; returns (primitives, camera or None, flash intensity or None)."""
    prims, camera, flash = [], None, None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "camera":
                if len(parts) != 13:
                    raise ValueError(f"camera record needs 12 values, got {len(parts) - 1}")
                v = [float(x) for x in parts[3:]]
                camera = Camera(int(parts[1]), int(parts[2]), v[0], quat_to_matrix(v[6:10]),
                                v[3:6], v[1], v[2])
            elif parts[0] == "flash":
                if len(parts) != 4:
                    raise ValueError("flash record needs 3 values")
                flash = [float(x) for x in parts[1:]]
            else:
                if len(parts) != 13:
                    raise ValueError(f"primitive record needs 13 fields, got {len(parts)}")
                v = [float(x) for x in parts[1:11]]
                prims.append(Primitive(parts[0], v[0:3], v[3:7], v[7:10], int(parts[11]), float(parts[12])))
        except (ValueError, ContractError) as exc:
            raise ContractError(f"{source}:{lineno}: {exc}") from None
    if not prims:
        raise ContractError(f"{source}: no primitives found")
    return prims, camera, flash

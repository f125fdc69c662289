"""Spherical Gaussian algebra and the fixed-axis environment bank.

A spherical Gaussian (SG) is ``G(v) = a * exp(lambda * (dot(v, axis) - 1))``
with RGB amplitude ``a``. Products of SGs are SGs and the integral over the
sphere has a closed form, which is what makes environment shading cheap.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from .errors import ContractError, DegenerateGeometryError
from .validation import check_rgb, check_vectors

BANK_SIZE = 24
GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))
_SMALL_SHARPNESS = 1e-6
_DEGENERATE_AXIS = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class SphericalGaussian:
    axis: np.ndarray
    sharpness: float
    amplitude: np.ndarray

    def __post_init__(self):
        axis = check_vectors(self.axis, "axis", unit=True)
        if axis.shape != (3,):
            raise ContractError("axis must be a single 3-vector")
        amp = check_rgb(self.amplitude, "amplitude", low=0.0)
        if amp.shape != (3,):
            raise ContractError("amplitude must be a single RGB triple")
        sharp = float(self.sharpness)
        if not (sharp >= 0.0 and math.isfinite(sharp)):
            raise ContractError(f"sharpness must be finite and >= 0, got {self.sharpness}")
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "amplitude", amp)
        object.__setattr__(self, "sharpness", sharp)


def integral_factor(sharpness):
    """``(1 - exp(-2x)) / x`` with its limit 2 at x = 0."""
    x = np.asarray(sharpness, dtype=np.float64)
    small = x < _SMALL_SHARPNESS
    safe = np.where(small, 1.0, x)
    return np.where(small, 2.0 - 2.0 * x, -np.expm1(-2.0 * safe) / safe)


def integral_factor_derivative(sharpness):
    """Derivative of :func:`integral_factor`."""
    x = np.asarray(sharpness, dtype=np.float64)
    small = x < 1e-3
    safe = np.where(small, 1.0, x)
    e = np.exp(-2.0 * safe)
    exact = (2.0 * safe * e + np.expm1(-2.0 * safe)) / (safe * safe)
    series = -2.0 + (8.0 / 3.0) * x - 2.0 * x * x + (16.0 / 15.0) * x**3
    return np.where(small, series, exact)


def product_sharpness(lam1, lam2, cos12):
    """Sharpness of the product lobe, ``|lam1 * axis1 + lam2 * axis2|``."""
    sq = lam1 * lam1 + lam2 * lam2 + 2.0 * lam1 * lam2 * cos12
    return np.sqrt(np.maximum(sq, 0.0))


def product_log_scale(lam1, lam2, cos12, lam3):
    """``lam3 - lam1 - lam2`` computed without cancellation for large sharpness."""
    den = lam3 + lam1 + lam2
    num = 2.0 * lam1 * lam2 * (cos12 - 1.0)
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


def inner_product_kernel(lam1, lam2, cos12):
    """Scalar part of the SG inner product: multiply by ``a1 * a2`` to get the result."""
    lam3 = product_sharpness(lam1, lam2, cos12)
    return 2.0 * math.pi * np.exp(product_log_scale(lam1, lam2, cos12, lam3)) * integral_factor(lam3)


def sg_eval(g: SphericalGaussian, v):
    v = check_vectors(v, "v", unit=True)
    return g.amplitude * np.exp(g.sharpness * (np.dot(v, g.axis) - 1.0))[..., None]


def sg_product(g1: SphericalGaussian, g2: SphericalGaussian) -> SphericalGaussian:
    m = g1.sharpness * g1.axis + g2.sharpness * g2.axis
    lam3 = float(np.linalg.norm(m))
    if lam3 > 0.0:
        axis = m / lam3
        # renormalise so that the dataclass unit-length check cannot trip on rounding
        axis = axis / np.linalg.norm(axis)
    else:
        axis = _DEGENERATE_AXIS.copy()
    cos12 = float(np.dot(g1.axis, g2.axis))
    scale = math.exp(float(product_log_scale(g1.sharpness, g2.sharpness, cos12, lam3)))
    return SphericalGaussian(axis, lam3, g1.amplitude * g2.amplitude * scale)


def sg_integral(g: SphericalGaussian):
    return 2.0 * math.pi * g.amplitude * float(integral_factor(g.sharpness))


def sg_inner_product(g1: SphericalGaussian, g2: SphericalGaussian):
    return sg_integral(sg_product(g1, g2))


def bank_axes(count: int = BANK_SIZE) -> np.ndarray:
    """Fibonacci-lattice directions, shape (count, 3).

    Latitude bands are centred (``z = 1 - (2i + 1) / count``) so ``count=1``
    gives the seed direction (1, 0, 0).
    """
    if int(count) != count or count < 1:
        raise ContractError(f"count must be a positive integer, got {count}")
    i = np.arange(int(count), dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / count
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = GOLDEN_ANGLE * i
    axes = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)
    return axes / np.linalg.norm(axes, axis=-1, keepdims=True)


def bank_sharpness(axes) -> float:
    """Shared sharpness giving half amplitude at the mean nearest-neighbour angle."""
    axes = check_vectors(axes, "axes", unit=True)
    if axes.ndim != 2 or len(axes) < 2:
        raise ContractError("bank_sharpness needs at least two axes")
    cos = np.clip(axes @ axes.T, -1.0, 1.0)
    np.fill_diagonal(cos, -np.inf)
    nearest = np.arccos(np.max(cos, axis=1))
    theta = float(np.mean(nearest))
    if theta <= 1e-12:
        raise DegenerateGeometryError("duplicate axes: mean nearest-neighbour angle is zero")
    return math.log(2.0) / (1.0 - math.cos(theta))


@dataclass(frozen=True)
class SgBank:
    """Environment lighting as fixed-axis lobes with one shared sharpness."""

    amplitudes: np.ndarray
    axes: np.ndarray = field(default=None)
    sharpness: float = field(default=None)

    def __post_init__(self):
        amps = check_rgb(self.amplitudes, "amplitudes", low=0.0)
        if amps.ndim != 2:
            raise ContractError(f"amplitudes must have shape (count, 3), got {amps.shape}")
        axes = self.axes
        if axes is None:
            axes = default_axes(len(amps))
        axes = check_vectors(axes, "axes", unit=True)
        if axes.shape != amps.shape:
            raise ContractError(f"axes shape {axes.shape} does not match amplitudes {amps.shape}")
        sharp = self.sharpness
        if sharp is None:
            sharp = default_sharpness(len(amps))
        sharp = float(sharp)
        if not (sharp >= 0 and math.isfinite(sharp)):
            raise ContractError(f"bank sharpness must be finite and >= 0, got {sharp}")
        amps = amps.copy()
        amps.flags.writeable = False
        object.__setattr__(self, "amplitudes", amps)
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "sharpness", sharp)

    def __len__(self):
        return len(self.amplitudes)

    @property
    def lobes(self):
        return [SphericalGaussian(a, self.sharpness, c) for a, c in zip(self.axes, self.amplitudes)]

    def with_amplitudes(self, amplitudes):
        return SgBank(amplitudes, self.axes, self.sharpness)

    def __eq__(self, other):
        if not isinstance(other, SgBank):
            return NotImplemented
        return (
            self.sharpness == other.sharpness
            and np.array_equal(self.axes, other.axes)
            and np.array_equal(self.amplitudes, other.amplitudes)
        )

    __hash__ = None


_AXES_CACHE = {}


def default_axes(count=BANK_SIZE):
    if count not in _AXES_CACHE:
        axes = bank_axes(count)
        sharp = bank_sharpness(axes) if count >= 2 else 0.0
        axes.flags.writeable = False
        _AXES_CACHE[count] = (axes, sharp)
    return _AXES_CACHE[count][0]


def default_sharpness(count=BANK_SIZE):
    default_axes(count)
    return _AXES_CACHE[count][1]


def make_bank(amplitudes=None, count=BANK_SIZE) -> SgBank:
    if amplitudes is None:
        amplitudes = np.zeros((count, 3))
    amplitudes = np.asarray(amplitudes, dtype=np.float64)
    if amplitudes.ndim == 1:
        amplitudes = np.repeat(amplitudes[None, :], count, axis=0)
    return SgBank(amplitudes)


def bank_eval(bank: SgBank, v):
    """Radiance of the bank in direction(s) ``v``; ``v`` may be (..., 3)."""
    v = check_vectors(v, "v", unit=True)
    return bank_eval_unchecked(bank.axes, bank.sharpness, bank.amplitudes, v)


def bank_eval_unchecked(axes, sharpness, amplitudes, v):
    w = np.exp(sharpness * (v @ axes.T - 1.0))
    return w @ amplitudes


def bank_to_text(bank: SgBank) -> str:
    lines = []
    for axis, amp in zip(bank.axes, bank.amplitudes):
        vals = list(axis) + [bank.sharpness] + list(amp)
        lines.append(" ".join("%.17g" % float(x) for x in vals))
    return "\n".join(lines) + "\n"


def bank_from_text(text: str, source="<string>") -> SgBank:
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ContractError(f"{source}:{lineno}: expected 7 values per lobe, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise ContractError(f"{source}:{lineno}: {exc}") from None
    if not rows:
        raise ContractError(f"{source}: no lobes found")
    data = np.array(rows)
    sharp = data[:, 3]
    if not np.all(sharp == sharp[0]):
        raise ContractError(f"{source}: lobes must share one sharpness")
    try:
        return SgBank(data[:, 4:7], data[:, 0:3], float(sharp[0]))
    except ContractError as exc:
        raise ContractError(f"{source}: {exc}") from None

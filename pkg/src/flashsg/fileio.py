"""Image file I/O (PNG, PFM, Radiance HDR) on top of OpenCV.

OpenCV stores colour as BGR; everything here speaks RGB. Load failures are
raised as :class:`RecordLoadError` carrying the offending path.
"""

import os

import cv2
import cv2.utils.logging
import numpy as np

from .errors import ContractError, RecordLoadError

# decoder failures surface as exceptions; keep the C++ log quiet
cv2.utils.logging.setLogLevel(cv2.utils.logging.LOG_LEVEL_SILENT)


def _swap(img):
    return img[..., ::-1] if img.ndim == 3 else img


def _read(path, flags, kind):
    if not os.path.isfile(path):
        raise RecordLoadError(f"{path}: file not found", path=path)
    img = cv2.imread(str(path), flags)
    if img is None:
        raise RecordLoadError(f"{path}: cannot decode {kind} (truncated or corrupt)", path=path)
    return np.ascontiguousarray(_swap(img))


def _write(path, img, params=()):
    if not cv2.imwrite(str(path), np.ascontiguousarray(_swap(img)), list(params)):
        raise OSError(f"{path}: could not write image")


def write_png(path, img):
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ContractError(f"PNG data must be uint8, got {img.dtype}")
    if img.ndim not in (2, 3):
        raise ContractError("PNG data must be (H, W) or (H, W, 3)")
    _write(path, img, (cv2.IMWRITE_PNG_COMPRESSION, 6))


def read_png(path, channels=None):
    flags = cv2.IMREAD_GRAYSCALE if channels == 1 else cv2.IMREAD_UNCHANGED
    img = _read(path, flags, "PNG")
    if img.dtype != np.uint8:
        raise RecordLoadError(f"{path}: expected 8-bit PNG, got {img.dtype}", path=path)
    if channels == 3 and img.ndim != 3:
        raise RecordLoadError(f"{path}: expected an RGB PNG", path=path)
    return img


def write_pfm(path, img):
    """Write float data as PFM (float32; (H, W) greyscale or (H, W, 3) colour)."""
    img = np.asarray(img)
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] != 3):
        raise ContractError("PFM data must be (H, W) or (H, W, 3)")
    if not np.all(np.isfinite(img)):
        raise ContractError("PFM data must be finite")
    _write(path, img.astype(np.float32))


def read_pfm(path, shape=None):
    img = _read(path, cv2.IMREAD_UNCHANGED, "PFM")
    if img.dtype != np.float32:
        raise RecordLoadError(f"{path}: expected float32 PFM data, got {img.dtype}", path=path)
    if shape is not None and img.shape != tuple(shape):
        raise RecordLoadError(f"{path}: expected shape {tuple(shape)}, got {img.shape}", path=path)
    return img


def read_hdr(path):
    return _read(path, cv2.IMREAD_UNCHANGED, "Radiance HDR").astype(np.float32)


def write_hdr(path, img):
    _write(path, np.asarray(img, dtype=np.float32))


def read_environment(path):
    """Equirectangular environment map from a ``.pfm`` or ``.hdr`` file, float64 RGB."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".pfm":
        img = read_pfm(path)
    elif ext in (".hdr", ".rgbe", ".pic"):
        img = read_hdr(path)
    else:
        raise ContractError(f"{path}: unsupported environment format {ext!r} (use .pfm or .hdr)")
    if img.ndim != 3 or img.shape[2] != 3:
        raise RecordLoadError(f"{path}: environment map must be RGB", path=path)
    if not np.all(np.isfinite(img)):
        raise ContractError(f"{path}: environment map contains non-finite values")
    return img.astype(np.float64)

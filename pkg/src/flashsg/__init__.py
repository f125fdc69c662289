"""Spherical-Gaussian lighting, Cook-Torrance shading and two-shot inverse rendering."""

from .errors import ContractError, DegenerateGeometryError, NumericalError, RecordLoadError, SceneRejected
from .geometry import Camera, GBuffer, Primitive, normals_from_depth, perturb_camera, trace_gbuffer
from .shading import FlashLight, RenderOptions, SvbrdfMaps, render, tonemap_ldr
from .sg import SgBank, SphericalGaussian, bank_eval, make_bank, sg_integral, sg_inner_product, sg_product

__all__ = [
    "ContractError", "DegenerateGeometryError", "NumericalError", "RecordLoadError", "SceneRejected",
    "Camera", "GBuffer", "Primitive", "normals_from_depth", "perturb_camera", "trace_gbuffer",
    "FlashLight", "RenderOptions", "SvbrdfMaps", "render", "tonemap_ldr",
    "SgBank", "SphericalGaussian", "bank_eval", "make_bank", "sg_integral", "sg_inner_product", "sg_product",
]

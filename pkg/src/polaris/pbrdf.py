"""Polarimetric BRDF covering conductors and dielectrics.

The reflected light is a depolarizing diffuse lobe (subsurface scattering
between two Fresnel transmissions) plus a GGX microfacet specular lobe with
a complex-index Fresnel reflection matrix. A binary indicator ``m`` removes
the diffuse lobe for conductors, which transmit nothing.

Conventions: GGX ``alpha = roughness`` (no squaring), separable Smith
masking, specular Fresnel evaluated at the angle between ``wi`` and the
half-vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import fresnel
from .fresnel import ComplexIor
from .polcore import Frame, depolarizer, perpendicular

DIELECTRIC_ETA = 1.5
MIN_ROUGHNESS = 1e-3
GRAZING_EPS = 1e-6


@dataclass(frozen=True)
class MaterialParams:
    """Per-material parameters. ``m`` is 1 for dielectrics and 0 for conductors."""

    m: int
    albedo: tuple[float, float, float] = (0.5, 0.5, 0.5)
    roughness: float = 0.3
    ks: float = 1.0
    ior: ComplexIor = field(default_factory=lambda: ComplexIor((DIELECTRIC_ETA,) * 3))

    def __post_init__(self):
        if self.m not in (0, 1) or isinstance(self.m, bool):
            raise ValueError(f"indicator m must be exactly 0 or 1, got {self.m!r}")
        albedo = tuple(float(v) for v in np.broadcast_to(np.asarray(self.albedo, dtype=float), (3,)))
        if not all(0.0 <= v <= 1.0 for v in albedo):
            raise ValueError(f"albedo must lie in [0, 1], got {albedo}")
        if not np.isfinite(self.roughness) or self.roughness <= 0 or self.roughness > 1:
            raise ValueError(f"roughness must lie in (0, 1], got {self.roughness}")
        if not np.isfinite(self.ks) or self.ks < 0:
            raise ValueError(f"ks must be non-negative, got {self.ks}")
        if self.m == 1:
            if not self.ior.is_dielectric():
                raise ValueError("dielectric must have k=0")
            if any(v != DIELECTRIC_ETA for v in self.ior.eta):
                raise ValueError(f"dielectric must have eta={DIELECTRIC_ETA}")
        object.__setattr__(self, "m", int(self.m))
        object.__setattr__(self, "albedo", albedo)
        object.__setattr__(self, "roughness", max(float(self.roughness), MIN_ROUGHNESS))
        object.__setattr__(self, "ks", float(self.ks))

    @property
    def is_conductor(self) -> bool:
        return self.m == 0

    def with_(self, **changes) -> "MaterialParams":
        return replace(self, **changes)


def _unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class ShadingGeometry:
    """Unit normal, direction toward the light ``wi`` and toward the camera ``wo``."""

    n: np.ndarray
    wi: np.ndarray
    wo: np.ndarray

    def __post_init__(self):
        for name in ("n", "wi", "wo"):
            object.__setattr__(self, name, _unit(getattr(self, name)))

    @property
    def h(self) -> np.ndarray | None:
        s = self.wi + self.wo
        ns = np.linalg.norm(s)
        return None if ns < 1e-12 else s / ns

    @property
    def cos_i(self) -> float:
        return float(self.n @ self.wi)

    @property
    def cos_o(self) -> float:
        return float(self.n @ self.wo)


def ggx_d(cos_theta_h, roughness):
    """GGX normal distribution, ``alpha^2 / (pi (cos^2 (alpha^2 - 1) + 1)^2)``."""
    a2 = roughness * roughness
    c = np.asarray(cos_theta_h, dtype=float)
    denom = c * c * (a2 - 1.0) + 1.0
    return a2 / (np.pi * denom * denom)


def smith_g1(cos_theta, roughness):
    """Smith-GGX masking for one direction."""
    c = np.clip(np.asarray(cos_theta, dtype=float), 0.0, 1.0)
    a2 = roughness * roughness
    denom = c + np.sqrt(a2 + (1.0 - a2) * c * c)
    return np.divide(2.0 * c, denom, out=np.zeros_like(c), where=denom > 0)


def smith_g(geom: ShadingGeometry, roughness: float) -> float:
    return float(smith_g1(geom.cos_i, roughness) * smith_g1(geom.cos_o, roughness))


def _plane_normal(a, b):
    """Unit normal of the plane spanned by ``a`` and ``b``; any perpendicular of ``b`` if degenerate."""
    c = np.cross(a, b)
    nc = np.linalg.norm(c)
    return perpendicular(b) if nc < 1e-12 else c / nc


def diffuse_frames(geom: ShadingGeometry) -> tuple[Frame, Frame]:
    """In/out frames of the diffuse term: x axes normal to the planes holding ``n``."""
    x_in = _plane_normal(geom.n, geom.wi)
    x_out = _plane_normal(geom.n, geom.wo)
    return Frame(-geom.wi, x_in), Frame(geom.wo, x_out)


def specular_frames(geom: ShadingGeometry) -> tuple[Frame, Frame]:
    """In/out frames of the specular term: x axis is the s direction of the ``wi``-``wo`` plane."""
    x = _plane_normal(geom.wi, geom.wo)
    return Frame(-geom.wi, x), Frame(geom.wo, x)


def mueller_diffuse(params: MaterialParams, geom: ShadingGeometry) -> np.ndarray:
    """Per-channel diffuse Mueller matrices, shape ``(3, 3, 3)`` (channel, row, col)."""
    out = np.zeros((3, 3, 3))
    cos_i, cos_o = geom.cos_i, geom.cos_o
    if cos_i <= 0 or cos_o <= 0:
        return out
    t_in = fresnel.fresnel_transmission_mueller(DIELECTRIC_ETA, np.arccos(min(cos_i, 1.0)))
    t_out = fresnel.fresnel_transmission_mueller(DIELECTRIC_ETA, np.arccos(min(cos_o, 1.0)))
    core = t_out @ depolarizer() @ t_in
    for c in range(3):
        out[c] = params.albedo[c] / np.pi * cos_i * core
    return out


def mueller_specular(params: MaterialParams, geom: ShadingGeometry) -> np.ndarray:
    """Per-channel specular Mueller matrices, shape ``(3, 3, 3)``."""
    out = np.zeros((3, 3, 3))
    h = geom.h
    cos_o = geom.cos_o
    if h is None or cos_o <= GRAZING_EPS or geom.cos_i <= 0 or params.ks == 0:
        return out
    cos_h = float(np.clip(geom.n @ h, 0.0, 1.0))
    theta_d = np.arccos(np.clip(geom.wi @ h, 0.0, 1.0))
    scale = params.ks * ggx_d(cos_h, params.roughness) * smith_g(geom, params.roughness) / (4 * cos_o)
    for c in range(3):
        out[c] = scale * fresnel.fresnel_reflection_mueller(params.ior.channel(c), theta_d)
    return out


@dataclass(frozen=True)
class PbrdfTerm:
    mueller: np.ndarray  # (3, 3, 3): channel, row, col
    frame_in: Frame
    frame_out: Frame


def evaluate(params: MaterialParams, geom: ShadingGeometry) -> tuple[PbrdfTerm, PbrdfTerm]:
    """Diffuse (gated by ``m``) and specular terms with the frames they are expressed in."""
    dif = mueller_diffuse(params, geom) if params.m == 1 else np.zeros((3, 3, 3))
    spec = mueller_specular(params, geom)
    return PbrdfTerm(dif, *diffuse_frames(geom)), PbrdfTerm(spec, *specular_frames(geom))

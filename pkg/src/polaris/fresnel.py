"""Fresnel reflection and transmission for real and complex refractive indices.

Complex indices follow the ``eta - k*i`` convention (``k >= 0`` absorbs).
Every operation takes a single scalar index; RGB is the caller's loop.
Angle arguments broadcast, so curves can be evaluated in one call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEGENERATE_AMPLITUDE = 1e-15


@dataclass(frozen=True)
class ComplexIor:
    """Per-channel complex refractive index ``eta - k*i``."""

    eta: tuple[float, float, float]
    k: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        eta = tuple(float(v) for v in np.broadcast_to(np.asarray(self.eta, dtype=float), (3,)))
        k = tuple(float(v) for v in np.broadcast_to(np.asarray(self.k, dtype=float), (3,)))
        if not all(np.isfinite(eta)) or min(eta) <= 0:
            raise ValueError(f"eta must be positive on every channel, got {eta}")
        if not all(np.isfinite(k)) or min(k) < 0:
            raise ValueError(f"k must be non-negative on every channel, got {k}")
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "k", k)

    def is_dielectric(self) -> bool:
        return all(v == 0 for v in self.k)

    def channel(self, c: int) -> complex:
        return complex(self.eta[c], -self.k[c])


def _cos_and_w(n, theta_i):
    """cos(theta_i) and ``w = n cos(theta_t) = sqrt(n^2 - sin^2 theta_i)``.

    The principal root keeps Re(w) >= 0 and, for ``n = eta - k*i``, Im(w) <= 0,
    i.e. the transmitted wave decays into the medium.
    """
    theta_i = np.asarray(theta_i, dtype=float)
    n = complex(n)
    cos_i = np.cos(theta_i)
    sin2 = np.sin(theta_i) ** 2
    w = np.sqrt(n * n - sin2 + 0j)
    return cos_i, w


def complex_cos_theta_t(n, theta_i):
    """Complex cosine of the refraction angle for incidence ``theta_i``."""
    _, w = _cos_and_w(n, theta_i)
    out = w / complex(n)
    return complex(out) if out.ndim == 0 else out


def _amplitudes(n, cos_i, w):
    n2 = complex(n) ** 2
    r_s = (cos_i - w) / (cos_i + w)
    r_p = (n2 * cos_i - w) / (n2 * cos_i + w)
    return r_s, r_p


def amplitude_coeffs(n, theta_i):
    """Amplitude reflection coefficients ``(r_s, r_p)``.

    ``r_p = (n cos_i - cos_t) / (n cos_i + cos_t)``, so a dielectric has
    ``r_p > 0`` below Brewster's angle and ``r_s < 0`` everywhere.
    """
    cos_i, w = _cos_and_w(n, theta_i)
    r_s, r_p = _amplitudes(n, cos_i, w)
    if r_s.ndim == 0:
        return complex(r_s), complex(r_p)
    return r_s, r_p


def reflectances_cos(n, cos_i):
    """``(R_s, R_p)`` from the cosine of the incidence angle; hot path for rendering."""
    cos_i = np.asarray(cos_i, dtype=float)
    n = complex(n)
    w = np.sqrt(n * n - (1.0 - cos_i * cos_i) + 0j)
    r_s, r_p = _amplitudes(n, cos_i, w)
    return r_s.real ** 2 + r_s.imag ** 2, r_p.real ** 2 + r_p.imag ** 2


def reflectances(n, theta_i):
    """Intensity reflectances ``(R_s, R_p) = (|r_s|^2, |r_p|^2)``."""
    r_s, r_p = amplitude_coeffs(n, theta_i)
    return np.abs(r_s) ** 2, np.abs(r_p) ** 2


def phase_delay_cos(n, theta_i):
    """cos of the p-s phase delay ``arg(r_p) - arg(r_s)``.

    Where either amplitude vanishes (a dielectric exactly at Brewster's angle)
    the value is taken from the limit approaching from smaller angles.
    """
    theta_i = np.asarray(theta_i, dtype=float)
    r_s, r_p = amplitude_coeffs(n, theta_i)
    r_s, r_p = np.asarray(r_s), np.asarray(r_p)
    prod = r_p * np.conj(r_s)
    mag = np.abs(prod)
    bad = (np.abs(r_s) < DEGENERATE_AMPLITUDE) | (np.abs(r_p) < DEGENERATE_AMPLITUDE)
    out = np.divide(prod.real, mag, out=np.zeros_like(mag), where=~bad)
    if np.any(bad):
        below = np.maximum(theta_i - 1e-7, 0.0)
        rs_b, rp_b = _amplitudes(n, *_cos_and_w(n, below))
        prod_b = np.broadcast_to(rp_b * np.conj(rs_b), out.shape)
        out = np.where(bad, prod_b.real / np.abs(prod_b), out)
    out = np.clip(out, -1.0, 1.0)
    return float(out) if out.ndim == 0 else out


def fresnel_reflection_mueller(n, theta_i) -> np.ndarray:
    """3x3 reflection Mueller matrix in the s/p frame (x axis = s direction)."""
    r_s, r_p = reflectances(n, theta_i)
    cos_delta = phase_delay_cos(n, theta_i)
    r_plus = (r_s + r_p) / 2
    r_minus = (r_s - r_p) / 2
    r_cross = np.sqrt(r_s * r_p)
    m = np.zeros(np.shape(r_plus) + (3, 3))
    m[..., 0, 0] = m[..., 1, 1] = r_plus
    m[..., 0, 1] = m[..., 1, 0] = r_minus
    m[..., 2, 2] = r_cross * cos_delta
    return m


def _real_index(n) -> float:
    n = complex(n)
    if n.imag != 0:
        raise ValueError("transmission undefined for conductors (k > 0)")
    return n.real


def transmittances_cos(n, cos_i):
    """``(T_s, T_p) = (1 - R_s, 1 - R_p)`` for a dielectric, from the incidence cosine."""
    r_s, r_p = reflectances_cos(_real_index(n), cos_i)
    return 1.0 - r_s, 1.0 - r_p


def fresnel_transmission_mueller(n, theta) -> np.ndarray:
    """3x3 transmission Mueller matrix of a dielectric interface, energy-complementary to reflection."""
    t_s, t_p = transmittances_cos(n, np.cos(np.asarray(theta, dtype=float)))
    m = np.zeros(np.shape(t_s) + (3, 3))
    m[..., 0, 0] = m[..., 1, 1] = (t_s + t_p) / 2
    m[..., 0, 1] = m[..., 1, 0] = (t_s - t_p) / 2
    m[..., 2, 2] = np.sqrt(t_s * t_p)
    return m


def brewster_angle(n) -> float:
    if n <= 0:
        raise ValueError("refractive index must be positive")
    return float(np.arctan(n))


def fresnel_curve(n, theta_deg):
    """Columns of a reflectance/phase curve: ``(theta_deg, R_s, R_p, R_avg, cos_delta)``."""
    theta_deg = np.asarray(theta_deg, dtype=float)
    theta = np.radians(theta_deg)
    r_s, r_p = reflectances(n, theta)
    return theta_deg, r_s, r_p, (r_s + r_p) / 2, phase_delay_cos(n, theta)

"""Stokes/Mueller algebra for linearly polarized light.

Stokes vectors are plain numpy arrays whose last axis holds ``(s0, s1, s2)``;
Mueller matrices are ``(..., 3, 3)`` arrays. ``s0`` is the total intensity.

A reference frame is a propagation direction ``d`` and a transverse axis
``x``; ``s1`` compares intensity along ``x`` with intensity along
``y = d x x``. Rotating the frame by ``phi`` (right-handed about ``d``, i.e.
counterclockwise when looking into ``-d``) maps Stokes vectors through
``rotation_mueller(phi)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FRAME_TOL = 1e-9
DOLP_EPS = 1e-12


def stokes(s0, s1=0.0, s2=0.0) -> np.ndarray:
    return np.array([s0, s1, s2], dtype=float)


def is_physical(s, rtol: float = 1e-9) -> bool:
    s = np.asarray(s, dtype=float)
    s0 = s[..., 0]
    lin = np.hypot(s[..., 1], s[..., 2])
    return bool(np.all(s0 >= 0) and np.all(lin <= s0 * (1 + rtol)))


@dataclass(frozen=True)
class Frame:
    """Stokes reference frame: unit propagation ``d`` and unit transverse axis ``x``."""

    d: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.d, dtype=float)
        x = np.asarray(self.x, dtype=float)
        if abs(np.linalg.norm(d) - 1) > FRAME_TOL or abs(np.linalg.norm(x) - 1) > FRAME_TOL:
            raise ValueError("frame axes must be unit length")
        if abs(d @ x) > FRAME_TOL:
            raise ValueError("frame x axis must be orthogonal to d")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "x", x)

    @property
    def y(self) -> np.ndarray:
        return np.cross(self.d, self.x)

    @classmethod
    def from_hint(cls, d, hint) -> "Frame":
        """Frame along ``d`` whose x axis is ``hint`` projected orthogonal to ``d``."""
        d = np.asarray(d, dtype=float)
        d = d / np.linalg.norm(d)
        x = np.asarray(hint, dtype=float)
        x = x - (x @ d) * d
        nx = np.linalg.norm(x)
        if nx < 1e-12:
            x = perpendicular(d)
        else:
            x = x / nx
        return cls(d, x)


def perpendicular(d) -> np.ndarray:
    """Some unit vector orthogonal to ``d``."""
    d = np.asarray(d, dtype=float)
    a = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = a - (a @ d) * d
    return x / np.linalg.norm(x)


def rotation_mueller(phi) -> np.ndarray:
    """Mueller matrix re-expressing a Stokes vector in a frame rotated by ``phi``.

    Vectorized over ``phi``; the result has shape ``phi.shape + (3, 3)``.
    """
    phi = np.asarray(phi, dtype=float)
    c = np.cos(2 * phi)
    s = np.sin(2 * phi)
    m = np.zeros(phi.shape + (3, 3))
    m[..., 0, 0] = 1.0
    m[..., 1, 1] = c
    m[..., 1, 2] = s
    m[..., 2, 1] = -s
    m[..., 2, 2] = c
    return m


def frame_rotation_angle(src: Frame, dst: Frame, tol: float = 1e-6) -> float:
    """Angle in (-pi, pi] that rotates ``src.x`` onto ``dst.x`` about the shared ``d``."""
    cosang = np.clip(src.d @ dst.d, -1.0, 1.0)
    if np.arccos(cosang) >= tol:
        raise ValueError("frames have different propagation directions")
    phi = float(np.arctan2(src.d @ np.cross(src.x, dst.x), src.x @ dst.x))
    return np.pi if phi == -np.pi else phi


def rotation_angles(d, x_src, x_dst) -> np.ndarray:
    """Vectorized :func:`frame_rotation_angle` for stacked ``(..., 3)`` axes (no checks)."""
    sin = np.einsum("...i,...i->...", d, np.cross(x_src, x_dst))
    cos = np.einsum("...i,...i->...", x_src, x_dst)
    return np.arctan2(sin, cos)


def apply(m, s) -> np.ndarray:
    """Matrix-vector product, broadcasting over leading axes."""
    return np.einsum("...ij,...j->...i", np.asarray(m, dtype=float), np.asarray(s, dtype=float))


def depolarizer() -> np.ndarray:
    return np.diag([1.0, 0.0, 0.0])


def dolp(s) -> np.ndarray | float:
    """Degree of linear polarization, clamped to [0, 1]; 0 where ``s0 <= 1e-12``."""
    s = np.asarray(s, dtype=float)
    s0 = s[..., 0]
    lin = np.hypot(s[..., 1], s[..., 2])
    ok = s0 > DOLP_EPS
    out = np.divide(lin, s0, out=np.zeros_like(lin), where=ok)
    out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def stokes_from_polarizer(i0, i45, i90, i135) -> np.ndarray:
    """Stokes vector(s) from four ideal linear-polarizer intensities."""
    i0, i45, i90, i135 = (np.asarray(v, dtype=float) for v in (i0, i45, i90, i135))
    # allow round-off sized negatives from derived images
    floor = -1e-12 * np.abs(i0 + i45 + i90 + i135)
    if any(np.any(v < floor) for v in (i0, i45, i90, i135)):
        raise ValueError("polarizer intensities must be non-negative")
    s0 = (i0 + i45 + i90 + i135) / 2
    return np.stack([s0, i0 - i90, i45 - i135], axis=-1)


def polarizer_from_stokes(s, alpha) -> np.ndarray | float:
    """Intensity behind an ideal linear polarizer at angle ``alpha`` (Malus law)."""
    s = np.asarray(s, dtype=float)
    out = 0.5 * (s[..., 0] + s[..., 1] * np.cos(2 * alpha) + s[..., 2] * np.sin(2 * alpha))
    return float(out) if np.ndim(out) == 0 else out


POLARIZER_ANGLES = (0.0, np.pi / 4, np.pi / 2, 3 * np.pi / 4)


def polarizer_images(s) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(I0, I45, I90, I135) computed exactly from Stokes components.

    Uses the closed forms at the four canonical angles so that
    :func:`stokes_from_polarizer` inverts it without trigonometric round-off.
    """
    s = np.asarray(s, dtype=float)
    s0, s1, s2 = s[..., 0], s[..., 1], s[..., 2]
    return 0.5 * (s0 + s1), 0.5 * (s0 + s2), 0.5 * (s0 - s1), 0.5 * (s0 - s2)

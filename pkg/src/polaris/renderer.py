"""Forward polarimetric rendering with direct environment light.

Each camera ray is sphere traced; at a hit the reflected Stokes vector is an
equal-weight Fibonacci quadrature over the hemisphere around the SDF normal,
summing the gated diffuse term and the specular term, each rotated from its
own frame into the camera frame (x axis = image right). Misses show the
unpolarized environment.

Rendering is split in two stages. :func:`trace_view` computes everything that
depends only on geometry, lighting and camera; :func:`shade_view` evaluates the
materials on that cache. The inverse solver keeps the cache and re-shades.
"""

from __future__ import annotations

import math
import os
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import fresnel, pbrdf
from .pbrdf import DIELECTRIC_ETA, GRAZING_EPS, MaterialParams, ShadingGeometry
from .polcore import (Frame, apply, depolarizer, dolp, frame_rotation_angle, polarizer_images,
                      rotation_mueller)
from ._kernels import specular_sums
from .scene import Camera, Hit, Scene, normals, trace

GOLDEN = (1 + 5 ** 0.5) / 2
SHADOW_EPS = 1e-3
CHUNK = 256  # pixels per task; fixed so results never depend on the worker count


def fibonacci_local(n: int, seed: int = 0) -> np.ndarray:
    """``n`` Fibonacci-lattice directions on the +z hemisphere (equal area cells)."""
    if n < 4:
        raise ValueError("need at least 4 samples")
    offset = np.random.default_rng(seed).random()
    i = np.arange(n)
    z = 1.0 - (i + 0.5) / n
    r = np.sqrt(1.0 - z * z)
    phi = 2 * np.pi * np.mod(i / GOLDEN + offset, 1.0)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def tangent_basis(n) -> np.ndarray:
    """Orthonormal ``(t, b, n)`` rows for unit normals ``(..., 3)`` (branchless Duff et al.)."""
    n = np.asarray(n, dtype=float)
    nx, ny, nz = n[..., 0], n[..., 1], n[..., 2]
    sign = np.where(nz >= 0, 1.0, -1.0)
    a = -1.0 / (sign + nz)
    b = nx * ny * a
    t = np.stack([1.0 + sign * nx * nx * a, sign * b, -sign * nx], axis=-1)
    bt = np.stack([b, sign + ny * ny * a, -ny], axis=-1)
    return np.stack([t, bt, n], axis=-2)


def fibonacci_hemisphere(n: int, normal, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Directions around ``normal`` and their solid-angle weights (each ``2 pi / n``)."""
    local = fibonacci_local(n, seed)
    dirs = local @ tangent_basis(normal)
    return dirs, np.full(n, 2 * np.pi / n)


@dataclass
class PolarizedImage:
    """RGB Stokes image. ``stokes`` is ``(H, W, 3 channels, 3 components)``, linear HDR."""

    stokes: np.ndarray
    mask: np.ndarray  # (H, W) bool, True where a surface was hit
    material_ids: np.ndarray  # (H, W) int, -1 on misses
    conductor: np.ndarray  # (H, W) bool

    @property
    def height(self) -> int:
        return self.stokes.shape[0]

    @property
    def width(self) -> int:
        return self.stokes.shape[1]


def camera_x_axes(dirs, right) -> np.ndarray:
    """Per-ray camera reference axes: image right projected orthogonal to the ray."""
    x = right - np.einsum("...i,...i->...", right, dirs)[..., None] * dirs
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _unit_cross(a, b, fallback_ok):
    c = np.cross(a, b)
    nc = np.linalg.norm(c, axis=-1, keepdims=True)
    ok = nc[..., 0] > 1e-12
    return np.divide(c, nc, out=np.zeros_like(c), where=nc > 1e-12), ok & fallback_ok


def _cos_sin_2phi(x_src, x_dst, d, valid):
    """cos(2 phi), sin(2 phi) of the rotation taking ``x_src`` to ``x_dst`` about ``d``."""
    c = np.einsum("...i,...i->...", x_src, x_dst)
    s = np.einsum("...i,...i->...", d, np.cross(x_src, x_dst))
    c2 = np.where(valid, c * c - s * s, 1.0)
    s2 = np.where(valid, 2 * c * s, 0.0)
    return c2, s2


@dataclass
class ViewGeometry:
    """Material-independent shading inputs for one view.

    Pixel arrays are indexed by hit pixel (``P``), sample arrays by
    ``(P, N)``; radiance arrays are channel-major ``(3, P, N)``.
    """

    height: int
    width: int
    hit_index: np.ndarray  # (P,) flat pixel indices of hits
    material_ids: np.ndarray  # (P,)
    background: np.ndarray  # (H*W, 3) env radiance on misses (zero on hits)
    cos_i: np.ndarray  # (N,) sample cosines against the normal
    weight: float  # 2 pi / N
    cos_o: np.ndarray  # (P,)
    dif_c2: np.ndarray  # (P,)
    dif_s2: np.ndarray  # (P,)
    cos_h: np.ndarray  # (P, N)
    cos_d: np.ndarray  # (P, N)
    radiance: np.ndarray  # (3, P, N) incident radiance times visibility
    radiance_c2: np.ndarray  # (3, P, N) radiance * cos(2 phi_spec)
    radiance_s2: np.ndarray  # (3, P, N) radiance * sin(2 phi_spec)
    is_conductor: np.ndarray  # (P,) from the scene materials at trace time

    @property
    def n_hits(self) -> int:
        return len(self.hit_index)

    def group(self, mid: int) -> "MaterialGroup":
        """Contiguous copies of the per-pixel arrays for pixels of material ``mid``."""
        cache = self.__dict__.setdefault("_groups", {})
        if mid not in cache:
            sel = np.nonzero(self.material_ids == mid)[0]
            cache[mid] = MaterialGroup(
                sel, self.cos_i, self.weight, self.cos_o[sel], self.dif_c2[sel], self.dif_s2[sel],
                np.ascontiguousarray(self.cos_h[sel]), np.ascontiguousarray(self.cos_d[sel]),
                np.ascontiguousarray(self.radiance[:, sel]), np.ascontiguousarray(self.radiance_c2[:, sel]),
                np.ascontiguousarray(self.radiance_s2[:, sel]))
        return cache[mid]


@dataclass
class MaterialGroup:
    sel: np.ndarray
    cos_i: np.ndarray
    weight: float
    cos_o: np.ndarray
    dif_c2: np.ndarray
    dif_s2: np.ndarray
    cos_h: np.ndarray
    cos_d: np.ndarray
    radiance: np.ndarray
    radiance_c2: np.ndarray
    radiance_s2: np.ndarray


def _trace_chunk(scene: Scene, origins, dirs, right, local):
    """Geometry for one chunk of camera rays."""
    hit, t, prim = trace(scene, origins, dirs)
    background = scene.env.radiance(dirs)
    background[hit] = 0.0
    idx = np.nonzero(hit)[0]
    n_samples = len(local)
    if idx.size == 0:
        empty = np.zeros((0,))
        return hit, prim, background, idx, empty, empty, empty, np.zeros((0, n_samples)), \
            np.zeros((0, n_samples)), np.zeros((3, 0, n_samples)), np.zeros((3, 0, n_samples)), \
            np.zeros((3, 0, n_samples))
    d = dirs[idx]
    pos = origins[idx] + t[idx, None] * d
    nrm = normals(scene, pos)
    wo = -d
    cos_o = np.einsum("pi,pi->p", nrm, wo)
    x_cam = camera_x_axes(wo, right[idx])

    x_dif, ok_dif = _unit_cross(nrm, wo, np.ones(len(idx), dtype=bool))
    dif_c2, dif_s2 = _cos_sin_2phi(x_dif, x_cam, wo, ok_dif)

    basis = tangent_basis(nrm)  # (P, 3, 3)
    wi = np.einsum("nk,pkj->pnj", local, basis)  # (P, N, 3)
    h = wi + wo[:, None, :]
    h /= np.linalg.norm(h, axis=-1, keepdims=True)
    cos_h = np.clip(np.einsum("pnj,pj->pn", h, nrm), 0.0, 1.0)
    cos_d = np.clip(np.einsum("pnj,pnj->pn", wi, h), 0.0, 1.0)

    x_spec, ok_spec = _unit_cross(wi, wo[:, None, :], np.ones(wi.shape[:2], dtype=bool))
    spec_c2, spec_s2 = _cos_sin_2phi(x_spec, x_cam[:, None, :], wo[:, None, :], ok_spec)

    shadow_origin = np.broadcast_to((pos + SHADOW_EPS * nrm)[:, None, :], wi.shape)
    blocked, _, _ = trace(scene, shadow_origin, wi)
    radiance = scene.env.radiance(wi) * (~blocked)[..., None]
    radiance = np.ascontiguousarray(np.moveaxis(radiance, -1, 0))
    return (hit, prim, background, idx, cos_o, dif_c2, dif_s2, cos_h, cos_d, radiance,
            radiance * spec_c2, radiance * spec_s2)


def resolve_threads(threads: int | None) -> int:
    if threads is None:
        threads = int(os.environ.get("POLARIS_THREADS") or os.cpu_count() or 1)
    return max(1, int(threads))


def trace_rays(scene: Scene, origins, dirs, right, threads: int | None = None) -> ViewGeometry:
    """Build the shading cache for arbitrary camera rays (``(H, W, 3)`` arrays)."""
    height, width = dirs.shape[:2]
    o = np.asarray(origins, dtype=float).reshape(-1, 3)
    d = np.asarray(dirs, dtype=float).reshape(-1, 3)
    r = np.asarray(right, dtype=float).reshape(-1, 3)
    local = fibonacci_local(scene.hemisphere_samples, scene.seed)
    starts = list(range(0, len(d), CHUNK))

    def work(s):
        sl = slice(s, s + CHUNK)
        return _trace_chunk(scene, o[sl], d[sl], r[sl], local)

    workers = resolve_threads(threads)
    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(work, starts))
    else:
        parts = [work(s) for s in starts]

    prim = np.concatenate([p[1] for p in parts])
    background = np.concatenate([p[2] for p in parts])
    hit_index = np.concatenate([p[3] + s for p, s in zip(parts, starts)]).astype(int)
    cat = [np.concatenate([p[k] for p in parts], axis=0) for k in (4, 5, 6, 7, 8)]
    rad = [np.concatenate([p[k] for p in parts], axis=1) for k in (9, 10, 11)]
    prim_hit = prim[hit_index]
    mat_of_prim = np.array([p.material for p in scene.primitives], dtype=int)
    material_ids = mat_of_prim[prim_hit] if prim_hit.size else np.zeros(0, dtype=int)
    conductor = np.array([m.is_conductor for m in scene.materials], dtype=bool)
    is_conductor = conductor[material_ids] if material_ids.size else np.zeros(0, dtype=bool)
    return ViewGeometry(height, width, hit_index, material_ids, background, local[:, 2].copy(),
                        2 * np.pi / len(local), cat[0], cat[1], cat[2], cat[3], cat[4],
                        rad[0], rad[1], rad[2], is_conductor)


def trace_view(scene: Scene, camera: Camera | None = None, threads: int | None = None) -> ViewGeometry:
    cam = camera or scene.camera
    origins, dirs, right = cam.rays()
    return trace_rays(scene, origins, dirs, right, threads)


class ShadeMemo:
    """Small LRU of intermediate shading arrays, keyed by material parameter values.

    Finite-difference probes change one parameter at a time, so most of the
    expensive arrays (microfacet weights, Fresnel reflectances, per-channel
    sums) can be reused between probes.
    """

    def __init__(self, size: int = 48):
        self.size = size
        self._data: OrderedDict = OrderedDict()

    def get(self, key, factory):
        try:
            self._data.move_to_end(key)
            return self._data[key]
        except KeyError:
            pass
        value = factory()
        self._data[key] = value
        if len(self._data) > self.size:
            self._data.popitem(last=False)
        return value


def _microfacet_weight(g: MaterialGroup, roughness: float) -> np.ndarray:
    """``D G / (4 cos_o) * (2 pi / N)`` per sample, ks excluded."""
    g_o = pbrdf.smith_g1(g.cos_o, roughness)
    g_i = pbrdf.smith_g1(g.cos_i, roughness)
    scale = np.divide(g_o * g.weight, 4 * g.cos_o, out=np.zeros_like(g.cos_o), where=g.cos_o > GRAZING_EPS)
    w = pbrdf.ggx_d(g.cos_h, roughness)
    w *= scale[:, None] * g_i[None, :]
    return w


def _specular_sums(g: MaterialGroup, c: int, weight: np.ndarray, n: complex) -> np.ndarray:
    """Per-pixel specular Stokes (camera frame) for channel ``c`` with ks = 1, shape ``(P', 3)``."""
    out = np.empty((len(g.sel), 3))
    return specular_sums(weight, g.cos_d, g.radiance[c], g.radiance_c2[c], g.radiance_s2[c],
                         n.real, n.imag, out)


def _diffuse_basis(g: MaterialGroup) -> np.ndarray:
    """Per-pixel diffuse Stokes for albedo 1, shape ``(P', 3 channels, 3)``."""
    t_s, t_p = fresnel.transmittances_cos(DIELECTRIC_ETA, g.cos_i)
    t_in = 0.5 * (t_s + t_p) * g.cos_i * g.weight / np.pi  # (N,)
    valid = g.cos_o > 0
    to_s, to_p = fresnel.transmittances_cos(DIELECTRIC_ETA, np.clip(g.cos_o, 0.0, 1.0))
    t_plus = np.where(valid, 0.5 * (to_s + to_p), 0.0)
    t_minus = np.where(valid, 0.5 * (to_s - to_p), 0.0)
    out = np.empty((len(g.sel), 3, 3))
    for c in range(3):
        a = g.radiance[c] @ t_in  # (P',)
        out[:, c, 0] = a * t_plus
        out[:, c, 1] = a * t_minus * g.dif_c2
        out[:, c, 2] = -a * t_minus * g.dif_s2
    return out


def shade_hits(geom: ViewGeometry, materials, memo: ShadeMemo | None = None) -> np.ndarray:
    """Stokes vectors ``(P, 3 channels, 3)`` of every hit pixel."""
    out = np.zeros((geom.n_hits, 3, 3))
    for mid, mat in enumerate(materials):
        g = geom.group(mid)
        if g.sel.size == 0:
            continue
        acc = np.zeros((len(g.sel), 3, 3))
        if mat.ks != 0:
            r = mat.roughness
            for c in range(3):
                n = mat.ior.channel(c)
                if memo is None:
                    spec = _specular_sums(g, c, _microfacet_weight(g, r), n)
                else:
                    spec = memo.get(("spec", mid, c, r, n), lambda: _specular_sums(
                        g, c, memo.get(("w", mid, r), lambda: _microfacet_weight(g, r)), n))
                acc[:, c, :] = mat.ks * spec
        if mat.m == 1:
            dif = _diffuse_basis(g) if memo is None else memo.get(("dif", mid), lambda: _diffuse_basis(g))
            acc += np.asarray(mat.albedo)[None, :, None] * dif
        out[g.sel] = acc
    return out


def assemble(geom: ViewGeometry, hits_stokes: np.ndarray, materials) -> PolarizedImage:
    flat = np.zeros((geom.height * geom.width, 3, 3))
    flat[:, :, 0] = geom.background
    flat[geom.hit_index] = hits_stokes
    mask = np.zeros(geom.height * geom.width, dtype=bool)
    mask[geom.hit_index] = True
    ids = np.full(geom.height * geom.width, -1, dtype=int)
    ids[geom.hit_index] = geom.material_ids
    conductor_of = np.array([m.is_conductor for m in materials] + [False], dtype=bool)
    shape = (geom.height, geom.width)
    return PolarizedImage(flat.reshape(shape + (3, 3)), mask.reshape(shape), ids.reshape(shape),
                          conductor_of[ids].reshape(shape))


def shade_view(geom: ViewGeometry, materials, memo: ShadeMemo | None = None) -> PolarizedImage:
    return assemble(geom, shade_hits(geom, materials, memo), materials)


def render(scene: Scene, camera: Camera | None = None, threads: int | None = None) -> PolarizedImage:
    """Render the scene's Stokes image (optionally from another camera)."""
    return shade_view(trace_view(scene, camera, threads), scene.materials)


# --- single-point reference path -----------------------------------------

def incident_stokes(scene: Scene, x, n, wi) -> np.ndarray:
    """Unpolarized incident Stokes ``(3 channels, 3)`` arriving at ``x`` from ``wi``.

    The environment is unpolarized, so the value is the same in every
    reference frame.
    """
    x, n, wi = (np.asarray(v, dtype=float) for v in (x, n, wi))
    blocked, _, _ = trace(scene, (x + SHADOW_EPS * n)[None], wi[None])
    out = np.zeros((3, 3))
    if not blocked[0]:
        out[:, 0] = scene.env.radiance(wi[None])[0]
    return out


def shade(scene: Scene, hit: Hit, wo, camera_frame: Frame, depolarize: bool = False) -> np.ndarray:
    """Reflected Stokes ``(3 channels, 3)`` at a hit, in ``camera_frame``.

    Evaluates the full pBRDF Mueller matrices, their frames and the rotation
    into the camera frame sample by sample. Slow; :func:`render` computes the
    same sum in closed form over the cached geometry. ``depolarize`` swaps
    both Mueller terms for an ideal depolarizer (debugging aid).
    """
    mat: MaterialParams = scene.materials[hit.material_id]
    wo = np.asarray(wo, dtype=float)
    dirs, weights = fibonacci_hemisphere(scene.hemisphere_samples, hit.normal, scene.seed)
    out = np.zeros((3, 3))
    for wi, w in zip(dirs, weights):
        s_in = incident_stokes(scene, hit.position, hit.normal, wi)
        if not s_in[:, 0].any():
            continue
        geom = ShadingGeometry(hit.normal, wi, wo)
        dif, spec = pbrdf.evaluate(mat, geom)
        for term in (dif, spec):
            if not term.mueller.any():
                continue
            mueller = term.mueller
            if depolarize:
                mueller = np.broadcast_to(depolarizer(), mueller.shape)
            phi = frame_rotation_angle(term.frame_out, camera_frame)
            out += w * apply(rotation_mueller(phi) @ mueller, s_in)
    return out


def camera_frame_for(direction, right) -> Frame:
    """Camera reference frame for light travelling back along a camera ray."""
    d = -np.asarray(direction, dtype=float)
    return Frame.from_hint(d, right)


# --- derived images --------------------------------------------------------

def derive_images(img: PolarizedImage | np.ndarray) -> dict[str, np.ndarray]:
    """s0 / DoLP / four polarizer-angle images, each ``(H, W, 3)``."""
    s = img.stokes if isinstance(img, PolarizedImage) else np.asarray(img, dtype=float)
    i0, i45, i90, i135 = polarizer_images(s)
    return {"s0": s[..., 0], "s1": s[..., 1], "s2": s[..., 2], "dolp": dolp(s),
            "i000": i0, "i045": i45, "i090": i90, "i135": i135}


def env_scaled(scene: Scene, gamma: float) -> Scene:
    return scene.replace(env=scene.env.scaled(gamma))


def orbit_cameras(camera: Camera, views: int) -> list[Camera]:
    """Cameras on a horizontal circle (about the camera's up axis) around the origin."""
    if views < 1:
        raise ValueError("views must be at least 1")
    axis = np.asarray(camera.up) / np.linalg.norm(camera.up)
    out = []
    for v in range(views):
        ang = 2 * math.pi * v / views
        k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
        rot = np.eye(3) + math.sin(ang) * k + (1 - math.cos(ang)) * (k @ k)
        out.append(Camera(tuple(rot @ np.asarray(camera.position)), (0.0, 0.0, 0.0), camera.up,
                          camera.vertical_fov, camera.width, camera.height))
    return out

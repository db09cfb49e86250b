"""Analytic scenes: camera, SDF primitives, materials and environment light.

Scene files are strict JSON (see README for the schema). Geometry is a union
of exact SDF primitives, so the field is 1-Lipschitz and sphere tracing never
overshoots.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from .fresnel import ComplexIor
from .pbrdf import DIELECTRIC_ETA, MaterialParams

HIT_TOL = 1e-4
MAX_STEPS = 512
MAX_DIST = 100.0
NORMAL_STEP = 1e-5


class SceneError(ValueError):
    """Scene file problem. ``kind`` is ``syntax``, ``unknown_key`` or ``invalid``."""

    def __init__(self, kind: str, message: str, path: str = "", line: int | None = None,
                 column: int | None = None):
        self.kind = kind
        self.path = path
        self.line = line
        self.column = column
        where = f" at line {line}, column {column}" if line is not None else ""
        at = f" ({path})" if path else ""
        super().__init__(f"{kind}: {message}{at}{where}")


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class Camera:
    position: tuple[float, float, float]
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)
    up: tuple[float, float, float] = (0.0, 1.0, 0.0)
    vertical_fov: float = 40.0
    width: int = 64
    height: int = 64

    def __post_init__(self):
        for name in ("position", "look_at", "up"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if not 0 < self.vertical_fov < 180:
            raise ValueError("vertical_fov must lie in (0, 180) degrees")
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValueError("width and height must be at least 1")
        fwd = np.subtract(self.look_at, self.position)
        if np.linalg.norm(fwd) == 0:
            raise ValueError("camera position equals look_at")
        if np.linalg.norm(np.cross(fwd, self.up)) < 1e-9 * np.linalg.norm(fwd) * max(np.linalg.norm(self.up), 1e-300):
            raise ValueError("camera up is parallel to the view direction")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(forward, right, up) orthonormal camera axes."""
        fwd = _unit(np.subtract(self.look_at, self.position))
        right = _unit(np.cross(fwd, self.up))
        up = np.cross(right, fwd)
        return fwd, right, up

    def rays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Pinhole rays through pixel centers, row-major from the top-left.

        Returns ``(origins, directions, right)`` with shapes ``(H, W, 3)``;
        ``right`` is the image-right axis used as the polarization 0 deg.
        """
        fwd, right, up = self.basis()
        tan_half = math.tan(math.radians(self.vertical_fov) / 2)
        aspect = self.width / self.height
        xs = (2 * (np.arange(self.width) + 0.5) / self.width - 1) * tan_half * aspect
        ys = (1 - 2 * (np.arange(self.height) + 0.5) / self.height) * tan_half
        d = fwd + xs[None, :, None] * right + ys[:, None, None] * up
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        origins = np.broadcast_to(np.asarray(self.position), d.shape).copy()
        return origins, d, np.broadcast_to(right, d.shape).copy()

    def to_dict(self) -> dict:
        return {"position": list(self.position), "look_at": list(self.look_at), "up": list(self.up),
                "vertical_fov": self.vertical_fov, "width": self.width, "height": self.height}


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    material: int = 0

    def distance(self, p):
        return np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius


@dataclass(frozen=True)
class Plane:
    point: tuple[float, float, float]
    normal: tuple[float, float, float]
    material: int = 0

    def distance(self, p):
        return (p - np.asarray(self.point)) @ np.asarray(self.normal)


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    half_extents: tuple[float, float, float]
    material: int = 0

    def distance(self, p):
        q = np.abs(p - np.asarray(self.center)) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside


Primitive = Sphere | Plane | Box


@dataclass(frozen=True)
class Sun:
    direction: tuple[float, float, float]
    angular_radius: float  # radians
    radiance: tuple[float, float, float]


@dataclass(frozen=True)
class EnvLight:
    """Unpolarized distant light: uniform ambient plus additive sun discs."""

    ambient: tuple[float, float, float] = (0.0, 0.0, 0.0)
    suns: tuple[Sun, ...] = ()

    def radiance(self, dirs) -> np.ndarray:
        """RGB radiance arriving from directions ``dirs`` (``(..., 3)`` unit vectors)."""
        dirs = np.asarray(dirs, dtype=float)
        out = np.broadcast_to(np.asarray(self.ambient), dirs.shape[:-1] + (3,)).copy()
        for sun in self.suns:
            inside = dirs @ np.asarray(sun.direction) >= math.cos(sun.angular_radius)
            out += inside[..., None] * np.asarray(sun.radiance)
        return out

    def scaled(self, gamma: float) -> "EnvLight":
        return EnvLight(tuple(gamma * v for v in self.ambient),
                        tuple(replace(s, radiance=tuple(gamma * v for v in s.radiance)) for s in self.suns))


@dataclass(frozen=True)
class Scene:
    camera: Camera
    primitives: tuple = ()
    materials: tuple[MaterialParams, ...] = ()
    env: EnvLight = field(default_factory=EnvLight)
    hemisphere_samples: int = 128
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        object.__setattr__(self, "materials", tuple(self.materials))
        for i, prim in enumerate(self.primitives):
            if not 0 <= prim.material < len(self.materials):
                raise ValueError(f"primitive {i} references missing material {prim.material}")
        if self.hemisphere_samples < 4:
            raise ValueError("hemisphere_samples must be at least 4")

    def replace(self, **changes) -> "Scene":
        return replace(self, **changes)

    def sdf_and_index(self, p) -> tuple[np.ndarray, np.ndarray]:
        """Union distance and index of the closest primitive (-1 when empty)."""
        p = np.asarray(p, dtype=float)
        best = np.full(p.shape[:-1], np.inf)
        idx = np.full(p.shape[:-1], -1, dtype=int)
        for i, prim in enumerate(self.primitives):
            d = prim.distance(p)
            closer = d < best
            best = np.where(closer, d, best)
            idx = np.where(closer, i, idx)
        return best, idx


def sdf(scene: Scene, x) -> np.ndarray | float:
    d, _ = scene.sdf_and_index(x)
    return float(d) if np.ndim(d) == 0 else d


def normals(scene: Scene, x, h: float = NORMAL_STEP) -> np.ndarray:
    """Normalized central-difference SDF gradients at points ``x`` (``(..., 3)``)."""
    x = np.asarray(x, dtype=float)
    grad = np.empty(x.shape)
    for axis in range(3):
        e = np.zeros(3)
        e[axis] = h
        grad[..., axis] = scene.sdf_and_index(x + e)[0] - scene.sdf_and_index(x - e)[0]
    norm = np.linalg.norm(grad, axis=-1, keepdims=True)
    if np.any(norm == 0) or not np.all(np.isfinite(norm)):
        raise ValueError("degenerate SDF gradient")
    return grad / norm


def normal(scene: Scene, x) -> np.ndarray:
    return normals(scene, np.asarray(x, dtype=float))


@dataclass(frozen=True)
class Hit:
    position: np.ndarray
    normal: np.ndarray
    material_id: int
    t: float


def trace(scene: Scene, origins, dirs, tol: float = HIT_TOL, max_steps: int = MAX_STEPS,
          max_dist: float = MAX_DIST) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized sphere tracing.

    Returns ``(hit, t, primitive_index)`` arrays over the leading axes of the
    inputs; ``primitive_index`` is -1 for misses.
    """
    origins = np.asarray(origins, dtype=float)
    dirs = np.asarray(dirs, dtype=float)
    shape = origins.shape[:-1]
    o = origins.reshape(-1, 3)
    dv = dirs.reshape(-1, 3)
    t = np.zeros(len(o))
    hit = np.zeros(len(o), dtype=bool)
    prim = np.full(len(o), -1, dtype=int)
    active = np.arange(len(o)) if scene.primitives else np.arange(0)
    for _ in range(max_steps):
        if active.size == 0:
            break
        p = o[active] + t[active, None] * dv[active]
        d, idx = scene.sdf_and_index(p)
        done = d < tol
        hit[active[done]] = True
        prim[active[done]] = idx[done]
        t[active[~done]] += d[~done]
        keep = ~done & (t[active] <= max_dist)
        active = active[keep]
    _refine(scene, o, dv, t, np.flatnonzero(hit), tol)
    return hit.reshape(shape), t.reshape(shape), prim.reshape(shape)


def _refine(scene: Scene, o, dv, t, idx, tol, iters: int = 4, h: float = NORMAL_STEP):
    """Newton steps along the ray to close the gap sphere tracing leaves at grazing incidence.

    Each primitive's distance is convex along a ray, so a tangent step from
    outside never passes its root. Steps are capped and rejected if they land
    more than ``tol`` inside the union.
    """
    max_step = 100 * tol
    for _ in range(iters):
        if idx.size == 0:
            return
        ti, di = t[idx], dv[idx]
        p = o[idx] + ti[:, None] * di
        f = scene.sdf_and_index(p)[0]
        slope = (scene.sdf_and_index(p + h * di)[0] - scene.sdf_and_index(p - h * di)[0]) / (2 * h)
        ok = (f > 0) & (slope < 0) & (f < max_step * -slope)
        step = np.where(ok, f / np.where(ok, -slope, 1.0), 0.0)
        cand = ti + step
        fc = scene.sdf_and_index(o[idx] + cand[:, None] * di)[0]
        accept = ok & (fc > -tol) & (np.abs(fc) < f)
        t[idx[accept]] = cand[accept]
        idx = idx[accept]


def sphere_trace(scene: Scene, origin, direction) -> Hit | None:
    """First surface crossing along a single ray, or ``None`` on a miss."""
    origin = np.asarray(origin, dtype=float)
    direction = np.asarray(direction, dtype=float)
    hit, t, prim = trace(scene, origin[None], direction[None])
    if not hit[0]:
        return None
    pos = origin + t[0] * direction
    return Hit(pos, normal(scene, pos), scene.primitives[prim[0]].material, float(t[0]))


# --- scene file parsing ---------------------------------------------------

_TOP_KEYS = {"camera", "primitives", "materials", "env", "sampling"}
_CAMERA_KEYS = {"position", "look_at", "up", "vertical_fov", "width", "height"}
_PRIM_KEYS = {
    "sphere": {"type", "center", "radius", "material"},
    "plane": {"type", "point", "normal", "material"},
    "box": {"type", "center", "half_extents", "material"},
}
_MATERIAL_KEYS = {"m", "albedo", "roughness", "ks", "eta", "k"}
_ENV_KEYS = {"ambient", "suns"}
_SUN_KEYS = {"direction", "angular_radius", "radiance"}
_SAMPLING_KEYS = {"hemisphere_samples", "seed"}


def _obj(value, path) -> dict:
    if not isinstance(value, dict):
        raise SceneError("invalid", "expected an object", path)
    return value


def _check_keys(obj: dict, allowed: set, path: str, required: set = frozenset()):
    for key in obj:
        if key not in allowed:
            raise SceneError("unknown_key", f"unknown key {key!r}", path)
    for key in required:
        if key not in obj:
            raise SceneError("invalid", f"missing required key {key!r}", path)


def _number(value, path) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise SceneError("invalid", "expected a finite number", path)
    return float(value)


def _integer(value, path) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise SceneError("invalid", "expected an integer", path)
    return value


def _vec3(value, path) -> tuple[float, float, float]:
    if not isinstance(value, list) or len(value) != 3:
        raise SceneError("invalid", "expected a list of 3 numbers", path)
    return tuple(_number(v, f"{path}[{i}]") for i, v in enumerate(value))


def _rgb(value, path) -> tuple[float, float, float]:
    """Scalar (broadcast) or 3-list."""
    if isinstance(value, list):
        return _vec3(value, path)
    v = _number(value, path)
    return (v, v, v)


def _direction(value, path) -> tuple[float, float, float]:
    v = np.asarray(_vec3(value, path))
    n = np.linalg.norm(v)
    if n == 0 or not np.isfinite(n):
        raise SceneError("invalid", "direction must be non-zero", path)
    return tuple(float(c) for c in v / n)


def _parse_camera(obj) -> Camera:
    obj = _obj(obj, "camera")
    _check_keys(obj, _CAMERA_KEYS, "camera", {"position"})
    kw: dict[str, Any] = {"position": _vec3(obj["position"], "camera.position")}
    for key in ("look_at", "up"):
        if key in obj:
            kw[key] = _vec3(obj[key], f"camera.{key}")
    if "vertical_fov" in obj:
        kw["vertical_fov"] = _number(obj["vertical_fov"], "camera.vertical_fov")
    for key in ("width", "height"):
        if key in obj:
            kw[key] = _integer(obj[key], f"camera.{key}")
    try:
        return Camera(**kw)
    except ValueError as exc:
        raise SceneError("invalid", str(exc), "camera") from None


def _parse_primitive(obj, path):
    obj = _obj(obj, path)
    kind = obj.get("type")
    if kind not in _PRIM_KEYS:
        raise SceneError("invalid", f"primitive type must be one of {sorted(_PRIM_KEYS)}", f"{path}.type")
    _check_keys(obj, _PRIM_KEYS[kind], path, _PRIM_KEYS[kind])
    material = _integer(obj["material"], f"{path}.material")
    if kind == "sphere":
        radius = _number(obj["radius"], f"{path}.radius")
        if radius <= 0:
            raise SceneError("invalid", "radius must be positive", f"{path}.radius")
        return Sphere(_vec3(obj["center"], f"{path}.center"), radius, material)
    if kind == "plane":
        return Plane(_vec3(obj["point"], f"{path}.point"), _direction(obj["normal"], f"{path}.normal"), material)
    half = _vec3(obj["half_extents"], f"{path}.half_extents")
    if min(half) <= 0:
        raise SceneError("invalid", "half_extents must be positive", f"{path}.half_extents")
    return Box(_vec3(obj["center"], f"{path}.center"), half, material)


def _parse_material(obj, path) -> MaterialParams:
    obj = _obj(obj, path)
    _check_keys(obj, _MATERIAL_KEYS, path, {"m"})
    m = _integer(obj["m"], f"{path}.m")
    if m not in (0, 1):
        raise SceneError("invalid", "m must be 0 (conductor) or 1 (dielectric)", f"{path}.m")
    eta = _rgb(obj["eta"], f"{path}.eta") if "eta" in obj else (DIELECTRIC_ETA,) * 3
    k = _rgb(obj["k"], f"{path}.k") if "k" in obj else (0.0,) * 3
    if m == 1 and any(v != 0 for v in k):
        raise SceneError("invalid", "dielectric must have k=0", f"{path}.k")
    if m == 1 and any(v != DIELECTRIC_ETA for v in eta):
        raise SceneError("invalid", f"dielectric must have eta={DIELECTRIC_ETA}", f"{path}.eta")
    kw: dict[str, Any] = {"m": m}
    if "albedo" in obj:
        kw["albedo"] = _rgb(obj["albedo"], f"{path}.albedo")
    for key in ("roughness", "ks"):
        if key in obj:
            kw[key] = _number(obj[key], f"{path}.{key}")
    try:
        kw["ior"] = ComplexIor(eta, k)
        return MaterialParams(**kw)
    except ValueError as exc:
        raise SceneError("invalid", str(exc), path) from None


def _parse_env(obj) -> EnvLight:
    obj = _obj(obj, "env")
    _check_keys(obj, _ENV_KEYS, "env")
    ambient = _rgb(obj.get("ambient", 0.0), "env.ambient")
    if min(ambient) < 0:
        raise SceneError("invalid", "ambient radiance must be non-negative", "env.ambient")
    suns_raw = obj.get("suns", [])
    if not isinstance(suns_raw, list):
        raise SceneError("invalid", "expected a list", "env.suns")
    suns = []
    for i, s in enumerate(suns_raw):
        path = f"env.suns[{i}]"
        s = _obj(s, path)
        _check_keys(s, _SUN_KEYS, path, _SUN_KEYS)
        radius = math.radians(_number(s["angular_radius"], f"{path}.angular_radius"))
        if not 0 < radius < math.pi / 2:
            raise SceneError("invalid", "angular_radius must lie in (0, 90) degrees", f"{path}.angular_radius")
        radiance = _rgb(s["radiance"], f"{path}.radiance")
        if min(radiance) < 0:
            raise SceneError("invalid", "radiance must be non-negative", f"{path}.radiance")
        suns.append(Sun(_direction(s["direction"], f"{path}.direction"), radius, radiance))
    return EnvLight(ambient, tuple(suns))


def parse_scene(text: str | bytes) -> Scene:
    """Parse and validate a scene document. Raises :class:`SceneError` on any problem."""
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise SceneError("syntax", f"invalid UTF-8 at byte {exc.start}") from None
    try:
        doc = json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise SceneError("syntax", exc.msg, line=exc.lineno, column=exc.colno) from None
    except RecursionError:
        raise SceneError("syntax", "document nested too deeply") from None
    except ValueError as exc:
        raise SceneError("syntax", str(exc)) from None
    doc = _obj(doc, "$")
    _check_keys(doc, _TOP_KEYS, "$", {"camera"})
    camera = _parse_camera(doc["camera"])
    prims_raw = doc.get("primitives", [])
    mats_raw = doc.get("materials", [])
    if not isinstance(prims_raw, list):
        raise SceneError("invalid", "expected a list", "primitives")
    if not isinstance(mats_raw, list):
        raise SceneError("invalid", "expected a list", "materials")
    materials = [_parse_material(m, f"materials[{i}]") for i, m in enumerate(mats_raw)]
    primitives = [_parse_primitive(p, f"primitives[{i}]") for i, p in enumerate(prims_raw)]
    for i, prim in enumerate(primitives):
        if not 0 <= prim.material < len(materials):
            raise SceneError("invalid", f"material id {prim.material} out of range", f"primitives[{i}].material")
    env = _parse_env(doc.get("env", {}))
    sampling = _obj(doc.get("sampling", {}), "sampling")
    _check_keys(sampling, _SAMPLING_KEYS, "sampling")
    n = _integer(sampling.get("hemisphere_samples", 128), "sampling.hemisphere_samples")
    if n < 4:
        raise SceneError("invalid", "hemisphere_samples must be at least 4", "sampling.hemisphere_samples")
    seed = _integer(sampling.get("seed", 0), "sampling.seed")
    return Scene(camera, tuple(primitives), tuple(materials), env, n, seed)


def _reject_constant(name):
    raise ValueError(f"non-standard JSON constant {name}")


def load_scene(path) -> Scene:
    with open(path, "rb") as fh:
        return parse_scene(fh.read())


def scene_to_dict(scene: Scene) -> dict:
    """Inverse of :func:`parse_scene` (angles back in degrees)."""
    prims = []
    for p in scene.primitives:
        if isinstance(p, Sphere):
            prims.append({"type": "sphere", "center": list(p.center), "radius": p.radius, "material": p.material})
        elif isinstance(p, Plane):
            prims.append({"type": "plane", "point": list(p.point), "normal": list(p.normal), "material": p.material})
        else:
            prims.append({"type": "box", "center": list(p.center), "half_extents": list(p.half_extents),
                          "material": p.material})
    mats = [{"m": m.m, "albedo": list(m.albedo), "roughness": m.roughness, "ks": m.ks,
             "eta": list(m.ior.eta), "k": list(m.ior.k)} for m in scene.materials]
    env = {"ambient": list(scene.env.ambient),
           "suns": [{"direction": list(s.direction), "angular_radius": math.degrees(s.angular_radius),
                     "radiance": list(s.radiance)} for s in scene.env.suns]}
    return {"camera": scene.camera.to_dict(), "primitives": prims, "materials": mats, "env": env,
            "sampling": {"hemisphere_samples": scene.hemisphere_samples, "seed": scene.seed}}

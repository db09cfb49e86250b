"""Material recovery and geometry-objective studies against Stokes observations.

The loss is an L1 on Stokes vectors plus a weighted L1 on DoLP, averaged over
object pixels, channels and views. Gradients are central finite differences
in a transformed parameter space (log for positive quantities, logit for
albedo); Adam does the descent.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .fresnel import ComplexIor
from .pbrdf import MaterialParams
from .polcore import dolp
from .renderer import (PolarizedImage, ShadeMemo, render, shade_view, trace_view)
from .scene import Camera, Scene, Sphere

log = logging.getLogger(__name__)

SCALAR_PARAMS = ("roughness", "ks")
RGB_PARAMS = ("albedo", "eta", "k")
LOSS_KINDS = ("stokes_l1", "intensity_l1", "dolp_l1")
DEFAULT_INIT = {"roughness": 0.3, "albedo": 0.5, "ks": 0.5, "eta": 1.0, "k": 1.0}


# --- parameters ------------------------------------------------------------

ALBEDO_CLAMP = 1e-15


def _logit(p):
    p = min(max(p, ALBEDO_CLAMP), 1 - ALBEDO_CLAMP)
    return math.log(p / (1 - p))


def _sigmoid(x):
    if x >= 0:
        return 1 / (1 + math.exp(-x))
    e = math.exp(x)
    return e / (1 + e)


@dataclass(frozen=True)
class ParamSlot:
    material: int
    name: str
    channel: int | None = None

    @property
    def label(self) -> str:
        ch = "" if self.channel is None else f"[{self.channel}]"
        return f"mat{self.material}.{self.name}{ch}"


def _get(mat: MaterialParams, name: str, channel: int | None) -> float:
    if name == "roughness":
        return mat.roughness
    if name == "ks":
        return mat.ks
    if name == "albedo":
        return mat.albedo[channel]
    if name == "eta":
        return mat.ior.eta[channel]
    return mat.ior.k[channel]


class FreeParams:
    """Which material parameters are optimized, and their flat packing.

    ``selection`` maps material index to parameter names among
    ``roughness, ks, albedo, eta, k``; RGB names expand to three slots.
    Positive quantities live in log space, albedo in logit space. The binary
    indicator ``m`` is never free.
    """

    def __init__(self, selection: dict[int, Sequence[str]]):
        slots = []
        for mid in sorted(selection):
            for name in selection[mid]:
                if name in SCALAR_PARAMS:
                    slots.append(ParamSlot(mid, name))
                elif name in RGB_PARAMS:
                    slots.extend(ParamSlot(mid, name, c) for c in range(3))
                else:
                    raise ValueError(f"unknown or non-free parameter {name!r}")
        if len(set(slots)) != len(slots):
            raise ValueError("duplicate free parameter")
        self.slots = tuple(slots)

    def __len__(self):
        return len(self.slots)

    @property
    def labels(self) -> list[str]:
        return [s.label for s in self.slots]

    def check(self, materials: Sequence[MaterialParams]):
        for s in self.slots:
            if s.material >= len(materials):
                raise ValueError(f"{s.label}: no such material")
            if s.name in ("eta", "k") and materials[s.material].m == 1:
                raise ValueError(f"{s.label}: dielectric index is fixed at 1.5 - 0i")

    @staticmethod
    def _forward(name, value):
        return _logit(value) if name == "albedo" else math.log(value)

    @staticmethod
    def _inverse(name, x):
        if name == "albedo":
            return _sigmoid(x)
        v = math.exp(x)
        return min(v, 1.0) if name == "roughness" else v

    def pack(self, materials: Sequence[MaterialParams]) -> np.ndarray:
        return np.array([self._forward(s.name, _get(materials[s.material], s.name, s.channel))
                         for s in self.slots])

    def values(self, x) -> list[float]:
        return [self._inverse(s.name, float(v)) for s, v in zip(self.slots, x)]

    def unpack(self, x, materials: Sequence[MaterialParams]) -> tuple[MaterialParams, ...]:
        mats = list(materials)
        updates: dict[int, dict] = {}
        for s, v in zip(self.slots, self.values(x)):
            u = updates.setdefault(s.material, {})
            if s.channel is None:
                u[s.name] = v
            else:
                u.setdefault(s.name, list(_rgb_of(mats[s.material], s.name)))[s.channel] = v
        for mid, u in updates.items():
            mat = mats[mid]
            eta = u.pop("eta", mat.ior.eta)
            k = u.pop("k", mat.ior.k)
            mats[mid] = replace(mat, ior=ComplexIor(tuple(eta), tuple(k)), **{
                key: tuple(v) if isinstance(v, list) else v for key, v in u.items()})
        return tuple(mats)

    def initial(self, materials: Sequence[MaterialParams], init: dict | None = None) -> tuple[MaterialParams, ...]:
        """Materials with every free slot reset to its initial value."""
        init = {**DEFAULT_INIT, **(init or {})}
        x = np.array([self._forward(s.name, init[s.name]) for s in self.slots])
        return self.unpack(x, materials)


def _rgb_of(mat: MaterialParams, name: str):
    return {"albedo": mat.albedo, "eta": mat.ior.eta, "k": mat.ior.k}[name]


def parse_free(text: str, materials: Sequence[MaterialParams]) -> FreeParams:
    """``"roughness,eta,k,ks"`` (all materials) or ``"0:roughness,albedo;1:ks"``."""
    text = text.strip()
    if ":" not in text:
        names = [n.strip() for n in text.split(",") if n.strip()]
        sel = {}
        for mid, mat in enumerate(materials):
            allowed = [n for n in names if not (mat.m == 1 and n in ("eta", "k"))
                       and not (mat.m == 0 and n == "albedo")]
            if allowed:
                sel[mid] = allowed
        return FreeParams(sel)
    sel = {}
    for part in text.split(";"):
        if not part.strip():
            continue
        mid, names = part.split(":", 1)
        sel[int(mid)] = [n.strip() for n in names.split(",") if n.strip()]
    return FreeParams(sel)


# --- observations and losses -----------------------------------------------

@dataclass
class ObservedView:
    camera: Camera
    stokes: np.ndarray  # (H, W, 3, 3)
    mask: np.ndarray  # (H, W) bool


@dataclass
class Observations:
    views: list[ObservedView]
    lambda_s: float = 1.0
    lambda_dolp: float = 0.1
    mask_dolp: bool = True
    quantize: bool = False  # round renders to float32 first, matching observations read from PFM

    def __post_init__(self):
        if not self.views:
            raise ValueError("no observed views")
        shape = self.views[0].stokes.shape
        for v in self.views:
            if v.stokes.shape != shape or v.mask.shape != shape[:2]:
                raise ValueError("all observed images must share dimensions")
            if v.mask.dtype != bool:
                raise ValueError("masks must be boolean")


def observe(scene: Scene, cameras: Sequence[Camera], threads: int | None = None, **kw) -> Observations:
    """Noiseless observations of ``scene`` from each camera (object mask = hit mask)."""
    views = []
    for cam in cameras:
        img = render(scene, cam, threads)
        views.append(ObservedView(cam, img.stokes, img.mask))
    return Observations(views, **kw)


def _check_dims(images, obs: Observations):
    if len(images) != len(obs.views):
        raise ValueError("number of rendered views does not match observations")
    for img, view in zip(images, obs.views):
        if img.shape != view.stokes.shape:
            raise ValueError(f"rendered image {img.shape} does not match observation {view.stokes.shape}")


def image_loss(images: Sequence[np.ndarray], obs: Observations, kind: str = "joint") -> float:
    """Loss of rendered Stokes images against observations.

    ``kind`` is ``joint`` (weighted Stokes + DoLP), or one of
    ``stokes_l1``, ``intensity_l1``, ``dolp_l1``.
    """
    _check_dims(images, obs)
    if obs.quantize:
        images = [np.asarray(img, dtype=np.float32).astype(np.float64) for img in images]
    n_px = sum(int(v.mask.sum()) for v in obs.views)
    if n_px == 0:
        raise ValueError("observation masks are empty")
    s_err = i_err = d_err = 0.0
    d_count = 0
    for img, view in zip(images, obs.views):
        m = view.mask
        s_err += np.abs(img[m] - view.stokes[m]).sum()
        i_err += np.abs(img[m][..., 0] - view.stokes[m][..., 0]).sum()
        dm = m if obs.mask_dolp else np.ones_like(m)
        d_err += np.abs(dolp(img[dm]) - dolp(view.stokes[dm])).sum()
        d_count += int(dm.sum())
    stokes_l1 = s_err / (n_px * 9)
    intensity_l1 = i_err / (n_px * 3)
    dolp_l1 = d_err / (d_count * 3)
    if kind == "joint":
        return float(obs.lambda_s * stokes_l1 + obs.lambda_dolp * dolp_l1)
    return float({"stokes_l1": stokes_l1, "intensity_l1": intensity_l1, "dolp_l1": dolp_l1}[kind])


def joint_loss(scene: Scene, obs: Observations, threads: int | None = None) -> float:
    """Render ``scene`` from every observed camera and evaluate the joint loss."""
    images = [render(scene, v.camera, threads).stokes for v in obs.views]
    return image_loss(images, obs)


class MaterialObjective:
    """Joint loss as a function of the packed free parameters, on fixed geometry.

    Geometry is traced once per view; each call only re-shades, reusing
    cached intermediate arrays across finite-difference probes.
    """

    def __init__(self, scene: Scene, obs: Observations, free: FreeParams, threads: int | None = None):
        free.check(scene.materials)
        self.scene = scene
        self.obs = obs
        self.free = free
        self.geoms = [trace_view(scene, v.camera, threads) for v in obs.views]
        self.memos = [ShadeMemo() for _ in self.geoms]
        self.evaluations = 0

    def materials(self, x) -> tuple[MaterialParams, ...]:
        return self.free.unpack(x, self.scene.materials)

    def render(self, x) -> list[PolarizedImage]:
        mats = self.materials(x)
        return [shade_view(g, mats, memo) for g, memo in zip(self.geoms, self.memos)]

    def __call__(self, x) -> float:
        self.evaluations += 1
        return image_loss([img.stokes for img in self.render(x)], self.obs)


# --- optimization ------------------------------------------------------------

def grad_fd(loss_fn: Callable[[np.ndarray], float], params, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient (``2 * dim`` evaluations)."""
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    x = np.asarray(params, dtype=float)
    g = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        fp = loss_fn(x + e)
        fm = loss_fn(x - e)
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite loss probing coordinate {i}")
        g[i] = (fp - fm) / (2 * h)
    return g


@dataclass
class AdamConfig:
    lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    iters: int = 300
    fd_step: float = 1e-4
    lr_final: float | None = None  # cosine-anneal lr down to this value when set
    tol: float = 1e-12  # stop once the loss is at or below this

    def lr_at(self, it: int) -> float:
        if self.lr_final is None or self.iters <= 1:
            return self.lr
        frac = it / (self.iters - 1)
        return self.lr_final + 0.5 * (self.lr - self.lr_final) * (1 + math.cos(math.pi * frac))


class OptimizationDiverged(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class AdamResult:
    x: np.ndarray
    loss: float
    trace: list[tuple[int, float]] = field(default_factory=list)
    iterations: int = 0


def adam_optimize(loss_fn, init, config: AdamConfig = AdamConfig(), grad_fn=None,
                  callback=None) -> AdamResult:
    """Adam with bias correction; returns the best iterate seen.

    ``grad_fn`` defaults to :func:`grad_fd` on ``loss_fn``.
    """
    if config.iters < 1:
        raise ValueError("iters must be at least 1")
    if grad_fn is None:
        def grad_fn(x):
            return grad_fd(loss_fn, x, config.fd_step)
    x = np.array(init, dtype=float)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    trace: list[tuple[int, float]] = []
    best_x, best_f = x.copy(), math.inf
    it = 0
    for it in range(config.iters):
        f = float(loss_fn(x))
        trace.append((it, f))
        if not math.isfinite(f):
            raise OptimizationDiverged(f"loss became non-finite at iteration {it}", trace)
        if f < best_f:
            best_x, best_f = x.copy(), f
        if callback is not None:
            callback(it, x, f)
        if f <= config.tol:
            return AdamResult(best_x, best_f, trace, it)
        g = grad_fn(x)
        m = config.beta1 * m + (1 - config.beta1) * g
        v = config.beta2 * v + (1 - config.beta2) * g * g
        m_hat = m / (1 - config.beta1 ** (it + 1))
        v_hat = v / (1 - config.beta2 ** (it + 1))
        x = x - config.lr_at(it) * m_hat / (np.sqrt(v_hat) + config.eps)
    f = float(loss_fn(x))
    trace.append((config.iters, f))
    if not math.isfinite(f):
        raise OptimizationDiverged("loss became non-finite after the last step", trace)
    if f < best_f:
        best_x, best_f = x.copy(), f
    return AdamResult(best_x, best_f, trace, config.iters)


@dataclass
class RecoveryResult:
    materials: tuple[MaterialParams, ...]
    loss: float
    trace: list[tuple[int, float]]
    report: list[tuple[str, float, float, float]]  # (param, gt, recovered, abs_error)
    iterations: int


def recover_materials(scene: Scene, obs: Observations, free: FreeParams,
                      config: AdamConfig = AdamConfig(), gt: Sequence[MaterialParams] | None = None,
                      init: dict | None = None, threads: int | None = None,
                      callback=None) -> RecoveryResult:
    """Fit the free material parameters of ``scene`` (geometry known) to ``obs``.

    Free slots start from neutral values (``DEFAULT_INIT``, overridable by
    ``init``; pass ``init=False`` to start from the scene's own values).
    """
    free.check(scene.materials)
    start = scene.materials if init is False else free.initial(scene.materials, init or None)
    start_scene = scene.replace(materials=start)
    objective = MaterialObjective(start_scene, obs, free, threads)
    x0 = free.pack(start)
    result = adam_optimize(objective, x0, config, callback=callback)
    mats = free.unpack(result.x, start)
    report = []
    values = free.values(result.x)
    for slot, val in zip(free.slots, values):
        g = _get(gt[slot.material], slot.name, slot.channel) if gt is not None else math.nan
        report.append((slot.label, g, val, abs(val - g)))
    log.info("recovery finished: loss %.3e after %d iterations (%d loss evaluations)",
             result.loss, result.iterations, objective.evaluations)
    return RecoveryResult(mats, result.loss, result.trace, report, result.iterations)


# --- geometry objective landscape ------------------------------------------------

GEOM_PARAMS = ("sphere_radius", "sphere_center_axis")


def with_geometry(scene: Scene, geom_param: str, value: float, primitive: int = 0, axis: int = 0) -> Scene:
    prim = scene.primitives[primitive]
    if not isinstance(prim, Sphere):
        raise ValueError(f"primitive {primitive} is not a sphere")
    if geom_param == "sphere_radius":
        new = replace(prim, radius=float(value))
    elif geom_param == "sphere_center_axis":
        center = list(prim.center)
        center[axis] = float(value)
        new = replace(prim, center=tuple(center))
    else:
        raise ValueError(f"geometry parameter must be one of {GEOM_PARAMS}")
    prims = list(scene.primitives)
    prims[primitive] = new
    return scene.replace(primitives=tuple(prims))


def landscape_scan(scene: Scene, obs: Observations, geom_param: str, grid: tuple[float, float, int],
                   loss_kind: str, primitive: int = 0, axis: int = 0,
                   threads: int | None = None) -> list[tuple[float, float]]:
    """Loss of ``obs`` against renders over a 1-D grid of one sphere parameter."""
    lo, hi, steps = grid
    if steps < 3 or not hi > lo:
        raise ValueError("grid needs hi > lo and at least 3 steps")
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"loss kind must be one of {LOSS_KINDS}")
    rows = []
    for value in np.round(np.linspace(lo, hi, int(steps)), 12):
        trial = with_geometry(scene, geom_param, value, primitive, axis)
        images = [render(trial, v.camera, threads).stokes for v in obs.views]
        rows.append((float(value), image_loss(images, obs, loss_kind)))
    return rows

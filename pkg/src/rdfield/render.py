"""Pinhole rays, sampling, transmittance compositing and the analytic sphere scene."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .field_core import InputDomainError, ContractError


@dataclass
class Camera:
    """Pinhole camera.

    ``rotation`` columns are the camera's right, up and forward axes in
    world space. ``fov`` (radians) is the angle subtended between the
    centres of the first and last pixel columns; rows use the same focal
    length.
    """

    position: np.ndarray
    rotation: np.ndarray
    fov: float
    width: int
    height: int

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        if np.abs(self.rotation.T @ self.rotation - np.eye(3)).max() > 1e-9:
            raise ContractError("camera rotation is not orthonormal")
        if not 0 < self.fov < math.pi:
            raise ContractError(f"fov must be in (0, pi), got {self.fov}")

    @property
    def focal(self) -> float:
        return max(self.width - 1, 1) / 2.0 / math.tan(self.fov / 2.0)

    @classmethod
    def look_at(cls, position, target, fov: float, width: int, height: int,
                up=(0.0, 0.0, 1.0)) -> "Camera":
        position = np.asarray(position, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - position
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, (1.0, 0.0, 0.0))
        right /= np.linalg.norm(right)
        true_up = np.cross(right, fwd)
        return cls(position, np.stack([right, true_up, fwd], axis=1), fov, width, height)


def generate_rays(camera: Camera, pixels) -> tuple[np.ndarray, np.ndarray]:
    """Origins and unit directions for ``pixels`` given as ``(col, row)`` pairs."""
    pix = np.atleast_2d(np.asarray(pixels))
    cols, rows = pix[:, 0], pix[:, 1]
    if np.any(cols < 0) or np.any(cols >= camera.width) or np.any(rows < 0) or np.any(rows >= camera.height):
        raise InputDomainError("pixel outside image bounds")
    f = camera.focal
    u = (cols - (camera.width - 1) / 2.0) / f
    v = ((camera.height - 1) / 2.0 - rows) / f
    local = np.stack([u, v, np.ones_like(u, dtype=np.float64)], axis=1)
    dirs = local @ camera.rotation.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.position, dirs.shape).copy()
    return origins, dirs


def all_pixels(width: int, height: int) -> np.ndarray:
    rows, cols = np.mgrid[0:height, 0:width]
    return np.stack([cols.ravel(), rows.ravel()], axis=1)


def unit_cube_bounds(origins: np.ndarray, dirs: np.ndarray):
    """Entry/exit distances of each ray through [0, 1]^3 and a hit mask."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (0.0 - origins) * inv
        t1 = (1.0 - origins) * inv
    lo = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    hi = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    t_near = np.maximum(lo.max(axis=1), 0.0)
    t_far = hi.min(axis=1)
    return t_near, t_far, t_far > t_near + 1e-9


@dataclass
class RaySamples:
    """Samples of a batch of rays: ``t``/``delta`` are ``(R, N)``, positions ``(R, N, 3)``."""

    t: np.ndarray
    delta: np.ndarray
    positions: np.ndarray | None = None
    sigma: np.ndarray | None = None
    color: np.ndarray | None = None


def sample_along(origins, dirs, t_near, t_far, n: int, rng: np.random.Generator | None = None,
                 stratified: bool = False) -> RaySamples:
    """``n`` samples per ray, one per equal bin (bin midpoints unless stratified)."""
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    t_near = np.atleast_1d(np.asarray(t_near, dtype=np.float64))
    t_far = np.atleast_1d(np.asarray(t_far, dtype=np.float64))
    if n < 1:
        raise ContractError("need at least one sample per ray")
    if np.any(t_far <= t_near) or np.any(t_near < 0):
        raise InputDomainError("need t_far > t_near >= 0")
    span = (t_far - t_near)[:, None]
    if stratified:
        jitter = rng.uniform(0.0, 1.0, size=(t_near.size, n))
    else:
        jitter = np.full((t_near.size, n), 0.5)
    t = t_near[:, None] + (np.arange(n)[None, :] + jitter) * span / n
    delta = np.empty_like(t)
    delta[:, :-1] = np.diff(t, axis=1)
    delta[:, -1] = span[:, 0] / n
    positions = origins[:, None, :] + t[:, :, None] * dirs[:, None, :]
    return RaySamples(t, delta, positions)


@dataclass
class CompositeTrace:
    alpha: np.ndarray
    trans: np.ndarray
    weights: np.ndarray
    rgb: np.ndarray


def composite(sigma: np.ndarray, color: np.ndarray, delta: np.ndarray):
    """Ray colors ``sum_i T_i alpha_i c_i`` over a black background.

    Shapes: ``sigma``/``delta`` ``(R, N)``, ``color`` ``(R, N, 3)``. Returns
    ``(rgb (R, 3), weights (R, N), trace)``.
    """
    sd = sigma * delta
    alpha = -np.expm1(-sd)
    # exclusive cumulative product of (1 - alpha), computed in log space
    log_t = np.concatenate([np.zeros((sd.shape[0], 1)), -np.cumsum(sd[:, :-1], axis=1)], axis=1)
    trans = np.exp(log_t)
    weights = trans * alpha
    rgb = np.einsum("rn,rnc->rc", weights, color)
    return rgb, weights, CompositeTrace(alpha, trans, weights, rgb)


def composite_backward(trace: CompositeTrace, color: np.ndarray, delta: np.ndarray, grad_rgb: np.ndarray):
    """Gradients of the composited color w.r.t. per-sample sigma and color."""
    grad_color = trace.weights[:, :, None] * grad_rgb[:, None, :]
    # s_i = <grad_rgb, c_i>; dC/dsigma_i = delta_i (T_i (1-alpha_i) s_i - sum_{j>i} w_j s_j)
    s = np.einsum("rnc,rc->rn", color, grad_rgb)
    ws = trace.weights * s
    suffix = np.cumsum(ws[:, ::-1], axis=1)[:, ::-1]
    after = suffix - ws
    grad_sigma = delta * (trace.trans * (1.0 - trace.alpha) * s - after)
    return grad_sigma, grad_color


# ---------------------------------------------------------------------------
# Analytic scene
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AnalyticScene:
    center: tuple = (0.5, 0.5, 0.5)
    radius: float = 0.3
    density: float = 60.0

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64)
        if self.radius <= 0 or self.density <= 0:
            raise ContractError("sphere radius and density must be positive")
        if np.any(c - self.radius < 0) or np.any(c + self.radius > 1):
            raise ContractError("sphere must lie inside the unit cube")


def scene_eval(scene: AnalyticScene, x):
    """Density (``density`` inside the sphere, else 0) and color ``clamp(x, 0, 1)``."""
    x = np.asarray(x, dtype=np.float64)
    inside = np.sum((x - np.asarray(scene.center)) ** 2, axis=-1) < scene.radius**2
    sigma = np.where(inside, scene.density, 0.0)
    return sigma, np.clip(x, 0.0, 1.0)


def sphere_chord(scene: AnalyticScene, origins, dirs):
    oc = origins - np.asarray(scene.center)
    bq = np.sum(oc * dirs, axis=1)
    cq = np.sum(oc * oc, axis=1) - scene.radius**2
    disc = bq * bq - cq
    hit = disc > 0
    root = np.sqrt(np.where(hit, disc, 0.0))
    t0 = np.maximum(-bq - root, 0.0)
    t1 = -bq + root
    hit &= t1 > t0
    return t0, t1, hit


def render_reference(scene: AnalyticScene, camera: Camera, n_dense: int = 512, pixels=None) -> np.ndarray:
    """Deterministic dense composite of the analytic field.

    Samples are placed on each ray's chord through the sphere; everywhere
    else the density is zero and contributes nothing. Returns ``(H, W, 3)``
    or, when ``pixels`` is given, ``(P, 3)``.
    """
    if n_dense < 512:
        raise ContractError("reference rendering needs at least 512 samples per ray")
    pix = all_pixels(camera.width, camera.height) if pixels is None else np.atleast_2d(pixels)
    origins, dirs = generate_rays(camera, pix)
    t0, t1, hit = sphere_chord(scene, origins, dirs)
    out = np.zeros((pix.shape[0], 3))
    if np.any(hit):
        s = sample_along(origins[hit], dirs[hit], t0[hit], t1[hit], n_dense)
        # positions are on the chord, so every sample sits inside the sphere
        sigma = np.full(s.t.shape, scene.density)
        color = np.clip(s.positions, 0.0, 1.0)
        out[hit] = composite(sigma, color, s.delta)[0]
    if pixels is None:
        return out.reshape(camera.height, camera.width, 3)
    return out


def orbit_cameras(n: int, radius: float = 1.6, size: int = 64, fov: float = math.radians(45),
                  elevations=(-0.35, 0.35), phase: float = 0.0, target=(0.5, 0.5, 0.5)) -> list[Camera]:
    """``n`` cameras on rings around ``target``, alternating elevation."""
    cams = []
    for i in range(n):
        az = phase + 2.0 * math.pi * i / n
        el = elevations[i % len(elevations)]
        pos = np.asarray(target) + radius * np.array(
            [math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        cams.append(Camera.look_at(pos, target, fov, size, size))
    return cams

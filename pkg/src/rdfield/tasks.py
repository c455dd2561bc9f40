"""Training data for the two tasks: 2D image fitting and the analytic sphere scene."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .render import AnalyticScene, Camera, all_pixels, generate_rays, orbit_cameras, render_reference, unit_cube_bounds


class TaskDataError(OSError):
    """Missing or unreadable task input."""


def read_ppm(path) -> np.ndarray:
    """Binary PPM (P6, maxval <= 255) as a ``(H, W, 3)`` uint8 array."""
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise TaskDataError(f"cannot read image {path}: {exc.strerror}") from exc
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TaskDataError(f"truncated PPM header in {path}")
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P6":
        raise TaskDataError(f"{path} is not a binary PPM (P6)")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise TaskDataError(f"bad PPM header in {path}") from exc
    if maxval != 255:
        raise TaskDataError(f"{path}: only maxval 255 is supported, got {maxval}")
    data = raw[pos:pos + w * h * 3]
    if len(data) != w * h * 3:
        raise TaskDataError(f"{path}: expected {w * h * 3} pixel bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    """Write ``img`` (uint8, or floats in [0, 1]) as P6."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = to_uint8(img)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(img).tobytes())


def synthetic_image(size: int = 64) -> np.ndarray:
    """Deterministic test picture: smooth colour ramps, a disc, a square and stripes."""
    v, u = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    r = 0.5 + 0.4 * np.sin(2.0 * math.pi * (u + 0.3 * v))
    g = 0.3 + 0.5 * v * (1.0 - 0.5 * u)
    b = 0.5 + 0.4 * np.cos(3.0 * math.pi * u * v)
    img = np.stack([r, g, b], axis=-1)
    disc = (u - 0.35) ** 2 + (v - 0.4) ** 2 < 0.18**2
    img[disc] = [0.95, 0.85, 0.2]
    square = (np.abs(u - 0.72) < 0.14) & (np.abs(v - 0.7) < 0.14)
    img[square] = [0.1, 0.2, 0.6]
    stripes = (v > 0.88) & (np.floor(u * 8) % 2 == 0)
    img[stripes] = [0.9, 0.9, 0.9]
    return to_uint8(np.clip(img, 0.0, 1.0))


@dataclass
class ImageTask:
    """Pixel centres in [0, 1]^2 and their target colours."""

    image: np.ndarray  # (H, W, 3) uint8
    source: str = "<synthetic>"

    kind = "image"
    dims = 2

    def __post_init__(self):
        h, w, _ = self.image.shape
        self.height, self.width = h, w
        rows, cols = np.mgrid[0:h, 0:w]
        self.positions = np.stack([(cols.ravel() + 0.5) / w, (rows.ravel() + 0.5) / h], axis=1)
        self.targets = self.image.reshape(-1, 3).astype(np.float64) / 255.0

    @classmethod
    def from_ppm(cls, path) -> "ImageTask":
        return cls(read_ppm(path), os.fspath(path))

    @property
    def n_train(self) -> int:
        return self.positions.shape[0]


@dataclass
class RaySet:
    origins: np.ndarray
    dirs: np.ndarray
    t_near: np.ndarray
    t_far: np.ndarray
    hit: np.ndarray
    targets: np.ndarray


def _rays_for(cameras: list[Camera], images: list[np.ndarray]) -> RaySet:
    parts = []
    for cam, img in zip(cameras, images):
        o, d = generate_rays(cam, all_pixels(cam.width, cam.height))
        tn, tf, hit = unit_cube_bounds(o, d)
        parts.append((o, d, tn, tf, hit, img.reshape(-1, 3)))
    return RaySet(*(np.concatenate(p) for p in zip(*parts)))


@dataclass
class VolumeTask:
    """Reference views of an :class:`AnalyticScene` split into train and held-out."""

    scene: AnalyticScene
    train_cameras: list
    heldout_cameras: list
    n_dense: int = 512

    kind = "volume"
    dims = 3

    def __post_init__(self):
        self.train_images = [render_reference(self.scene, c, self.n_dense) for c in self.train_cameras]
        self.heldout_images = [render_reference(self.scene, c, self.n_dense) for c in self.heldout_cameras]
        self.train_rays = _rays_for(self.train_cameras, self.train_images)
        self.heldout_rays = _rays_for(self.heldout_cameras, self.heldout_images)
        # only rays crossing the unit cube carry samples; the rest are black by construction
        self.train_index = np.flatnonzero(self.train_rays.hit)

    @classmethod
    def orbit(cls, scene: AnalyticScene | None = None, n_views: int = 8, n_heldout: int = 2,
              size: int = 64, radius: float = 1.6, fov_deg: float = 45.0) -> "VolumeTask":
        scene = scene or AnalyticScene()
        fov = math.radians(fov_deg)
        train = orbit_cameras(n_views, radius, size, fov)
        held = orbit_cameras(n_heldout, radius, size, fov, elevations=(0.1, -0.1),
                             phase=math.pi / max(n_views, 1) + 0.3)
        return cls(scene, train, held)

    @property
    def n_train(self) -> int:
        return self.train_index.size

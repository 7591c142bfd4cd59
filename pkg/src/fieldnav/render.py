"""Volumetric ray renderer: expected pixel colors and pose derivatives.

Quadrature over each ray uses fixed-width bins between the near and far
planes with one stratified sample per bin.  With density rho_k at sample
k and bin width d, the opacity is a_k = 1 - exp(-rho_k d), the
transmittance T_k = exp(-d * sum_{j<k} rho_j), and the pixel color is
sum_k T_k a_k c_k plus the background weighted by residual transmittance.

Stratified jitter is drawn once per (seed, image) so rendering any pixel
subset reproduces exactly the corresponding pixels of the full render.
The pose Jacobian propagates the six tangent directions of the left
retraction exp(delta) * pose through the same sample points as the
primal render, so photometric gradients are consistent with the loss
they differentiate.
"""

from __future__ import annotations

import functools
import json
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import autodiff as ad
from .field import RadianceField, density_jet
from .geom import Pose, pose_from_json, pose_to_json

DEFAULT_T_NEAR = 0.1
_JITTER_STREAM = 0x52454E44  # distinguishes renderer draws from other stream users


class PixelOutOfRange(IndexError):
    """Pixel index outside the image."""


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics; the camera looks down -z, +x right, +y down."""

    width: int = 100
    height: int = 100
    fx: float = 100.0
    fy: float = 100.0
    cx: Optional[float] = None
    cy: Optional[float] = None

    def __post_init__(self):
        if self.cx is None:
            object.__setattr__(self, "cx", self.width / 2.0)
        if self.cy is None:
            object.__setattr__(self, "cy", self.height / 2.0)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def n_pixels(self) -> int:
        return self.width * self.height

    def pixel_directions(self, pixels: np.ndarray) -> np.ndarray:
        """Unit ray directions in the camera frame for flat pixel indices."""
        pixels = np.asarray(pixels)
        x = pixels % self.width
        y = pixels // self.width
        d = np.stack(
            [(x - self.cx) / self.fx, (y - self.cy) / self.fy, -np.ones_like(x, dtype=float)],
            axis=-1,
        )
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float = DEFAULT_T_NEAR
    t_far: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        object.__setattr__(self, "direction", np.asarray(self.direction, dtype=float))
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not (0.0 <= self.t_near < self.t_far):
            raise ValueError("need 0 <= t_near < t_far")


@dataclass(frozen=True)
class RenderedImage:
    pixels: np.ndarray  # (H, W, 3) in [0, 1]
    transmittance: np.ndarray  # (H, W) residual along each ray


def _flat_index(camera: Camera, i) -> int:
    if isinstance(i, tuple):
        x, y = i
        if not (0 <= x < camera.width and 0 <= y < camera.height):
            raise PixelOutOfRange(f"pixel {i} outside {camera.width}x{camera.height}")
        return int(y) * camera.width + int(x)
    i = int(i)
    if not (0 <= i < camera.n_pixels):
        raise PixelOutOfRange(f"pixel {i} outside {camera.width}x{camera.height}")
    return i


def pixel_ray(camera: Camera, pose: Pose, i, t_near: float = DEFAULT_T_NEAR, t_far: float = 10.0) -> Ray:
    """World-frame ray through a pixel center; ``i`` is flat or (x, y)."""
    flat = _flat_index(camera, i)
    d_cam = camera.pixel_directions(np.array([flat]))[0]
    return Ray(pose.translation.copy(), pose.rotation @ d_cam, t_near, t_far)


def default_t_far(field: RadianceField) -> float:
    """Bounds diagonal: an upper bound on any in-bounds ray segment."""
    return float(np.linalg.norm(field.bounds_hi - field.bounds_lo))


def _background(field: RadianceField, background) -> np.ndarray:
    if background is None:
        return np.asarray(getattr(field, "background", (0.5, 0.5, 0.5)), dtype=float)
    return np.asarray(background, dtype=float)


@functools.lru_cache(maxsize=8)
def _image_jitter(seed: int, n_pixels: int, n_samples: int) -> np.ndarray:
    """Stratified offsets in [0,1) for every pixel of the image; cached
    because the filter re-renders small subsets hundreds of times per
    measurement with one fixed seed."""
    rng = np.random.default_rng([_JITTER_STREAM, seed])
    jitter = rng.random((n_pixels, n_samples))
    jitter.setflags(write=False)
    return jitter


def sample_depths(t_near: float, t_far: float, n_samples: int, jitter) -> Tuple[np.ndarray, float]:
    """Depths t_k = t_near + (k + u_k) * width and the bin width."""
    width = (t_far - t_near) / n_samples
    if jitter is None:
        jitter = np.full(n_samples, 0.5)
    k = np.arange(n_samples)
    return t_near + (k + np.asarray(jitter)) * width, width


def _integrate(field, origins, directions, depths, width, background):
    """Quadrature for a batch of rays.

    origins, directions: (K, 3); depths: (K, N).  Returns colors (K, 3)
    and residual transmittance (K,).
    """
    points = origins[:, None, :] + depths[..., None] * directions[:, None, :]
    rho = field.density(points)
    alpha = 1.0 - np.exp(-rho * width)
    accum = np.cumsum(rho, axis=-1) * width
    trans = np.exp(-(accum - rho * width))  # exclusive prefix sum
    weights = trans * alpha
    colors = field.color(points, directions[:, None, :])
    out = np.einsum("kn,knc->kc", weights, colors)
    residual = np.exp(-accum[:, -1])
    return out + residual[:, None] * background, residual


def render_pixel(
    field: RadianceField,
    ray: Ray,
    n_samples: int = 128,
    background=None,
    jitter: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Expected color along one ray; midpoint samples unless jitter given."""
    if n_samples < 2:
        raise ValueError("need n_samples >= 2")
    depths, width = sample_depths(ray.t_near, ray.t_far, n_samples, jitter)
    colors, _ = _integrate(
        field,
        ray.origin[None, :],
        ray.direction[None, :],
        depths[None, :],
        width,
        _background(field, background),
    )
    return colors[0]


def render_pixels(
    field: RadianceField,
    camera: Camera,
    pose: Pose,
    pixels: np.ndarray,
    n_samples: int = 128,
    seed: int = 0,
    t_near: float = DEFAULT_T_NEAR,
    t_far: Optional[float] = None,
    background=None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Colors (K, 3) and residual transmittance (K,) for flat pixel ids."""
    pixels = np.asarray(pixels, dtype=int)
    if pixels.size and (pixels.min() < 0 or pixels.max() >= camera.n_pixels):
        raise PixelOutOfRange("pixel subset outside the image")
    if t_far is None:
        t_far = default_t_far(field)
    directions = camera.pixel_directions(pixels) @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, directions.shape)
    jitter = _image_jitter(seed, camera.n_pixels, n_samples)[pixels]
    width = (t_far - t_near) / n_samples
    depths = t_near + (np.arange(n_samples) + jitter) * width
    return _integrate(field, origins, directions, depths, width, _background(field, background))


def render_image(
    field: RadianceField,
    camera: Camera,
    pose: Pose,
    n_samples: int = 128,
    pixel_set: Optional[np.ndarray] = None,
    seed: int = 0,
    t_near: float = DEFAULT_T_NEAR,
    t_far: Optional[float] = None,
    background=None,
) -> RenderedImage:
    """Render the full image, or only ``pixel_set`` (others = background)."""
    bg = _background(field, background)
    if pixel_set is None:
        pixel_set = np.arange(camera.n_pixels)
        pixels = np.empty((camera.n_pixels, 3))
        trans = np.empty(camera.n_pixels)
    else:
        pixel_set = np.asarray(pixel_set, dtype=int)
        pixels = np.tile(bg, (camera.n_pixels, 1))
        trans = np.ones(camera.n_pixels)
    colors, residual = render_pixels(
        field, camera, pose, pixel_set, n_samples, seed, t_near, t_far, bg
    )
    pixels[pixel_set] = colors
    trans[pixel_set] = residual
    return RenderedImage(
        np.clip(pixels.reshape(camera.height, camera.width, 3), 0.0, 1.0),
        trans.reshape(camera.height, camera.width),
    )


# -- pose derivatives ----------------------------------------------------------


def _pose_tangent_rays(pose: Pose, d_cam: np.ndarray):
    """Origin/direction jets for the six directions of exp(delta)*pose.

    Rotation direction m moves the origin by e_m x t and the world ray
    direction by e_m x (R d); translation direction m moves the origin
    by e_m only.
    """
    K = d_cam.shape[0]
    d_world = d_cam @ pose.rotation.T
    t = pose.translation

    o_tan = np.zeros((K, 3, 6))
    d_tan = np.zeros((K, 3, 6))
    for m in range(3):
        e = np.zeros(3)
        e[m] = 1.0
        o_tan[:, :, m] = np.cross(e, t)
        o_tan[:, :, 3 + m] = e
        d_tan[:, :, m] = np.cross(e, d_world)
    origins = ad.Jet(np.broadcast_to(t, (K, 3)).copy(), o_tan)
    directions = ad.Jet(d_world, d_tan)
    return origins, directions


def render_pixels_with_pose_jacobian(
    field: RadianceField,
    camera: Camera,
    pose: Pose,
    pixels: np.ndarray,
    n_samples: int = 128,
    seed: int = 0,
    t_near: float = DEFAULT_T_NEAR,
    t_far: Optional[float] = None,
    background=None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Colors (K, 3) and dC/d(delta) (K, 3, 6) at delta = 0.

    Uses the identical sample depths as :func:`render_pixels` for the
    same seed, so the Jacobian differentiates exactly the rendered loss.
    """
    pixels = np.asarray(pixels, dtype=int)
    if pixels.size and (pixels.min() < 0 or pixels.max() >= camera.n_pixels):
        raise PixelOutOfRange("pixel subset outside the image")
    if t_far is None:
        t_far = default_t_far(field)
    bg = _background(field, background)
    d_cam = camera.pixel_directions(pixels)
    origins, directions = _pose_tangent_rays(pose, d_cam)

    jitter = _image_jitter(seed, camera.n_pixels, n_samples)[pixels]
    width = (t_far - t_near) / n_samples
    depths = t_near + (np.arange(n_samples) + jitter) * width  # (K, N)

    # Sample points as jets: p = o + t_k d with t_k held fixed.
    pts_val = origins.val[:, None, :] + depths[..., None] * directions.val[:, None, :]
    pts_tan = origins.tan[:, None, :, :] + depths[..., None, None] * directions.tan[:, None, :, :]
    points = ad.Jet(pts_val, pts_tan)

    rho = density_jet(field, points)  # (K, N) jet
    alpha = 1.0 - ad.exp(rho * (-width))
    accum = ad.cumsum(rho, axis=-1) * width
    trans = ad.exp(rho * width - accum)
    weights = trans * alpha  # (K, N) jet

    colors_val = field.color(pts_val, directions.val[:, None, :])
    dc_dp, dc_dd = field.color_jacobian(pts_val, directions.val[:, None, :])
    if dc_dp.any() or dc_dd.any():
        colors_tan = np.einsum("knci,knit->knct", dc_dp, pts_tan) + np.einsum(
            "knci,kit->knct", dc_dd, directions.tan
        )
    else:
        colors_tan = np.zeros(colors_val.shape + (6,))
    colors = ad.Jet(colors_val, colors_tan)

    out = ad.sum(ad.expand_dims(weights, -1) * colors, axis=1)
    residual = ad.exp(-accum[:, -1])
    total = out + ad.expand_dims(residual, -1) * bg
    return total.val, total.tan


def render_pixel_pose_jacobian(
    field: RadianceField,
    camera: Camera,
    pose: Pose,
    i,
    n_samples: int = 128,
    seed: int = 0,
    t_near: float = DEFAULT_T_NEAR,
    t_far: Optional[float] = None,
    background=None,
) -> np.ndarray:
    """3x6 derivative of one pixel's color w.r.t. the pose retraction."""
    flat = _flat_index(camera, i)
    _, jac = render_pixels_with_pose_jacobian(
        field, camera, pose, np.array([flat]), n_samples, seed, t_near, t_far, background
    )
    return jac[0]


# -- image files ---------------------------------------------------------------


def save_ppm(pixels: np.ndarray, path) -> None:
    """Binary PPM (P6, 8 bit)."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) array")
    h, w = pixels.shape[:2]
    quantized = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quantized.tobytes())


def load_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6":
        raise ValueError("not a binary P6 file")
    w, h = (int(v) for v in parts[1].split())
    if parts[2] != b"255":
        raise ValueError("expected 8-bit maxval 255")
    pixels = np.frombuffer(parts[3][: w * h * 3], dtype=np.uint8)
    if pixels.size != w * h * 3:
        raise ValueError("pixel payload truncated")
    return pixels.reshape(h, w, 3) / 255.0


def save_raw(image: RenderedImage, path, pose: Pose, seed: int) -> None:
    """Float32 raw pixels next to a JSON sidecar (width, height, pose, seed)."""
    path = str(path)
    h, w = image.pixels.shape[:2]
    image.pixels.astype("<f4").tofile(path)
    sidecar = {"width": w, "height": h, "pose": pose_to_json(pose), "seed": int(seed)}
    with open(path + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2)


def load_raw(path) -> Tuple[np.ndarray, Pose, int]:
    path = str(path)
    with open(path + ".json") as fh:
        sidecar = json.load(fh)
    w, h = sidecar["width"], sidecar["height"]
    pixels = np.fromfile(path, dtype="<f4").astype(float)
    if pixels.size != w * h * 3:
        raise ValueError("raw payload does not match sidecar dimensions")
    return pixels.reshape(h, w, 3), pose_from_json(sidecar["pose"]), sidecar["seed"]

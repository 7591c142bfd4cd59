"""Volumetric environment models: analytic scenes and a protocol for fields.

A field maps a position to a non-negative density (differential opacity,
1/m) and a view-dependent color in [0,1]^3.  Analytic scenes build the
density from signed distance functions, ``rho_max * sigmoid(-sdf/beta)``,
so every scene carries an exact occupancy oracle ``sdf(p) <= 0`` for
ground-truth collision checks.  Scene density combines primitives with a
pointwise maximum, which preserves the guarantee that density above half
a primitive's peak implies the point is inside that primitive.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from typing import Optional, Protocol, Sequence

import numpy as np

from . import autodiff as ad

DEFAULT_BETA_FRACTION = 0.02
DEFAULT_BACKGROUND = (0.5, 0.5, 0.5)


class RadianceField(Protocol):
    """Minimal interface the renderer and planner consume."""

    bounds_lo: np.ndarray
    bounds_hi: np.ndarray
    background: np.ndarray

    def density(self, points: np.ndarray) -> np.ndarray: ...

    def color(self, points: np.ndarray, directions: np.ndarray) -> np.ndarray: ...

    def density_gradient(self, points: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class Primitive:
    """Shared fields: world pose, density profile, Lambertian albedo.

    ``beta`` is the sigmoid softness in meters; None picks 2% of the
    shape's characteristic radius.
    """

    center: np.ndarray
    rho_max: float = 10.0
    beta: Optional[float] = None
    albedo: np.ndarray = dc_field(default_factory=lambda: np.array([0.8, 0.8, 0.8]))
    rotation: np.ndarray = dc_field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        object.__setattr__(self, "albedo", np.asarray(self.albedo, dtype=float))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        if self.beta is None:
            object.__setattr__(self, "beta", DEFAULT_BETA_FRACTION * self.characteristic_radius())
        if self.rho_max < 0:
            raise ValueError("rho_max must be non-negative")
        if self.beta <= 0:
            raise ValueError("beta must be positive")

    def characteristic_radius(self) -> float:
        raise NotImplementedError

    def _to_local(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.center) @ self.rotation

    def _sdf_local(self, local: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _sdf_gradient_local(self, local: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def sdf(self, points: np.ndarray) -> np.ndarray:
        return self._sdf_local(self._to_local(points))

    def sdf_gradient(self, points: np.ndarray) -> np.ndarray:
        return self._sdf_gradient_local(self._to_local(points)) @ self.rotation.T

    def density(self, points: np.ndarray) -> np.ndarray:
        return self.rho_max * ad.sigmoid(-self.sdf(points) / self.beta)

    def density_gradient(self, points: np.ndarray) -> np.ndarray:
        s = ad.sigmoid(-self.sdf(points) / self.beta)
        scale = -self.rho_max * s * (1.0 - s) / self.beta
        return scale[..., None] * self.sdf_gradient(points)


@dataclass(frozen=True)
class Sphere(Primitive):
    radius: float = 1.0

    def characteristic_radius(self) -> float:
        return self.radius

    def _sdf_local(self, local):
        return np.linalg.norm(local, axis=-1) - self.radius

    def _sdf_gradient_local(self, local):
        dist = np.linalg.norm(local, axis=-1, keepdims=True)
        return local / np.where(dist == 0.0, 1.0, dist)


@dataclass(frozen=True)
class Box(Primitive):
    half_extents: np.ndarray = dc_field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        object.__setattr__(self, "half_extents", np.asarray(self.half_extents, dtype=float))
        super().__post_init__()

    def characteristic_radius(self) -> float:
        return float(np.min(self.half_extents))

    def _sdf_local(self, local):
        q = np.abs(local) - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside

    def _sdf_gradient_local(self, local):
        q = np.abs(local) - self.half_extents
        sign = np.where(local >= 0.0, 1.0, -1.0)
        pos = np.maximum(q, 0.0)
        out_norm = np.linalg.norm(pos, axis=-1, keepdims=True)
        outside_grad = sign * pos / np.where(out_norm == 0.0, 1.0, out_norm)
        # Inside: step toward the nearest face (the largest q component).
        nearest = q == np.max(q, axis=-1, keepdims=True)
        inside_grad = sign * nearest / np.sum(nearest, axis=-1, keepdims=True)
        is_outside = np.any(q > 0.0, axis=-1, keepdims=True)
        return np.where(is_outside, outside_grad, inside_grad)


@dataclass(frozen=True)
class Cylinder(Primitive):
    """Finite cylinder along the local z axis."""

    radius: float = 1.0
    height: float = 2.0

    def characteristic_radius(self) -> float:
        return min(self.radius, 0.5 * self.height)

    def _sdf_local(self, local):
        radial = np.linalg.norm(local[..., :2], axis=-1) - self.radius
        axial = np.abs(local[..., 2]) - 0.5 * self.height
        d = np.stack([radial, axial], axis=-1)
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
        inside = np.minimum(np.max(d, axis=-1), 0.0)
        return outside + inside

    def _sdf_gradient_local(self, local):
        xy = local[..., :2]
        r = np.linalg.norm(xy, axis=-1, keepdims=True)
        radial_dir = xy / np.where(r == 0.0, 1.0, r)
        radial = r[..., 0] - self.radius
        axial = np.abs(local[..., 2]) - 0.5 * self.height
        sign_z = np.where(local[..., 2] >= 0.0, 1.0, -1.0)

        d = np.stack([radial, axial], axis=-1)
        pos = np.maximum(d, 0.0)
        out_norm = np.linalg.norm(pos, axis=-1)
        is_outside = np.any(d > 0.0, axis=-1)
        safe = np.where(out_norm == 0.0, 1.0, out_norm)
        w_radial = np.where(is_outside, pos[..., 0] / safe, (radial >= axial).astype(float))
        w_axial = np.where(is_outside, pos[..., 1] / safe, (radial < axial).astype(float))
        grad = np.empty(local.shape)
        grad[..., :2] = w_radial[..., None] * radial_dir
        grad[..., 2] = w_axial * sign_z
        return grad


class AnalyticScene:
    """Union of soft-density primitives inside an axis-aligned boundary."""

    def __init__(
        self,
        primitives: Sequence[Primitive] = (),
        bounds_lo: np.ndarray = (-10.0, -10.0, -10.0),
        bounds_hi: np.ndarray = (10.0, 10.0, 10.0),
        background: np.ndarray = DEFAULT_BACKGROUND,
        density_scale: float = 1.0,
    ):
        self.primitives = tuple(primitives)
        self.bounds_lo = np.asarray(bounds_lo, dtype=float)
        self.bounds_hi = np.asarray(bounds_hi, dtype=float)
        self.background = np.asarray(background, dtype=float)
        self.density_scale = float(density_scale)
        if np.any(self.bounds_lo >= self.bounds_hi):
            raise ValueError("bounds_lo must be strictly below bounds_hi")

    def _inside_bounds(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return np.all((points >= self.bounds_lo) & (points <= self.bounds_hi), axis=-1)

    def _per_primitive_density(self, points: np.ndarray) -> np.ndarray:
        return np.stack([p.density(points) for p in self.primitives], axis=0)

    def density(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        if not self.primitives:
            return np.zeros(points.shape[:-1])
        dens = np.max(self._per_primitive_density(points), axis=0)
        return np.where(self._inside_bounds(points), self.density_scale * dens, 0.0)

    def density_gradient(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        if not self.primitives:
            return np.zeros(points.shape)
        dens = self._per_primitive_density(points)
        winner = np.argmax(dens, axis=0)
        grads = np.stack([p.density_gradient(points) for p in self.primitives], axis=0)
        grad = np.take_along_axis(grads, winner[None, ..., None], axis=0)[0]
        mask = self._inside_bounds(points)[..., None]
        return np.where(mask, self.density_scale * grad, 0.0)

    def color(self, points: np.ndarray, directions: np.ndarray) -> np.ndarray:
        """Lambertian: the albedo of the densest primitive at each point."""
        points = np.asarray(points, dtype=float)
        if not self.primitives:
            return np.zeros(points.shape[:-1] + (3,))
        winner = np.argmax(self._per_primitive_density(points), axis=0)
        albedos = np.stack([p.albedo for p in self.primitives], axis=0)
        return albedos[winner]

    def color_jacobian(self, points: np.ndarray, directions: np.ndarray):
        """Zero almost everywhere: albedo is piecewise constant."""
        points = np.asarray(points, dtype=float)
        zeros = np.zeros(points.shape[:-1] + (3, 3))
        return zeros, zeros.copy()

    def sdf(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        if not self.primitives:
            return np.full(points.shape[:-1], np.inf)
        return np.min(np.stack([p.sdf(points) for p in self.primitives], axis=0), axis=0)

    def occupancy(self, points: np.ndarray) -> np.ndarray:
        return self.sdf(points) <= 0.0

    def density_jet(self, points):
        """Density and its directional derivatives in one primitive pass.

        Shares each primitive's signed distance between the value and the
        gradient, which would otherwise be recomputed; the arithmetic is
        identical to density / density_gradient.
        """
        if not ad.is_jet(points):
            return self.density(points)
        val = np.asarray(points.val, dtype=float)
        if not self.primitives:
            return ad.Jet(np.zeros(val.shape[:-1]), np.zeros(val.shape[:-1] + points.tan.shape[-1:]))
        dens, grads = [], []
        for p in self.primitives:
            local = p._to_local(val)
            s = ad.sigmoid(-p._sdf_local(local) / p.beta)
            dens.append(p.rho_max * s)
            scale = -p.rho_max * s * (1.0 - s) / p.beta
            grads.append(scale[..., None] * (p._sdf_gradient_local(local) @ p.rotation.T))
        dens = np.stack(dens, axis=0)
        winner = np.argmax(dens, axis=0)
        rho = np.take_along_axis(dens, winner[None], axis=0)[0]
        grad = np.take_along_axis(np.stack(grads, axis=0), winner[None, ..., None], axis=0)[0]
        inside = self._inside_bounds(val)
        rho = np.where(inside, self.density_scale * rho, 0.0)
        grad = np.where(inside[..., None], self.density_scale * grad, 0.0)
        return ad.Jet(rho, np.einsum("...i,...it->...t", grad, points.tan))


def density(field: RadianceField, points: np.ndarray) -> np.ndarray:
    return field.density(points)


def density_gradient(field: RadianceField, points: np.ndarray) -> np.ndarray:
    return field.density_gradient(points)


def occupancy(scene: AnalyticScene, points: np.ndarray) -> np.ndarray:
    return scene.occupancy(points)


def density_jet(field: RadianceField, points):
    """Density of jet-valued points via the chain rule.

    Fields that offer a fused ``density_jet`` (one evaluation pass for
    value and gradient) are used directly; otherwise the directional
    derivatives of sample positions enter as grad . dp/dt.
    """
    fused = getattr(field, "density_jet", None)
    if fused is not None:
        return fused(points)
    if not ad.is_jet(points):
        return field.density(points)
    rho = field.density(points.val)
    grad = field.density_gradient(points.val)
    return ad.Jet(rho, np.einsum("...i,...it->...t", grad, points.tan))


# -- JSON scene description ---------------------------------------------------

_SHAPE_NAMES = {"sphere": Sphere, "box": Box, "cylinder": Cylinder}


def _primitive_to_json(prim: Primitive) -> dict:
    out = {
        "center": [float(x) for x in prim.center],
        "rho_max": float(prim.rho_max),
        "beta": float(prim.beta),
        "albedo": [float(x) for x in prim.albedo],
    }
    if not np.array_equal(prim.rotation, np.eye(3)):
        out["rotation"] = [[float(x) for x in row] for row in prim.rotation]
    if isinstance(prim, Sphere):
        out["shape"] = "sphere"
        out["radius"] = float(prim.radius)
    elif isinstance(prim, Box):
        out["shape"] = "box"
        out["half_extents"] = [float(x) for x in prim.half_extents]
    elif isinstance(prim, Cylinder):
        out["shape"] = "cylinder"
        out["radius"] = float(prim.radius)
        out["height"] = float(prim.height)
    else:
        raise ValueError(f"unknown primitive type {type(prim).__name__}")
    return out


def _primitive_from_json(obj: dict) -> Primitive:
    shape = obj.get("shape")
    if shape not in _SHAPE_NAMES:
        raise ValueError(f"unknown shape {shape!r}; expected one of {sorted(_SHAPE_NAMES)}")
    common = {
        "center": np.asarray(obj["center"], dtype=float),
        "rho_max": float(obj.get("rho_max", 10.0)),
        "beta": obj.get("beta"),
        "albedo": np.asarray(obj.get("albedo", (0.8, 0.8, 0.8)), dtype=float),
        "rotation": np.asarray(obj.get("rotation", np.eye(3).tolist()), dtype=float),
    }
    if shape == "sphere":
        return Sphere(radius=float(obj["radius"]), **common)
    if shape == "box":
        return Box(half_extents=np.asarray(obj["half_extents"], dtype=float), **common)
    return Cylinder(radius=float(obj["radius"]), height=float(obj["height"]), **common)


def scene_to_json(scene: AnalyticScene) -> dict:
    return {
        "bounds": {
            "lo": [float(x) for x in scene.bounds_lo],
            "hi": [float(x) for x in scene.bounds_hi],
        },
        "background": [float(x) for x in scene.background],
        "density_scale": scene.density_scale,
        "primitives": [_primitive_to_json(p) for p in scene.primitives],
    }


def scene_from_json(obj: dict) -> AnalyticScene:
    return AnalyticScene(
        primitives=[_primitive_from_json(p) for p in obj.get("primitives", [])],
        bounds_lo=np.asarray(obj["bounds"]["lo"], dtype=float),
        bounds_hi=np.asarray(obj["bounds"]["hi"], dtype=float),
        background=np.asarray(obj.get("background", DEFAULT_BACKGROUND), dtype=float),
        density_scale=float(obj.get("density_scale", 1.0)),
    )


def save_scene(scene: AnalyticScene, path) -> None:
    with open(path, "w") as fh:
        json.dump(scene_to_json(scene), fh, indent=2)


def load_scene(path) -> AnalyticScene:
    with open(path) as fh:
        return scene_from_json(json.load(fh))

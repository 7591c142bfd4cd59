"""Recursive vision-only state filter over rendered images.

The belief is a Gaussian over the 12-dimensional tangent space at the
mean state (pose twist, linear velocity, angular velocity).  propagate
pushes the mean through the noise-free dynamics step and the covariance
through its Jacobian, Sigma' = A Sigma A^T + Q.  update minimizes

    J(mu) = 1/2 ||C(T) - I(pixels)||^2 / s  +  1/2 d^T Sigma_pred^{-1} d

where C renders the selected pixels at the candidate pose, d is the
tangent difference between the prediction and the candidate, and s is
the scalar measurement noise.  Every gradient step retracts the pose as
exp(delta) o T rather than accumulating tangent steps, and velocities
move additively.  Per-pixel squared residuals above the outlier
quantile are dropped each iteration.  The posterior covariance is the
inverse Gauss-Newton Hessian J^T J / s + Sigma_pred^{-1} at the
optimum; with the half factors above this reproduces the Kalman
posterior exactly when the measurement is linear.

Pixels are chosen without replacement with probability proportional to
a corner score (minimum eigenvalue of the smoothed structure tensor)
plus a floor, so textured regions dominate but flat regions keep
nonzero mass.  The photometric-only variant (zero process weight)
serves as the pose-registration baseline: velocities dead-reckon and a
singular Hessian falls back to the predicted covariance.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import ndimage

from . import dynamics as dyn
from . import render as render_mod

SYMMETRY_TOL = 1e-9
EIGENVALUE_FLOOR = -1e-9


class HessianSingular(np.linalg.LinAlgError):
    """Gauss-Newton Hessian is not positive definite."""


@dataclass(frozen=True)
class Belief:
    """Gaussian state estimate: mean on the manifold, covariance in its tangent."""

    mean: dyn.FullState
    covariance: np.ndarray  # (12, 12), symmetric PSD
    low_information: bool = False
    photometric_loss: Optional[float] = None
    process_loss: Optional[float] = None

    def __post_init__(self):
        cov = np.asarray(self.covariance, dtype=float)
        if cov.shape != (dyn.STATE_DIM, dyn.STATE_DIM):
            raise ValueError("covariance must be 12x12")
        if np.linalg.norm(cov - cov.T) > SYMMETRY_TOL:
            raise ValueError("covariance must be symmetric within 1e-9")
        cov = 0.5 * (cov + cov.T)
        eigenvalues = np.linalg.eigvalsh(cov)
        if eigenvalues.min() < EIGENVALUE_FLOOR:
            raise ValueError("covariance must be PSD (min eigenvalue >= -1e-9)")
        if eigenvalues.min() < 0.0:
            # Clamp roundoff-negative directions to zero.
            vals, vecs = np.linalg.eigh(cov)
            cov = (vecs * np.maximum(vals, 0.0)) @ vecs.T
            cov = 0.5 * (cov + cov.T)
        object.__setattr__(self, "covariance", cov)


@dataclass(frozen=True)
class FilterConfig:
    process_noise: object = 0.1  # scalar q (Q = qI) or full 12x12 matrix
    measurement_noise: float = 1.0  # scalar s (S = sI); inf ignores pixels
    pixel_budget: int = 256
    gradient_steps: int = 300
    learning_rate_pose: float = 5e-3
    learning_rate_velocity: float = 1e-2
    outlier_quantile: float = 0.9
    detector_window: int = 3
    score_floor: float = 1e-3  # floor as a fraction of the mean corner score
    resample_per_step: bool = False
    render_samples: int = 128
    process_weight: float = 1.0  # 0 removes the process term entirely

    def __post_init__(self):
        q = np.asarray(self.process_noise, dtype=float)
        if q.ndim == 0:
            if q < 0:
                raise ValueError("process noise must be non-negative")
        elif q.shape != (dyn.STATE_DIM, dyn.STATE_DIM) or np.linalg.eigvalsh(
            0.5 * (q + q.T)
        ).min() < -1e-12:
            raise ValueError("process noise matrix must be 12x12 PSD")
        if not self.measurement_noise > 0:
            raise ValueError("measurement noise must be positive")
        if self.pixel_budget < 6:
            raise ValueError("pixel budget must be >= 6")
        if self.gradient_steps < 1:
            raise ValueError("need at least one gradient step")
        if not 0.0 < self.outlier_quantile <= 1.0:
            raise ValueError("outlier quantile must lie in (0, 1]")
        if self.process_weight < 0:
            raise ValueError("process weight must be non-negative")

    def process_noise_matrix(self) -> np.ndarray:
        q = np.asarray(self.process_noise, dtype=float)
        if q.ndim == 0:
            return float(q) * np.eye(dyn.STATE_DIM)
        return 0.5 * (q + q.T)


def initial_belief(state: dyn.FullState, sigma0: float = 0.1) -> Belief:
    return Belief(state, sigma0 * np.eye(dyn.STATE_DIM))


def propagate(
    belief: Belief,
    control: np.ndarray,
    dt: float,
    robot: dyn.RobotModel,
    config: FilterConfig,
) -> Belief:
    """Noise-free mean step; covariance through the step Jacobian plus Q."""
    mean = dyn.simulate_step(belief.mean, control, dt, robot)
    jac = dyn.dynamics_jacobian(belief.mean, control, dt, robot)
    cov = jac @ belief.covariance @ jac.T + config.process_noise_matrix()
    return Belief(mean, 0.5 * (cov + cov.T))


# -- pixel selection -------------------------------------------------------------


def corner_scores(pixels: np.ndarray, window: int = 3) -> np.ndarray:
    """Minimum eigenvalue of the window-averaged structure tensor per pixel."""
    gray = np.asarray(pixels, dtype=float).mean(axis=-1)
    gy, gx = np.gradient(gray)
    jxx = ndimage.uniform_filter(gx * gx, size=window)
    jyy = ndimage.uniform_filter(gy * gy, size=window)
    jxy = ndimage.uniform_filter(gx * gy, size=window)
    half_trace = 0.5 * (jxx + jyy)
    radius = np.sqrt(0.25 * (jxx - jyy) ** 2 + jxy * jxy)
    return np.maximum(half_trace - radius, 0.0)


def select_pixels(
    image,
    budget: int,
    rng: np.random.Generator,
    window: int = 3,
    score_floor: float = 1e-3,
) -> np.ndarray:
    """Flat pixel indices drawn without replacement, biased toward corners.

    Selection probability is proportional to the corner score plus a
    floor (score_floor times the mean score), so a uniform image is
    sampled uniformly and textured regions dominate otherwise.
    """
    pixels = image.pixels if isinstance(image, render_mod.RenderedImage) else image
    pixels = np.asarray(pixels, dtype=float)
    count = pixels.shape[0] * pixels.shape[1]
    if budget > count:
        raise ValueError("pixel budget exceeds the image size")
    if budget == count:
        return np.arange(count)
    scores = corner_scores(pixels, window).ravel()
    mean_score = scores.mean()
    floor = score_floor * mean_score if mean_score > 0 else 1.0
    weights = scores + floor
    chosen = rng.choice(count, size=budget, replace=False, p=weights / weights.sum())
    return np.sort(chosen)


# -- measurement update ----------------------------------------------------------


def covariance_from_hessian(hessian: np.ndarray) -> np.ndarray:
    """Inverse of a PSD Gauss-Newton Hessian; raises when not invertible."""
    hessian = 0.5 * (hessian + hessian.T)
    try:
        np.linalg.cholesky(hessian)
    except np.linalg.LinAlgError as exc:
        raise HessianSingular("Gauss-Newton Hessian is singular") from exc
    cov = np.linalg.inv(hessian)
    return 0.5 * (cov + cov.T)


def _as_rows(residuals, jacobian):
    """Flatten model output to rows (N,), (N, 12) plus per-pixel group ids.

    The renderer returns per-pixel RGB residuals (K, 3) with a pose-only
    Jacobian (K, 3, 6); custom measurement models return flat residuals
    (N,) with a full-state Jacobian (N, 12).
    """
    residuals = np.asarray(residuals, dtype=float)
    jacobian = np.asarray(jacobian, dtype=float)
    if residuals.ndim == 2:
        k, channels = residuals.shape
        rows = residuals.reshape(-1)
        full = np.zeros((rows.size, dyn.STATE_DIM))
        full[:, :6] = jacobian.reshape(rows.size, 6)
        return rows, full, np.repeat(np.arange(k), channels)
    return residuals, jacobian, np.arange(residuals.size)


def _inlier_rows(rows: np.ndarray, groups: np.ndarray, quantile: float) -> np.ndarray:
    """Row mask keeping pixels whose squared residual is at or below the quantile."""
    if quantile >= 1.0:
        return np.ones(rows.size, dtype=bool)
    group_loss = np.bincount(groups, weights=rows * rows)
    threshold = np.quantile(group_loss, quantile)
    return (group_loss <= threshold)[groups]


def update(
    belief_pred: Belief,
    image,
    field,
    camera,
    config: FilterConfig,
    rng: Optional[np.random.Generator] = None,
    render_seed: int = 0,
    measurement_model: Optional[Callable] = None,
) -> Belief:
    """Posterior belief from gradient descent on photometric + process loss.

    The pose is retracted by exp(delta) o T at every step and velocities
    move additively.  measurement_model(state) -> (residuals, jacobian)
    replaces the renderer when given (used by linear-model validation).
    A singular posterior Hessian falls back to the predicted covariance
    with low_information set.
    """
    pred = belief_pred.mean
    sigma_pred = belief_pred.covariance
    if config.process_weight > 0:
        precision = config.process_weight * np.linalg.inv(sigma_pred)
        precision = 0.5 * (precision + precision.T)
    else:
        precision = np.zeros((dyn.STATE_DIM, dyn.STATE_DIM))
    s_inv = 0.0 if np.isinf(config.measurement_noise) else 1.0 / config.measurement_noise

    make_model = None
    if measurement_model is None:
        pixels_img = (
            image.pixels if isinstance(image, render_mod.RenderedImage) else np.asarray(image, dtype=float)
        )
        measured = pixels_img.reshape(-1, 3)
        rng = np.random.default_rng(0) if rng is None else rng

        def make_model():
            chosen = select_pixels(
                pixels_img, config.pixel_budget, rng, config.detector_window, config.score_floor
            )
            target = measured[chosen]

            def model(state):
                colors, jac = render_mod.render_pixels_with_pose_jacobian(
                    field,
                    camera,
                    state.pose(),
                    chosen,
                    n_samples=config.render_samples,
                    seed=render_seed,
                )
                return colors - target, jac

            return model

        measurement_model = make_model()

    step_sizes = np.concatenate(
        [
            np.full(6, config.learning_rate_pose),
            np.full(6, config.learning_rate_velocity),
        ]
    )
    mean = pred
    for step in range(config.gradient_steps):
        if step > 0 and config.resample_per_step and make_model is not None:
            measurement_model = make_model()
        rows, jac, groups = _as_rows(*measurement_model(mean))
        keep = _inlier_rows(rows, groups, config.outlier_quantile)
        difference = dyn.state_difference(mean, pred)
        gradient = s_inv * (jac[keep].T @ rows[keep]) + precision @ difference
        mean = dyn.state_retract(mean, -step_sizes * gradient)

    rows, jac, groups = _as_rows(*measurement_model(mean))
    keep = _inlier_rows(rows, groups, config.outlier_quantile)
    difference = dyn.state_difference(mean, pred)
    photometric = 0.5 * s_inv * float(rows[keep] @ rows[keep])
    process = 0.5 * float(difference @ precision @ difference)
    hessian = s_inv * (jac[keep].T @ jac[keep]) + precision
    try:
        sigma_post = covariance_from_hessian(hessian)
        low_information = False
    except HessianSingular:
        sigma_post = sigma_pred
        low_information = True
    return Belief(mean, sigma_post, low_information, photometric, process)


def run_registration_baseline(
    belief_pred: Belief,
    image,
    field,
    camera,
    config: FilterConfig,
    rng: Optional[np.random.Generator] = None,
    render_seed: int = 0,
    measurement_model: Optional[Callable] = None,
) -> Belief:
    """Photometric-only registration: update with the process term removed.

    Velocities dead-reckon (the renderer carries no velocity
    information) and the posterior covariance falls back to the
    prediction whenever the pose-only Hessian is singular.
    """
    photometric_only = dataclasses.replace(config, process_weight=0.0)
    return update(
        belief_pred,
        image,
        field,
        camera,
        photometric_only,
        rng=rng,
        render_seed=render_seed,
        measurement_model=measurement_model,
    )


# -- trace log -------------------------------------------------------------------


def belief_to_json(belief: Belief) -> dict:
    payload = {
        "mean": dyn.state_to_json(belief.mean),
        "covariance": belief.covariance.tolist(),
        "low_information": belief.low_information,
    }
    if belief.photometric_loss is not None:
        payload["photometric_loss"] = belief.photometric_loss
    if belief.process_loss is not None:
        payload["process_loss"] = belief.process_loss
    return payload


def belief_from_json(payload: dict) -> Belief:
    return Belief(
        dyn.state_from_json(payload["mean"]),
        np.asarray(payload["covariance"], dtype=float),
        payload.get("low_information", False),
        payload.get("photometric_loss"),
        payload.get("process_loss"),
    )


def trace_record(
    t: int,
    prior: Belief,
    posterior: Belief,
    truth: Optional[dyn.FullState] = None,
    pixel_seed: Optional[int] = None,
) -> dict:
    return {
        "t": int(t),
        "prior": belief_to_json(prior),
        "posterior": belief_to_json(posterior),
        "truth": None if truth is None else dyn.state_to_json(truth),
        "photometric_loss": posterior.photometric_loss,
        "process_loss": posterior.process_loss,
        "pixel_seed": pixel_seed,
    }


def append_trace(path, record: dict) -> None:
    with open(path, "a", encoding="utf-8") as handle:
        handle.write(json.dumps(record) + "\n")


def load_trace(path) -> list:
    with open(path, "r", encoding="utf-8") as handle:
        return [json.loads(line) for line in handle if line.strip()]

"""Mean-field drift models.

A model prescribes a drift field of the form

    B(theta, x, mu) = b(theta, x) + E_{y ~ mu}[ phi(theta, x, y) ]

for particles in R^d interacting through a probability measure mu, in
practice the empirical measure of the particle cloud. Parameters theta live
in R^p and enter only the drift; the diffusion coefficient sigma is a known
constant.

Built-in models (both d = 1, p = 2):

``linear``
    b(theta, x) = -theta1 x and phi(theta, x, y) = -theta2 (x - y). The
    interaction term averages to -theta2 (x - mean(mu)), so drift evaluation
    against an N-point measure costs O(N) (``reduction="mean-only"``).

``opinion``
    No confinement. Bounded-confidence attraction
    phi(theta, x, y) = -k_theta(|x - y|) (x - y) with the smooth bump

        k_theta(r) = theta1 * exp(-0.01 / (1 - (r - theta2)^2))

    when r > 0 and (r - theta2)^2 < 1, and k_theta(r) = 0 otherwise. The
    zero extension keeps the kernel globally smooth; theta2 shifts the
    distance at which attraction peaks and theta1 scales its strength.

Custom models are supplied as pure numpy-broadcastable callbacks with
declared dimensions (see :func:`custom_model`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np

from .errors import ValidationError

_BUMP_EPS = 0.01
"""Sharpness of the bounded-confidence bump kernel."""


# ==== parameters and measures ====


@dataclass(frozen=True)
class Theta:
    """Drift parameter vector in R^p."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or v.size == 0:
            raise ValidationError("theta must be a nonempty 1-d vector")
        if not np.all(np.isfinite(v)):
            raise ValidationError("theta must be finite")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size


def as_theta_array(model: "ModelSpec", theta) -> np.ndarray:
    """Coerce Theta, array, or sequence to a validated (p,) float array."""
    v = theta.values if isinstance(theta, Theta) else np.asarray(theta, dtype=float)
    if v.shape != (model.param_dim,):
        raise ValidationError(
            f"theta has shape {v.shape}, model expects ({model.param_dim},)"
        )
    if not np.all(np.isfinite(v)):
        raise ValidationError("theta must be finite")
    return v


@dataclass
class EmpiricalMeasure:
    """Uniform measure on N support points, (N,) for d = 1 or (N, d)."""

    positions: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        if pos.ndim not in (1, 2) or pos.shape[0] == 0:
            raise ValidationError("measure needs at least one support point")
        if not np.all(np.isfinite(pos)):
            raise ValidationError("measure support points must be finite")
        self.positions = pos

    @property
    def n_points(self) -> int:
        return self.positions.shape[0]

    @cached_property
    def mean(self) -> np.ndarray | float:
        """Barycentre, cached; scalar for d = 1, else (d,)."""
        return self.positions.mean(axis=0)


def measure_positions(model: "ModelSpec", mu) -> np.ndarray:
    """Support points of ``mu`` (EmpiricalMeasure or array), validated."""
    pos = mu.positions if isinstance(mu, EmpiricalMeasure) else np.asarray(mu, dtype=float)
    d = model.state_dim
    if d == 1:
        if pos.ndim != 1:
            raise ValidationError(f"measure for d=1 must be (N,), got {pos.shape}")
    elif pos.ndim != 2 or pos.shape[1] != d:
        raise ValidationError(f"measure must be (N,{d}), got {pos.shape}")
    if pos.shape[0] == 0 or not np.all(np.isfinite(pos)):
        raise ValidationError("measure support must be nonempty and finite")
    return pos


# ==== model specification ====


@dataclass(frozen=True)
class ModelSpec:
    """Identity and callbacks of one drift model.

    ``reduction`` declares how the interaction uses the measure:
    "mean-only" models see mu only through its mean (phi linear in y), so
    drift evaluation is O(N); "pairwise" models average phi over all
    support points.
    """

    kind: str  # "linear" | "opinion" | "custom"
    param_dim: int
    state_dim: int
    sigma: float
    reduction: str
    name: str = ""
    b: Callable | None = field(default=None, repr=False)
    phi: Callable | None = field(default=None, repr=False)
    grad_b: Callable | None = field(default=None, repr=False)
    grad_phi: Callable | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("linear", "opinion", "custom"):
            raise ValidationError(f"unknown model kind {self.kind!r}")
        if self.reduction not in ("mean-only", "pairwise"):
            raise ValidationError(f"unknown reduction {self.reduction!r}")
        if self.param_dim < 1 or self.state_dim < 1:
            raise ValidationError("param_dim and state_dim must be >= 1")
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ValidationError("sigma must be positive")
        if self.kind == "custom" and None in (self.b, self.phi, self.grad_b, self.grad_phi):
            raise ValidationError("custom models need b, phi, grad_b, grad_phi callbacks")

    @property
    def model_id(self) -> str:
        return self.name or self.kind


def linear_mean_field(sigma: float = 1.0) -> ModelSpec:
    """Linear confinement plus linear attraction to the cloud mean."""
    return ModelSpec("linear", 2, 1, sigma, "mean-only", name="linear")


def opinion_dynamics(sigma: float = 1.0) -> ModelSpec:
    """Bounded-confidence attraction with the smooth bump kernel."""
    return ModelSpec("opinion", 2, 1, sigma, "pairwise", name="opinion")


def custom_model(
    *,
    b: Callable,
    phi: Callable,
    grad_b: Callable,
    grad_phi: Callable,
    param_dim: int,
    state_dim: int = 1,
    sigma: float = 1.0,
    reduction: str = "pairwise",
    name: str = "custom",
) -> ModelSpec:
    """Model from user callbacks.

    Callbacks must broadcast over numpy arrays: ``b(theta, x)`` and
    ``phi(theta, x, y)`` return drift contributions shaped like their
    broadcast inputs; ``grad_b(theta, x)`` and ``grad_phi(theta, x, y)``
    return gradients with a leading (p,) axis. For ``reduction="mean-only"``
    the interaction must depend on mu only through its mean (phi and
    grad_phi linear in y); the engine then evaluates them at the mean.
    """
    return ModelSpec(
        "custom", param_dim, state_dim, sigma, reduction,
        name=name, b=b, phi=phi, grad_b=grad_b, grad_phi=grad_phi,
    )


def model_by_name(name: str, sigma: float = 1.0) -> ModelSpec:
    if name == "linear":
        return linear_mean_field(sigma)
    if name == "opinion":
        return opinion_dynamics(sigma)
    raise ValidationError(f"unknown model name {name!r} (expected 'linear' or 'opinion')")


# ==== bump kernel ====


def bump_kernel(theta1, theta2, r):
    """k_theta(r), vectorized; zero for r <= 0 or (r - theta2)^2 >= 1."""
    r = np.asarray(r, dtype=float)
    u = r - theta2
    inside = (r > 0.0) & (u * u < 1.0)
    den = np.where(inside, 1.0 - u * u, 1.0)  # placeholder 1 keeps exp silent
    return theta1 * np.where(inside, np.exp(-_BUMP_EPS / den), 0.0)


def bump_kernel_grads(theta1, theta2, r):
    """(dk/dtheta1, dk/dtheta2), with the same support masking as the kernel."""
    r = np.asarray(r, dtype=float)
    u = r - theta2
    inside = (r > 0.0) & (u * u < 1.0)
    den = np.where(inside, 1.0 - u * u, 1.0)
    e = np.where(inside, np.exp(-_BUMP_EPS / den), 0.0)
    dk1 = e
    dk2 = theta1 * e * (2.0 * _BUMP_EPS) * u / (den * den)
    return dk1, dk2


def linear_drift(theta1, theta2, x, center):
    """Canonical linear-model drift expression, shared by every code path."""
    return -theta1 * x - theta2 * (x - center)


# ==== vectorized drift engine ====
#
# x may carry arbitrary leading batch axes. For d = 1 the particle axis is
# the last one; for d >= 2 the layout is (..., d) against measures (N, d).


def drift_values(model: ModelSpec, theta, x, measure) -> np.ndarray:
    """B(theta, x, mu) for every point in ``x`` against a fixed measure.

    Parameters
    ----------
    x : ndarray, shape (...,) for d = 1 or (..., d)
    measure : EmpiricalMeasure or ndarray of support points

    Returns
    -------
    ndarray shaped like ``x``.
    """
    th = as_theta_array(model, theta)
    x = np.asarray(x, dtype=float)
    pos = measure_positions(model, measure)
    if model.kind == "linear":
        return linear_drift(th[0], th[1], x, pos.mean())
    if model.kind == "opinion":
        diff = x[..., None] - pos
        k = bump_kernel(th[0], th[1], np.abs(diff))
        return -(k * diff).mean(axis=-1)
    return _custom_drift(model, th, x, pos)


def _custom_drift(model, th, x, pos):
    if model.reduction == "mean-only":
        return model.b(th, x) + model.phi(th, x, pos.mean(axis=0))
    if model.state_dim == 1:
        inter = model.phi(th, x[..., None], pos).mean(axis=-1)
    else:
        inter = model.phi(th, x[..., None, :], pos).mean(axis=-2)
    return model.b(th, x) + inter


def grad_drift_values(model: ModelSpec, theta, x, measure) -> np.ndarray:
    """Gradient of the drift in theta, shape (p,) + x.shape."""
    th = as_theta_array(model, theta)
    x = np.asarray(x, dtype=float)
    pos = measure_positions(model, measure)
    if model.kind == "linear":
        m = pos.mean()
        g = np.empty((2,) + x.shape)
        g[0] = -x
        g[1] = -(x - m)
        return g
    if model.kind == "opinion":
        diff = x[..., None] - pos
        dk1, dk2 = bump_kernel_grads(th[0], th[1], np.abs(diff))
        g = np.empty((2,) + x.shape)
        g[0] = -(dk1 * diff).mean(axis=-1)
        g[1] = -(dk2 * diff).mean(axis=-1)
        return g
    return _custom_grad_drift(model, th, x, pos)


def _custom_grad_drift(model, th, x, pos):
    if model.reduction == "mean-only":
        return np.asarray(model.grad_b(th, x)) + np.asarray(
            model.grad_phi(th, x, pos.mean(axis=0))
        )
    if model.state_dim == 1:
        gphi = np.asarray(model.grad_phi(th, x[..., None], pos)).mean(axis=-1)
    else:
        gphi = np.asarray(model.grad_phi(th, x[..., None, :], pos)).mean(axis=-2)
    return np.asarray(model.grad_b(th, x)) + gphi


def drift_rowwise(model: ModelSpec, thetas: np.ndarray, x: np.ndarray, measure) -> np.ndarray:
    """Drift of each point x[i] under its own parameter thetas[i].

    Used by the per-particle online estimator: ``thetas`` is (n, p) aligned
    with the n points of ``x`` (d = 1 arrays). Built-ins vectorize; custom
    models fall back to a per-row loop.
    """
    thetas = np.asarray(thetas, dtype=float)
    x = np.asarray(x, dtype=float)
    pos = measure_positions(model, measure)
    if thetas.shape != (x.shape[0], model.param_dim):
        raise ValidationError("thetas must be (n, p) aligned with x")
    if model.kind == "linear":
        return linear_drift(thetas[:, 0], thetas[:, 1], x, pos.mean())
    if model.kind == "opinion":
        diff = x[:, None] - pos
        k = bump_kernel(thetas[:, 0, None], thetas[:, 1, None], np.abs(diff))
        return -(k * diff).mean(axis=-1)
    return np.array(
        [drift_values(model, thetas[i], x[i], pos) for i in range(x.shape[0])]
    )


def grad_drift_rowwise(model: ModelSpec, thetas: np.ndarray, x: np.ndarray, measure) -> np.ndarray:
    """Per-row drift gradients, shape (p, n); companion of drift_rowwise."""
    thetas = np.asarray(thetas, dtype=float)
    x = np.asarray(x, dtype=float)
    pos = measure_positions(model, measure)
    if model.kind == "linear":
        m = pos.mean()
        return np.stack([-x, -(x - m)])
    if model.kind == "opinion":
        diff = x[:, None] - pos
        dk1, dk2 = bump_kernel_grads(thetas[:, 0, None], thetas[:, 1, None], np.abs(diff))
        return np.stack([-(dk1 * diff).mean(axis=-1), -(dk2 * diff).mean(axis=-1)])
    return np.stack(
        [grad_drift_values(model, thetas[i], x[i], pos) for i in range(x.shape[0])],
        axis=-1,
    )


# ==== pointwise operations ====


def _as_point(model: ModelSpec, x) -> np.ndarray:
    xp = np.asarray(x, dtype=float)
    d = model.state_dim
    if d == 1:
        if xp.ndim == 0:
            xp = xp.reshape(1)
        if xp.shape != (1,):
            raise ValidationError(f"point for d=1 must be scalar, got shape {xp.shape}")
    elif xp.shape != (d,):
        raise ValidationError(f"point must have shape ({d},), got {xp.shape}")
    if not np.all(np.isfinite(xp)):
        raise ValidationError("point must be finite")
    return xp


def confinement_b(model: ModelSpec, theta, x) -> np.ndarray:
    """Confinement part b(theta, x) at one point; returns (d,)."""
    th = as_theta_array(model, theta)
    xp = _as_point(model, x)
    if model.kind == "linear":
        return -th[0] * xp
    if model.kind == "opinion":
        return np.zeros_like(xp)
    return np.atleast_1d(np.asarray(model.b(th, xp if model.state_dim > 1 else xp[0]), dtype=float))


def interaction_phi(model: ModelSpec, theta, x, y) -> np.ndarray:
    """Interaction kernel phi(theta, x, y) for one pair; returns (d,)."""
    th = as_theta_array(model, theta)
    xp = _as_point(model, x)
    yp = _as_point(model, y)
    if model.kind == "linear":
        return -th[1] * (xp - yp)
    if model.kind == "opinion":
        diff = xp - yp
        r = float(np.abs(diff[0]))
        return -bump_kernel(th[0], th[1], r) * diff
    if model.state_dim == 1:
        return np.atleast_1d(np.asarray(model.phi(th, xp[0], yp[0]), dtype=float))
    return np.atleast_1d(np.asarray(model.phi(th, xp, yp), dtype=float))


def drift_B(model: ModelSpec, theta, x, mu) -> np.ndarray:
    """Full drift B(theta, x, mu) at one point; returns (d,)."""
    xp = _as_point(model, x)
    if model.state_dim == 1:
        return np.atleast_1d(drift_values(model, theta, xp[0], mu))
    return np.asarray(drift_values(model, theta, xp, mu))


def grad_theta_B(model: ModelSpec, theta, x, mu) -> np.ndarray:
    """Drift gradient in theta at one point; returns (p, d)."""
    xp = _as_point(model, x)
    if model.state_dim == 1:
        g = grad_drift_values(model, theta, xp[0], mu)
        return np.asarray(g).reshape(model.param_dim, 1)
    return np.asarray(grad_drift_values(model, theta, xp, mu)).reshape(
        model.param_dim, model.state_dim
    )

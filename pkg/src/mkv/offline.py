"""Offline drift estimation from a stored particle trajectory.

The working objective is the discretized log-likelihood ratio of the
observed increments (left-point Riemann sums, bundled per particle):

    l(theta) = 1/(N sigma^2) * sum_i sum_k [ <B_ik(theta), dx_k^i>
                                             - 0.5 |B_ik(theta)|^2 dt ]

with B_ik(theta) = B(theta, x_k^i, mu_k^N). Any parameter-free additive
term is dropped, which leaves the argmax unchanged.

For the linear model the objective is an exact quadratic in theta and the
maximizer has a closed form in four path statistics

    A = sum (x - xbar) dx     B = sum x dx
    C = sum (x - xbar)^2 dt   D = sum x^2 dt

namely theta1_hat = (A - B)/(D - C) and
theta2_hat = (D A - C B)/(C^2 - C D). The generic route is gradient ascent
with a backtracking (Armijo) line search whose trial step is seeded by the
Barzilai-Borwein curvature estimate.

Also here: the deterministic information matrix of the linear model and a
Monte-Carlo sampler of standardized estimation residuals sqrt(N)(theta_hat
- theta0) for normality studies.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import _rng
from .errors import (
    DegenerateStatistics,
    ExclusionCapExceeded,
    OptimizerDidNotConverge,
    ValidationError,
)
from .models import ModelSpec, as_theta_array, drift_values, grad_drift_values, linear_drift
from .simulate import InitialLaw, SimConfig, TrajectoryBatch, linear_init_states, linear_noise_blocks

DEGENERATE_TOL = 1e-12
"""Closed-form denominators below this magnitude raise DegenerateStatistics."""

EXCLUSION_CAP = 0.01
"""Largest tolerated fraction of dropped Monte-Carlo trials."""


# ==== likelihood ====


@dataclass(frozen=True)
class LikelihoodValue:
    """Objective value (and optional gradient) at one parameter point."""

    value: float
    at_theta: np.ndarray
    window: tuple[float, float]
    gradient: np.ndarray | None = None


def _resolve_window(traj: TrajectoryBatch, window) -> TrajectoryBatch:
    if window is None:
        return traj
    t0, t1 = float(window[0]), float(window[1])
    return traj.window(t0, t1)


def log_likelihood(model: ModelSpec, theta, traj: TrajectoryBatch,
                   window=None, with_gradient: bool = False) -> LikelihoodValue:
    """Evaluate the objective on a trajectory window.

    ``window=(t0, t1)`` restricts to grid-aligned times; default is the full
    horizon. ``with_gradient=True`` also returns the exact gradient in theta.
    """
    th = as_theta_array(model, theta)
    part = _resolve_window(traj, window)
    if part.state_dim != model.state_dim:
        raise ValidationError("trajectory dimension does not match the model")
    dt = part.dt
    n = part.n_particles
    scale = 1.0 / (n * model.sigma**2)

    if model.kind == "linear":
        x = part.states[:-1]
        dx = np.diff(part.states, axis=0)
        means = x.mean(axis=1, keepdims=True)
        b = linear_drift(th[0], th[1], x, means)
        value = scale * (np.sum(b * dx) - 0.5 * np.sum(b * b) * dt)
        grad = None
        if with_gradient:
            g1 = -x
            g2 = -(x - means)
            grad = scale * np.array(
                [
                    np.sum(g1 * dx) - np.sum(g1 * b) * dt,
                    np.sum(g2 * dx) - np.sum(g2 * b) * dt,
                ]
            )
    else:
        value = 0.0
        grad = np.zeros(model.param_dim) if with_gradient else None
        for k in range(part.n_steps):
            x = part.states[k]
            dx = part.states[k + 1] - x
            b = drift_values(model, th, x, x)
            value += float(np.sum(b * dx) - 0.5 * np.sum(b * b) * dt)
            if with_gradient:
                g = grad_drift_values(model, th, x, x)
                axes = tuple(range(1, g.ndim))
                grad += np.sum(g * dx, axis=axes) - np.sum(g * b, axis=axes) * dt
        value *= scale
        if with_gradient:
            grad = scale * grad

    t0 = float(part.times[0])
    t1 = float(part.times[-1])
    return LikelihoodValue(value=float(value), at_theta=th.copy(), window=(t0, t1), gradient=grad)


# ==== closed-form linear MLE ====


def linear_path_stats(traj: TrajectoryBatch, window=None) -> tuple[float, float, float, float]:
    """The four sufficient statistics (A, B, C, D) of the linear model."""
    part = _resolve_window(traj, window)
    if part.state_dim != 1:
        raise ValidationError("linear-model statistics require d = 1 data")
    x = part.states[:-1]
    dx = np.diff(part.states, axis=0)
    means = x.mean(axis=1, keepdims=True)
    centered = x - means
    dt = part.dt
    a = float(np.sum(centered * dx))
    b = float(np.sum(x * dx))
    c = float(np.sum(centered * centered) * dt)
    d = float(np.sum(x * x) * dt)
    return a, b, c, d


def mle_linear_closed_form(traj: TrajectoryBatch, window=None) -> np.ndarray:
    """Exact maximizer of the linear-model objective.

    Raises DegenerateStatistics when a denominator is numerically singular
    (single particle, or a path with no centered variation).
    """
    a, b, c, d = linear_path_stats(traj, window)
    den1 = d - c
    den2 = c * c - c * d
    if abs(den1) < DEGENERATE_TOL or abs(den2) < DEGENERATE_TOL:
        raise DegenerateStatistics(
            f"singular normal equations: |D-C|={abs(den1):.3e}, |C^2-CD|={abs(den2):.3e}"
        )
    return np.array([(a - b) / den1, (d * a - c * b) / den2])


# ==== numeric MLE ====


@dataclass(frozen=True)
class AscentOptions:
    """Knobs of the gradient-ascent optimizer."""

    max_iters: int = 500
    grad_tol: float = 1e-8
    step0: float = 1.0
    shrink: float = 0.5
    armijo: float = 1e-4
    max_backtracks: int = 60


def ascend(fun, grad, x0, opts: AscentOptions = AscentOptions()) -> np.ndarray:
    """Maximize ``fun`` by gradient ascent with backtracking line search.

    The trial step of each iteration starts from the Barzilai-Borwein
    curvature estimate of the previous move (falling back to ``step0``) and
    is halved until the Armijo condition holds. Deterministic given inputs.
    On nonconcave objectives this is best-effort: it returns a stationary
    point, with no tie-breaking between maximizers.
    """
    x = np.asarray(x0, dtype=float).copy()
    f = float(fun(x))
    g = np.asarray(grad(x), dtype=float)
    step = float(opts.step0)
    for _ in range(opts.max_iters):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= opts.grad_tol:
            return x
        trial = step
        for _ in range(opts.max_backtracks):
            x_new = x + trial * g
            f_new = float(fun(x_new))
            if np.isfinite(f_new) and f_new >= f + opts.armijo * trial * gnorm * gnorm:
                break
            trial *= opts.shrink
        else:
            warnings.warn("line search stalled; curvature may be singular", RuntimeWarning)
            raise OptimizerDidNotConverge(
                f"line search found no ascent direction at |grad|={gnorm:.3e}",
                last_theta=x, grad_norm=gnorm,
            )
        g_new = np.asarray(grad(x_new), dtype=float)
        dx = x_new - x
        dg = g_new - g
        denom = float(dx @ dg)
        # BB step; for a concave quadratic dx@dg < 0 and this equals 1/|curvature|
        step = float(dx @ dx) / abs(denom) if abs(denom) > 1e-300 else opts.step0
        x, f, g = x_new, f_new, g_new
    gnorm = float(np.linalg.norm(g))
    if gnorm <= opts.grad_tol:
        return x
    raise OptimizerDidNotConverge(
        f"no convergence in {opts.max_iters} iterations, |grad|={gnorm:.3e}",
        last_theta=x, grad_norm=gnorm,
    )


def mle_numeric(model: ModelSpec, traj: TrajectoryBatch, init=None,
                opts: AscentOptions = AscentOptions(), window=None) -> np.ndarray:
    """Maximize the objective by gradient ascent; model-agnostic route."""
    part = _resolve_window(traj, window)
    x0 = np.zeros(model.param_dim) if init is None else as_theta_array(model, init)

    def fun(th):
        return log_likelihood(model, th, part).value

    def grad(th):
        return log_likelihood(model, th, part, with_gradient=True).gradient

    return ascend(fun, grad, x0, opts)


# ==== information matrix (linear model) ====


@dataclass(frozen=True)
class FisherInfo:
    """Deterministic information matrix of the linear model at theta0."""

    matrix: np.ndarray
    at_theta: np.ndarray
    t: float


def fisher_information_linear(theta0, t: float, mu0: float = 1.0,
                              sigma0_sq: float = 1.0) -> FisherInfo:
    """I_t(theta0) for the linear model with x0 ~ N(mu0, sigma0_sq), sigma = 1.

    Built from the closed-form moments of the limiting dynamics: the mean
    m_s = mu0 e^{-theta1 s} and the variance v_s solving
    v' = gamma v + 1 with gamma = -2 (theta1 + theta2). With
    C_t = int_0^t v_s ds and D_t = C_t + int_0^t m_s^2 ds,

        I_t = [[D_t, C_t], [C_t, C_t]].

    Requires theta1 != 0 and theta1 + theta2 > 0 (ergodic regime).
    """
    th = np.asarray(theta0, dtype=float)
    if th.shape != (2,):
        raise ValidationError("theta0 must have shape (2,)")
    if t < 0 or not np.isfinite(t):
        raise ValidationError("t must be >= 0")
    if sigma0_sq < 0:
        raise ValidationError("sigma0_sq must be >= 0")
    t1, t2 = float(th[0]), float(th[1])
    if t1 == 0.0 or t1 + t2 <= 0.0:
        raise ValidationError("need theta1 != 0 and theta1 + theta2 > 0")
    g = -2.0 * (t1 + t2)
    eg = math.expm1(g * t)  # e^{gt} - 1
    c_t = sigma0_sq * eg / g + eg / g**2 - t / g
    d_t = c_t - mu0**2 * math.expm1(-2.0 * t1 * t) / (2.0 * t1)
    mat = np.array([[d_t, c_t], [c_t, c_t]])
    return FisherInfo(matrix=mat, at_theta=th.copy(), t=float(t))


# ==== batched closed-form MLE over Monte-Carlo trials ====


TRIAL_BLOCK = 512
"""Trials are processed in fixed-size blocks so that results never depend
on worker count or batch packing (each trial still owns its noise stream)."""


def _window_steps(window_times, dt: float, n_steps: int) -> list[int]:
    ks = []
    for t in window_times:
        k = round(float(t) / dt)
        if abs(k * dt - float(t)) > 1e-9 * max(1.0, float(t)) or not (1 <= k <= n_steps):
            raise ValidationError(f"window time {t} not on the simulation grid")
        ks.append(k)
    if ks != sorted(ks):
        raise ValidationError("window times must be increasing")
    return ks


def mle_trials_linear(theta_true, n_particles: int, dt: float, window_times,
                      trials: int, entropy: int, cell: int = 0,
                      init: InitialLaw = InitialLaw(), sigma: float = 1.0,
                      time_chunk: int = 2048,
                      trial_range: tuple[int, int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form MLE across independent trials of the linear system.

    Simulates ``trials`` independent particle systems at theta_true and
    returns estimates at every requested window end. Each trial owns its
    noise stream, keyed by (entropy, cell, trial), so restricting the run
    to ``trial_range=(lo, hi)`` returns exactly rows lo:hi of the full
    result; the experiment runner uses this to farm out chunks.

    Returns
    -------
    theta_hat : (trials, len(window_times), 2), NaN where degenerate
    degenerate : bool mask (trials, len(window_times))
    """
    th = np.asarray(theta_true, dtype=float)
    horizon_steps = _window_steps(window_times, dt, 10**12)[-1]
    window_steps = _window_steps(window_times, dt, horizon_steps)
    n_windows = len(window_steps)
    sqrt_dt = math.sqrt(dt)
    first, last = (0, trials) if trial_range is None else trial_range
    if not (0 <= first < last <= trials):
        raise ValidationError("trial_range must be a nonempty slice of range(trials)")
    theta_hat = np.empty((last - first, n_windows, 2))
    degenerate = np.zeros((last - first, n_windows), dtype=bool)

    for lo in range(first, last, TRIAL_BLOCK):
        hi = min(lo + TRIAL_BLOCK, last)
        rngs = _rng.trial_generators(entropy, cell, range(lo, hi))
        x = linear_init_states(rngs, init, n_particles)
        stat_a = np.zeros(hi - lo)
        stat_b = np.zeros(hi - lo)
        stat_c = np.zeros(hi - lo)
        stat_d = np.zeros(hi - lo)
        widx = 0
        k = 0
        while k < horizon_steps:
            kc = min(time_chunk, horizon_steps - k)
            noise = linear_noise_blocks(rngs, n_particles, k, k + kc, sqrt_dt)
            for j in range(kc):
                m = x.mean(axis=1, keepdims=True)
                drift = linear_drift(th[0], th[1], x, m)
                x_next = x + drift * dt + sigma * noise[:, j, :]
                dx = x_next - x
                centered = x - m
                stat_a += np.sum(centered * dx, axis=1)
                stat_b += np.sum(x * dx, axis=1)
                stat_c += np.sum(centered * centered, axis=1) * dt
                stat_d += np.sum(x * x, axis=1) * dt
                x = x_next
                k += 1
                while widx < n_windows and window_steps[widx] == k:
                    den1 = stat_d - stat_c
                    den2 = stat_c * stat_c - stat_c * stat_d
                    bad = (np.abs(den1) < DEGENERATE_TOL) | (np.abs(den2) < DEGENERATE_TOL)
                    safe1 = np.where(bad, 1.0, den1)
                    safe2 = np.where(bad, 1.0, den2)
                    t1_hat = (stat_a - stat_b) / safe1
                    t2_hat = (stat_d * stat_a - stat_c * stat_b) / safe2
                    # a trial that blew up is excluded the same way
                    bad |= ~np.isfinite(t1_hat) | ~np.isfinite(t2_hat)
                    theta_hat[lo - first:hi - first, widx, 0] = np.where(bad, np.nan, t1_hat)
                    theta_hat[lo - first:hi - first, widx, 1] = np.where(bad, np.nan, t2_hat)
                    degenerate[lo - first:hi - first, widx] = bad
                    widx += 1
    return theta_hat, degenerate


# ==== residual normality sampling ====


@dataclass(frozen=True)
class NormalitySample:
    """Standardized closed-form MLE residuals across trials."""

    residuals: np.ndarray  # (kept, 2) rows of sqrt(N) (theta_hat - theta0)
    trial_index: np.ndarray  # (kept,) original trial number of each row
    trials: int
    dropped: int


def normality_sample(model: ModelSpec, theta0, cfg: SimConfig, trials: int) -> NormalitySample:
    """Sample sqrt(N)(theta_hat - theta0) over independent trials.

    Linear model only (the closed form is what gets standardized). Trials
    with degenerate statistics are dropped and counted; more than
    EXCLUSION_CAP of them fails the run.
    """
    if model.kind != "linear":
        raise ValidationError("normality sampling is defined for the linear model")
    if trials < 1:
        raise ValidationError("trials must be >= 1")
    th0 = as_theta_array(model, theta0)
    theta_hat, degenerate = mle_trials_linear(
        th0, cfg.n_particles, cfg.dt, [cfg.horizon], trials,
        entropy=cfg.seed, init=cfg.init, sigma=model.sigma,
    )
    flat = theta_hat[:, 0, :]
    bad = degenerate[:, 0]
    dropped = int(bad.sum())
    if dropped > EXCLUSION_CAP * trials:
        raise ExclusionCapExceeded(
            f"{dropped}/{trials} degenerate trials exceeds the {EXCLUSION_CAP:.0%} cap"
        )
    kept = flat[~bad]
    residuals = math.sqrt(cfg.n_particles) * (kept - th0)
    return NormalitySample(residuals=residuals, trial_index=np.nonzero(~bad)[0],
                           trials=trials, dropped=dropped)

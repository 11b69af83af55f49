"""Online (streaming) drift estimation and long-run likelihood geometry.

Parameters are updated once per observation frame by explicit Euler steps
of the continuous-time stochastic gradient flow. With frames x_k, the
shared ("averaged") estimator moves

    theta <- theta + gamma_k * 1/(N sigma^2) *
             sum_i grad_theta B(theta, x_k^i, mu_k^N) (dx_k^i - B(theta, x_k^i, mu_k^N) dt)

while the per-particle variant keeps one estimate theta^i per particle and
feeds it only particle i's increment (no 1/N). At theta equal to the data
generating parameter, both updates have zero mean; the averaged variant
quotients the gradient noise by N.

Learning-rate schedules: constant c >= 0 (zero freezes a coordinate),
power-min min{g0, g0 t^-alpha} with alpha in (1/2, 1], and reciprocal
c_g / (c_0 + t); per-coordinate combinations are allowed.

The module also carries the deterministic long-run objects of the linear
model: the mean-field limit contrast (flat along theta1 + theta2 = const),
and the stationary N-particle log-likelihood surface built from the
invariant covariance, whose Hessian quantifies how the ridge degeneracy
flattens as N grows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _rng
from .errors import EstimatorDiverged, ValidationError
from .models import (
    ModelSpec,
    as_theta_array,
    bump_kernel,
    bump_kernel_grads,
    drift_rowwise,
    drift_values,
    grad_drift_rowwise,
    grad_drift_values,
    linear_drift,
)
from .simulate import (
    InitialLaw,
    SimConfig,
    TrajectoryBatch,
    linear_init_states,
    linear_noise_blocks,
)

THETA_LIMIT = 1e8
"""Estimates beyond this magnitude abort the run as divergent."""

HISTORY_LIMIT = 10_000
"""run_online keeps at most this many checkpoints of the estimate path."""


# ==== learning rates ====


@dataclass(frozen=True)
class Schedule:
    """One scalar learning-rate schedule."""

    kind: str  # "constant" | "powmin" | "reciprocal"
    a: float
    b: float = 0.0

    def __post_init__(self):
        if self.kind == "constant":
            if not (np.isfinite(self.a) and self.a >= 0):
                raise ValidationError("constant rate must be >= 0")
        elif self.kind == "powmin":
            if not (np.isfinite(self.a) and self.a > 0):
                raise ValidationError("powmin gamma0 must be > 0")
            if not (0.5 < self.b <= 1.0):
                raise ValidationError("powmin alpha must lie in (1/2, 1]")
        elif self.kind == "reciprocal":
            if not (self.a > 0 and self.b > 0):
                raise ValidationError("reciprocal needs c_gamma > 0 and c_0 > 0")
        else:
            raise ValidationError(f"unknown schedule kind {self.kind!r}")

    def value(self, t: float) -> float:
        if self.kind == "constant":
            return self.a
        if self.kind == "powmin":
            if t <= 1.0:
                # t^(-b) >= 1 here, so the min is a; also avoids the
                # overflow of t^(-b) at subnormal t
                return self.a
            return self.a * t**(-self.b)
        return self.a / (self.b + t)


@dataclass(frozen=True)
class LearningRate:
    """Per-coordinate learning rate; one Schedule per parameter."""

    schedules: tuple[Schedule, ...]

    @classmethod
    def constant(cls, c, p: int | None = None) -> "LearningRate":
        cs = np.atleast_1d(np.asarray(c, dtype=float))
        if p is not None and cs.size == 1:
            cs = np.repeat(cs, p)
        return cls(tuple(Schedule("constant", float(v)) for v in cs))

    @classmethod
    def powmin(cls, gamma0: float, alpha: float, p: int = 1) -> "LearningRate":
        return cls(tuple(Schedule("powmin", gamma0, alpha) for _ in range(p)))

    @classmethod
    def reciprocal(cls, c_gamma: float, c_0: float, p: int = 1) -> "LearningRate":
        return cls(tuple(Schedule("reciprocal", c_gamma, c_0) for _ in range(p)))

    @classmethod
    def parse(cls, text: str, p: int | None = None) -> "LearningRate":
        """Parse 'powmin:0.05,0.51;constant:0' style specs (one per coordinate).

        A single schedule with p given is broadcast to all coordinates.
        """
        parts = [s for s in text.split(";") if s]
        schedules = []
        for part in parts:
            kind, _, rest = part.partition(":")
            try:
                nums = [float(v) for v in rest.split(",") if v != ""]
            except ValueError as exc:
                raise ValidationError(f"bad learning-rate spec {part!r}") from exc
            if kind == "constant" and len(nums) == 1:
                schedules.append(Schedule("constant", nums[0]))
            elif kind == "powmin" and len(nums) == 2:
                schedules.append(Schedule("powmin", nums[0], nums[1]))
            elif kind == "reciprocal" and len(nums) == 2:
                schedules.append(Schedule("reciprocal", nums[0], nums[1]))
            else:
                raise ValidationError(f"bad learning-rate spec {part!r}")
        if not schedules:
            raise ValidationError("empty learning-rate spec")
        if p is not None and len(schedules) == 1 and p > 1:
            schedules = schedules * p
        if p is not None and len(schedules) != p:
            raise ValidationError(f"learning rate has {len(schedules)} coordinates, expected {p}")
        return cls(tuple(schedules))


def lr_eval(lr: LearningRate, t: float) -> np.ndarray:
    """Evaluate the schedule vector at time t; shape (p,)."""
    if t < 0 or not np.isfinite(t):
        raise ValidationError("t must be finite and >= 0")
    return np.array([s.value(t) for s in lr.schedules])


# ==== theta initialisation ====


@dataclass(frozen=True)
class ThetaInit:
    """Per-coordinate initial estimates: fixed values or uniform draws."""

    coords: tuple[tuple, ...]  # ("const", v) | ("uniform", lo, hi)

    @classmethod
    def const(cls, values) -> "ThetaInit":
        vals = np.atleast_1d(np.asarray(values, dtype=float))
        return cls(tuple(("const", float(v)) for v in vals))

    @classmethod
    def uniform(cls, lo: float, hi: float, p: int = 1) -> "ThetaInit":
        return cls(tuple(("uniform", float(lo), float(hi)) for _ in range(p)))

    @classmethod
    def parse(cls, text: str, p: int | None = None) -> "ThetaInit":
        """Parse 'uniform:2,5;const:0.1' style specs."""
        coords = []
        for part in [s for s in text.split(";") if s]:
            kind, _, rest = part.partition(":")
            try:
                nums = [float(v) for v in rest.split(",") if v != ""]
            except ValueError as exc:
                raise ValidationError(f"bad theta-init spec {part!r}") from exc
            if kind == "const" and len(nums) == 1:
                coords.append(("const", nums[0]))
            elif kind == "uniform" and len(nums) == 2 and nums[0] <= nums[1]:
                coords.append(("uniform", nums[0], nums[1]))
            else:
                raise ValidationError(f"bad theta-init spec {part!r}")
        if not coords:
            raise ValidationError("empty theta-init spec")
        if p is not None and len(coords) == 1 and p > 1:
            coords = coords * p
        if p is not None and len(coords) != p:
            raise ValidationError(f"theta init has {len(coords)} coordinates, expected {p}")
        return cls(tuple(coords))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        out = np.empty(len(self.coords))
        for j, spec in enumerate(self.coords):
            out[j] = spec[1] if spec[0] == "const" else rng.uniform(spec[1], spec[2])
        return out


def _draw_init(init, model: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    if isinstance(init, ThetaInit):
        v = init.sample(rng)
    elif callable(init):
        v = np.asarray(init(rng), dtype=float)
    else:
        v = np.asarray(init.values if hasattr(init, "values") else init, dtype=float)
    return as_theta_array(model, v)


# ==== estimator state and single steps ====


@dataclass
class EstimatorState:
    """Online estimate at one time: theta is (p,) for the averaged mode,
    (n, p) for the per-particle mode. ``history``, when kept, is a pair of
    arrays (times, thetas) downsampled to at most HISTORY_LIMIT points."""

    theta: np.ndarray
    t: float
    mode: str  # "averaged" | "per-particle"
    step: int = 0
    history: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False)


def _check_theta(theta: np.ndarray, step: int):
    if not np.all(np.isfinite(theta)) or np.abs(theta).max() > THETA_LIMIT:
        raise EstimatorDiverged(f"parameter estimate diverged at step {step}", step=step)


def online_step_averaged(model: ModelSpec, state: EstimatorState, frame_k: np.ndarray,
                         frame_k1: np.ndarray, dt: float, gamma: np.ndarray) -> EstimatorState:
    """One shared update from the frame pair (x_k, x_{k+1})."""
    if state.mode != "averaged":
        raise ValidationError("state mode must be 'averaged'")
    x = np.asarray(frame_k, dtype=float)
    x1 = np.asarray(frame_k1, dtype=float)
    if x.shape != x1.shape:
        raise ValidationError("frames must share a shape")
    th = as_theta_array(model, state.theta)
    gamma = np.asarray(gamma, dtype=float)
    n = x.shape[0]
    # overflow on the way to the divergence check surfaces as the typed
    # error below, not as a float warning
    with np.errstate(over="ignore", invalid="ignore"):
        b = drift_values(model, th, x, x)
        g = grad_drift_values(model, th, x, x)
        resid = (x1 - x) - b * dt
        axes = tuple(range(1, g.ndim))
        incr = gamma * np.sum(g * resid, axis=axes) / (n * model.sigma**2)
        theta_new = th + incr
    _check_theta(theta_new, state.step + 1)
    return EstimatorState(theta=theta_new, t=state.t + dt, mode="averaged",
                          step=state.step + 1, history=state.history)


def online_step_per_particle(model: ModelSpec, state: EstimatorState, frame_k: np.ndarray,
                             frame_k1: np.ndarray, dt: float, gamma: np.ndarray) -> EstimatorState:
    """One update of every particle's own estimate from its own increment."""
    if state.mode != "per-particle":
        raise ValidationError("state mode must be 'per-particle'")
    x = np.asarray(frame_k, dtype=float)
    x1 = np.asarray(frame_k1, dtype=float)
    thetas = np.asarray(state.theta, dtype=float)
    n = x.shape[0]
    if thetas.shape != (n, model.param_dim):
        raise ValidationError("per-particle theta must be (n, p)")
    if model.state_dim != 1:
        raise ValidationError("per-particle updates are implemented for d = 1")
    gamma = np.asarray(gamma, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        b = drift_rowwise(model, thetas, x, x)
        g = grad_drift_rowwise(model, thetas, x, x)  # (p, n)
        resid = (x1 - x) - b * dt
        incr = gamma[None, :] * (g * resid).T / model.sigma**2  # (n, p)
        theta_new = thetas + incr
    _check_theta(theta_new, state.step + 1)
    return EstimatorState(theta=theta_new, t=state.t + dt, mode="per-particle",
                          step=state.step + 1, history=state.history)


# ==== full online runs ====


def run_online(model: ModelSpec, theta_true, cfg: SimConfig, lr: LearningRate,
               init, mode: str = "averaged", replay: TrajectoryBatch | None = None,
               history_limit: int = HISTORY_LIMIT) -> EstimatorState:
    """Run the online estimator over a fresh simulation or a stored batch.

    With ``replay=None`` the data are simulated at theta_true while the
    estimate evolves (simulation noise and estimator initialisation use
    separate substreams of cfg.seed, so the data match simulate_ips with
    the same config). ``init`` may be a ThetaInit, a callable rng -> theta,
    or a fixed vector. Returns the final EstimatorState with history.
    """
    if mode not in ("averaged", "per-particle"):
        raise ValidationError(f"unknown mode {mode!r}")
    if len(lr.schedules) != model.param_dim:
        raise ValidationError("learning rate dimension must match param_dim")
    if replay is None:
        frames_iter = _fresh_frames(model, theta_true, cfg)
        n = cfg.n_particles
        dt = cfg.dt
        k_steps = cfg.n_steps
    else:
        if replay.state_dim != model.state_dim:
            raise ValidationError("replay trajectory does not match the model")
        frames_iter = ((replay.states[k], replay.states[k + 1]) for k in range(replay.n_steps))
        n = replay.n_particles
        dt = replay.dt
        k_steps = replay.n_steps

    est_rng = _rng.substream(cfg.seed, _rng.EST_ROLE)
    theta0 = _draw_init(init, model, est_rng)
    if mode == "per-particle":
        theta0 = np.repeat(theta0[None, :], n, axis=0)
    state = EstimatorState(theta=theta0, t=0.0, mode=mode)

    stride = max(1, math.ceil((k_steps + 1) / history_limit))
    hist_t = [0.0]
    hist_theta = [theta0.copy()]
    step_fn = online_step_averaged if mode == "averaged" else online_step_per_particle
    for k, (xk, xk1) in enumerate(frames_iter):
        gamma = lr_eval(lr, k * dt)
        state = step_fn(model, state, xk, xk1, dt, gamma)
        if (k + 1) % stride == 0 or k + 1 == k_steps:
            hist_t.append(state.t)
            hist_theta.append(np.asarray(state.theta).copy())
    state.history = (np.array(hist_t), np.stack(hist_theta))
    return state


def _fresh_frames(model: ModelSpec, theta_true, cfg: SimConfig):
    # identical stream derivation to simulate_ips, so a joint run sees the
    # same data as replaying simulate_ips(model, theta_true, cfg)
    from .simulate import step_euler

    th = as_theta_array(model, theta_true)
    rng = _rng.generator_from(cfg.seed)
    x = cfg.init.sample(rng, cfg.n_particles, model.state_dim)
    sqrt_dt = math.sqrt(cfg.dt)
    for k in range(cfg.n_steps):
        w = rng.standard_normal(x.shape) * sqrt_dt
        x_next = step_euler(model, th, x, cfg.dt, w, step=k)
        yield x, x_next
        x = x_next


# ==== long-run likelihood geometry (linear model) ====


def asymptotic_contrast_linear(theta, theta0) -> float:
    """Long-run mean-field contrast; zero on the ridge theta1 + theta2 = const.

    Equals -((t1 + t2) - (t10 + t20))^2 / (4 (t10 + t20)) for the ergodic
    linear model (theta10 + theta20 > 0): only the sum of the parameters is
    identifiable from the stationary mean-field law.
    """
    th = np.asarray(theta, dtype=float)
    th0 = np.asarray(theta0, dtype=float)
    if th.shape != (2,) or th0.shape != (2,):
        raise ValidationError("theta and theta0 must have shape (2,)")
    s0 = th0[0] + th0[1]
    if s0 <= 0:
        raise ValidationError("need theta1_0 + theta2_0 > 0")
    diff = (th[0] + th[1]) - s0
    return float(-(diff * diff) / (4.0 * s0))


def _require_stable(theta0) -> tuple[float, float]:
    th0 = np.asarray(theta0, dtype=float)
    if th0.shape != (2,):
        raise ValidationError("theta0 must have shape (2,)")
    t1, t2 = float(th0[0]), float(th0[1])
    if t1 <= 0 or t1 + t2 <= 0:
        raise ValidationError("need theta1_0 > 0 and theta1_0 + theta2_0 > 0")
    return t1, t2


def lyapunov_covariance_linear(theta0, n: int) -> np.ndarray:
    """Invariant covariance of the stationary linear particle system.

    Solves A S + S A^T = I with A = (t1 + t2) I - (t2/n) J in closed form:
    S = (I - P)/(2 (t1 + t2)) + P/(2 t1) with P = J/n.
    """
    t1, t2 = _require_stable(theta0)
    if n < 1:
        raise ValidationError("n must be >= 1")
    eye = np.eye(n)
    proj = np.full((n, n), 1.0 / n)
    return (eye - proj) / (2.0 * (t1 + t2)) + proj / (2.0 * t1)


def ips_invariant_moments_linear(theta0, n: int) -> tuple[float, float, float]:
    """(C1, C2, C3) = stationary E[x_i^2], E[x_i (x_i - xbar)], E[(x_i - xbar)^2]."""
    t1, t2 = _require_stable(theta0)
    if n < 1:
        raise ValidationError("n must be >= 1")
    shared = (1.0 - 1.0 / n) / (2.0 * (t1 + t2))
    c1 = shared + 1.0 / (2.0 * t1 * n)
    return c1, shared, shared


def asymptotic_loglik_ips_linear(theta, theta0, n: int) -> float:
    """Long-run per-particle log-likelihood surface of the stationary system.

    Quadratic in (theta - theta0) with coefficients from the invariant
    moments:

        -1/2 d1^2 C1 - d1 d2 C2 - 1/2 d2^2 C3.

    Its maximum value 0 is attained at theta0; for growing n the curvature
    along (1, -1) decays like 1/n, flattening into the mean-field ridge.
    """
    th = np.asarray(theta, dtype=float)
    if th.shape != (2,):
        raise ValidationError("theta must have shape (2,)")
    c1, c2, c3 = ips_invariant_moments_linear(theta0, n)
    th0 = np.asarray(theta0, dtype=float)
    d1 = th[0] - th0[0]
    d2 = th[1] - th0[1]
    return float(-0.5 * d1 * d1 * c1 - d1 * d2 * c2 - 0.5 * d2 * d2 * c3)


def asymptotic_loglik_hessian_linear(theta0, n: int) -> np.ndarray:
    """Constant Hessian of the long-run surface: [[-C1, -C2], [-C2, -C3]]."""
    c1, c2, c3 = ips_invariant_moments_linear(theta0, n)
    return np.array([[-c1, -c2], [-c2, -c3]])


# ==== batched Monte-Carlo online runs ====


def _checkpoint_steps(k_steps: int, n_checkpoints: int) -> np.ndarray:
    """Step indices (including 0 and K) at which the error is recorded."""
    if k_steps <= n_checkpoints:
        return np.arange(k_steps + 1)
    pts = np.linspace(0, k_steps, n_checkpoints + 1)
    return np.unique(np.round(pts).astype(int))


@dataclass
class OnlineTrialsResult:
    """Trial-aggregated online runs on a checkpoint grid.

    mse[mode] has shape (M, p): the trial mean of (theta - theta_true)^2
    per coordinate (additionally averaged over particles in the
    per-particle mode). terminal[mode] holds the final estimates,
    (trials, p) or (trials, n, p).
    """

    times: np.ndarray
    mse: dict
    terminal: dict
    theta_init: np.ndarray


def online_trials_linear(theta_true, n_particles: int, dt: float, horizon: float,
                         lr: LearningRate, init: ThetaInit, trials: int, entropy: int,
                         modes=("averaged",), cell: int = 0,
                         init_law: InitialLaw = InitialLaw(), sigma: float = 1.0,
                         n_checkpoints: int = 400, time_chunk: int = 2048,
                         trial_range: tuple[int, int] | None = None) -> OnlineTrialsResult:
    """Monte-Carlo online estimation on the linear model, vectorized.

    All requested modes consume the same simulated data within each trial
    (shared noise), so mode comparisons are paired. Per-particle estimates
    start from the trial's init vector, shared by all particles. Each trial
    owns its streams (keyed by (entropy, cell, trial)), so a trial_range
    run reproduces the matching slice of the full run.
    """
    th = np.asarray(theta_true, dtype=float)
    k_steps = round(horizon / dt)
    if abs(k_steps * dt - horizon) > 1e-9 * max(1.0, horizon):
        raise ValidationError("horizon must be an integer number of steps")
    if len(lr.schedules) != 2:
        raise ValidationError("linear model needs a 2-coordinate learning rate")
    checkpoints = _checkpoint_steps(k_steps, n_checkpoints)
    cp_set = set(int(c) for c in checkpoints)
    sqrt_dt = math.sqrt(dt)
    first, last = (0, trials) if trial_range is None else trial_range
    if not (0 <= first < last <= trials):
        raise ValidationError("trial_range must be a nonempty slice of range(trials)")

    sums = {m: np.zeros((checkpoints.size, 2)) for m in modes}
    terminal = {m: [] for m in modes}
    inits = []

    # learning rate is common to all trials; evaluate once per step
    for lo in range(first, last, 512):
        hi = min(lo + 512, last)
        b = hi - lo
        sim_rngs = _rng.trial_generators(entropy, cell, range(lo, hi), role=_rng.SIM_ROLE)
        est_rngs = _rng.trial_generators(entropy, cell, range(lo, hi), role=_rng.EST_ROLE)
        x = linear_init_states(sim_rngs, init_law, n_particles)
        theta0 = np.stack([init.sample(rng) for rng in est_rngs])
        inits.append(theta0.copy())
        th_avg = theta0.copy()
        th_pp = np.repeat(theta0[:, None, :], n_particles, axis=1)

        row_of = {int(c): j for j, c in enumerate(checkpoints)}
        if "averaged" in modes:
            sums["averaged"][0] += ((th_avg - th) ** 2).sum(axis=0)
        if "per-particle" in modes:
            sums["per-particle"][0] += ((th_pp - th) ** 2).mean(axis=1).sum(axis=0)

        k = 0
        # estimate overflow is reported as EstimatorDiverged after the block
        with np.errstate(over="ignore", invalid="ignore"):
            while k < k_steps:
                kc = min(time_chunk, k_steps - k)
                noise = linear_noise_blocks(sim_rngs, n_particles, k, k + kc, sqrt_dt)
                for j in range(kc):
                    m = x.mean(axis=1, keepdims=True)
                    drift_true = linear_drift(th[0], th[1], x, m)
                    x1 = x + drift_true * dt + sigma * noise[:, j, :]
                    gamma = lr_eval(lr, k * dt)
                    g1 = -x
                    g2 = -(x - m)
                    if "averaged" in modes:
                        b_est = linear_drift(th_avg[:, 0, None], th_avg[:, 1, None], x, m)
                        resid = (x1 - x) - b_est * dt
                        th_avg = th_avg + np.stack(
                            [
                                gamma[0] * (g1 * resid).sum(axis=1),
                                gamma[1] * (g2 * resid).sum(axis=1),
                            ],
                            axis=1,
                        ) / (n_particles * sigma**2)
                    if "per-particle" in modes:
                        b_pp = linear_drift(th_pp[:, :, 0], th_pp[:, :, 1], x, m)
                        resid_pp = (x1 - x) - b_pp * dt
                        th_pp = th_pp + np.stack(
                            [gamma[0] * g1 * resid_pp, gamma[1] * g2 * resid_pp], axis=2
                        ) / sigma**2
                    x = x1
                    k += 1
                    if k in cp_set:
                        row = row_of[k]
                        if "averaged" in modes:
                            sums["averaged"][row] += ((th_avg - th) ** 2).sum(axis=0)
                        if "per-particle" in modes:
                            sums["per-particle"][row] += ((th_pp - th) ** 2).mean(axis=1).sum(axis=0)
        for mode in modes:
            final = th_avg if mode == "averaged" else th_pp
            if not np.all(np.isfinite(final)) or np.abs(final).max() > THETA_LIMIT:
                raise EstimatorDiverged(f"{mode} estimate diverged", step=k_steps)
            terminal[mode].append(final.copy())

    mse = {m: sums[m] / (last - first) for m in modes}
    return OnlineTrialsResult(
        times=checkpoints * dt,
        mse=mse,
        terminal={m: np.concatenate(terminal[m]) for m in modes},
        theta_init=np.concatenate(inits),
    )


def online_trials_opinion(theta_true, n_particles: int, dt: float, horizon: float,
                          lr: LearningRate, init: ThetaInit, trials: int, entropy: int,
                          cell: int = 0, init_law: InitialLaw = InitialLaw("normal", 0.0, 1.0),
                          sigma: float = 1.0, n_checkpoints: int = 400,
                          time_chunk: int = 256,
                          trial_range: tuple[int, int] | None = None) -> OnlineTrialsResult:
    """Monte-Carlo averaged-mode online estimation on the opinion model.

    Pairwise interactions are evaluated on (trials, n, n) blocks; the data
    generating kernel uses theta_true while the estimator kernel and its
    gradient are evaluated at each trial's current estimate.
    """
    th = np.asarray(theta_true, dtype=float)
    k_steps = round(horizon / dt)
    if abs(k_steps * dt - horizon) > 1e-9 * max(1.0, horizon):
        raise ValidationError("horizon must be an integer number of steps")
    checkpoints = _checkpoint_steps(k_steps, n_checkpoints)
    row_of = {int(c): j for j, c in enumerate(checkpoints)}
    sqrt_dt = math.sqrt(dt)
    first, last = (0, trials) if trial_range is None else trial_range
    if not (0 <= first < last <= trials):
        raise ValidationError("trial_range must be a nonempty slice of range(trials)")
    sums = np.zeros((checkpoints.size, 2))
    terminal = []
    inits = []

    for lo in range(first, last, 64):
        hi = min(lo + 64, last)
        sim_rngs = _rng.trial_generators(entropy, cell, range(lo, hi), role=_rng.SIM_ROLE)
        est_rngs = _rng.trial_generators(entropy, cell, range(lo, hi), role=_rng.EST_ROLE)
        x = np.stack([init_law.sample(rng, n_particles, 1) for rng in sim_rngs])
        theta_est = np.stack([init.sample(rng) for rng in est_rngs])
        inits.append(theta_est.copy())
        sums[0] += ((theta_est - th) ** 2).sum(axis=0)

        k = 0
        with np.errstate(over="ignore", invalid="ignore"):
            while k < k_steps:
                kc = min(time_chunk, k_steps - k)
                noise = np.stack(
                    [rng.standard_normal((kc, n_particles)) for rng in sim_rngs]
                ) * sqrt_dt
                for j in range(kc):
                    diff = x[:, :, None] - x[:, None, :]
                    r = np.abs(diff)
                    k_true = bump_kernel(th[0], th[1], r)
                    drift_true = -(k_true * diff).mean(axis=2)
                    x1 = x + drift_true * dt + sigma * noise[:, j, :]

                    t1e = theta_est[:, 0][:, None, None]
                    t2e = theta_est[:, 1][:, None, None]
                    k_est = bump_kernel(t1e, t2e, r)
                    b_est = -(k_est * diff).mean(axis=2)
                    dk1, dk2 = bump_kernel_grads(t1e, t2e, r)
                    g1 = -(dk1 * diff).mean(axis=2)
                    g2 = -(dk2 * diff).mean(axis=2)
                    resid = (x1 - x) - b_est * dt
                    gamma = lr_eval(lr, k * dt)
                    theta_est = theta_est + np.stack(
                        [
                            gamma[0] * (g1 * resid).sum(axis=1),
                            gamma[1] * (g2 * resid).sum(axis=1),
                        ],
                        axis=1,
                    ) / (n_particles * sigma**2)
                    x = x1
                    k += 1
                    if k in row_of:
                        sums[row_of[k]] += ((theta_est - th) ** 2).sum(axis=0)
        if not np.all(np.isfinite(theta_est)) or np.abs(theta_est).max() > THETA_LIMIT:
            raise EstimatorDiverged("opinion online estimate diverged", step=k_steps)
        terminal.append(theta_est.copy())

    return OnlineTrialsResult(
        times=checkpoints * dt,
        mse={"averaged": sums / (last - first)},
        terminal={"averaged": np.concatenate(terminal)},
        theta_init=np.concatenate(inits),
    )

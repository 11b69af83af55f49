"""Euler-Maruyama integration of interacting particle systems.

The N-particle system attached to a mean-field drift model is

    dx^i = B(theta, x^i, mu^N) dt + sigma dw^i,    mu^N = (1/N) sum_j delta_{x^j}

with independent Brownian motions w^i. Integration uses the explicit Euler
scheme on a uniform grid: every particle's drift is evaluated against the
start-of-step snapshot of the whole cloud, then all particles move
simultaneously.

Also provided: exact sampling of independent copies of the limiting
mean-field dynamics for the linear model (whose law enters only through the
deterministic mean m_t = mu0 exp(-theta1 t)), and a coupled pair of systems
sharing one noise array for measuring the particle-vs-limit gap.

Reproducibility contract: a trial's randomness is one Philox stream that
draws the initial positions first and then the (steps x particles) noise
array in time order. Identical (seed, config, model, theta) inputs give
bit-identical trajectories regardless of batching or thread count.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace

import numpy as np

from . import _rng
from .errors import SimulationDiverged, ValidationError
from .models import ModelSpec, as_theta_array, drift_values, linear_drift, model_by_name

DIVERGENCE_LIMIT = 1e12
"""States beyond this magnitude abort the run as numerically divergent."""

GRID_RTOL = 1e-9
"""dt * n_steps must match the horizon to this relative tolerance."""

TRAJECTORY_SCHEMA = 1


# ==== configuration ====


@dataclass(frozen=True)
class InitialLaw:
    """Initial particle distribution: iid normal, uniform, or a point mass.

    For "normal", (mu, sigma) are the mean and standard deviation; for
    "uniform" they are the interval endpoints (lo, hi); for "point", mu is
    the atom. Defaults match the standing choice for the linear-model
    experiments (x0 ~ N(1, 1)).
    """

    kind: str = "normal"  # "normal" | "uniform" | "point"
    mu: float = 1.0
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in ("normal", "uniform", "point"):
            raise ValidationError(f"unknown initial law {self.kind!r}")
        if not np.isfinite(self.mu):
            raise ValidationError("initial-law mu must be finite")
        if self.kind == "normal" and not (np.isfinite(self.sigma) and self.sigma >= 0):
            raise ValidationError("initial-law sigma must be >= 0")
        if self.kind == "uniform" and not (np.isfinite(self.sigma) and self.sigma >= self.mu):
            raise ValidationError("uniform initial law needs lo <= hi")

    @property
    def mean(self) -> float:
        if self.kind == "uniform":
            return 0.5 * (self.mu + self.sigma)
        return float(self.mu)

    def sample(self, rng: np.random.Generator, n: int, d: int = 1) -> np.ndarray:
        shape = (n,) if d == 1 else (n, d)
        if self.kind == "point":
            return np.full(shape, float(self.mu))
        if self.kind == "uniform":
            return rng.uniform(self.mu, self.sigma, size=shape)
        return rng.normal(self.mu, self.sigma, size=shape)

    @classmethod
    def parse(cls, text: str) -> "InitialLaw":
        """Parse 'normal:mu,sigma', 'uniform:lo,hi', or 'point:x0'."""
        kind, _, rest = text.partition(":")
        try:
            parts = [float(v) for v in rest.split(",")] if rest else []
        except ValueError as exc:
            raise ValidationError(f"bad initial law {text!r}") from exc
        if kind in ("normal", "uniform") and len(parts) == 2:
            return cls(kind, parts[0], parts[1])
        if kind == "point" and len(parts) == 1:
            return cls("point", parts[0])
        raise ValidationError(f"bad initial law {text!r}")


@dataclass(frozen=True)
class SimConfig:
    """One particle-system run: size, grid, initial law, seed."""

    n_particles: int
    dt: float
    horizon: float
    init: InitialLaw = InitialLaw()
    seed: int = 0
    record_noise: bool = False

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValidationError("n_particles must be >= 1")
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise ValidationError("dt must be positive")
        if not (np.isfinite(self.horizon) and self.horizon > 0):
            raise ValidationError("horizon must be positive")
        k = round(self.horizon / self.dt)
        if k < 1 or abs(k * self.dt - self.horizon) > GRID_RTOL * max(1.0, self.horizon):
            raise ValidationError(
                f"horizon {self.horizon} is not an integer number of steps of dt={self.dt}"
            )

    @property
    def n_steps(self) -> int:
        return round(self.horizon / self.dt)


# ==== trajectories ====


@dataclass
class TrajectoryBatch:
    """States of one run on the uniform grid.

    states has shape (K+1, N) for d = 1 (or (K+1, N, d)); noise, when
    recorded, holds the Brownian increments (K, N[, d]) so that

        states[k+1] = states[k] + B(theta, states[k], mu_k) dt + sigma * noise[k]

    reproduces the stored states bit-for-bit.
    """

    times: np.ndarray
    states: np.ndarray
    model_id: str
    sigma: float
    theta_true: np.ndarray | None = None
    noise: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.times.ndim != 1 or self.states.shape[0] != self.times.size:
            raise ValidationError("times and states disagree on the number of frames")
        if self.times.size < 2:
            raise ValidationError("a trajectory needs at least two frames")
        steps = np.diff(self.times)
        if np.any(np.abs(steps - steps[0]) > GRID_RTOL * max(1.0, abs(float(self.times[-1])))):
            raise ValidationError("trajectory times must lie on a uniform grid")
        if not np.all(np.isfinite(self.states)):
            raise ValidationError("trajectory states must be finite")
        if self.theta_true is not None:
            self.theta_true = np.asarray(self.theta_true, dtype=float)
        if self.noise is not None:
            self.noise = np.asarray(self.noise, dtype=float)
            if self.noise.shape != (self.times.size - 1,) + self.states.shape[1:]:
                raise ValidationError("noise shape must be (K,) + state shape")

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def n_particles(self) -> int:
        return self.states.shape[1]

    @property
    def state_dim(self) -> int:
        return 1 if self.states.ndim == 2 else self.states.shape[2]

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def window(self, t0: float, t1: float) -> "TrajectoryBatch":
        """Restrict to grid times in [t0, t1]; endpoints must lie on the grid."""
        dt = self.dt
        k0 = round(t0 / dt)
        k1 = round(t1 / dt)
        eps = GRID_RTOL * max(1.0, self.horizon)
        if not (abs(k0 * dt - t0) <= eps and abs(k1 * dt - t1) <= eps):
            raise ValidationError(f"window [{t0}, {t1}] is not aligned with dt={dt}")
        if not (0 <= k0 < k1 <= self.n_steps):
            raise ValidationError(
                f"window [{t0}, {t1}] exceeds the trajectory horizon {self.horizon}"
            )
        return TrajectoryBatch(
            times=self.times[k0 : k1 + 1].copy(),
            states=self.states[k0 : k1 + 1].copy(),
            model_id=self.model_id,
            sigma=self.sigma,
            theta_true=None if self.theta_true is None else self.theta_true.copy(),
            noise=None if self.noise is None else self.noise[k0:k1].copy(),
        )


# ==== stepping ====


def _check_state(x: np.ndarray, step: int | None):
    if not np.all(np.isfinite(x)) or np.abs(x).max() > DIVERGENCE_LIMIT:
        where = "" if step is None else f" at step {step}"
        raise SimulationDiverged(f"particle state diverged{where}", step=step)


def step_euler(model: ModelSpec, theta, state: np.ndarray, dt: float, noise: np.ndarray,
               step: int | None = None) -> np.ndarray:
    """One Euler step; every particle sees the start-of-step cloud.

    ``noise`` holds the Brownian increments (variance dt per coordinate);
    the diffusion scales them by model.sigma.
    """
    state = np.asarray(state, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if noise.shape != state.shape:
        raise ValidationError("noise must match the state shape")
    drift = drift_values(model, theta, state, state)
    nxt = state + drift * dt + model.sigma * noise
    _check_state(nxt, step)
    return nxt


def simulate_ips(model: ModelSpec, theta_true, cfg: SimConfig,
                 seed_seq: np.random.SeedSequence | None = None) -> TrajectoryBatch:
    """Simulate the N-particle system; returns the full trajectory.

    ``seed_seq`` overrides the stream derived from cfg.seed (used by the
    experiment harness to address per-trial substreams).
    """
    th = as_theta_array(model, theta_true)
    rng = _rng.generator_from(seed_seq if seed_seq is not None else cfg.seed)
    d = model.state_dim
    x = cfg.init.sample(rng, cfg.n_particles, d)
    k_steps = cfg.n_steps
    sqrt_dt = math.sqrt(cfg.dt)
    states = np.empty((k_steps + 1,) + x.shape)
    states[0] = x
    noise_rec = np.empty((k_steps,) + x.shape) if cfg.record_noise else None
    for k in range(k_steps):
        w = rng.standard_normal(x.shape) * sqrt_dt
        if noise_rec is not None:
            noise_rec[k] = w
        x = step_euler(model, th, x, cfg.dt, w, step=k)
        states[k + 1] = x
    return TrajectoryBatch(
        times=np.arange(k_steps + 1) * cfg.dt,
        states=states,
        model_id=model.model_id,
        sigma=model.sigma,
        theta_true=th.copy(),
        noise=noise_rec,
    )


def simulate_mv_linear(theta_true, cfg: SimConfig,
                       seed_seq: np.random.SeedSequence | None = None,
                       sigma: float = 1.0) -> TrajectoryBatch:
    """Independent copies of the limiting mean-field dynamics, linear model.

    The limit law enters the linear drift only through its mean, which
    solves m_t = mu0 exp(-theta1 t) exactly, so each path is an independent
    one-dimensional SDE integrated by the same Euler scheme.
    """
    th = np.asarray(theta_true, dtype=float)
    if th.shape != (2,):
        raise ValidationError("linear model expects theta of shape (2,)")
    rng = _rng.generator_from(seed_seq if seed_seq is not None else cfg.seed)
    x = cfg.init.sample(rng, cfg.n_particles, 1)
    k_steps = cfg.n_steps
    sqrt_dt = math.sqrt(cfg.dt)
    states = np.empty((k_steps + 1, cfg.n_particles))
    states[0] = x
    mu0 = cfg.init.mean
    for k in range(k_steps):
        w = rng.standard_normal(x.shape) * sqrt_dt
        m_k = mu0 * math.exp(-th[0] * (k * cfg.dt))
        x = x + linear_drift(th[0], th[1], x, m_k) * cfg.dt + sigma * w
        _check_state(x, k)
        states[k + 1] = x
    return TrajectoryBatch(
        times=np.arange(k_steps + 1) * cfg.dt,
        states=states,
        model_id="linear-mv",
        sigma=sigma,
        theta_true=th.copy(),
    )


def simulate_coupled_pair(model: ModelSpec, theta_true, cfg: SimConfig,
                          proxy_factor: int = 32) -> tuple[TrajectoryBatch, TrajectoryBatch]:
    """Particle system plus synchronously coupled mean-field proxies.

    Both systems share initial positions and the same Brownian increments,
    so the terminal gap measures pure finite-N interaction error. For the
    linear model the proxies follow the exact limit dynamics (closed-form
    mean); otherwise each proxy particle interacts with a frozen surrogate
    of the limit law, namely an independent particle system with
    ``proxy_factor * N`` particles driven by its own noise.
    """
    th = as_theta_array(model, theta_true)
    shared = _rng.substream(cfg.seed, 0)
    d = model.state_dim
    x0 = cfg.init.sample(shared, cfg.n_particles, d)
    k_steps = cfg.n_steps
    sqrt_dt = math.sqrt(cfg.dt)
    noise = shared.standard_normal((k_steps,) + x0.shape) * sqrt_dt

    surrogate = None
    if model.kind != "linear":
        surrogate_cfg = replace(
            cfg, n_particles=proxy_factor * cfg.n_particles, record_noise=False
        )
        surrogate = simulate_ips(
            model, th, surrogate_cfg, seed_seq=np.random.SeedSequence(
                entropy=cfg.seed, spawn_key=(1,)
            ),
        )

    x_ips = x0.copy()
    x_prx = x0.copy()
    states_ips = np.empty((k_steps + 1,) + x0.shape)
    states_prx = np.empty_like(states_ips)
    states_ips[0] = x0
    states_prx[0] = x0
    mu0 = cfg.init.mean
    for k in range(k_steps):
        w = noise[k]
        x_ips = step_euler(model, th, x_ips, cfg.dt, w, step=k)
        if model.kind == "linear":
            m_k = mu0 * math.exp(-th[0] * (k * cfg.dt))
            x_prx = x_prx + linear_drift(th[0], th[1], x_prx, m_k) * cfg.dt + model.sigma * w
        else:
            drift = drift_values(model, th, x_prx, surrogate.states[k])
            x_prx = x_prx + drift * cfg.dt + model.sigma * w
        _check_state(x_prx, k)
        states_ips[k + 1] = x_ips
        states_prx[k + 1] = x_prx
    times = np.arange(k_steps + 1) * cfg.dt
    ips = TrajectoryBatch(times, states_ips, model.model_id, model.sigma, th.copy())
    prx = TrajectoryBatch(times, states_prx, model.model_id + "-proxy", model.sigma, th.copy())
    return ips, prx


# ==== batched linear simulation ====


def linear_noise_blocks(rngs, n: int, k0: int, k1: int, sqrt_dt: float) -> np.ndarray:
    """Noise for steps [k0, k1) of every trial, stacked (trials, k1-k0, n).

    Each trial draws from its own stream, so the stack is bit-identical to
    what the trials would draw one at a time.
    """
    return np.stack([rng.standard_normal((k1 - k0, n)) for rng in rngs]) * sqrt_dt


def linear_init_states(rngs, init: InitialLaw, n: int) -> np.ndarray:
    """Initial positions of every trial, stacked (trials, n)."""
    return np.stack([init.sample(rng, n, 1) for rng in rngs])


# ==== trajectory I/O ====


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def save_trajectory(traj: TrajectoryBatch, path: str) -> list[str]:
    """Write states as CSV plus a JSON sidecar ``<path>.json``.

    CSV columns are (time, particle_id, x1[, ..., xd]) with 17-significant-
    digit floats, which round-trip float64 exactly. Recorded noise is not
    exported.
    """
    path = str(path)
    d = traj.state_dim
    header = ["time", "particle_id"] + [f"x{j + 1}" for j in range(d)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k, t in enumerate(traj.times):
            frame = traj.states[k]
            for i in range(traj.n_particles):
                coords = [frame[i]] if d == 1 else list(frame[i])
                writer.writerow([_fmt(t), i] + [_fmt(c) for c in coords])
    sidecar = {
        "schema": TRAJECTORY_SCHEMA,
        "model": traj.model_id,
        "sigma": traj.sigma,
        "theta_true": None if traj.theta_true is None else [float(v) for v in traj.theta_true],
        "n_particles": traj.n_particles,
        "state_dim": d,
        "dt": traj.dt,
        "horizon": traj.horizon,
        "columns": header,
    }
    with open(path + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2)
        fh.write("\n")
    return [path, path + ".json"]


def load_trajectory(path) -> TrajectoryBatch:
    """Read a trajectory written by :func:`save_trajectory`."""
    path = str(path)
    try:
        with open(path + ".json") as fh:
            meta = json.load(fh)
    except FileNotFoundError as exc:
        raise ValidationError(f"missing trajectory sidecar {path + '.json'}") from exc
    if meta.get("schema") != TRAJECTORY_SCHEMA:
        raise ValidationError(f"unsupported trajectory schema {meta.get('schema')!r}")
    n = int(meta["n_particles"])
    d = int(meta["state_dim"])
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["time", "particle_id"]:
            raise ValidationError(f"unexpected trajectory header {header!r}")
        rows = [row for row in reader if row]
    if len(rows) % n != 0:
        raise ValidationError("trajectory row count is not a multiple of n_particles")
    k_frames = len(rows) // n
    times = np.empty(k_frames)
    shape = (k_frames, n) if d == 1 else (k_frames, n, d)
    states = np.empty(shape)
    for k in range(k_frames):
        block = rows[k * n : (k + 1) * n]
        times[k] = float(block[0][0])
        for row in block:
            i = int(row[1])
            vals = [float(v) for v in row[2 : 2 + d]]
            if d == 1:
                states[k, i] = vals[0]
            else:
                states[k, i] = vals
    dts = np.diff(times)
    if not np.allclose(dts, dts[0], rtol=1e-9, atol=0.0):
        raise ValidationError("trajectory grid is not uniform")
    return TrajectoryBatch(
        times=times,
        states=states,
        model_id=str(meta["model"]),
        sigma=float(meta["sigma"]),
        theta_true=meta.get("theta_true"),
    )

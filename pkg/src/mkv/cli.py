"""Command-line entry point.

Subcommands: ``simulate`` (integrate a particle system and store it),
``offline`` (estimate from a stored trajectory), ``online`` (stream an
estimate alongside a fresh or stored run), ``surface`` (tabulate the
long-run likelihood surface), and ``experiment`` (run a JSON-configured
Monte-Carlo study).

Exit codes: 0 on success, 2 for validation problems (bad flags, malformed
configs), 3 for runtime failures (divergence, degenerate statistics,
exclusion-cap breaches).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from ._version import __version__
from .errors import ValidationError
from .harness import export_result, load_config, resolve_workers, run_experiment
from .models import model_by_name
from .offline import log_likelihood, mle_linear_closed_form, mle_numeric
from .online import LearningRate, ThetaInit, asymptotic_loglik_ips_linear, run_online
from .simulate import InitialLaw, SimConfig, load_trajectory, save_trajectory, simulate_ips


def _parse_theta(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError as exc:
        raise ValidationError(f"bad theta value {text!r}") from exc


def _parse_window(text: str | None):
    if text is None:
        return None
    parts = text.split(",")
    if len(parts) != 2:
        raise ValidationError(f"window must be 't0,t1', got {text!r}")
    try:
        return float(parts[0]), float(parts[1])
    except ValueError as exc:
        raise ValidationError(f"window must be 't0,t1', got {text!r}") from exc


def _cmd_simulate(args) -> int:
    model = model_by_name(args.model, sigma=args.sigma)
    cfg = SimConfig(n_particles=args.n, dt=args.dt, horizon=args.T,
                    init=InitialLaw.parse(args.x0), seed=args.seed)
    traj = simulate_ips(model, _parse_theta(args.theta_true), cfg)
    save_trajectory(traj, args.out)
    print(f"wrote {args.out} ({traj.n_particles} particles, {traj.n_steps} steps)")
    return 0


def _cmd_offline(args) -> int:
    traj = load_trajectory(args.traj)
    window = _parse_window(args.window)
    model = model_by_name(args.model, sigma=traj.sigma)
    if args.method == "closed":
        if args.model != "linear":
            raise ValidationError("closed-form estimation is linear-model only")
        theta_hat = mle_linear_closed_form(traj, window=window)
    else:
        init = _parse_theta(args.init) if args.init else None
        theta_hat = mle_numeric(model, traj, init=init, window=window)
    value = log_likelihood(model, theta_hat, traj, window=window).value
    doc = {"theta_hat": theta_hat.tolist(), "objective": value,
           "method": args.method, "model": args.model}
    text = json.dumps(doc, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def _cmd_online(args) -> int:
    model = model_by_name(args.model, sigma=args.sigma)
    lr = LearningRate.parse(args.lr, p=model.param_dim)
    theta_init = ThetaInit.parse(args.init, p=model.param_dim)
    replay = load_trajectory(args.replay) if args.replay else None
    cfg = SimConfig(n_particles=args.n, dt=args.dt, horizon=args.T,
                    init=InitialLaw.parse(args.x0), seed=args.seed)
    state = run_online(model, _parse_theta(args.theta_true), cfg, lr, theta_init,
                       mode=args.mode, replay=replay)
    times, thetas = state.history
    if thetas.ndim == 3:  # per-particle: report the particle average path
        thetas = thetas.mean(axis=1)
    header = "t," + ",".join(f"theta_{j + 1}" for j in range(thetas.shape[1]))
    lines = [header]
    for i in range(times.size):
        lines.append(",".join(["%.17g" % times[i]] + ["%.17g" % v for v in thetas[i]]))
    Path(args.out).write_text("\n".join(lines) + "\n")
    final = np.asarray(state.theta)
    if final.ndim == 2:
        final = final.mean(axis=0)
    print(f"wrote {args.out}; final estimate {final.tolist()}")
    return 0


def _parse_grid(text: str):
    axes = {}
    for part in text.split(","):
        fields = part.split(":")
        if len(fields) != 4:
            raise ValidationError(f"grid axis must be name:lo:hi:steps, got {part!r}")
        name, lo, hi, steps = fields
        if name not in ("theta1", "theta2"):
            raise ValidationError(f"unknown grid axis {name!r}")
        try:
            axes[name] = np.linspace(float(lo), float(hi), int(steps))
        except ValueError as exc:
            raise ValidationError(f"bad grid axis {part!r}") from exc
    if set(axes) != {"theta1", "theta2"}:
        raise ValidationError("grid needs both theta1 and theta2 axes")
    return axes["theta1"], axes["theta2"]


def _cmd_surface(args) -> int:
    if args.model != "linear":
        raise ValidationError("the long-run surface is tabulated for the linear model")
    theta0 = _parse_theta(args.theta0)
    ax1, ax2 = _parse_grid(args.grid)
    lines = ["theta1,theta2,loglik"]
    for v1 in ax1:
        for v2 in ax2:
            val = asymptotic_loglik_ips_linear((v1, v2), theta0, args.n)
            lines.append("%.17g,%.17g,%.17g" % (v1, v2, val))
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"wrote {args.out} ({ax1.size * ax2.size} grid points)")
    return 0


def _cmd_experiment(args) -> int:
    cfg = load_config(args.config)
    out_prefix = args.out or cfg.output
    if out_prefix is None:
        raise ValidationError("no output path: set 'output' in the config or pass --out")
    result = run_experiment(cfg, workers=resolve_workers(args.workers))
    written = export_result(result, out_prefix)
    excluded = result.metadata["excluded_total"]
    print(f"{cfg.name}: {result.n_rows} rows, {excluded} excluded")
    for path in written:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mkv",
        description="Interacting-particle simulation and drift estimation",
    )
    parser.add_argument("--version", action="version", version=f"mkv {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="integrate a particle system, store CSV")
    sim.add_argument("--model", required=True, choices=("linear", "opinion"))
    sim.add_argument("--theta-true", required=True)
    sim.add_argument("--n", type=int, required=True)
    sim.add_argument("--dt", type=float, default=0.1)
    sim.add_argument("--T", type=float, required=True)
    sim.add_argument("--x0", default="normal:1,1", help="initial law, e.g. normal:1,1")
    sim.add_argument("--sigma", type=float, default=1.0)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", required=True)
    sim.set_defaults(fn=_cmd_simulate)

    off = sub.add_parser("offline", help="estimate drift parameters from a stored run")
    off.add_argument("--traj", required=True)
    off.add_argument("--model", required=True, choices=("linear", "opinion"))
    off.add_argument("--method", default="closed", choices=("closed", "numeric"))
    off.add_argument("--window", default=None, help="restrict to t0,t1")
    off.add_argument("--init", default=None, help="ascent start, numeric method")
    off.add_argument("--out", default=None)
    off.set_defaults(fn=_cmd_offline)

    onl = sub.add_parser("online", help="stream an estimate along a run")
    onl.add_argument("--model", required=True, choices=("linear", "opinion"))
    onl.add_argument("--theta-true", required=True)
    onl.add_argument("--mode", default="averaged", choices=("averaged", "per-particle"))
    onl.add_argument("--lr", required=True, help="e.g. powmin:0.05,0.51;powmin:0.30,0.51")
    onl.add_argument("--init", required=True, help="e.g. uniform:-1,2;uniform:-2,2")
    onl.add_argument("--x0", default="normal:1,1")
    onl.add_argument("--n", type=int, required=True)
    onl.add_argument("--dt", type=float, default=0.1)
    onl.add_argument("--T", type=float, required=True)
    onl.add_argument("--sigma", type=float, default=1.0)
    onl.add_argument("--seed", type=int, default=0)
    onl.add_argument("--replay", default=None, help="estimate on this stored trajectory")
    onl.add_argument("--out", required=True)
    onl.set_defaults(fn=_cmd_online)

    srf = sub.add_parser("surface", help="tabulate the long-run likelihood surface")
    srf.add_argument("--model", required=True, choices=("linear",))
    srf.add_argument("--theta0", required=True)
    srf.add_argument("--n", type=int, required=True)
    srf.add_argument("--grid", required=True, help="theta1:lo:hi:steps,theta2:lo:hi:steps")
    srf.add_argument("--out", required=True)
    srf.set_defaults(fn=_cmd_surface)

    exp = sub.add_parser("experiment", help="run a JSON-configured Monte-Carlo study")
    exp.add_argument("--config", required=True)
    exp.add_argument("--workers", type=int, default=None)
    exp.add_argument("--out", default=None, help="override the config output prefix")
    exp.set_defaults(fn=_cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

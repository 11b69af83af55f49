"""Declarative Monte-Carlo experiment runner and result persistence.

An experiment is one JSON document (field ``schema: 1``) naming a model,
an estimator, a grid of particle counts and horizons, and a trial count.
Every (N, T) grid cell runs ``trials`` independent simulate-then-estimate
passes; trial seeds are derived as (master_seed, cell index, trial index),
so results are reproducible and independent of how trials are packed into
worker chunks. Rows carry per-trial estimates and error terms; summaries
are recomputable from the rows; everything exports to byte-stable CSV and
JSON.

Per-trial failures (degenerate statistics, divergence) become counted
exclusions; the run fails if they exceed EXCLUSION_CAP of all trials.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from time import perf_counter

import numpy as np

from ._version import __version__
from .errors import (
    DegenerateStatistics,
    EstimatorDiverged,
    ExclusionCapExceeded,
    OptimizerDidNotConverge,
    SimulationDiverged,
    ValidationError,
)
from .models import model_by_name
from .offline import (
    EXCLUSION_CAP,
    TRIAL_BLOCK,
    NormalitySample,
    mle_numeric,
    mle_trials_linear,
)
from .online import LearningRate, ThetaInit, online_trials_linear, online_trials_opinion
from .simulate import InitialLaw, SimConfig, simulate_ips
from . import _rng

ESTIMATORS = ("offline-closed", "offline-numeric", "online-averaged", "online-per-particle")

ROW_COLUMNS = ("cell", "n", "t", "trial", "theta1_hat", "theta2_hat",
               "sq_err1", "sq_err2", "abs_err1", "abs_err2")

SUMMARY_COLUMNS = ("cell", "n", "t", "rows",
                   "mean1", "mean2", "median1", "median2", "stderr1", "stderr2",
                   "mse1", "mse2", "mae1", "mae2", "mse_joint")

_CONFIG_KEYS = {"schema", "name", "model", "estimator", "theta_true", "n_grid",
                "t_grid", "trials", "dt", "sigma", "init", "lr", "theta_init",
                "master_seed", "output"}

_REQUIRED_KEYS = {"schema", "name", "model", "estimator", "theta_true",
                  "n_grid", "t_grid", "trials"}


# ==== configuration ====


def _unparse_init_law(law: InitialLaw) -> str:
    if law.kind == "point":
        return f"point:{law.mu!r}"
    return f"{law.kind}:{law.mu!r},{law.sigma!r}"


def _unparse_lr(lr: LearningRate) -> str:
    parts = []
    for s in lr.schedules:
        if s.kind == "constant":
            parts.append(f"constant:{s.a!r}")
        else:
            parts.append(f"{s.kind}:{s.a!r},{s.b!r}")
    return ";".join(parts)


def _unparse_theta_init(init: ThetaInit) -> str:
    parts = []
    for c in init.coords:
        if c[0] == "const":
            parts.append(f"const:{c[1]!r}")
        else:
            parts.append(f"uniform:{c[1]!r},{c[2]!r}")
    return ";".join(parts)


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description (JSON schema version 1)."""

    name: str
    model: str
    estimator: str
    theta_true: tuple[float, float]
    n_grid: tuple[int, ...]
    t_grid: tuple[float, ...]
    trials: int
    dt: float = 0.1
    sigma: float = 1.0
    init: InitialLaw = field(default_factory=InitialLaw)
    lr: LearningRate | None = None
    theta_init: ThetaInit | None = None
    master_seed: int = 0
    output: str | None = None

    def __post_init__(self):
        if not self.name:
            raise ValidationError("experiment name must be nonempty")
        if self.model not in ("linear", "opinion"):
            raise ValidationError(f"unknown model {self.model!r}")
        if self.estimator not in ESTIMATORS:
            raise ValidationError(f"unknown estimator {self.estimator!r}")
        th = np.asarray(self.theta_true, dtype=float)
        if th.shape != (2,) or not np.all(np.isfinite(th)):
            raise ValidationError("theta_true must be two finite numbers")
        if self.trials < 1:
            raise ValidationError("trials must be >= 1")
        if not self.n_grid or not self.t_grid:
            raise ValidationError("n_grid and t_grid must be nonempty")
        if any(int(n) < 1 for n in self.n_grid):
            raise ValidationError("particle counts must be >= 1")
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise ValidationError("dt must be positive")
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ValidationError("sigma must be positive")
        for t in self.t_grid:
            k = round(float(t) / self.dt)
            if k < 1 or abs(k * self.dt - float(t)) > 1e-9 * max(1.0, float(t)):
                raise ValidationError(f"horizon {t} is not a positive multiple of dt")
        online = self.estimator.startswith("online")
        if online and (self.lr is None or self.theta_init is None):
            raise ValidationError("online estimators need lr and theta_init")
        if not online and (self.lr is not None or self.theta_init is not None):
            raise ValidationError("lr/theta_init only apply to online estimators")
        if self.estimator == "offline-closed" and self.model != "linear":
            raise ValidationError("offline-closed is only defined for the linear model")
        if self.estimator == "online-per-particle" and self.model != "linear":
            raise ValidationError("online-per-particle runs are implemented for the linear model")

    @property
    def cells(self) -> list[tuple[int, float]]:
        """Grid cells in deterministic order: N varies slowest."""
        return [(int(n), float(t)) for n, t in product(self.n_grid, self.t_grid)]

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ValidationError("config must be a JSON object")
        unknown = set(doc) - _CONFIG_KEYS
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        missing = _REQUIRED_KEYS - set(doc)
        if missing:
            raise ValidationError(f"missing config keys: {sorted(missing)}")
        if doc["schema"] != 1:
            raise ValidationError(f"unsupported schema {doc['schema']!r} (expected 1)")
        lr = doc.get("lr")
        theta_init = doc.get("theta_init")
        return cls(
            name=str(doc["name"]),
            model=str(doc["model"]),
            estimator=str(doc["estimator"]),
            theta_true=tuple(float(v) for v in doc["theta_true"]),
            n_grid=tuple(int(v) for v in doc["n_grid"]),
            t_grid=tuple(float(v) for v in doc["t_grid"]),
            trials=int(doc["trials"]),
            dt=float(doc.get("dt", 0.1)),
            sigma=float(doc.get("sigma", 1.0)),
            init=InitialLaw.parse(doc["init"]) if "init" in doc else InitialLaw(),
            lr=LearningRate.parse(lr, p=2) if lr is not None else None,
            theta_init=ThetaInit.parse(theta_init, p=2) if theta_init is not None else None,
            master_seed=int(doc.get("master_seed", 0)),
            output=doc.get("output"),
        )

    def to_dict(self) -> dict:
        doc = {
            "schema": 1,
            "name": self.name,
            "model": self.model,
            "estimator": self.estimator,
            "theta_true": list(self.theta_true),
            "n_grid": list(self.n_grid),
            "t_grid": list(self.t_grid),
            "trials": self.trials,
            "dt": self.dt,
            "sigma": self.sigma,
            "init": _unparse_init_law(self.init),
            "master_seed": self.master_seed,
        }
        if self.lr is not None:
            doc["lr"] = _unparse_lr(self.lr)
        if self.theta_init is not None:
            doc["theta_init"] = _unparse_theta_init(self.theta_init)
        if self.output is not None:
            doc["output"] = self.output
        return doc


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(doc)


# ==== results ====


@dataclass
class ExperimentResult:
    """Tidy result table plus per-cell summary and run metadata.

    rows maps every name in ROW_COLUMNS to a 1-d array (one entry per kept
    trial); summary maps SUMMARY_COLUMNS to per-cell arrays. metadata
    carries the config echo, code version, per-cell exclusion counts, and
    wall time (the latter is never exported, keeping files byte-stable).
    """

    rows: dict
    summary: dict
    metadata: dict

    @property
    def n_rows(self) -> int:
        return int(self.rows["trial"].size)


def summarize(rows: dict) -> dict:
    """Per-cell summary statistics, a pure function of the row table."""
    out = {c: [] for c in SUMMARY_COLUMNS}
    cells = rows["cell"]
    order = np.unique(cells)
    for c in order:
        mask = cells == c
        m = int(mask.sum())
        th = np.stack([rows["theta1_hat"][mask], rows["theta2_hat"][mask]], axis=1)
        sq = np.stack([rows["sq_err1"][mask], rows["sq_err2"][mask]], axis=1)
        ab = np.stack([rows["abs_err1"][mask], rows["abs_err2"][mask]], axis=1)
        mean = th.mean(axis=0)
        median = np.median(th, axis=0)
        stderr = th.std(axis=0, ddof=1) / math.sqrt(m) if m > 1 else np.zeros(2)
        mse = sq.mean(axis=0)
        mae = ab.mean(axis=0)
        out["cell"].append(int(c))
        out["n"].append(int(rows["n"][mask][0]))
        out["t"].append(float(rows["t"][mask][0]))
        out["rows"].append(m)
        for j in range(2):
            out[f"mean{j + 1}"].append(mean[j])
            out[f"median{j + 1}"].append(median[j])
            out[f"stderr{j + 1}"].append(stderr[j])
            out[f"mse{j + 1}"].append(mse[j])
            out[f"mae{j + 1}"].append(mae[j])
        out["mse_joint"].append(sq.sum(axis=1).mean())
    return {k: np.asarray(v) for k, v in out.items()}


def fit_rate(xs, ys) -> tuple[float, float, float]:
    """Least-squares power-law fit: returns (slope, intercept, r_squared).

    The line is fitted on (log x, log y); the slope is the empirical decay
    rate used by the convergence-rate checks.
    """
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.ndim != 1 or x.shape != y.shape or x.size < 4:
        raise ValidationError("rate fit needs >= 4 paired points")
    if np.any(x <= 0) or np.any(y <= 0) or not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValidationError("rate fit needs positive finite inputs")
    lx, ly = np.log(x), np.log(y)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_res = float(resid @ resid)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return float(slope), float(intercept), r2


# ==== per-chunk execution ====


def _sim_stream(master_seed: int, cell: int, trial: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=master_seed, spawn_key=(cell, trial, _rng.SIM_ROLE))


def _offline_numeric_chunk(cfg: ExperimentConfig, cell: int, lo: int, hi: int):
    model = model_by_name(cfg.model, sigma=cfg.sigma)
    n, t = cfg.cells[cell]
    sim_cfg = SimConfig(n_particles=n, dt=cfg.dt, horizon=t, init=cfg.init)
    kept_theta, kept_idx = [], []
    for trial in range(lo, hi):
        try:
            traj = simulate_ips(model, cfg.theta_true, sim_cfg,
                                seed_seq=_sim_stream(cfg.master_seed, cell, trial))
            kept_theta.append(mle_numeric(model, traj))
            kept_idx.append(trial)
        except (DegenerateStatistics, OptimizerDidNotConverge,
                SimulationDiverged, EstimatorDiverged):
            pass
    th = np.array(kept_theta).reshape(len(kept_idx), 2)
    return th, np.asarray(kept_idx, dtype=int)


def _online_kernel(cfg: ExperimentConfig, cell: int, t: float, n: int, span):
    mode = "averaged" if cfg.estimator == "online-averaged" else "per-particle"
    if cfg.model == "linear":
        return online_trials_linear(
            cfg.theta_true, n, cfg.dt, t, cfg.lr, cfg.theta_init, cfg.trials,
            entropy=cfg.master_seed, modes=(mode,), cell=cell, init_law=cfg.init,
            sigma=cfg.sigma, trial_range=span,
        ), mode
    return online_trials_opinion(
        cfg.theta_true, n, cfg.dt, t, cfg.lr, cfg.theta_init, cfg.trials,
        entropy=cfg.master_seed, cell=cell, init_law=cfg.init,
        sigma=cfg.sigma, trial_range=span,
    ), "averaged"


def _online_chunk(cfg: ExperimentConfig, cell: int, lo: int, hi: int):
    n, t = cfg.cells[cell]
    th0 = np.asarray(cfg.theta_true)

    def rows_of(span):
        res, mode = _online_kernel(cfg, cell, t, n, span)
        term = res.terminal[mode]
        if term.ndim == 3:  # per-particle: reduce over particles per trial
            err = term - th0
            return term.mean(axis=1), (err**2).mean(axis=1), np.abs(err).mean(axis=1)
        err = term - th0
        return term, err**2, np.abs(err)

    try:
        th, sq, ab = rows_of((lo, hi))
        return th, sq, ab, np.arange(lo, hi)
    except EstimatorDiverged:
        pass
    # isolate the diverging trials: per-trial streams make singleton reruns
    # reproduce the batched numbers exactly
    parts, kept_idx = [], []
    for trial in range(lo, hi):
        try:
            parts.append(rows_of((trial, trial + 1)))
            kept_idx.append(trial)
        except EstimatorDiverged:
            pass
    if not parts:
        empty = np.empty((0, 2))
        return empty, empty.copy(), empty.copy(), np.asarray(kept_idx, dtype=int)
    th = np.concatenate([p[0] for p in parts])
    sq = np.concatenate([p[1] for p in parts])
    ab = np.concatenate([p[2] for p in parts])
    return th, sq, ab, np.asarray(kept_idx, dtype=int)


def _run_chunk(cfg: ExperimentConfig, cell: int, lo: int, hi: int):
    """One (cell, trial-range) unit of work; returns kept rows and indices."""
    n, t = cfg.cells[cell]
    if cfg.estimator == "offline-closed":
        theta_hat, bad = mle_trials_linear(
            cfg.theta_true, n, cfg.dt, [t], cfg.trials, entropy=cfg.master_seed,
            cell=cell, init=cfg.init, sigma=cfg.sigma, trial_range=(lo, hi),
        )
        keep = ~bad[:, 0]
        th = theta_hat[keep, 0, :]
        kept_idx = np.arange(lo, hi)[keep]
    elif cfg.estimator == "offline-numeric":
        th, kept_idx = _offline_numeric_chunk(cfg, cell, lo, hi)
    else:
        th, sq, ab, kept_idx = _online_chunk(cfg, cell, lo, hi)
        return cell, lo, th, sq, ab, kept_idx
    err = th - np.asarray(cfg.theta_true)
    return cell, lo, th, err**2, np.abs(err), kept_idx


def _chunk_worker(doc: dict, cell: int, lo: int, hi: int):
    # module-level so process pools can pickle it; configs travel as dicts
    return _run_chunk(ExperimentConfig.from_dict(doc), cell, lo, hi)


def resolve_workers(explicit: int | None = None) -> int:
    """Worker count: explicit argument, else MKV_WORKERS, else CPU count."""
    if explicit is None:
        env = os.environ.get("MKV_WORKERS")
        if env is None:
            return os.cpu_count() or 1
        try:
            explicit = int(env)
        except ValueError as exc:
            raise ValidationError(f"MKV_WORKERS must be an integer, got {env!r}") from exc
    if explicit < 1:
        raise ValidationError("worker count must be >= 1")
    return explicit


def run_experiment(cfg: ExperimentConfig, workers: int | None = None) -> ExperimentResult:
    """Run all grid cells; aggregate in deterministic (cell, chunk) order.

    Work is split into fixed TRIAL_BLOCK-sized chunks whose outcomes do not
    depend on the worker count (each trial owns its seed), then executed
    inline or on a process pool.
    """
    workers = resolve_workers(workers)
    started = perf_counter()
    tasks = []
    for cell in range(len(cfg.cells)):
        for lo in range(0, cfg.trials, TRIAL_BLOCK):
            tasks.append((cell, lo, min(lo + TRIAL_BLOCK, cfg.trials)))

    if workers == 1 or len(tasks) == 1:
        outputs = [_run_chunk(cfg, *task) for task in tasks]
    else:
        doc = cfg.to_dict()
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
            outputs = list(pool.map(_chunk_worker, *zip(*[(doc, c, lo, hi) for c, lo, hi in tasks])))
    outputs.sort(key=lambda out: (out[0], out[1]))

    cols = {c: [] for c in ROW_COLUMNS}
    excluded_by_cell = [0] * len(cfg.cells)
    for cell, lo, th, sq, ab, kept_idx in outputs:
        n, t = cfg.cells[cell]
        m = kept_idx.size
        excluded_by_cell[cell] += (len(range(lo, min(lo + TRIAL_BLOCK, cfg.trials))) - m)
        cols["cell"].append(np.full(m, cell, dtype=int))
        cols["n"].append(np.full(m, n, dtype=int))
        cols["t"].append(np.full(m, t))
        cols["trial"].append(kept_idx)
        cols["theta1_hat"].append(th[:, 0])
        cols["theta2_hat"].append(th[:, 1])
        cols["sq_err1"].append(sq[:, 0])
        cols["sq_err2"].append(sq[:, 1])
        cols["abs_err1"].append(ab[:, 0])
        cols["abs_err2"].append(ab[:, 1])
    rows = {k: np.concatenate(v) if v else np.empty(0) for k, v in cols.items()}

    total = cfg.trials * len(cfg.cells)
    excluded = sum(excluded_by_cell)
    if excluded > EXCLUSION_CAP * total:
        raise ExclusionCapExceeded(
            f"{excluded}/{total} excluded trials exceeds the {EXCLUSION_CAP:.0%} cap"
        )
    metadata = {
        "config": cfg.to_dict(),
        "code_version": __version__,
        "excluded_by_cell": excluded_by_cell,
        "excluded_total": excluded,
        "wall_time_s": perf_counter() - started,
    }
    return ExperimentResult(rows=rows, summary=summarize(rows), metadata=metadata)


# ==== persistence ====


_INT_COLS = {"cell", "n", "trial", "rows"}


def _fmt(col: str, v) -> str:
    return str(int(v)) if col in _INT_COLS else "%.17g" % float(v)


def _write_csv(path: Path, columns: tuple, table: dict):
    lines = [",".join(columns)]
    size = len(table[columns[0]])
    for i in range(size):
        lines.append(",".join(_fmt(c, table[c][i]) for c in columns))
    path.write_text("\n".join(lines) + "\n")


def _read_csv(path: Path) -> dict:
    lines = Path(path).read_text().strip().split("\n")
    header = lines[0].split(",")
    raw = [line.split(",") for line in lines[1:]]
    out = {}
    for j, col in enumerate(header):
        vals = [r[j] for r in raw]
        if col in _INT_COLS:
            out[col] = np.array([int(v) for v in vals], dtype=int)
        else:
            out[col] = np.array([float(v) for v in vals])
    return out


def _exported_metadata(result: ExperimentResult) -> dict:
    # wall time is dropped so identical configs yield identical bytes
    return {k: v for k, v in result.metadata.items() if k != "wall_time_s"}


def export_result(result: ExperimentResult, out_prefix, formats=("csv", "json")) -> list:
    """Write {prefix}.rows.csv, {prefix}.summary.csv, {prefix}.meta.json
    and/or a single {prefix}.json mirror. Returns the written paths."""
    prefix = Path(out_prefix)
    try:
        prefix.parent.mkdir(parents=True, exist_ok=True)
        written = []
        if "csv" in formats:
            rows_path = prefix.with_name(prefix.name + ".rows.csv")
            _write_csv(rows_path, ROW_COLUMNS, result.rows)
            summary_path = prefix.with_name(prefix.name + ".summary.csv")
            _write_csv(summary_path, SUMMARY_COLUMNS, result.summary)
            meta_path = prefix.with_name(prefix.name + ".meta.json")
            meta_path.write_text(
                json.dumps(_exported_metadata(result), indent=2, sort_keys=True) + "\n"
            )
            written += [rows_path, summary_path, meta_path]
        if "json" in formats:
            doc = {
                "schema": 1,
                "metadata": _exported_metadata(result),
                "rows": {k: np.asarray(v).tolist() for k, v in result.rows.items()},
                "summary": {k: np.asarray(v).tolist() for k, v in result.summary.items()},
            }
            json_path = prefix.with_name(prefix.name + ".json")
            json_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
            written.append(json_path)
        return written
    except OSError as exc:
        raise ValidationError(f"cannot write results under {prefix}: {exc}") from exc


def load_result(out_prefix) -> ExperimentResult:
    """Rebuild an ExperimentResult from the {prefix}.json mirror."""
    path = Path(out_prefix).with_name(Path(out_prefix).name + ".json")
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ValidationError(f"cannot read result {path}: {exc}") from exc
    rows = {k: np.asarray(v, dtype=int if k in _INT_COLS else float)
            for k, v in doc["rows"].items()}
    summary = {k: np.asarray(v, dtype=int if k in _INT_COLS else float)
               for k, v in doc["summary"].items()}
    return ExperimentResult(rows=rows, summary=summary, metadata=doc["metadata"])


def load_rows_csv(path) -> dict:
    """Read a rows CSV back into a column table (round-trip helper)."""
    return _read_csv(Path(path))


def export_residuals(sample: NormalitySample, path) -> Path:
    """Write standardized residual rows as CSV: trial, comp1, comp2."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = ["trial,comp1,comp2"]
    for i in range(sample.residuals.shape[0]):
        lines.append("%d,%.17g,%.17g" % (
            int(sample.trial_index[i]), sample.residuals[i, 0], sample.residuals[i, 1]
        ))
    out.write_text("\n".join(lines) + "\n")
    return out

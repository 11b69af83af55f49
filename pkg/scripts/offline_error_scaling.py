"""Run the offline error-scaling experiments and fit log-log rates.

Default manifests cover the MSE surface over (N, T), the MAE scan in N at
a short horizon, and the MAE scan in T for a two-particle system. For
each single-axis scan the script fits a power law to the per-component
MAE and prints the exponent; the theory predicts roughly -1/2 in both N
and T.

Usage:
    python3 scripts/offline_error_scaling.py [--config PATH ...] [--workers W]
"""

import argparse
from pathlib import Path

import numpy as np

from mkv import export_result, fit_rate, load_config, run_experiment

MANIFEST_DIR = Path(__file__).resolve().parent / "manifests"
DEFAULT_CONFIGS = (
    MANIFEST_DIR / "offline_mse_grid.json",
    MANIFEST_DIR / "offline_mae_vs_n.json",
    MANIFEST_DIR / "offline_mae_vs_t.json",
)


def report_scan(name, summary):
    """Fit MAE ~ axis^slope along whichever grid axis varies."""
    ns = np.asarray(summary["n"], dtype=float)
    ts = np.asarray(summary["t"], dtype=float)
    axis, label = (ns, "N") if np.unique(ns).size > 1 else (ts, "t")
    if np.unique(axis).size < 4:
        print(f"  {name}: axis too short for a rate fit")
        return
    for comp in ("mae1", "mae2"):
        slope, _, r2 = fit_rate(axis, summary[comp])
        print(f"  {name}: {comp} ~ {label}^{slope:+.3f}  (r2={r2:.3f})")


def report_grid(name, summary):
    """Print the joint MSE at the largest horizon for each N."""
    ts = np.asarray(summary["t"], dtype=float)
    at_final = ts == ts.max()
    ns = np.asarray(summary["n"], dtype=int)[at_final]
    mse = np.asarray(summary["mse_joint"], dtype=float)[at_final]
    print(f"  {name}: joint MSE at t={ts.max():g}")
    for n, v in sorted(zip(ns, mse)):
        print(f"    N={n:<4d} {v:.3e}")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", action="append", type=Path,
                    help="experiment manifest (repeatable; default: all offline manifests)")
    ap.add_argument("--workers", type=int, default=None)
    args = ap.parse_args(argv)

    for path in args.config or DEFAULT_CONFIGS:
        cfg = load_config(path)
        result = run_experiment(cfg, workers=args.workers)
        written = export_result(result, cfg.output)
        excluded = result.metadata["excluded_total"]
        print(f"{cfg.name}: {len(result.rows['trial'])} rows, {excluded} excluded")
        for p in written:
            print(f"  wrote {p}")
        if len(cfg.n_grid) > 1 and len(cfg.t_grid) > 1:
            report_grid(cfg.name, result.summary)
        else:
            report_scan(cfg.name, result.summary)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

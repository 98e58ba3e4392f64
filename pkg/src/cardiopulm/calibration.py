"""Fit the frozen perception constants against phantom severity grids.

Run ``python -m cardiopulm.calibration`` to regenerate
``data/perception_calibration.json``. The shipped file is what the pipeline
uses; this module only exists so the constants can be reproduced.
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np
from scipy.optimize import curve_fit

from .locator import body_mask, lung_mask
from .perception import FINDINGS, signature_statistics
from .phantom import PhantomSpec, generate_phantom
from .volume import standardize

LEVELS = (0.0, 0.25, 0.5, 0.75, 1.0)
VERSION = "perception-cal-v2"


def severity_grid(levels=LEVELS, n_seeds: int = 10, seed: int = 2024, dims=(96, 96, 96)):
    """Signature statistics over a levels x seeds grid for each finding.

    The other four severities are drawn uniformly per phantom so the fit sees
    realistic cross-talk. Returns ``{finding: [(severity, stat), ...]}``.
    """
    rng = np.random.default_rng(seed)
    out = {f: [] for f in FINDINGS}
    for f in FINDINGS:
        for level in levels:
            for k in range(n_seeds):
                others = {g: float(rng.uniform(0.0, 1.0)) for g in FINDINGS}
                others[f] = float(level)
                spec = PhantomSpec(seed=int(rng.integers(0, 2**31)), dims=dims, pathology_levels=others)
                vol = standardize(generate_phantom(spec))
                stats = signature_statistics(vol, lung_mask(vol, body_mask(vol)))
                out[f].append((float(level), float(stats[f])))
    return out


def _logistic(x, slope, midpoint):
    return 1.0 / (1.0 + np.exp(-slope * (x - midpoint)))


def fit_logistic(pairs, threshold: float = 0.5) -> tuple[float, float]:
    """Slope by least squares with the midpoint pinned to the mean statistic
    at ``threshold`` severity, so a score of 0.5 sits where retention does."""
    sev = np.array([p[0] for p in pairs])
    stat = np.array([p[1] for p in pairs])
    if not np.any(sev == threshold):
        raise ValueError(f"calibration grid needs the {threshold} level")
    midpoint = float(stat[sev == threshold].mean())
    lo = stat[sev == sev.min()].mean()
    hi = stat[sev == sev.max()].mean()
    slope0 = 6.0 / max(hi - lo, 1e-6)
    (slope,), _ = curve_fit(lambda x, k: _logistic(x, k, midpoint), stat, sev, p0=(slope0,), maxfev=20000)
    return float(slope), midpoint


def calibrate(n_seeds: int = 10, seed: int = 2024) -> dict:
    grid = severity_grid(n_seeds=n_seeds, seed=seed)
    findings = {}
    for f, pairs in grid.items():
        slope, midpoint = fit_logistic(pairs)
        findings[f] = {"slope": round(slope, 6), "midpoint": round(midpoint, 8)}
    return {"version": VERSION, "levels": list(LEVELS), "n_seeds": n_seeds, "seed": seed, "findings": findings}


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--out", type=Path, default=Path(__file__).parent / "data" / "perception_calibration.json")
    args = ap.parse_args(argv)
    cal = calibrate(args.seeds, args.seed)
    args.out.write_text(json.dumps(cal, indent=2) + "\n")
    print(json.dumps(cal["findings"], indent=2))


if __name__ == "__main__":
    main()

"""Six-horizon lung malignancy risk trajectory.

The surrogate maps finding scores to a base logit and adds a fixed per-year
increment, ``y_t = sigmoid(b + sum_f c_f * s_f + delta * (t - 1))``, so every
trajectory is cumulative (non-decreasing) by construction. Coefficients are
frozen constants shipped in ``data/lung_surrogate.json``; precomputed scores
from an external model can be read from CSV instead.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import SchemaError, ValidationError
from .perception import FindingSet

T = 6
HORIZONS = tuple(range(1, T + 1))


@dataclass(frozen=True)
class SurrogateParams:
    intercept: float
    slope_per_year: float
    coefficients: dict[str, float]
    version: str = "custom"

    def __post_init__(self):
        if not self.slope_per_year > 0:
            raise ValidationError("per-year increment must be positive")

    @classmethod
    def from_json(cls, obj: dict) -> "SurrogateParams":
        try:
            return cls(float(obj["intercept"]), float(obj["slope_per_year"]),
                       {k: float(v) for k, v in obj["coefficients"].items()}, str(obj.get("version", "custom")))
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise SchemaError(f"malformed lung surrogate constants: {exc}") from exc


@lru_cache(maxsize=1)
def default_surrogate() -> SurrogateParams:
    text = resources.files("cardiopulm").joinpath("data/lung_surrogate.json").read_text()
    return SurrogateParams.from_json(json.loads(text))


@dataclass(frozen=True)
class RiskTrajectory:
    values: tuple[float, ...]
    source: str = "surrogate"

    def __post_init__(self):
        if len(self.values) != T:
            raise ValidationError(f"trajectory needs {T} values, got {len(self.values)}")
        for v in self.values:
            if not (isinstance(v, float) and 0.0 <= v <= 1.0):
                raise ValidationError(f"trajectory value {v!r} outside [0, 1]")
        if any(b < a for a, b in zip(self.values, self.values[1:])):
            raise ValidationError(f"non-monotone trajectory {self.values}")
        if self.source not in ("surrogate", "file"):
            raise ValidationError(f"unknown trajectory source {self.source!r}")

    @property
    def horizon_years(self) -> tuple[int, ...]:
        return HORIZONS

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def estimate_trajectory(findings: FindingSet, params: SurrogateParams | None = None) -> RiskTrajectory:
    p = params or default_surrogate()
    scores = findings.scores()
    base = p.intercept + sum(c * scores.get(f, 0.0) for f, c in p.coefficients.items())
    return RiskTrajectory(tuple(_sigmoid(base + p.slope_per_year * (t - 1)) for t in HORIZONS))


def load_trajectory_file(path, scan_id: str, repair: bool = False) -> RiskTrajectory:
    """Read the row for ``scan_id`` from a CSV with columns scan_id, y1..y6.

    Non-monotone rows are rejected unless ``repair`` is set, in which case the
    running maximum is taken.
    """
    path = Path(path)
    cols = [f"y{t}" for t in HORIZONS]
    try:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            missing = {"scan_id", *cols} - set(reader.fieldnames or ())
            if missing:
                raise SchemaError(f"{path}: missing columns {sorted(missing)}")
            row = next((r for r in reader if r["scan_id"] == scan_id), None)
    except OSError as exc:
        raise ValidationError(f"cannot read trajectory file {path}: {exc}") from exc
    if row is None:
        raise ValidationError(f"{path}: no trajectory for scan {scan_id!r}")
    try:
        values = [float(row[c]) for c in cols]
    except ValueError as exc:
        raise SchemaError(f"{path}: non-numeric trajectory for {scan_id}") from exc
    for c, v in zip(cols, values):
        if not 0.0 <= v <= 1.0:
            raise ValidationError(f"{path}: {c}={v} for {scan_id} outside [0, 1]")
    if repair:
        values = list(np.maximum.accumulate(values))
    elif any(b < a for a, b in zip(values, values[1:])):
        raise ValidationError(f"{path}: non-monotone trajectory for {scan_id}; pass repair=True to take the running max")
    return RiskTrajectory(tuple(float(v) for v in values), source="file")

"""Scored pulmonary findings from a standardized CT volume.

Each finding has a signature statistic measured inside the lungs and a
frozen logistic map ``score = sigmoid(slope * (stat - midpoint))`` onto
[0, 1]. The maps are fit against phantom severity grids by
:mod:`cardiopulm.calibration` and shipped in ``data/perception_calibration.json``.
Findings scoring at least 0.5 are retained for reasoning.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from importlib import resources

import numpy as np
from scipy import ndimage

from .errors import SchemaError, ValidationError
from .locator import CONN6
from .remote import post_json
from .volume import CtVolume, IntensityState

FINDINGS = ("opacity", "pleural_effusion", "fibrosis", "emphysema", "nodule")
RETENTION_THRESHOLD = 0.5

LAA_HU = -950.0
FIBROSIS_WINDOW = (-760.0, -540.0)
OPACITY_WINDOW = (-540.0, 200.0)
FLUID_WINDOW = (-25.0, 25.0)
PERIPHERY_WIDTH = 3
DEPENDENT_DEPTH = 8
NODULE_MAX_VOXELS = 60
NODULE_MIN_VOXELS = 5
SOLID_HU = -200.0  # above ground-glass, below soft tissue


class FindingSource(str, Enum):
    RULE_BASED = "rule_based"
    EXTERNAL_SERVICE = "external_service"
    FILE = "file"


@dataclass(frozen=True)
class FindingSet:
    findings: tuple[tuple[str, float], ...]
    retained: tuple[str, ...] = field(default=())
    source: FindingSource = FindingSource.RULE_BASED

    def __post_init__(self):
        names = [n for n, _ in self.findings]
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate finding names in {names}")
        for name, score in self.findings:
            if not (isinstance(score, (int, float)) and 0.0 <= score <= 1.0):
                raise ValidationError(f"score for {name} outside [0, 1]: {score}")
        expected = tuple(n for n, s in self.findings if s >= RETENTION_THRESHOLD)
        if tuple(self.retained) != expected:
            raise ValidationError(f"retained {self.retained} disagrees with threshold view {expected}")
        object.__setattr__(self, "source", FindingSource(self.source))

    def score(self, name: str) -> float:
        return dict(self.findings).get(name, 0.0)

    def scores(self) -> dict[str, float]:
        return dict(self.findings)

    def to_json(self) -> dict:
        return {"findings": [{"name": n, "score": s} for n, s in self.findings], "source": self.source.value}

    @classmethod
    def from_json(cls, obj, source=FindingSource.FILE) -> "FindingSet":
        pairs = _parse_findings(obj, FINDINGS)
        return filter_findings(pairs, source=obj.get("source", source))


def filter_findings(raw, source=FindingSource.RULE_BASED, alphabet=FINDINGS) -> FindingSet:
    """Validate ``(name, score)`` pairs and apply the >= 0.5 retention rule."""
    pairs = []
    seen = set()
    for item in raw:
        try:
            name, score = item
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"finding must be a (name, score) pair, got {item!r}") from exc
        if alphabet is not None and name not in alphabet:
            raise ValidationError(f"unknown finding {name!r}")
        if name in seen:
            raise ValidationError(f"duplicate finding {name!r}")
        if isinstance(score, bool) or not isinstance(score, (int, float)) or not 0.0 <= score <= 1.0:
            raise ValidationError(f"score for {name} outside [0, 1]: {score!r}")
        seen.add(name)
        pairs.append((str(name), float(score)))
    retained = tuple(n for n, s in pairs if s >= RETENTION_THRESHOLD)
    return FindingSet(tuple(pairs), retained, FindingSource(source))


def _parse_findings(obj, alphabet) -> list[tuple[str, float]]:
    if not isinstance(obj, dict) or not isinstance(obj.get("findings"), list):
        raise SchemaError("findings payload must be an object with a 'findings' list")
    out = []
    for entry in obj["findings"]:
        if not isinstance(entry, dict) or "name" not in entry or "score" not in entry:
            raise SchemaError(f"finding entry needs name and score: {entry!r}")
        score = entry["score"]
        if isinstance(score, bool) or not isinstance(score, (int, float)) or not math.isfinite(score):
            raise SchemaError(f"non-numeric score in {entry!r}")
        if not 0.0 <= score <= 1.0:
            raise SchemaError(f"score out of range in {entry!r}")
        out.append((entry["name"], float(score)))
    return out


# ---------------------------------------------------------------------------
# signature statistics
# ---------------------------------------------------------------------------


def _crop(mask: np.ndarray, pad: int) -> tuple[slice, ...]:
    idx = np.nonzero(mask.any(axis=(1, 2)))[0], np.nonzero(mask.any(axis=(0, 2)))[0], np.nonzero(mask.any(axis=(0, 1)))[0]
    return tuple(slice(max(0, int(i[0]) - pad), min(n, int(i[-1]) + 1 + pad)) for i, n in zip(idx, mask.shape))


def _lung_stats(vox: np.ndarray, lung: np.ndarray) -> dict[str, float]:
    box = _crop(lung, DEPENDENT_DEPTH + 1)
    v = vox[box]
    env = ndimage.binary_fill_holes(lung[box], structure=CONN6)
    n_env = int(env.sum())
    band = env & ~ndimage.binary_erosion(env, iterations=PERIPHERY_WIDTH, border_value=0)

    below = np.zeros_like(env)
    for d in range(1, DEPENDENT_DEPTH + 1):
        below[:, d:, :] |= env[:, :-d, :]
    below &= ~env
    columns = int(env.any(axis=1).sum())

    solid = (v > SOLID_HU) & env
    labels, n = ndimage.label(solid, structure=CONN6)
    nodule_mask = np.zeros_like(env)
    nodules = 0
    if n:
        sizes = np.bincount(labels.ravel())
        compact = (sizes >= NODULE_MIN_VOXELS) & (sizes <= NODULE_MAX_VOXELS)
        compact[0] = False
        nodules = int(compact.sum())
        nodule_mask = compact[labels]

    ve = v[env & ~nodule_mask]
    vb = v[band]
    vd = v[below]
    opacified = float(np.count_nonzero((ve >= OPACITY_WINDOW[0]) & (ve <= OPACITY_WINDOW[1])))
    return {
        "n_env": n_env,
        "laa": float(np.count_nonzero(ve < LAA_HU)),
        "aerated": float(ve.size) - opacified,
        "opacity": opacified,
        "fib": float(np.count_nonzero((vb >= FIBROSIS_WINDOW[0]) & (vb <= FIBROSIS_WINDOW[1]))),
        "n_band": float(vb.size),
        "fluid": float(np.count_nonzero((vd >= FLUID_WINDOW[0]) & (vd <= FLUID_WINDOW[1]))),
        "columns": float(columns),
        "nodules": float(nodules),
    }


def signature_statistics(v: CtVolume, lungs) -> dict[str, float]:
    """Raw per-finding statistics pooled over both lungs.

    * emphysema: fraction of aerated lung voxels (opacities and nodules
      excluded) below -950 HU;
    * pleural_effusion: fluid-window voxels in the 8 voxels posterior to the
      lungs per lung column (a layer-thickness surrogate, in voxels);
    * fibrosis: fraction of the peripheral lung band in [-760, -540] HU;
    * opacity: fraction of lung voxels in [-540, 200] HU, nodules excluded;
    * nodule: number of compact solid blobs (above -200 HU, 5-60 voxels)
      inside the lungs.
    """
    if lungs is None or len(lungs) != 2 or any(m is None or not np.any(m) for m in lungs):
        raise ValidationError("score_findings needs a pair of non-empty lung masks")
    if v.intensity_state is IntensityState.NORMALIZED:
        raise ValidationError("score_findings needs HU intensities, got normalized volume")
    parts = [_lung_stats(v.voxels, m) for m in lungs]
    tot = {k: sum(p[k] for p in parts) for k in parts[0]}
    return {
        "opacity": tot["opacity"] / tot["n_env"],
        "pleural_effusion": tot["fluid"] / max(tot["columns"], 1.0),
        "fibrosis": tot["fib"] / max(tot["n_band"], 1.0),
        "emphysema": tot["laa"] / max(tot["aerated"], 1.0),
        "nodule": tot["nodules"],
    }


@lru_cache(maxsize=1)
def load_calibration() -> dict:
    text = resources.files("cardiopulm").joinpath("data/perception_calibration.json").read_text()
    return json.loads(text)


def calibrated_score(name: str, stat: float, calibration: dict | None = None) -> float:
    cal = (calibration or load_calibration())["findings"][name]
    z = cal["slope"] * (stat - cal["midpoint"])
    return float(1.0 / (1.0 + math.exp(-max(min(z, 60.0), -60.0))))


def score_findings(v: CtVolume, lungs, calibration: dict | None = None) -> FindingSet:
    stats = signature_statistics(v, lungs)
    return filter_findings([(f, calibrated_score(f, stats[f], calibration)) for f in FINDINGS])


def fetch_findings_remote(scan_ref: str, endpoint: str, volume_ref: str | None = None, timeout: float = 30.0) -> FindingSet:
    """POST ``{scan_id, volume_ref}`` to ``endpoint`` and validate the findings reply."""
    obj = post_json(endpoint, {"scan_id": scan_ref, "volume_ref": volume_ref or scan_ref}, timeout, scan_ref)
    try:
        return filter_findings(_parse_findings(obj, FINDINGS), source=FindingSource.EXTERNAL_SERVICE)
    except SchemaError:
        raise
    except ValidationError as exc:  # out-of-range or unknown entries are a protocol violation, never clamped
        raise SchemaError(f"findings reply for {scan_ref}: {exc}") from exc

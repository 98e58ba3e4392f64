"""Synthetic chest CT phantoms and labelled cohorts with a known risk model.

Phantom anatomy (voxel units, axis order as in :mod:`cardiopulm.volume`):

* air outside an elliptic-cylinder body of soft tissue (40 HU);
* a heart ellipsoid (40 HU) at ``heart_center`` with radii ``heart_axes``,
  wrapped in a 3-voxel pericardial shell;
* two lung ellipsoids (-850 HU) placed symmetrically left and right of the
  heart, so the mediastinum between them is centred on the heart.

Planted signatures, each drawn from a random stream that does not depend on
the severity (higher severity always adds to the lower-severity pattern):

* emphysema: lung-core voxels set to -980 HU, fraction ``0.45 * severity``;
* fibrosis: voxels in the 3-voxel peripheral lung band set to -640 HU,
  fraction ``0.6 * severity``;
* effusion: dependent (posterior) lung layer at 10 HU, thickness
  ``0.25 * severity`` of the lung AP radius;
* opacity: up to 6 blobs, 40 HU core with a -450 HU ground-glass halo;
* nodule: up to 8 compact 55 HU spheres of radius 1.8;
* calcification: up to 24 small >= 400 HU blobs in the outer heart wall;
* pericardial fat: shell voxels at -100 HU with the given fraction.

Gaussian noise (sigma 10 HU) is added and values are rounded to integer HU.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .volume import CtVolume, IntensityState

FINDINGS = ("opacity", "pleural_effusion", "fibrosis", "emphysema", "nodule")
DEFAULT_DIMS = (96, 96, 96)
DEFAULT_SPACING_MM = 1.5

HU_AIR = -1000.0
HU_TISSUE = 40.0
HU_LUNG = -850.0
HU_EMPHYSEMA = -980.0
HU_FIBROSIS = -640.0
HU_FLUID = 10.0
HU_OPACITY_CORE = 40.0
HU_OPACITY_HALO = -450.0
HU_NODULE = 55.0
HU_FAT = -100.0
NOISE_SD = 10.0

SHELL_WIDTH = 3
PERIPHERY_WIDTH = 3
LUNG_GAP = 4
MAX_OPACITIES = 6
MAX_NODULES = 8
OPACITY_RADIUS = 3.0
OPACITY_HALO_SCALE = 1.6
NODULE_RADIUS = 1.8
MAX_CALCIFICATIONS = 24

# Drivers of the ground-truth risk, in weight-vector order.
DRIVERS = FINDINGS + (
    "calcification_burden",
    "pericardial_fat_fraction",
    "pulmonary_hypertension",
    "right_ventricular_overload",
    "impaired_myocardial_perfusion",
)


@dataclass
class PhantomSpec:
    seed: int
    dims: tuple[int, int, int] = DEFAULT_DIMS
    pathology_levels: dict[str, float] = field(default_factory=lambda: {f: 0.0 for f in FINDINGS})
    heart_center: tuple[float, float, float] | None = None
    heart_axes: tuple[float, float, float] | None = None
    calcification_burden: float = 0.0
    pericardial_fat_fraction: float = 0.0
    spacing_mm: float = DEFAULT_SPACING_MM
    include_lungs: bool = True

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        levels = {f: 0.0 for f in FINDINGS}
        for name, value in dict(self.pathology_levels).items():
            if name not in levels:
                raise ValidationError(f"unknown pathology {name!r}")
            levels[name] = float(value)
        self.pathology_levels = levels
        if self.heart_center is None:
            self.heart_center = tuple((d - 1) / 2.0 for d in self.dims)
        if self.heart_axes is None:
            self.heart_axes = default_heart_axes(self.dims)
        self.heart_center = tuple(float(c) for c in self.heart_center)
        self.heart_axes = tuple(float(a) for a in self.heart_axes)
        self.validate()

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 32:
            raise ValidationError(f"phantom dims must be >= 32 per axis, got {self.dims}")
        for name, level in self.pathology_levels.items():
            if not 0.0 <= level <= 1.0:
                raise ValidationError(f"severity for {name} must be in [0, 1], got {level}")
        if not self.calcification_burden >= 0.0:
            raise ValidationError("calcification_burden must be >= 0")
        if not 0.0 <= self.pericardial_fat_fraction <= 1.0:
            raise ValidationError("pericardial_fat_fraction must be in [0, 1]")
        if not self.spacing_mm > 0:
            raise ValidationError("spacing_mm must be > 0")
        if any(a <= 0 for a in self.heart_axes):
            raise ValidationError("heart_axes must be positive")
        # heart plus its fat shell must sit inside the volume
        for c, a, n in zip(self.heart_center, self.heart_axes, self.dims):
            if c - a - SHELL_WIDTH < 0 or c + a + SHELL_WIDTH > n - 1:
                raise ValidationError(f"heart ellipsoid at {self.heart_center} does not fit in dims {self.dims}")

    def to_json(self) -> dict:
        out = asdict(self)
        out["dims"] = list(self.dims)
        out["heart_center"] = list(self.heart_center)
        out["heart_axes"] = list(self.heart_axes)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "PhantomSpec":
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ValidationError(f"malformed PhantomSpec: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "PhantomSpec":
        return cls.from_json(json.loads(Path(path).read_text()))


def default_heart_axes(dims) -> tuple[float, float, float]:
    nx, ny, nz = dims
    return (0.125 * nx, 0.14 * ny, 0.12 * nz)


def lung_geometry(spec: PhantomSpec) -> list[tuple[tuple[float, ...], tuple[float, ...]]]:
    """(center, radii) of the two lung ellipsoids, left then right."""
    nx, ny, nz = spec.dims
    cx, cy, cz = spec.heart_center
    ax = spec.heart_axes[0]
    radii = (0.105 * nx, 0.20 * ny, 0.32 * nz)
    offset = ax + SHELL_WIDTH + LUNG_GAP + radii[0]
    return [((cx - offset, cy, cz), radii), ((cx + offset, cy, cz), radii)]


def _rng(seed: int, stream: int) -> np.random.Generator:
    # Counter-based generator keyed on (seed, stream): order of generation never matters.
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, stream, int(seed) >> 32])))


def _grid(dims):
    return np.ogrid[: dims[0], : dims[1], : dims[2]]


def _ellipsoid(dims, center, radii, grid=None) -> np.ndarray:
    x, y, z = grid if grid is not None else _grid(dims)
    return ((x - center[0]) / radii[0]) ** 2 + ((y - center[1]) / radii[1]) ** 2 + ((z - center[2]) / radii[2]) ** 2 <= 1.0


def _bbox(mask: np.ndarray, pad: int = 0) -> tuple[slice, ...]:
    idx = np.nonzero(mask)
    return tuple(slice(max(0, int(i.min()) - pad), min(n, int(i.max()) + 1 + pad)) for i, n in zip(idx, mask.shape))


def inner_band(mask: np.ndarray, width: int) -> np.ndarray:
    """Voxels of ``mask`` within ``width`` 6-connected steps of its boundary."""
    return mask & ~ndimage.binary_erosion(mask, iterations=width, border_value=0)


def body_geometry(dims) -> tuple[tuple[float, float], tuple[float, float]]:
    nx, ny, _ = dims
    return ((nx - 1) / 2.0, (ny - 1) / 2.0), (0.48 * nx, 0.44 * ny)


def heart_masks(spec: PhantomSpec, grid=None) -> tuple[np.ndarray, np.ndarray]:
    """Heart ellipsoid and its pericardial shell (full-volume boolean masks)."""
    heart = _ellipsoid(spec.dims, spec.heart_center, spec.heart_axes, grid)
    box = _bbox(heart, pad=SHELL_WIDTH + 1)
    shell = np.zeros_like(heart)
    sub = heart[box]
    shell[box] = ndimage.binary_dilation(sub, iterations=SHELL_WIDTH) & ~sub
    return heart, shell


def pericardial_shell_voxels(spec: PhantomSpec) -> int:
    return int(heart_masks(spec)[1].sum())


def _sample_centers(rng, candidates: np.ndarray, n: int) -> list[tuple[int, int, int]]:
    idx = np.argwhere(candidates)
    if len(idx) == 0:
        return []
    picks = rng.integers(0, len(idx), size=n)
    return [tuple(int(v) for v in idx[p]) for p in picks]


def _sample_spaced(rng, candidates: np.ndarray, n: int, avoid, avoid_dist: float,
                   spacing: float) -> list[tuple[int, int, int]]:
    """Sequential draws from ``candidates`` with exclusion balls around
    ``avoid`` and around each accepted centre."""
    idx = np.argwhere(candidates)
    for a in avoid:
        idx = idx[((idx - np.asarray(a)) ** 2).sum(axis=1) > avoid_dist ** 2]
    out = []
    for _ in range(n):
        if len(idx) == 0:
            break
        c = idx[rng.integers(0, len(idx))]
        out.append(tuple(int(v) for v in c))
        idx = idx[((idx - c) ** 2).sum(axis=1) > spacing ** 2]
    return out


def _sq_dist(center, radius, shape) -> tuple[np.ndarray, tuple[slice, ...]]:
    """Squared distance to ``center`` over the bounding cube of a ball."""
    r = int(math.ceil(radius))
    lo = [max(0, c - r) for c in center]
    hi = [min(n, c + r + 1) for c, n in zip(center, shape)]
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    x, y, z = np.ogrid[sl]
    return (x - center[0]) ** 2 + (y - center[1]) ** 2 + (z - center[2]) ** 2, sl


def generate_phantom(spec: PhantomSpec, subject_id: str = "", scan_id: str = "") -> CtVolume:
    spec.validate()
    dims = spec.dims
    grid = _grid(dims)
    levels = spec.pathology_levels
    vol = np.full(dims, HU_AIR, dtype=np.float32)

    (bx, by), (rx, ry) = body_geometry(dims)
    x, y, _ = grid
    body = ((x - bx) / rx) ** 2 + ((y - by) / ry) ** 2 <= 1.0
    body = np.broadcast_to(body, dims)
    vol[body] = HU_TISSUE

    heart, shell = heart_masks(spec, grid)
    vol[heart] = HU_TISSUE

    fat_rng = _rng(spec.seed, 1)
    shell_idx = np.nonzero(shell)
    u_fat = fat_rng.random(len(shell_idx[0]))
    fat = u_fat < spec.pericardial_fat_fraction
    vol[tuple(i[fat] for i in shell_idx)] = HU_FAT

    _plant_calcification(vol, spec, heart)

    if spec.include_lungs:
        chest_wall = ((x - bx) / (rx - 4)) ** 2 + ((y - by) / (ry - 4)) ** 2 <= 1.0
        for side, (center, radii) in enumerate(lung_geometry(spec)):
            lung = _ellipsoid(dims, center, radii, grid) & chest_wall
            if lung.any():
                _plant_lung(vol, lung, center, radii, levels, spec.seed, side)

    noise = _rng(spec.seed, 0).standard_normal(dims, dtype=np.float32) * np.float32(NOISE_SD)
    vol += noise
    np.rint(vol, out=vol)
    return CtVolume(voxels=vol, spacing=(spec.spacing_mm,) * 3, intensity_state=IntensityState.RAW_HU,
                    subject_id=subject_id, scan_id=scan_id)


def _plant_calcification(vol: np.ndarray, spec: PhantomSpec, heart: np.ndarray) -> None:
    rng = _rng(spec.seed, 2)
    box = _bbox(heart, pad=1)
    wall = inner_band(heart[box], 2)
    centers = _sample_centers(rng, wall, MAX_CALCIFICATIONS)
    peaks = rng.uniform(400.0, 700.0, size=MAX_CALCIFICATIONS)
    n = min(MAX_CALCIFICATIONS, int(round(spec.calcification_burden * MAX_CALCIFICATIONS)))
    sub = vol[box]
    for c, peak in list(zip(centers, peaks))[:n]:
        d2, sl = _sq_dist(c, 1.2, sub.shape)
        ball = d2 <= 1.44
        region = sub[sl]
        region[ball] = np.maximum(region[ball], peak)


def _plant_lung(vol, lung, center, radii, levels, seed, side) -> None:
    box = _bbox(lung, pad=1)
    lm = lung[box]
    sub = vol[box]
    sub[lm] = HU_LUNG
    rng = _rng(seed, 10 + side)

    periphery = inner_band(lm, PERIPHERY_WIDTH)
    core = lm & ~periphery

    u = rng.random(lm.shape, dtype=np.float32)
    sub[core & (u < 0.45 * levels["emphysema"])] = HU_EMPHYSEMA
    sub[periphery & (u < 0.6 * levels["fibrosis"])] = HU_FIBROSIS

    # Blob centres: deep inside the lung and away from the dependent layer so
    # opacities and nodules stay enclosed by aerated lung.
    yy = np.arange(box[1].start, box[1].stop)[None, :, None]
    anterior = yy < center[1] + 0.4 * radii[1]
    deep_op = ndimage.binary_erosion(lm, iterations=int(math.ceil(OPACITY_HALO_SCALE * OPACITY_RADIUS)) + 1) & anterior
    deep_nod = ndimage.binary_erosion(lm, iterations=4) & anterior
    # opacity sites keep apart so the opacified volume is not eaten by overlap;
    # nodules keep clear of every opacity site and of each other so blobs never
    # merge, whatever the severities
    halo = OPACITY_HALO_SCALE * OPACITY_RADIUS
    op_centers = _sample_spaced(rng, deep_op, MAX_OPACITIES, (), 0.0, 2 * halo + 0.5)
    keep_out = halo + NODULE_RADIUS + 2.0
    nod_centers = _sample_spaced(rng, deep_nod, MAX_NODULES, op_centers, keep_out, 2 * NODULE_RADIUS + 2.0)

    # whole blobs for the integer part of level * MAX_OPACITIES, then a
    # ground-glass halo whose volume is proportional to the remainder, so the
    # opacified volume grows continuously with severity
    units = levels["opacity"] * MAX_OPACITIES
    n_full = min(int(units), MAX_OPACITIES)
    for i, c in enumerate(op_centers):
        if i < n_full:
            halo_r, core_r = OPACITY_HALO_SCALE * OPACITY_RADIUS, OPACITY_RADIUS
        elif i == n_full and units > n_full:
            halo_r, core_r = OPACITY_HALO_SCALE * OPACITY_RADIUS * (units - n_full) ** (1 / 3), 0.0
        else:
            break
        d2, sl = _sq_dist(c, halo_r, sub.shape)
        region = sub[sl]
        inside = lm[sl]
        region[(d2 <= halo_r * halo_r) & inside & (region < HU_OPACITY_HALO)] = HU_OPACITY_HALO
        if core_r > 0:
            region[(d2 <= core_r * core_r) & inside] = HU_OPACITY_CORE

    # floor so the count reaches half of MAX_NODULES exactly at severity 0.5
    n_nod = int(math.floor(levels["nodule"] * MAX_NODULES + 1e-9))
    for c in nod_centers[:n_nod]:
        d2, sl = _sq_dist(c, NODULE_RADIUS, sub.shape)
        region = sub[sl]
        region[(d2 <= NODULE_RADIUS ** 2) & lm[sl]] = HU_NODULE

    thickness = 0.25 * levels["pleural_effusion"] * radii[1]
    if thickness > 0:
        # dither the partial row so the layer depth is continuous in severity
        depth = yy - (center[1] + radii[1] - thickness)
        layer = lm & ((depth > 0) | ((depth > -1) & (rng.random(lm.shape) < 1 + depth)))
        sub[layer] = HU_FLUID


# ---------------------------------------------------------------------------
# cohorts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RiskWeights:
    """Ground-truth logistic risk model over :data:`DRIVERS`."""

    weights: tuple[float, ...]
    bias: float
    mortality_factor: float

    def __post_init__(self):
        if len(self.weights) != len(DRIVERS):
            raise ValidationError(f"risk weights need {len(DRIVERS)} entries, got {len(self.weights)}")
        if all(w == 0 for w in self.weights):
            raise ValidationError("degenerate risk weights: all zero")
        if not 0.0 < self.mortality_factor <= 1.0:
            raise ValidationError("mortality_factor must be in (0, 1]")

    def as_dict(self) -> dict:
        return {"weights": dict(zip(DRIVERS, self.weights)), "bias": self.bias,
                "mortality_factor": self.mortality_factor}

    @classmethod
    def from_dict(cls, obj: dict) -> "RiskWeights":
        w = obj["weights"]
        if isinstance(w, dict):
            unknown = set(w) - set(DRIVERS)
            if unknown:
                raise ValidationError(f"unknown risk drivers {sorted(unknown)}")
            w = [float(w.get(d, 0.0)) for d in DRIVERS]
        return cls(tuple(float(v) for v in w), float(obj["bias"]), float(obj["mortality_factor"]))


# Bias and mortality factor are tuned (see tests/test_phantom.py::test_default_prevalence)
# so screening prevalence is ~20% and mortality ~3.4%.
DEFAULT_RISK_WEIGHTS = RiskWeights(
    weights=(
        0.5,   # opacity
        0.5,   # pleural_effusion
        0.5,   # fibrosis
        0.8,   # emphysema
        0.4,   # nodule
        6.0,   # calcification_burden
        7.0,   # pericardial_fat_fraction
        1.6,   # pulmonary_hypertension
        5.0,   # right_ventricular_overload
        2.0,   # impaired_myocardial_perfusion
    ),
    bias=-8.90,
    mortality_factor=0.275,
)

RETENTION_THRESHOLD = 0.5


def mechanism_drivers(levels: dict[str, float]) -> tuple[float, float, float]:
    """Level-2 mechanism intensities implied by pathology severities.

    Only severities at or above the retention threshold propagate. Written
    out explicitly (not via the reasoning engine) so the oracle stays
    independent of the code it is used to evaluate.
    """
    g = {f: (s if s >= RETENTION_THRESHOLD else 0.0) for f, s in levels.items()}
    hypoxemia = max(g["opacity"], g["emphysema"])
    pulmonary_hypertension = hypoxemia
    rv_overload = min(g["pleural_effusion"], hypoxemia)
    perfusion = g["fibrosis"]
    return pulmonary_hypertension, rv_overload, perfusion


def driver_vector(spec: PhantomSpec) -> np.ndarray:
    lv = spec.pathology_levels
    return np.array(
        [lv[f] for f in FINDINGS]
        + [spec.calcification_burden, spec.pericardial_fat_fraction]
        + list(mechanism_drivers(lv)),
        dtype=np.float64,
    )


def true_risk(spec: PhantomSpec, weights: RiskWeights = DEFAULT_RISK_WEIGHTS) -> float:
    z = float(np.dot(weights.weights, driver_vector(spec)) + weights.bias)
    return 1.0 / (1.0 + math.exp(-z))


@dataclass
class CohortRecord:
    subject_id: str
    scan_ids: list[str]
    true_risk: float
    label_screening: int
    label_mortality: int
    spec: PhantomSpec
    scan_seeds: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 < self.true_risk < 1.0:
            raise ValidationError("true_risk must lie in (0, 1)")
        if self.label_mortality and not self.label_screening:
            raise ValidationError("mortality label requires screening label")
        if not self.scan_seeds:
            self.scan_seeds = [self.spec.seed] * len(self.scan_ids)

    def scan_spec(self, k: int) -> PhantomSpec:
        return PhantomSpec(**{**self.spec.__dict__, "seed": self.scan_seeds[k]})

    def label(self, task: str) -> int:
        if task == "screening":
            return self.label_screening
        if task == "mortality":
            return self.label_mortality
        raise ValidationError(f"unknown task {task!r}")


def _sample_spec(rng: np.random.Generator, seed: int, dims) -> PhantomSpec:
    levels = {f: float(rng.beta(0.8, 1.3)) for f in FINDINGS}
    burden = 0.0 if rng.random() < 0.35 else float(rng.beta(1.3, 2.2))
    fat = float(rng.beta(2.0, 5.0))
    base_axes = default_heart_axes(dims)
    axes = tuple(a * float(rng.uniform(0.92, 1.08)) for a in base_axes)
    center = tuple((n - 1) / 2.0 + float(rng.uniform(-4.0, 4.0)) for n in dims)
    return PhantomSpec(seed=seed, dims=dims, pathology_levels=levels, heart_center=center,
                       heart_axes=axes, calcification_burden=burden, pericardial_fat_fraction=fat)


def sample_cohort(
    n_subjects: int,
    seed: int,
    risk_weights: RiskWeights | None = None,
    dims=DEFAULT_DIMS,
    scans_per_subject: int | tuple[int, int] = 1,
) -> list[CohortRecord]:
    """Draw subjects, their phantom specs and outcome labels.

    Volumes are not materialized here; call :func:`generate_phantom` on
    ``record.scan_spec(k)`` (or :func:`iter_scan_volumes`) as needed.
    ``scans_per_subject`` may be an int or an inclusive (lo, hi) range.
    """
    if n_subjects < 10:
        raise ValidationError(f"cohort needs >= 10 subjects, got {n_subjects}")
    weights = risk_weights or DEFAULT_RISK_WEIGHTS
    dims = tuple(int(d) for d in dims)
    records = []
    for i in range(n_subjects):
        rng = _rng(seed, 1_000_000 + i)
        scan_seed0 = int(rng.integers(0, 2**62))
        spec = _sample_spec(rng, scan_seed0, dims)
        risk = true_risk(spec, weights)
        screening = int(rng.random() < risk)
        mort_draw = rng.random()
        mortality = int(screening and mort_draw < risk * weights.mortality_factor)
        if isinstance(scans_per_subject, int):
            n_scans = scans_per_subject
        else:
            n_scans = int(rng.integers(scans_per_subject[0], scans_per_subject[1] + 1))
        seeds = [scan_seed0] + [int(rng.integers(0, 2**62)) for _ in range(n_scans - 1)]
        sid = f"S{i:05d}"
        records.append(
            CohortRecord(
                subject_id=sid,
                scan_ids=[f"{sid}_T{k}" for k in range(n_scans)],
                true_risk=risk,
                label_screening=screening,
                label_mortality=mortality,
                spec=spec,
                scan_seeds=seeds,
            )
        )
    return records


def iter_scan_volumes(records):
    for rec in records:
        for k, scan_id in enumerate(rec.scan_ids):
            yield rec, scan_id, generate_phantom(rec.scan_spec(k), rec.subject_id, scan_id)


def bayes_optimal_auc(cohort: list[CohortRecord], task: str) -> float:
    """AUC of the generative risk against realized labels (subject level)."""
    from .evaluation import auc

    scores = [r.true_risk for r in cohort]
    labels = [r.label(task) for r in cohort]
    return auc(scores, labels)

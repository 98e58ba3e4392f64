"""Stage orchestration over a run directory.

Layout::

    <run-dir>/config.json             resolved configuration
    <run-dir>/manifest.json           manifest of record (hashes, seeds, versions)
    <run-dir>/cache/<stage>/<key>/    stage outputs, content-addressed
    <run-dir>/reports/                copies of the headline reports and figures

A stage key hashes the config sections the stage reads, the keys of its
upstream stages and the versions of any frozen constants it uses, so a config
change can never pick up a stale cache. A stage directory counts as done only
once its ``_complete`` marker exists.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .cardiac import CHANNELS, read_feature_csv, write_feature_csv
from .errors import SchemaError, UpstreamMissingError, ValidationError
from .evaluation import TASKS, VARIANTS, AblationConfig, FeatureTable, comparison_table, evaluate, fit_variant, \
    run_ablation, split_subjects
from .fusion import PARAMS_FORMAT, TrainConfig, load_params, predict_batch, save_params
from .io import load_volume, save_volume
from .locator import body_mask, lung_mask, mediastinal_centroid, roi_around
from .lungrisk import RiskTrajectory, default_surrogate, estimate_trajectory, load_trajectory_file
from .perception import FINDINGS, FindingSet, fetch_findings_remote, load_calibration, score_findings
from .phantom import PhantomSpec, RiskWeights, generate_phantom, sample_cohort
from .reasoning import ReasoningTrace, fetch_reasoning_remote, load_knowledge_base, reason
from .volume import CtVolume, RoiBox, crop_roi, standardize

log = logging.getLogger(__name__)

DEFAULT_CONFIG = {
    "seed": 0,
    "workers": 1,
    "task": "screening",
    "variant": "cardiac+lung+reasoning",
    "cohort": {
        "n_subjects": 2000,
        "dims": [96, 96, 96],
        "scans_per_subject": 1,
        "risk_weights": None,
        "manifest": None,
        "write_volumes": False,
    },
    "preprocess": {"target_mm": 1.5},
    "locate": {"roi_extent": [48, 48, 48]},
    "findings": {"source": "rule_based", "endpoint": None, "file": None},
    "reason": {"kb_path": None, "endpoint": None},
    "lungrisk": {"source": "surrogate", "file": None, "repair": False},
    "train": {},
    "evaluate": {"n_boot": 1000, "aggregate": "max", "ci_method": "auto"},
    "ablate": {"variants": list(VARIANTS), "tasks": list(TASKS)},
    "explain": {"top_k": 3, "scan_id": None},
}

STAGE_ORDER = ("simulate", "preprocess", "locate", "findings", "reason", "lungrisk", "features",
               "train", "evaluate", "ablate", "explain")
MANIFEST_COLUMNS = ("subject_id", "scan_id", "volume_path", "spec_path", "label_screening", "label_mortality",
                    "true_risk")


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


def _merge(base: dict, override: dict, where: str = "config") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            raise SchemaError(f"unknown key {where}.{k}")
        if isinstance(base[k], dict) and k != "train":
            if not isinstance(v, dict):
                raise SchemaError(f"{where}.{k} must be an object")
            out[k] = _merge(base[k], v, f"{where}.{k}")
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults <- config file <- CLI flags. Environment variables are ignored."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise SchemaError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise SchemaError("config must be a JSON object")
        cfg = _merge(cfg, user)
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = v
    _validate_config(cfg)
    return cfg


def _validate_config(cfg: dict) -> None:
    if cfg["task"] not in TASKS:
        raise SchemaError(f"task must be one of {TASKS}, got {cfg['task']!r}")
    if cfg["variant"] not in VARIANTS:
        raise SchemaError(f"variant must be one of {list(VARIANTS)}, got {cfg['variant']!r}")
    if not isinstance(cfg["workers"], int) or cfg["workers"] < 1:
        raise SchemaError("workers must be a positive integer")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise SchemaError("seed must be a non-negative integer")
    if not isinstance(cfg["train"], dict):
        raise SchemaError("train must be an object")
    TrainConfig.from_dict({"seed": cfg["seed"], **cfg["train"]})
    for v in cfg["ablate"]["variants"]:
        if v not in VARIANTS:
            raise SchemaError(f"unknown ablation variant {v!r}")
    if cfg["findings"]["source"] not in ("rule_based", "external_service", "file"):
        raise SchemaError(f"unknown findings source {cfg['findings']['source']!r}")
    if cfg["lungrisk"]["source"] not in ("surrogate", "file"):
        raise SchemaError(f"unknown lungrisk source {cfg['lungrisk']['source']!r}")
    if cfg["evaluate"]["ci_method"] not in ("auto", "subject", "stratified"):
        raise SchemaError(f"unknown evaluate.ci_method {cfg['evaluate']['ci_method']!r}")
    if len(cfg["locate"]["roi_extent"]) != 3:
        raise SchemaError("locate.roi_extent needs three integers")


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def digest(obj) -> str:
    return hashlib.sha256(canonical(obj).encode()).hexdigest()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _dump_json(path: Path, obj) -> None:
    _write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# run context
# ---------------------------------------------------------------------------


@dataclass
class ScanRow:
    subject_id: str
    scan_id: str
    volume_path: str
    spec_path: str
    label_screening: int
    label_mortality: int
    true_risk: float | None = None

    def label(self, task: str) -> int:
        return self.label_screening if task == "screening" else self.label_mortality


@dataclass
class Subject:
    subject_id: str
    label_screening: int
    label_mortality: int

    def label(self, task: str) -> int:
        return self.label_screening if task == "screening" else self.label_mortality


class Run:
    def __init__(self, run_dir, cfg: dict):
        self.dir = Path(run_dir)
        self.cfg = cfg
        self.dir.mkdir(parents=True, exist_ok=True)
        self._kb = None
        self._keys: dict[str, str] = {}

    # -- versions and keys ---------------------------------------------------

    @property
    def kb(self):
        if self._kb is None:
            self._kb = load_knowledge_base(self.cfg["reason"]["kb_path"])
        return self._kb

    def versions(self) -> dict:
        return {
            "package": __version__,
            "kb": self.kb.version,
            "perception_calibration": load_calibration()["version"],
            "lung_surrogate": default_surrogate().version,
            "params_format": PARAMS_FORMAT,
            "cardiac_channels": len(CHANNELS),
        }

    def train_config(self) -> TrainConfig:
        t = dict(self.cfg["train"])
        t.setdefault("seed", self.cfg["seed"])
        return TrainConfig.from_dict(t)

    def key(self, stage: str, task: str | None = None, variant: str | None = None, scan: str | None = None) -> str:
        memo = (stage, task, variant, scan)
        if memo in self._keys:
            return self._keys[memo]
        c, v = self.cfg, self.versions()
        if stage == "simulate":
            cohort = dict(c["cohort"])
            if cohort["manifest"]:
                cohort["manifest_sha256"] = file_sha256(cohort["manifest"])
            parts = {"cohort": cohort, "seed": c["seed"]}
        elif stage == "preprocess":
            parts = {"up": self.key("simulate"), "pre": c["preprocess"]}
        elif stage == "locate":
            parts = {"up": self.key("preprocess"), "locate": c["locate"]}
        elif stage == "findings":
            parts = {"up": self.key("preprocess"), "findings": c["findings"], "cal": v["perception_calibration"]}
        elif stage == "reason":
            kb_hash = file_sha256(c["reason"]["kb_path"]) if c["reason"]["kb_path"] else v["kb"]
            parts = {"up": self.key("findings"), "reason": c["reason"], "kb": kb_hash}
        elif stage == "lungrisk":
            parts = {"up": self.key("findings"), "lungrisk": c["lungrisk"], "sur": v["lung_surrogate"]}
        elif stage == "features":
            parts = {"up": self.key("locate"), "channels": v["cardiac_channels"]}
        elif stage == "train":
            parts = {"up": [self.key(s) for s in ("features", "reason", "lungrisk", "findings")],
                     "train": self.train_config().to_dict(), "seed": c["seed"], "task": task, "variant": variant}
        elif stage == "evaluate":
            parts = {"up": self.key("train", task, variant), "eval": c["evaluate"]}
        elif stage == "ablate":
            parts = {"up": [self.key(s) for s in ("features", "reason", "lungrisk", "findings")],
                     "train": self.train_config().to_dict(), "eval": c["evaluate"], "ablate": c["ablate"],
                     "seed": c["seed"]}
        elif stage == "explain":
            parts = {"up": [self.key("train", task, variant), self.key("locate"), self.key("reason")],
                     "explain": c["explain"], "scan": scan}
        else:
            raise ValueError(stage)
        parts["stage"] = stage
        parts["package"] = v["package"]
        k = digest(parts)[:16]
        self._keys[memo] = k
        return k

    def stage_dir(self, stage: str, **kw) -> Path:
        return self.dir / "cache" / stage / self.key(stage, **kw)

    def done(self, stage: str, **kw) -> bool:
        return (self.stage_dir(stage, **kw) / "_complete").exists()

    def require(self, stage: str, **kw) -> Path:
        if not self.done(stage, **kw):
            extra = f" --task {kw['task']} --variant {kw['variant']}" if kw.get("task") else ""
            raise UpstreamMissingError(
                f"stage '{stage}' output missing for this config (key {self.key(stage, **kw)}); "
                f"run `cardiopulm {stage}{extra}` with the same --config/--run-dir first"
            )
        return self.stage_dir(stage, **kw)

    def begin(self, stage: str, **kw) -> Path:
        d = self.stage_dir(stage, **kw)
        if d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True)
        return d

    def finish(self, stage: str, **kw) -> None:
        d = self.stage_dir(stage, **kw)
        (d / "_complete").write_text(self.key(stage, **kw) + "\n")
        self.record(stage, d, **kw)

    # -- manifest of record --------------------------------------------------

    def record(self, stage: str, d: Path, **kw) -> None:
        path = self.dir / "manifest.json"
        man = json.loads(path.read_text()) if path.exists() else {}
        man.update({
            "config_hash": digest({k: v for k, v in self.cfg.items() if k != "workers"}),
            "seed": self.cfg["seed"],
            "versions": self.versions(),
            "train_config": self.train_config().to_dict(),
        })
        files = {}
        for f in sorted(d.rglob("*")):
            if f.is_file() and f.name != "_complete" and f.suffix != ".nii":
                files[str(f.relative_to(d))] = file_sha256(f)
        label = stage if not kw.get("task") else f"{stage}:{kw['task']}:{kw['variant']}"
        if kw.get("scan"):
            label += f":{kw['scan']}"
        man.setdefault("stages", {})[label] = {"key": self.key(stage, **kw), "files": files}
        _dump_json(path, man)
        _dump_json(self.dir / "config.json", self.cfg)

    # -- cohort --------------------------------------------------------------

    def scans(self) -> list[ScanRow]:
        d = self.require("simulate")
        rows = []
        with (d / "manifest.csv").open(newline="") as fh:
            for r in csv.DictReader(fh):
                vp, sp = (str(d / p) if p and not Path(p).is_absolute() else p
                          for p in (r["volume_path"], r["spec_path"]))
                rows.append(ScanRow(r["subject_id"], r["scan_id"], vp, sp,
                                    int(r["label_screening"]), int(r["label_mortality"]),
                                    float(r["true_risk"]) if r.get("true_risk") else None))
        return rows

    def subjects(self) -> list[Subject]:
        seen = {}
        for r in self.scans():
            seen.setdefault(r.subject_id, Subject(r.subject_id, r.label_screening, r.label_mortality))
        return [seen[k] for k in sorted(seen)]


# ---------------------------------------------------------------------------
# per-scan work (module-level so worker processes can pickle it)
# ---------------------------------------------------------------------------


def _raw_volume(row: ScanRow) -> CtVolume:
    if row.volume_path and Path(row.volume_path).exists():
        return load_volume(row.volume_path)
    if row.spec_path and Path(row.spec_path).exists():
        return generate_phantom(PhantomSpec.load(row.spec_path), row.subject_id, row.scan_id)
    raise UpstreamMissingError(f"scan {row.scan_id}: neither volume {row.volume_path!r} nor spec {row.spec_path!r} "
                               "exists; rerun `cardiopulm simulate`")


def _findings_for(cfg: dict, row: ScanRow, std: CtVolume, lungs) -> FindingSet:
    fc = cfg["findings"]
    if fc["source"] == "external_service":
        return fetch_findings_remote(row.scan_id, fc["endpoint"], row.volume_path or row.scan_id)
    if fc["source"] == "file":
        table = json.loads(Path(fc["file"]).read_text())
        if row.scan_id not in table:
            raise ValidationError(f"findings file {fc['file']} has no entry for {row.scan_id}")
        return FindingSet.from_json(table[row.scan_id])
    return score_findings(std, lungs)


def _trajectory_for(cfg: dict, row: ScanRow, findings: FindingSet) -> RiskTrajectory:
    lc = cfg["lungrisk"]
    if lc["source"] == "file":
        return load_trajectory_file(lc["file"], row.scan_id, repair=lc["repair"])
    return estimate_trajectory(findings)


def _trace_for(cfg: dict, kb, row: ScanRow, findings: FindingSet) -> ReasoningTrace:
    if cfg["reason"]["endpoint"]:
        return fetch_reasoning_remote(findings, cfg["reason"]["endpoint"], kb, scan_ref=row.scan_id)
    return reason(findings, kb)


def _fused_worker(args):
    """Everything per scan in one pass: ROI, cardiac features, findings, trace, trajectory."""
    cfg, row = args
    from .cardiac import extract_cardiac_features

    kb = load_knowledge_base(cfg["reason"]["kb_path"])
    std = standardize(_raw_volume(row), cfg["preprocess"]["target_mm"])
    body = body_mask(std)
    lungs = lung_mask(std, body)
    roi = roi_around(mediastinal_centroid(body, lungs), std.dims, cfg["locate"]["roi_extent"])
    z_card = extract_cardiac_features(crop_roi(std, roi), with_support=False).values
    findings = _findings_for(cfg, row, std, lungs)
    trace = _trace_for(cfg, kb, row, findings)
    traj = _trajectory_for(cfg, row, findings)
    return row.scan_id, roi, findings, trace, traj, z_card


def _pmap(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=4))


# ---------------------------------------------------------------------------
# stage output formats
# ---------------------------------------------------------------------------


def _write_jsonl(path: Path, rows: dict[str, dict]) -> None:
    _write_text(path, "".join(json.dumps({"scan_id": k, **rows[k]}, sort_keys=True) + "\n" for k in sorted(rows)))


def _read_jsonl(path: Path) -> dict[str, dict]:
    out = {}
    for line in path.read_text().splitlines():
        if line.strip():
            obj = json.loads(line)
            out[obj.pop("scan_id")] = obj
    return out


def _write_trajectories(path: Path, rows: dict[str, RiskTrajectory]) -> None:
    lines = ["scan_id," + ",".join(f"y{t}" for t in range(1, 7))]
    for k in sorted(rows):
        lines.append(k + "," + ",".join(repr(v) for v in rows[k].values))
    _write_text(path, "\n".join(lines) + "\n")


def _write_per_scan_outputs(run: Run, results) -> None:
    stages = {
        "locate": lambda d: _write_jsonl(d / "rois.jsonl", {r[0]: r[1].to_json() for r in results}),
        "findings": lambda d: _write_jsonl(d / "findings.jsonl", {r[0]: r[2].to_json() for r in results}),
        "reason": lambda d: _write_jsonl(d / "traces.jsonl", {r[0]: r[3].to_json() for r in results}),
        "lungrisk": lambda d: _write_trajectories(d / "trajectories.csv", {r[0]: r[4] for r in results}),
        "features": lambda d: write_feature_csv(d / "cardiac_features.csv", {r[0]: r[5] for r in results}),
    }
    for stage, write in stages.items():
        write(run.begin(stage))
        run.finish(stage)


def load_feature_table(run: Run) -> FeatureTable:
    feats = read_feature_csv(run.require("features") / "cardiac_features.csv")
    traces = {k: ReasoningTrace.from_json(v) for k, v in _read_jsonl(run.require("reason") / "traces.jsonl").items()}
    finds = {k: FindingSet.from_json(v) for k, v in _read_jsonl(run.require("findings") / "findings.jsonl").items()}
    trajs = {}
    with (run.require("lungrisk") / "trajectories.csv").open(newline="") as fh:
        for r in csv.DictReader(fh):
            trajs[r["scan_id"]] = np.array([float(r[f"y{t}"]) for t in range(1, 7)])
    rows = sorted(run.scans(), key=lambda r: r.scan_id)
    for name, table in (("features", feats), ("reason", traces), ("findings", finds), ("lungrisk", trajs)):
        missing = [r.scan_id for r in rows if r.scan_id not in table]
        if missing:
            raise UpstreamMissingError(f"stage '{name}' lacks {len(missing)} scans (e.g. {missing[0]}); rerun it")
    names = traces[rows[0].scan_id].indicator_names if rows else ()
    for r in rows:
        if traces[r.scan_id].kb_version != run.kb.version:
            raise ValidationError(f"trace for {r.scan_id} built with KB {traces[r.scan_id].kb_version}, "
                                  f"config uses {run.kb.version}; rerun `cardiopulm reason`")
    return FeatureTable(
        subject_ids=np.array([r.subject_id for r in rows]),
        scan_ids=np.array([r.scan_id for r in rows]),
        blocks={
            "cardiac": np.stack([feats[r.scan_id] for r in rows]),
            "reasoning": np.stack([np.asarray(traces[r.scan_id].indicator_vector) for r in rows]),
            "lung": np.stack([trajs[r.scan_id] for r in rows]),
            "findings": np.stack([[finds[r.scan_id].score(f) for f in FINDINGS] for r in rows]),
        },
        labels={t: np.array([r.label(t) for r in rows], dtype=int) for t in TASKS},
        kb_version=run.kb.version,
        channel_names={"cardiac": list(CHANNELS), "reasoning": list(names),
                       "lung": [f"lung_y{t}" for t in range(1, 7)], "findings": list(FINDINGS)},
    )


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def stage_simulate(run: Run) -> Path:
    c = run.cfg["cohort"]
    d = run.begin("simulate")
    if c["manifest"]:
        rows = _read_external_manifest(Path(c["manifest"]))
    else:
        weights = RiskWeights.from_dict(c["risk_weights"]) if c["risk_weights"] else None
        spc = c["scans_per_subject"]
        cohort = sample_cohort(c["n_subjects"], run.cfg["seed"], weights, tuple(c["dims"]),
                               spc if isinstance(spc, int) else tuple(spc))
        (d / "specs").mkdir()
        if c["write_volumes"]:
            (d / "volumes").mkdir()
        rows = []
        for rec in cohort:
            for k, scan_id in enumerate(rec.scan_ids):
                spec = rec.scan_spec(k)
                spec_path = d / "specs" / f"{scan_id}.json"
                spec.save(spec_path)
                vol_path = ""
                if c["write_volumes"]:
                    vol_path = str(d / "volumes" / f"{rec.subject_id}__{scan_id}.nii")
                    save_volume(generate_phantom(spec, rec.subject_id, scan_id), vol_path, dtype="int16")
                rows.append(ScanRow(rec.subject_id, scan_id, vol_path, str(spec_path), rec.label_screening,
                                    rec.label_mortality, rec.true_risk))
    with (d / "manifest.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_COLUMNS)  # true_risk is the oracle column; never used as a model input
        for r in rows:
            # paths inside the stage directory are stored relative to it
            vp, sp = (str(Path(p).relative_to(d)) if p and Path(p).is_relative_to(d) else p
                      for p in (r.volume_path, r.spec_path))
            w.writerow([r.subject_id, r.scan_id, vp, sp, r.label_screening, r.label_mortality,
                        "" if r.true_risk is None else repr(r.true_risk)])
    run.finish("simulate")
    return d


def _read_external_manifest(path: Path) -> list[ScanRow]:
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise ValidationError(f"cannot read cohort manifest {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        need = {"subject_id", "scan_id", "volume_path", "label_screening", "label_mortality"}
        missing = need - set(reader.fieldnames or ())
        if missing:
            raise SchemaError(f"{path}: manifest lacks columns {sorted(missing)}")
        rows = []
        for r in reader:
            vp = r["volume_path"]
            if vp and not Path(vp).is_absolute():
                vp = str((path.parent / vp).resolve())
            ls, lm = int(r["label_screening"]), int(r["label_mortality"])
            if lm and not ls:
                raise ValidationError(f"{path}: scan {r['scan_id']} has mortality without screening label")
            rows.append(ScanRow(r["subject_id"], r["scan_id"], vp, r.get("spec_path", "") or "", ls, lm,
                                float(r["true_risk"]) if r.get("true_risk") else None))
    return rows


def _preprocess_one(args):
    cfg, row, out = args
    std = standardize(_raw_volume(row), cfg["preprocess"]["target_mm"])
    integral = bool(np.all(np.rint(std.voxels) == std.voxels))
    save_volume(std, Path(out) / f"{row.scan_id}.nii", dtype="int16" if integral else "float32")
    return row.scan_id


def stage_preprocess(run: Run) -> Path:
    rows = run.scans()
    d = run.begin("preprocess")
    _pmap(_preprocess_one, [(run.cfg, r, str(d)) for r in rows], run.cfg["workers"])
    run.finish("preprocess")
    return d


def _standardized(run: Run, row: ScanRow) -> CtVolume:
    path = run.require("preprocess") / f"{row.scan_id}.nii"
    if not path.exists():
        raise UpstreamMissingError(f"preprocessed volume for {row.scan_id} missing; rerun `cardiopulm preprocess`")
    return load_volume(path)


def _locate_one(args):
    cfg, row, path = args
    std = load_volume(path)
    body = body_mask(std)
    roi = roi_around(mediastinal_centroid(body, lung_mask(std, body)), std.dims, cfg["locate"]["roi_extent"])
    return row.scan_id, roi.to_json()


def stage_locate(run: Run) -> Path:
    rows = run.scans()
    pre = run.require("preprocess")
    out = dict(_pmap(_locate_one, [(run.cfg, r, str(pre / f"{r.scan_id}.nii")) for r in rows], run.cfg["workers"]))
    d = run.begin("locate")
    _write_jsonl(d / "rois.jsonl", out)
    run.finish("locate")
    return d


def _findings_one(args):
    cfg, row, path = args
    std = load_volume(path)
    lungs = lung_mask(std, body_mask(std)) if cfg["findings"]["source"] == "rule_based" else None
    return row.scan_id, _findings_for(cfg, row, std, lungs).to_json()


def stage_findings(run: Run) -> Path:
    rows = run.scans()
    pre = run.require("preprocess")
    out = dict(_pmap(_findings_one, [(run.cfg, r, str(pre / f"{r.scan_id}.nii")) for r in rows],
                     run.cfg["workers"]))
    d = run.begin("findings")
    _write_jsonl(d / "findings.jsonl", out)
    run.finish("findings")
    return d


def _load_findings(run: Run) -> dict[str, FindingSet]:
    return {k: FindingSet.from_json(v) for k, v in _read_jsonl(run.require("findings") / "findings.jsonl").items()}


def stage_reason(run: Run) -> Path:
    rows = {r.scan_id: r for r in run.scans()}
    finds = _load_findings(run)
    out = {k: _trace_for(run.cfg, run.kb, rows[k], f).to_json() for k, f in finds.items()}
    d = run.begin("reason")
    _write_jsonl(d / "traces.jsonl", out)
    run.finish("reason")
    return d


def stage_lungrisk(run: Run) -> Path:
    rows = {r.scan_id: r for r in run.scans()}
    finds = _load_findings(run)
    out = {k: _trajectory_for(run.cfg, rows[k], f) for k, f in finds.items()}
    d = run.begin("lungrisk")
    _write_trajectories(d / "trajectories.csv", out)
    run.finish("lungrisk")
    return d


def _features_one(args):
    from .cardiac import extract_cardiac_features

    row, path, roi = args
    std = load_volume(path)
    return row.scan_id, extract_cardiac_features(crop_roi(std, RoiBox.from_json(roi)), with_support=False).values


def stage_features(run: Run) -> Path:
    rows = run.scans()
    pre = run.require("preprocess")
    rois = _read_jsonl(run.require("locate") / "rois.jsonl")
    out = dict(_pmap(_features_one, [(r, str(pre / f"{r.scan_id}.nii"), rois[r.scan_id]) for r in rows],
                     run.cfg["workers"]))
    d = run.begin("features")
    write_feature_csv(d / "cardiac_features.csv", out)
    run.finish("features")
    return d


def _split(run: Run) -> dict:
    return split_subjects(run.subjects(), run.cfg["seed"])


def stage_train(run: Run, task: str, variant: str) -> Path:
    table = load_feature_table(run)
    split = _split(run)
    result = fit_variant(table, split, variant, task, run.train_config(), run.kb.version)
    d = run.begin("train", task=task, variant=variant)
    save_params(result.params, d / "params.json")
    _dump_json(d / "train_log.json", {"best_epoch": result.best_epoch, "best_val_auc": result.best_val_auc,
                                      "stopped_early": result.stopped_early, "epochs": result.log})
    _dump_json(d / "split.json", split)
    run.finish("train", task=task, variant=variant)
    return d


def _write_report(d: Path, rep, stem: str) -> None:
    from .plotting import plot_roc

    _write_text(d / f"{stem}.json", rep.dumps() + "\n")
    lines = ["fpr,tpr,threshold"] + [f"{f!r},{t!r},{h!r}" for f, t, h in rep.roc_points]
    _write_text(d / f"{stem}_roc.csv", "\n".join(lines) + "\n")
    plot_roc([rep], d / f"{stem}_roc.svg", title=f"{rep.task}: {rep.variant_name}")


def stage_evaluate(run: Run, task: str, variant: str):
    tdir = run.require("train", task=task, variant=variant)
    params = load_params(tdir / "params.json", run.kb.version)
    table = load_feature_table(run)
    split = json.loads((tdir / "split.json").read_text())
    te = table.rows_for(split["test"])
    scores = predict_batch(params, table.design(VARIANTS[variant])[te])
    ec = run.cfg["evaluate"]
    rep = evaluate(scores, table.labels[task][te], table.subject_ids[te], task, variant, run.cfg["seed"],
                   ec["n_boot"], ec["aggregate"], ec["ci_method"])
    d = run.begin("evaluate", task=task, variant=variant)
    _write_report(d, rep, f"eval_{task}")
    run.finish("evaluate", task=task, variant=variant)
    return d, rep


def stage_ablate(run: Run):
    from .plotting import plot_roc

    table = load_feature_table(run)
    ac = run.cfg["ablate"]
    cfg = AblationConfig(seed=run.cfg["seed"], n_boot=run.cfg["evaluate"]["n_boot"], tasks=tuple(ac["tasks"]),
                         variants=tuple(ac["variants"]), aggregate=run.cfg["evaluate"]["aggregate"],
                         train=run.train_config().to_dict(), ci_method=run.cfg["evaluate"]["ci_method"])
    reports = run_ablation(table, _split(run), cfg)
    d = run.begin("ablate")
    _dump_json(d / "ablation.json", [r.to_json() for r in reports])
    _write_text(d / "ablation.txt", comparison_table(reports))
    for task in cfg.tasks:
        plot_roc([r for r in reports if r.task == task], d / f"ablation_roc_{task}.svg", title=f"{task} ablation")
    run.finish("ablate")
    return d, reports


def stage_explain(run: Run, task: str, variant: str, scan_id: str | None):
    from .cardiac import extract_cardiac_features
    from .explain import attribute_indicators, attribute_input, project_cardiac_attribution

    rows = {r.scan_id: r for r in run.scans()}
    scan_id = scan_id or run.cfg["explain"]["scan_id"] or sorted(rows)[0]
    if scan_id not in rows:
        raise ValidationError(f"unknown scan {scan_id!r}")
    tdir = run.require("train", task=task, variant=variant)
    params = load_params(tdir / "params.json", run.kb.version)
    roi = RoiBox.from_json(_read_jsonl(run.require("locate") / "rois.jsonl")[scan_id])
    trace = ReasoningTrace.from_json(_read_jsonl(run.require("reason") / "traces.jsonl")[scan_id])
    table = load_feature_table(run)
    x = table.design(VARIANTS[variant])[int(np.flatnonzero(table.scan_ids == scan_id)[0])]
    std = standardize(_raw_volume(rows[scan_id]), run.cfg["preprocess"]["target_mm"])
    roi_vol = crop_roi(std, roi)
    feats = extract_cardiac_features(roi_vol)
    attr = attribute_input(params, x)
    d = run.begin("explain", task=task, variant=variant, scan=scan_id)
    out = {"scan_id": scan_id, "task": task, "variant": variant, "probability": predict_batch(params, x[None])[0],
           "attribution": attr.to_json(),
           "channels": [n for b, _ in params.blocks for n in table.channel_names[b]]}
    if "reasoning" in attr.blocks:
        out["indicators"] = attribute_indicators(attr, trace, params, run.cfg["explain"]["top_k"])
    _dump_json(d / "attribution.json", out)
    if "cardiac" in attr.blocks:
        save_volume(project_cardiac_attribution(attr, feats, roi_vol), d / "cardiac_heat.nii")
    run.finish("explain", task=task, variant=variant, scan=scan_id)
    return d, out


def stage_run_all(run: Run) -> dict:
    """Simulate (or read the manifest), process every scan once, train and evaluate both tasks, ablate."""
    if not run.done("simulate"):
        stage_simulate(run)
    per_scan = ("locate", "findings", "reason", "lungrisk", "features")
    if not all(run.done(s) for s in per_scan):
        rows = run.scans()
        results = _pmap(_fused_worker, [(run.cfg, r) for r in rows], run.cfg["workers"])
        _write_per_scan_outputs(run, results)
    reports_dir = run.dir / "reports"
    reports_dir.mkdir(exist_ok=True)
    variant = run.cfg["variant"]
    evals = {}
    for task in TASKS:
        if not run.done("train", task=task, variant=variant):
            stage_train(run, task, variant)
        d, rep = stage_evaluate(run, task, variant)
        evals[task] = rep
        for f in d.iterdir():
            if f.name != "_complete":
                shutil.copy2(f, reports_dir / f.name)
    d, reports = stage_ablate(run)
    for f in d.iterdir():
        if f.name != "_complete":
            shutil.copy2(f, reports_dir / f.name)
    return {"evaluations": evals, "ablation": reports}

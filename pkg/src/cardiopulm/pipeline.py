"""Per-scan processing chain and cohort-level feature tables.

One scan goes volume -> standardize -> body/lung masks -> heart ROI ->
{cardiac features, findings -> reasoning trace, lung-risk trajectory}. The
masks are computed once and shared by the locator and the perception stage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cardiac import CHANNELS, extract_cardiac_features
from .evaluation import TASKS, FeatureTable
from .locator import body_mask, lung_mask, mediastinal_centroid, roi_around
from .lungrisk import RiskTrajectory, estimate_trajectory
from .perception import FINDINGS, FindingSet, score_findings
from .phantom import PhantomSpec, generate_phantom
from .reasoning import KnowledgeGraph, ReasoningTrace, default_knowledge_base, reason
from .volume import CtVolume, RoiBox, crop_roi, standardize

# A 96^3 phantom at 1.5 mm spans 144 mm; a 48^3 box (72 mm) holds the heart
# and its fat shell with margin for the centre jitter.
PIPELINE_ROI_EXTENT = (48, 48, 48)


@dataclass
class ScanResult:
    subject_id: str
    scan_id: str
    roi: RoiBox
    findings: FindingSet
    trace: ReasoningTrace
    trajectory: RiskTrajectory
    z_card: np.ndarray

    def finding_vector(self) -> np.ndarray:
        scores = self.findings.scores()
        return np.array([scores.get(f, 0.0) for f in FINDINGS])


def process_volume(vol: CtVolume, kb: KnowledgeGraph | None = None, roi_extent=PIPELINE_ROI_EXTENT,
                   calibration: dict | None = None) -> ScanResult:
    kb = kb or default_knowledge_base()
    std = standardize(vol)
    body = body_mask(std)
    lungs = lung_mask(std, body)
    roi = roi_around(mediastinal_centroid(body, lungs), std.dims, roi_extent)
    features = extract_cardiac_features(crop_roi(std, roi), with_support=False)
    findings = score_findings(std, lungs, calibration)
    return ScanResult(vol.subject_id, vol.scan_id, roi, findings, reason(findings, kb),
                      estimate_trajectory(findings), features.values)


def process_spec(spec: PhantomSpec, subject_id: str, scan_id: str, kb: KnowledgeGraph | None = None,
                 roi_extent=PIPELINE_ROI_EXTENT) -> ScanResult:
    return process_volume(generate_phantom(spec, subject_id, scan_id), kb, roi_extent)


def feature_table(cohort, results: list[ScanResult], kb_version: str = "") -> FeatureTable:
    """Stack scan results into aligned blocks; labels come from each scan's subject."""
    by_subject = {r.subject_id: r for r in cohort}
    results = sorted(results, key=lambda r: r.scan_id)
    sids = np.array([r.subject_id for r in results])
    labels = {t: np.array([by_subject[r.subject_id].label(t) for r in results], dtype=int) for t in TASKS}
    names = results[0].trace.indicator_names if results else ()
    return FeatureTable(
        subject_ids=sids,
        scan_ids=np.array([r.scan_id for r in results]),
        blocks={
            "cardiac": np.stack([r.z_card for r in results]),
            "reasoning": np.stack([np.asarray(r.trace.indicator_vector) for r in results]),
            "lung": np.stack([np.asarray(r.trajectory.values) for r in results]),
            "findings": np.stack([r.finding_vector() for r in results]),
        },
        labels=labels,
        kb_version=kb_version,
        channel_names={
            "cardiac": list(CHANNELS),
            "reasoning": list(names),
            "lung": [f"lung_y{t}" for t in range(1, 7)],
            "findings": list(FINDINGS),
        },
    )

"""Subject-level splitting, ROC/AUC, bootstrap intervals and the ablation runner."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import NumericError, UpstreamMissingError, ValidationError

log = logging.getLogger(__name__)

TASKS = ("screening", "mortality")
FOLDS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.7, 0.1, 0.2)
N_BOOT = 1000
MAX_SKIP_FRACTION = 0.10
CI_FLAG_TOLERANCE = 0.02


def _check_binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValidationError(f"{s.size} scores vs {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("labels must be 0/1")
    if not np.all(np.isfinite(s)):
        raise ValidationError("non-finite scores")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise ValidationError("AUC needs both classes present")
    return s, y.astype(bool)


def auc(scores, labels) -> float:
    """Mann-Whitney concordance with half credit for ties."""
    s, y = _check_binary(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    ranks = rankdata(s)  # midranks give the half credit
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_curve(scores, labels) -> list[tuple[float, float, float]]:
    """(fpr, tpr, threshold) points, one per distinct score in descending order.

    A score counts as positive when ``score >= threshold``; ties share one
    point. The first point is (0, 0) at threshold +inf; the last is (1, 1).
    """
    s, y = _check_binary(scores, labels)
    tp, fp, thr = _roc_counts(s, y)
    n_pos, n_neg = tp[-1], fp[-1]
    return [(f / n_neg, t / n_pos, h) for f, t, h in zip(fp.tolist(), tp.tolist(), thr.tolist())]


def _roc_counts(s: np.ndarray, y: np.ndarray):
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]  # final index of each tie group
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    return np.r_[0, tp], np.r_[0, fp], np.r_[np.inf, s[last]]


def auc_trapezoid(scores, labels) -> float:
    """Area under the ROC step curve; ties contribute their diagonal segment."""
    s, y = _check_binary(scores, labels)
    tp, fp, _ = _roc_counts(s, y)
    area2 = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))  # exact integer arithmetic
    return float(area2 / (2.0 * tp[-1] * fp[-1]))


# ---------------------------------------------------------------------------
# bootstrap
# ---------------------------------------------------------------------------


def _weighted_aucs(s: np.ndarray, y: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """AUC for each row of a (B, n) matrix of per-example multiplicities."""
    order = np.argsort(s, kind="stable")
    s, y, w = s[order], y[order], weights[:, order]
    starts = np.r_[0, np.flatnonzero(np.diff(s)) + 1]
    pos = np.add.reduceat(w * y, starts, axis=1)
    neg = np.add.reduceat(w * ~y, starts, axis=1)
    below = np.cumsum(neg, axis=1) - neg
    num = np.sum(pos * (below + 0.5 * neg), axis=1)
    den = pos.sum(axis=1) * neg.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / den, np.nan)


@dataclass(frozen=True)
class BootstrapResult:
    lo: float
    hi: float
    median: float
    n_resamples: int
    n_skipped: int


def bootstrap_distribution(scores, labels, subject_ids, n: int = N_BOOT, seed: int = 0,
                           stratified: bool = False) -> BootstrapResult:
    """Percentile bootstrap over subjects (all rows of a drawn subject come along).

    ``stratified`` redraws positive and negative subjects separately, keeping
    the class counts fixed, so no resample is ever single-class.
    """
    s, y = _check_binary(scores, labels)
    subjects, inverse = np.unique(np.asarray(subject_ids), return_inverse=True)
    k = subjects.size
    groups = [np.arange(k)]
    if stratified:
        subj_pos = np.zeros(k, dtype=bool)
        subj_pos[inverse[y]] = True
        groups = [np.flatnonzero(subj_pos), np.flatnonzero(~subj_pos)]
    aucs = np.empty(n)
    chunk = 100
    for c0 in range(0, n, chunk):
        counts = np.zeros((min(chunk, n - c0), k))
        for j in range(counts.shape[0]):
            # independent stream per resample index: parallel order cannot matter
            rng = np.random.default_rng([seed, c0 + j])
            for g in groups:
                counts[j] += np.bincount(g[rng.integers(0, g.size, size=g.size)], minlength=k)
        aucs[c0 : c0 + counts.shape[0]] = _weighted_aucs(s, y, counts[:, inverse])
    ok = aucs[np.isfinite(aucs)]
    skipped = n - ok.size
    if skipped > MAX_SKIP_FRACTION * n:
        raise NumericError(f"{skipped}/{n} bootstrap resamples were single-class (limit {MAX_SKIP_FRACTION:.0%})")
    lo, med, hi = np.percentile(ok, [2.5, 50.0, 97.5])
    return BootstrapResult(float(lo), float(hi), float(med), n, skipped)


def bootstrap_ci(scores, labels, subject_ids, n: int = N_BOOT, seed: int = 0) -> tuple[float, float]:
    r = bootstrap_distribution(scores, labels, subject_ids, n, seed)
    return r.lo, r.hi


# ---------------------------------------------------------------------------
# subject-level splitting and evaluation
# ---------------------------------------------------------------------------


def largest_remainder(n: int, fractions) -> list[int]:
    raw = [n * f for f in fractions]
    out = [int(math.floor(r)) for r in raw]
    rem = sorted(range(len(raw)), key=lambda i: (-(raw[i] - out[i]), i))
    for i in rem[: n - sum(out)]:
        out[i] += 1
    return out


def _stratum(rec) -> int:
    return int(rec.label_screening) + int(rec.label_mortality)


def split_subjects(cohort, seed: int, fractions=SPLIT_FRACTIONS) -> dict[str, list[str]]:
    """Disjoint 70/10/20 subject partition, stratified on outcome.

    Subjects are shuffled within each outcome stratum (negative, screening
    positive, mortality positive), interleaved proportionally and cut into
    consecutive blocks, so every fold gets a near-proportional class mix.
    ``cohort`` is a list of :class:`CohortRecord` or ``(subject_id, stratum)`` pairs.
    """
    pairs = [(r.subject_id, _stratum(r)) if hasattr(r, "subject_id") else (str(r[0]), int(r[1])) for r in cohort]
    ids = [p[0] for p in pairs]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate subject ids in cohort")
    sizes = largest_remainder(len(pairs), fractions)
    if min(sizes) == 0:
        raise ValidationError(f"{len(pairs)} subjects cannot fill folds {dict(zip(FOLDS, fractions))}")
    rng = np.random.default_rng(seed)
    keyed = []
    for stratum in sorted({p[1] for p in pairs}):
        members = sorted(p[0] for p in pairs if p[1] == stratum)
        perm = rng.permutation(len(members))
        offset = rng.random()
        for rank, idx in enumerate(perm):
            keyed.append(((rank + offset) / len(members), stratum, members[idx]))
    keyed.sort()
    ordered = [(sid, stratum) for _, stratum, sid in keyed]
    folds, start = {}, 0
    for name, size in zip(FOLDS, sizes):
        folds[name] = ordered[start : start + size]
        start += size
    _ensure_both_classes(folds)
    return {name: sorted(sid for sid, _ in members) for name, members in folds.items()}


def _ensure_both_classes(folds: dict[str, list]) -> None:
    # Per task, swap a subject in from the fold richest in the missing class when feasible.
    # Screening positives are strata 1 and 2, mortality positives stratum 2 only.
    for cut in (1, 2):
        for name, members in folds.items():
            for want_pos in (True, False):
                def hit(st):
                    return (st >= cut) == want_pos

                if any(hit(st) for _, st in members):
                    continue
                donor = max(folds, key=lambda f: sum(hit(st) for _, st in folds[f]))
                donor_members = folds[donor]
                if donor == name or sum(hit(st) for _, st in donor_members) < 2:
                    continue
                # trade for a member of the same screening class where possible so the other task stays balanced
                i = next(i for i, (_, st) in enumerate(donor_members) if hit(st))
                cands = [j for j, (_, st) in enumerate(members) if not hit(st)]
                same = [j for j in cands if (members[j][1] > 0) == (donor_members[i][1] > 0)]
                j = (same or cands)[0]
                members[j], donor_members[i] = donor_members[i], members[j]


def subject_level(scores, labels, subject_ids, aggregate: str = "max"):
    """Collapse scan rows to one (score, label) per subject, sorted by subject id."""
    if aggregate not in ("max", "mean"):
        raise ValidationError(f"unknown aggregation {aggregate!r}")
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    sid = np.asarray(subject_ids)
    subjects, inverse = np.unique(sid, return_inverse=True)
    agg = np.full(subjects.size, -np.inf) if aggregate == "max" else np.zeros(subjects.size)
    if aggregate == "max":
        np.maximum.at(agg, inverse, s)
    else:
        np.add.at(agg, inverse, s)
        agg /= np.bincount(inverse)
    lab = np.zeros(subjects.size, dtype=int)
    lab[inverse] = y
    if np.any(lab[inverse] != y):
        raise ValidationError("scans of one subject carry different labels")
    return agg, lab, subjects


@dataclass
class EvalReport:
    task: str
    variant_name: str
    auc: float
    ci95: tuple[float, float]
    roc_points: list[tuple[float, float, float]]
    n_pos: int
    n_neg: int
    seed: int
    bootstrap_median: float = float("nan")
    n_resamples: int = N_BOOT
    n_skipped: int = 0
    ci_flag: bool = False
    ci_method: str = "subject"
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "task": self.task,
            "variant_name": self.variant_name,
            "auc": self.auc,
            "ci95": list(self.ci95),
            "bootstrap_median": self.bootstrap_median,
            "n_resamples": self.n_resamples,
            "n_skipped": self.n_skipped,
            "ci_flag": self.ci_flag,
            "ci_method": self.ci_method,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
            "seed": self.seed,
            "roc_points": [[f, t, None if math.isinf(h) else h] for f, t, h in self.roc_points],
            **({"extra": self.extra} if self.extra else {}),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)


CI_METHODS = ("auto", "subject", "stratified")


def evaluate(scores, labels, subject_ids, task: str, variant_name: str, seed: int = 0,
             n_boot: int = N_BOOT, aggregate: str = "max", ci_method: str = "auto") -> EvalReport:
    """Subject-level AUC, ROC and bootstrap CI.

    ``ci_method="auto"`` uses the plain subject bootstrap and switches to the
    class-stratified one only when too many plain resamples are single-class
    (a handful of positives in the test fold); the report records which ran.
    """
    if ci_method not in CI_METHODS:
        raise ValidationError(f"ci_method must be one of {CI_METHODS}")
    s, y, subjects = subject_level(scores, labels, subject_ids, aggregate)
    point = auc(s, y)
    method = "stratified" if ci_method == "stratified" else "subject"
    try:
        boot = bootstrap_distribution(s, y, subjects, n_boot, seed, stratified=method == "stratified")
    except NumericError as exc:
        if ci_method != "auto":
            raise
        log.warning("%s/%s: %s; using the class-stratified bootstrap", task, variant_name, exc)
        method = "stratified"
        boot = bootstrap_distribution(s, y, subjects, n_boot, seed, stratified=True)
    flag = point < boot.lo - CI_FLAG_TOLERANCE or point > boot.hi + CI_FLAG_TOLERANCE
    if flag:
        log.warning("%s/%s: point AUC %.4f outside bootstrap interval [%.4f, %.4f]",
                    task, variant_name, point, boot.lo, boot.hi)
    return EvalReport(task, variant_name, point, (boot.lo, boot.hi), roc_curve(s, y), int(y.sum()),
                      int((1 - y).sum()), seed, boot.median, n_boot, boot.n_skipped, bool(flag), method)


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

VARIANTS = {
    "lung-risk-only": ("lung",),
    "reasoning-only": ("reasoning",),
    "cardiac-only": ("cardiac",),
    "cardiac+lung": ("cardiac", "lung"),
    "cardiac+lung+findings": ("cardiac", "lung", "findings"),
    "cardiac+lung+reasoning": ("cardiac", "lung", "reasoning"),
}
INTEGRATED = "cardiac+lung+reasoning"


@dataclass
class FeatureTable:
    """Per-scan processed features plus subject labels, aligned row by row."""

    subject_ids: np.ndarray
    scan_ids: np.ndarray
    blocks: dict[str, np.ndarray]
    labels: dict[str, np.ndarray]
    kb_version: str = ""
    channel_names: dict[str, list[str]] = field(default_factory=dict)

    def design(self, block_names) -> np.ndarray:
        missing = [b for b in block_names if b not in self.blocks]
        if missing:
            raise UpstreamMissingError(f"cached features lack blocks {missing}")
        return np.hstack([self.blocks[b] for b in block_names])

    def rows_for(self, subjects) -> np.ndarray:
        return np.flatnonzero(np.isin(self.subject_ids, list(subjects)))


@dataclass
class AblationConfig:
    seed: int = 0
    n_boot: int = N_BOOT
    tasks: tuple[str, ...] = TASKS
    variants: tuple[str, ...] = tuple(VARIANTS)
    aggregate: str = "max"
    train: dict = field(default_factory=dict)
    ci_method: str = "auto"


def fit_variant(table: FeatureTable, split: dict, variant: str, task: str, train_cfg, kb_version: str = ""):
    from .fusion import train

    blocks = VARIANTS[variant]
    x = table.design(blocks)
    y = table.labels[task]
    tr, va = table.rows_for(split["train"]), table.rows_for(split["val"])
    layout = [(b, table.blocks[b].shape[1]) for b in blocks]
    channels = [c for b in blocks for c in table.channel_names.get(b, [f"{b}_{i}" for i in range(table.blocks[b].shape[1])])]
    return train(x[tr], y[tr], x[va], y[va], train_cfg, blocks=layout, kb_version=kb_version, channels=channels)


def run_ablation(table: FeatureTable, cohort_split: dict, config: AblationConfig | None = None) -> list[EvalReport]:
    """Train and test every variant on identical splits and seeds, both tasks."""
    from .fusion import TrainConfig, predict_batch

    cfg = config or AblationConfig()
    if table is None or not table.blocks:
        raise UpstreamMissingError("ablation needs cached features; run the features stage first")
    train_cfg = TrainConfig.from_dict({**cfg.train, "seed": cfg.seed})
    te = table.rows_for(cohort_split["test"])
    reports = []
    for task in cfg.tasks:
        for variant in cfg.variants:
            result = fit_variant(table, cohort_split, variant, task, train_cfg, table.kb_version)
            scores = predict_batch(result.params, table.design(VARIANTS[variant])[te])
            rep = evaluate(scores, table.labels[task][te], table.subject_ids[te], task, variant,
                           cfg.seed, cfg.n_boot, cfg.aggregate, cfg.ci_method)
            rep.extra = {"best_epoch": result.best_epoch, "best_val_auc": result.best_val_auc,
                         "epochs_run": len(result.log)}
            reports.append(rep)
    return reports


def comparison_table(reports: list[EvalReport]) -> str:
    """Plain-text table: one row per variant, AUC [CI] per task."""
    tasks = sorted({r.task for r in reports}, key=lambda t: TASKS.index(t) if t in TASKS else 99)
    variants = list(dict.fromkeys(r.variant_name for r in reports))
    by = {(r.variant_name, r.task): r for r in reports}
    width = max(len(v) for v in variants)
    lines = [f"{'variant':<{width}}  " + "  ".join(f"{t:<22}" for t in tasks)]
    for v in variants:
        cells = []
        for t in tasks:
            r = by.get((v, t))
            cells.append(f"{r.auc:.3f} [{r.ci95[0]:.3f}, {r.ci95[1]:.3f}]" if r else "-")
        lines.append(f"{v:<{width}}  " + "  ".join(f"{c:<22}" for c in cells))
    return "\n".join(lines) + "\n"

"""Detection and classification metrics: FROC curves and their seven-point
average (CPM), diameter-stratified sensitivity, ROC/AUC, patient-bootstrap
confidence intervals, and calibration diagnostics.

FROC inputs are per-patient pairs (candidates, annotations). A candidate
"hits" a nodule per candidates.hit_test (center strictly inside the nodule
radius); at each threshold candidates are matched to nodules greedily by
distance, one candidate per nodule, and false positives are surviving
candidates that hit no nodule at all.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

from .candidates import hit_test as default_hit_test
from .errors import ValidationError

CPM_OPERATING_POINTS = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
DIAMETER_BINS = ((3.0, 5.0), (5.0, 30.0))


@dataclass(frozen=True)
class FrocCurve:
    points: tuple           # ((threshold, fp_per_scan, sensitivity), ...) thr desc
    n_patients: int
    n_nodules: int

    def __post_init__(self):
        pts = tuple(tuple(p) for p in self.points)
        for i in range(1, len(pts)):
            if pts[i][0] > pts[i - 1][0]:
                raise ValidationError("FROC points must be sorted by descending threshold")
            if pts[i][1] < pts[i - 1][1] - 1e-12 or pts[i][2] < pts[i - 1][2] - 1e-12:
                raise ValidationError("FROC must be monotone as the threshold decreases")
        for _, fp, sens in pts:
            if not 0.0 <= sens <= 1.0 or fp < 0.0:
                raise ValidationError("FROC point out of range")
        object.__setattr__(self, "points", pts)

    @property
    def empty(self):
        return self.n_nodules == 0


@dataclass(frozen=True)
class BootstrapEnvelope:
    level: float
    lo: tuple
    hi: tuple
    replicates: int


def _match(cands, anns, hit):
    """Greedy nearest-distance one-candidate-one-nodule matching.

    Returns (matched nodule indices, hitting candidate indices). Candidates
    that hit some nodule but lose the assignment are neither detections nor
    false positives.
    """
    pairs = []
    hitting = set()
    for ci, c in enumerate(cands):
        for ai, a in enumerate(anns):
            if hit(c, a):
                hitting.add(ci)
                d = math.dist(c.center_world, a.center_world)
                pairs.append((d, ci, ai))
    pairs.sort()
    used_c, used_a = set(), set()
    for _, ci, ai in pairs:
        if ci not in used_c and ai not in used_a:
            used_c.add(ci)
            used_a.add(ai)
    return used_a, hitting


def _froc_stats(patients, hit, score):
    """Per-threshold detection bookkeeping shared by froc() and the
    diameter-stratified variant.

    Returns (thresholds desc, fp counts per threshold, list per threshold of
    per-patient matched annotation index sets, n_patients, n_nodules).
    """
    if not patients:
        raise ValidationError("froc needs at least one patient")
    n_nodules = sum(len(anns) for _, anns in patients)
    all_scores = sorted(
        {score(c) for cands, _ in patients for c in cands}, reverse=True
    )
    for s in all_scores:
        if not 0.0 <= s <= 1.0:
            raise ValidationError(f"candidate score {s} outside [0, 1]")
    fp_counts, matches = [], []
    for t in all_scores:
        fp = 0
        per_patient = []
        for cands, anns in patients:
            surv = [c for c in cands if score(c) >= t]
            matched, hitting = _match(surv, anns, hit)
            fp += sum(1 for ci in range(len(surv)) if ci not in hitting)
            per_patient.append(matched)
        fp_counts.append(fp)
        matches.append(per_patient)
    return all_scores, fp_counts, matches, len(patients), n_nodules


def froc(patients, hit=default_hit_test, score=None):
    """FROC over per-patient (candidates, annotations) pairs.

    The threshold sweeps every distinct candidate score; a candidate survives
    threshold t when its score is >= t. The default candidate score is
    max_score.
    """
    score = score or (lambda c: c.max_score)
    thrs, fps, matches, n_pat, n_nod = _froc_stats(patients, hit, score)
    if n_nod == 0:
        raise ValidationError("froc needs at least one annotated nodule")
    points = [
        (t, fp / n_pat, sum(len(m) for m in per_pat) / n_nod)
        for t, fp, per_pat in zip(thrs, fps, matches)
    ]
    return FrocCurve(points=tuple(points), n_patients=n_pat, n_nodules=n_nod)


def cpm(curve):
    """Mean sensitivity at 1/8..8 FP/scan, linearly interpolated in
    fp_per_scan with flat extrapolation beyond the achieved range."""
    if not curve.points:
        raise ValidationError("cpm of an empty curve")
    fp = np.array([p[1] for p in curve.points])
    sens = np.array([p[2] for p in curve.points])
    order = np.argsort(fp, kind="stable")
    return float(np.mean(np.interp(CPM_OPERATING_POINTS, fp[order], sens[order])))


def sensitivity_by_diameter(patients, bins=DIAMETER_BINS, hit=default_hit_test,
                            score=None):
    """One FROC per diameter bin [lo, hi); nodule sensitivity is restricted
    to the bin but false-positive counts are shared (global). Empty bins
    yield curves with no points and n_nodules 0."""
    score = score or (lambda c: c.max_score)
    thrs, fps, matches, n_pat, _ = _froc_stats(patients, hit, score)
    out = []
    for lo, hi in bins:
        in_bin = [
            [ai for ai, a in enumerate(anns) if lo <= a.diameter < hi]
            for _, anns in patients
        ]
        n_bin = sum(len(b) for b in in_bin)
        if n_bin == 0:
            out.append(FrocCurve(points=(), n_patients=n_pat, n_nodules=0))
            continue
        points = []
        for t, fp, per_pat in zip(thrs, fps, matches):
            det = sum(
                len(set(b) & m) for b, m in zip(in_bin, per_pat)
            )
            points.append((t, fp / n_pat, det / n_bin))
        out.append(FrocCurve(points=tuple(points), n_patients=n_pat,
                             n_nodules=n_bin))
    return out


# ---------------------------------------------------------------------------
# ROC

def roc_auc(scores, labels):
    """Empirical ROC and trapezoidal AUC.

    Returns (curve, auc) where curve is a list of (fpr, tpr) from (0, 0) to
    (1, 1) with one step per distinct score. The AUC equals the pairwise
    probability P(score+ > score-) + 0.5 P(tie).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValidationError("scores and labels must be equal-length vectors")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos + n_neg != labels.size:
        raise ValidationError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("roc_auc needs both classes present")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    tp = np.cumsum(y == 1)
    fp = np.cumsum(y == 0)
    # keep only the last index of each tied-score run
    last = np.r_[s[1:] != s[:-1], True]
    tpr = np.r_[0.0, tp[last] / n_pos]
    fpr = np.r_[0.0, fp[last] / n_neg]
    auc = float(np.trapezoid(tpr, fpr))
    return list(zip(fpr.tolist(), tpr.tolist())), auc


# ---------------------------------------------------------------------------
# Bootstrap

def _nearest_rank(sorted_vals, q):
    n = len(sorted_vals)
    rank = max(1, math.ceil(q * n))
    return sorted_vals[min(rank, n) - 1]


def _bootstrap_values(metric, patients, B, rng):
    n = len(patients)
    if n < 2:
        raise ValidationError("bootstrap needs at least two patients")
    values = []
    attempts = 0
    while len(values) < B:
        attempts += 1
        if attempts > 10 * B:
            raise ValidationError(
                "bootstrap metric failed on too many replicates"
            )
        idx = rng.integers(0, n, size=n)
        try:
            values.append(metric([patients[i] for i in idx]))
        except ValidationError:
            continue
    return values


def bootstrap_ci(metric, patients, B=1000, level=0.95, rng=None):
    """Percentile bootstrap over patients: resample with replacement B
    times, take the nearest-rank [alpha/2, 1 - alpha/2] interval. Replicates
    on which the metric is undefined are redrawn (cap 10 B attempts)."""
    rng = rng or np.random.default_rng(0)
    values = sorted(_bootstrap_values(metric, patients, B, rng))
    alpha = 1.0 - level
    return _nearest_rank(values, alpha / 2.0), _nearest_rank(values, 1.0 - alpha / 2.0)


def bootstrap_envelope(metric_vec, patients, B=1000, level=0.95, rng=None):
    """Per-component percentile envelope for a vector-valued patient metric
    (e.g. FROC sensitivities at fixed operating points)."""
    rng = rng or np.random.default_rng(0)
    values = np.asarray(_bootstrap_values(metric_vec, patients, B, rng),
                        dtype=np.float64)
    alpha = 1.0 - level
    lo, hi = [], []
    for j in range(values.shape[1]):
        col = sorted(values[:, j])
        lo.append(_nearest_rank(col, alpha / 2.0))
        hi.append(_nearest_rank(col, 1.0 - alpha / 2.0))
    return BootstrapEnvelope(level=level, lo=tuple(lo), hi=tuple(hi),
                             replicates=B)


# ---------------------------------------------------------------------------
# Calibration

def calibration(probs, labels, n_bins=10):
    """Equal-width reliability bins on [0, 1] and the expected calibration
    error ece = sum (count/N) |mean prob - empirical freq|."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if probs.shape != labels.shape or probs.ndim != 1 or probs.size == 0:
        raise ValidationError("probs and labels must be equal-length vectors")
    if ((probs < 0) | (probs > 1)).any():
        raise ValidationError("probabilities must lie in [0, 1]")
    idx = np.minimum((probs * n_bins).astype(int), n_bins - 1)
    bins = []
    ece = 0.0
    n = probs.size
    for b in range(n_bins):
        sel = idx == b
        count = int(sel.sum())
        if count:
            mean_p = float(probs[sel].mean())
            freq = float(labels[sel].mean())
            ece += (count / n) * abs(mean_p - freq)
        else:
            mean_p, freq = float("nan"), float("nan")
        bins.append({
            "lo": b / n_bins, "hi": (b + 1) / n_bins,
            "mean_prob": mean_p, "frequency": freq, "count": count,
        })
    return {"bins": bins, "ece": ece}


# ---------------------------------------------------------------------------
# CSV exports

def save_froc_csv(curve, path, envelope=None):
    header = ["threshold", "fp_per_scan", "sensitivity"]
    if envelope is not None:
        if len(envelope.lo) != len(curve.points):
            raise ValidationError("envelope length does not match curve")
        header += ["lo", "hi"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, (t, fp, sens) in enumerate(curve.points):
            row = [repr(float(t)), repr(float(fp)), repr(float(sens))]
            if envelope is not None:
                row += [repr(float(envelope.lo[i])), repr(float(envelope.hi[i]))]
            writer.writerow(row)


def save_roc_csv(points, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fpr", "tpr"])
        for fpr, tpr in points:
            writer.writerow([repr(float(fpr)), repr(float(tpr))])

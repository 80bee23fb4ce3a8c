"""Diagnostic-accuracy statistics.

ROC/AUC with midrank tie handling, Youden operating point, confusion-matrix
metrics, the paired DeLong test, patient-clustered percentile bootstrap, and
McNemar's test. Everything is pure and deterministic; the bootstrap derives
one seed per replicate so replicates are schedule-independent.

Positive call convention throughout: score >= threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as spstats


class SingleClassError(ValueError):
    """Rank statistics need at least one positive and one negative."""


class ZeroVarianceError(ValueError):
    """DeLong variance degenerate while the AUCs differ."""


def _split_scores(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be matching 1-d vectors")
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise SingleClassError(
            f"need both classes, got {len(pos)} positives / {len(neg)} negatives")
    return pos, neg


# ---------------------------------------------------------------------------
# ROC / AUC
# ---------------------------------------------------------------------------


@dataclass
class RocResult:
    auc: float
    curve: list  # (fpr, tpr, threshold), threshold descending from +inf

    def to_dict(self) -> dict:
        return {"auc": self.auc,
                "curve": [{"fpr": f, "tpr": t, "threshold": th} for f, t, th in self.curve]}


def _midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks, ties sharing the average rank of their block."""
    order = np.argsort(x, kind="stable")
    sx = x[order]
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    while i < len(sx):
        j = i
        while j + 1 < len(sx) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auc_value(scores, labels) -> float:
    """Tie-corrected AUC via midranks, without the curve.

    The rank form is algebraically identical to the pairwise statistic
    sum(1[s_p > s_n] + 0.5*1[s_p == s_n]) / (n_pos*n_neg); both sides are
    sums of half-integers so the equality is exact in double precision.
    """
    pos, neg = _split_scores(scores, labels)
    n_pos, n_neg = len(pos), len(neg)
    ranks = _midranks(np.concatenate([pos, neg]))
    return float((ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_auc(scores, labels) -> RocResult:
    """AUC plus the full ROC polyline over distinct-score thresholds."""
    auc = auc_value(scores, labels)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    curve = [(0.0, 0.0, math.inf)]
    for t in sorted(set(scores.tolist()), reverse=True):
        calls = scores >= t
        tpr = float(calls[labels == 1].mean())
        fpr = float(calls[labels == 0].mean())
        curve.append((fpr, tpr, t))
    return RocResult(auc=float(auc), curve=curve)


def youden_threshold(scores, labels) -> float:
    """Distinct-score threshold maximizing J = sens + spec - 1.

    Ties on J go to the higher specificity, then the higher threshold.
    """
    _split_scores(scores, labels)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    best = None
    for t in sorted(set(scores.tolist())):
        calls = scores >= t
        sens = float(calls[labels == 1].mean())
        spec = float((~calls)[labels == 0].mean())
        key = (sens + spec - 1.0, spec, t)
        if best is None or key > best:
            best = key
    return best[2]


# ---------------------------------------------------------------------------
# operating point
# ---------------------------------------------------------------------------


@dataclass
class OperatingPoint:
    threshold: float
    sensitivity: float
    specificity: float
    accuracy: float
    balanced_accuracy: float
    precision: float
    npv: float
    f1: float
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("threshold", "sensitivity", "specificity", "accuracy",
                 "balanced_accuracy", "precision", "npv", "f1",
                 "tp", "fp", "tn", "fn")}


def _ratio(num: float, den: float) -> float:
    return num / den if den else math.nan


def operating_metrics(scores, labels, threshold: float) -> OperatingPoint:
    """Confusion-matrix metrics at a fixed threshold; 0/0 ratios are NaN."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    calls = scores >= threshold
    tp = int(np.sum(calls & (labels == 1)))
    fp = int(np.sum(calls & (labels == 0)))
    fn = int(np.sum(~calls & (labels == 1)))
    tn = int(np.sum(~calls & (labels == 0)))
    sens = _ratio(tp, tp + fn)
    spec = _ratio(tn, tn + fp)
    return OperatingPoint(
        threshold=float(threshold),
        sensitivity=sens,
        specificity=spec,
        accuracy=_ratio(tp + tn, tp + fp + tn + fn),
        balanced_accuracy=(sens + spec) / 2.0,
        precision=_ratio(tp, tp + fp),
        npv=_ratio(tn, tn + fn),
        f1=_ratio(2 * tp, 2 * tp + fp + fn),
        tp=tp, fp=fp, tn=tn, fn=fn,
    )


# ---------------------------------------------------------------------------
# paired DeLong
# ---------------------------------------------------------------------------


@dataclass
class DelongResult:
    auc_a: float
    auc_b: float
    delta: float
    z: float
    p: float

    def to_dict(self) -> dict:
        return {"auc_a": self.auc_a, "auc_b": self.auc_b,
                "delta": self.delta, "z": self.z, "p": self.p}


def placement_values(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """Per-positive and per-negative placement values.

    X_i is the fraction of negatives a positive outranks (ties half); Y_j is
    the fraction of positives outranking a negative. mean(X) == mean(Y) == AUC.
    """
    pos, neg = _split_scores(scores, labels)
    cmp = (pos[:, None] > neg[None, :]).astype(np.float64)
    cmp += 0.5 * (pos[:, None] == neg[None, :])
    return cmp.mean(axis=1), cmp.mean(axis=0)


def delong_paired(scores_a, scores_b, labels) -> DelongResult:
    """Two-sided paired DeLong test from placement-value covariances."""
    xa, ya = placement_values(scores_a, labels)
    xb, yb = placement_values(scores_b, labels)
    auc_a = float(xa.mean())
    auc_b = float(xb.mean())
    delta = auc_a - auc_b
    n_pos, n_neg = len(xa), len(ya)
    if n_pos < 2 or n_neg < 2:
        raise ValueError("paired DeLong needs >= 2 cases per class")
    s10 = np.cov(np.stack([xa, xb]))       # ddof=1 over positives
    s01 = np.cov(np.stack([ya, yb]))
    var = ((s10[0, 0] + s10[1, 1] - 2 * s10[0, 1]) / n_pos
           + (s01[0, 0] + s01[1, 1] - 2 * s01[0, 1]) / n_neg)
    if var <= 0.0:
        if delta == 0.0:
            return DelongResult(auc_a, auc_b, 0.0, 0.0, 1.0)
        raise ZeroVarianceError(
            f"zero DeLong variance with delta={delta:.6g}; cannot form z")
    z = delta / math.sqrt(var)
    p = float(2.0 * spstats.norm.sf(abs(z)))
    return DelongResult(auc_a, auc_b, delta, float(z), p)


# ---------------------------------------------------------------------------
# patient-level bootstrap
# ---------------------------------------------------------------------------


@dataclass
class CiEstimate:
    point: float
    lower: float
    upper: float
    n_resamples: int
    seed: int
    method: str = "percentile"
    n_redraws: int = 0

    def to_dict(self) -> dict:
        return {"point": self.point, "lower": self.lower, "upper": self.upper,
                "n_resamples": self.n_resamples, "seed": self.seed,
                "method": self.method, "n_redraws": self.n_redraws}


def bootstrap_ci(records, statistic, n_resamples: int = 2000, seed: int = 0,
                 cluster: str = "patient_id", alpha: float = 0.05) -> CiEstimate:
    """Cluster (patient) percentile bootstrap.

    Patients are resampled with replacement; a drawn patient contributes all
    of its records. Replicates where the statistic is undefined (raises
    SingleClassError or returns non-finite) are redrawn with a fresh derived
    seed so exactly n_resamples effective replicates survive; the redraw
    count is reported. Resampling is keyed by sorted patient ids, making the
    result invariant to record order.
    """
    records = list(records)
    point = float(statistic(records))
    if not math.isfinite(point):
        raise ValueError("statistic is undefined on the full data")
    by_patient: dict = {}
    for rec in records:
        by_patient.setdefault(rec[cluster], []).append(rec)
    patients = sorted(by_patient)
    n_pat = len(patients)
    reps = np.empty(n_resamples)
    n_redraws = 0
    for r in range(n_resamples):
        attempt = 0
        while True:
            rng = np.random.default_rng(np.random.SeedSequence([seed, r, attempt]))
            idx = rng.integers(0, n_pat, size=n_pat)
            sample = [rec for i in idx for rec in by_patient[patients[i]]]
            try:
                val = float(statistic(sample))
            except SingleClassError:
                val = math.nan
            if math.isfinite(val):
                reps[r] = val
                break
            attempt += 1
            n_redraws += 1
            if attempt > 1000:
                raise RuntimeError("bootstrap replicate kept drawing undefined samples")
    lower, upper = np.percentile(reps, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    lower = min(float(lower), point)
    upper = max(float(upper), point)
    return CiEstimate(point=point, lower=lower, upper=upper,
                      n_resamples=n_resamples, seed=seed, n_redraws=n_redraws)


# ---------------------------------------------------------------------------
# McNemar
# ---------------------------------------------------------------------------


@dataclass
class McNemarResult:
    p: float
    b: int           # A correct, B wrong
    c: int           # B correct, A wrong
    method: str      # exact-binomial | chi-square-cc | no-discordance
    statistic: float | None = None

    def to_dict(self) -> dict:
        return {"p": self.p, "b": self.b, "c": self.c,
                "method": self.method, "statistic": self.statistic}


def mcnemar(calls_a, calls_b, labels) -> McNemarResult:
    """Paired-accuracy McNemar test over discordant calls.

    Exact two-sided binomial when b + c < 25 (integer arithmetic, so the tiny
    p-values are exact); otherwise the continuity-corrected chi-square.
    """
    calls_a = np.asarray(calls_a).astype(bool)
    calls_b = np.asarray(calls_b).astype(bool)
    labels = np.asarray(labels).astype(bool)
    if not (calls_a.shape == calls_b.shape == labels.shape):
        raise ValueError("calls and labels must align")
    ok_a = calls_a == labels
    ok_b = calls_b == labels
    b = int(np.sum(ok_a & ~ok_b))
    c = int(np.sum(~ok_a & ok_b))
    n = b + c
    if n == 0:
        return McNemarResult(p=1.0, b=b, c=c, method="no-discordance")
    if n < 25:
        m = min(b, c)
        tail = sum(math.comb(n, k) for k in range(m + 1))
        p = min(1.0, 2 * tail / (1 << n))
        return McNemarResult(p=p, b=b, c=c, method="exact-binomial")
    stat = (abs(b - c) - 1) ** 2 / n
    p = float(spstats.chi2.sf(stat, df=1))
    return McNemarResult(p=p, b=b, c=c, method="chi-square-cc", statistic=stat)


# ---------------------------------------------------------------------------
# subgroup evaluation
# ---------------------------------------------------------------------------

FINDING_CATEGORIES = ("mass", "calcification", "asymmetry", "distortion")


@dataclass
class SubgroupModelStats:
    auc: CiEstimate
    sensitivity: float
    specificity: float


@dataclass
class SubgroupResult:
    name: str
    n_pos: int
    n_neg: int
    evaluable: bool
    reason: str = ""
    model_a: SubgroupModelStats | None = None
    model_b: SubgroupModelStats | None = None
    delta_auc: float | None = None
    delong_p: float | None = None

    def to_dict(self) -> dict:
        d = {"subgroup": self.name, "n_pos": self.n_pos, "n_neg": self.n_neg,
             "evaluable": self.evaluable}
        if not self.evaluable:
            d["reason"] = self.reason
            return d
        for tag, m in (("a", self.model_a), ("b", self.model_b)):
            d[f"auc_{tag}"] = m.auc.to_dict()
            d[f"sensitivity_{tag}"] = m.sensitivity
            d[f"specificity_{tag}"] = m.specificity
        d["delta_auc"] = self.delta_auc
        d["delong_p"] = self.delong_p
        return d


def _select_members(records, selector: str) -> dict:
    """Map subgroup name -> record index list. A record with several findings
    joins every matching finding subgroup."""
    groups: dict = {}
    if selector == "density-group":
        for i, rec in enumerate(records):
            groups.setdefault(rec.get("density_group", "NR"), []).append(i)
    elif selector == "finding":
        for i, rec in enumerate(records):
            for f in rec.get("findings", ()):  # multi-membership
                if f in FINDING_CATEGORIES:
                    groups.setdefault(f, []).append(i)
    else:
        raise ValueError(f"unknown selector {selector!r}")
    return groups


def subgroup_eval(predictions_a, predictions_b, selector: str,
                  threshold: float = 0.5, n_resamples: int = 2000,
                  seed: int = 0) -> list[SubgroupResult]:
    """Filter paired predictions into subgroups and rerun the full battery.

    Both prediction lists must describe the same cases in the same order;
    subgroup membership comes from the shared case metadata. Single-class
    subgroups are reported as not evaluable instead of dropped.
    """
    preds_a = list(predictions_a)
    preds_b = list(predictions_b)
    if len(preds_a) != len(preds_b):
        raise ValueError("paired prediction lists must have equal length")
    for ra, rb in zip(preds_a, preds_b):
        if ra["label"] != rb["label"] or ra["patient_id"] != rb["patient_id"]:
            raise ValueError("prediction lists are not aligned case-for-case")
    groups = _select_members(preds_a, selector)
    out = []
    for name in sorted(groups):
        idx = groups[name]
        sub_a = [preds_a[i] for i in idx]
        sub_b = [preds_b[i] for i in idx]
        labels = np.array([r["label"] for r in sub_a])
        n_pos = int(np.sum(labels == 1))
        n_neg = int(np.sum(labels == 0))
        if n_pos == 0 or n_neg == 0:
            out.append(SubgroupResult(name=name, n_pos=n_pos, n_neg=n_neg,
                                      evaluable=False,
                                      reason="single-class subgroup"))
            continue

        def auc_stat(recs):
            return auc_value([r["score"] for r in recs],
                             [r["label"] for r in recs])

        stats = []
        for subset in (sub_a, sub_b):
            scores = np.array([r["score"] for r in subset])
            ci = bootstrap_ci(subset, auc_stat, n_resamples=n_resamples, seed=seed)
            op = operating_metrics(scores, labels, threshold)
            stats.append(SubgroupModelStats(auc=ci, sensitivity=op.sensitivity,
                                            specificity=op.specificity))
        scores_a = np.array([r["score"] for r in sub_a])
        scores_b = np.array([r["score"] for r in sub_b])
        try:
            dl = delong_paired(scores_a, scores_b, labels)
            delong_p = dl.p
            delta = dl.delta
        except (ValueError, SingleClassError):
            delong_p = None
            delta = stats[0].auc.point - stats[1].auc.point
        out.append(SubgroupResult(name=name, n_pos=n_pos, n_neg=n_neg,
                                  evaluable=True, model_a=stats[0],
                                  model_b=stats[1], delta_auc=delta,
                                  delong_p=delong_p))
    return out

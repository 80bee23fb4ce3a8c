"""Multi-reader multi-case study planning and analysis.

Covers the observer-study workflow around the encoder: assigning the three
reading-condition orders to readers, randomizing per-reader case order,
agreement (Fleiss' kappa), reading-time totals, reader performance tables,
and the mixed-model comparison of conditions (re-exported from glmm).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .glmm import GlmmFit, glmm_fit, simulate_trials  # noqa: F401
from .metrics import _ratio

CONDITIONS = ("grayscale-only", "tdce-only", "side-by-side")

# The three rotations of the condition cycle; rows of a 3x3 Latin square.
LATIN_ORDERS = (
    ("grayscale-only", "tdce-only", "side-by-side"),
    ("tdce-only", "side-by-side", "grayscale-only"),
    ("side-by-side", "grayscale-only", "tdce-only"),
)

TIERS = ("junior", "intermediate", "senior")

BINARY_CALLS = ("non-suspicious", "suspicious")

DEFAULT_WASHOUT_DAYS = 28

RATINGS_CSV_HEADER = ("reader_id", "case_id", "condition", "binary_call",
                      "birads", "total_seconds")


class KappaUndefinedError(ValueError):
    """All ratings fall in one category, so chance agreement is 1."""


def _check_intervals(intervals) -> tuple:
    out = []
    for pair in intervals:
        start, stop = float(pair[0]), float(pair[1])
        if not (stop > start):
            raise ValueError(f"interval stop must exceed start: ({start}, {stop})")
        out.append((start, stop))
    out.sort()
    for (_, prev_stop), (nxt_start, _) in zip(out, out[1:]):
        if nxt_start < prev_stop:
            raise ValueError("overlapping intervals")
    return tuple(out)


@dataclass(frozen=True)
class ReaderRating:
    """One reader's assessment of one case under one condition.

    Carries the binary triage call and/or a BI-RADS category, plus the
    pause/resume timing intervals for that reading.
    """
    reader_id: str
    case_id: str
    condition: str
    binary_call: str | None = None
    birads: int | None = None
    intervals: tuple = ()

    def __post_init__(self):
        if self.binary_call is None and self.birads is None:
            raise ValueError("rating needs a binary call or a BI-RADS category")
        if self.binary_call is not None and self.binary_call not in BINARY_CALLS:
            raise ValueError(f"binary_call must be one of {BINARY_CALLS}")
        if self.birads is not None and self.birads not in range(7):
            raise ValueError(f"birads must be 0..6, got {self.birads!r}")
        object.__setattr__(self, "intervals", _check_intervals(self.intervals))

    @property
    def total_seconds(self) -> float:
        return sum(stop - start for start, stop in self.intervals)


def _rating_fields(r):
    """Accepts ReaderRating objects or CSV-shaped dicts."""
    if isinstance(r, ReaderRating):
        return (r.reader_id, r.case_id, r.condition,
                r.binary_call, r.birads, r.total_seconds)
    call = r.get("binary_call") or None
    birads = r.get("birads")
    if birads in ("", None):
        birads = None
    else:
        birads = int(birads)
    return (r["reader_id"], r["case_id"], r["condition"],
            call, birads, float(r.get("total_seconds") or 0.0))


def effective_call(binary_call: str | None, birads: int | None) -> str:
    """Binary call, falling back to the BI-RADS split (1-3 vs 4-6)."""
    if binary_call is not None:
        return binary_call
    if birads is None:
        raise ValueError("rating has neither binary call nor BI-RADS")
    if birads == 0:
        raise ValueError("BI-RADS 0 has no binary mapping; a binary call is required")
    return "suspicious" if birads >= 4 else "non-suspicious"


@dataclass(frozen=True)
class ReaderSlot:
    """One reader's full schedule: condition order and per-session case order."""
    reader_id: str
    tier: str
    condition_order: tuple
    case_orders: tuple  # one case-id tuple per session

    def to_dict(self) -> dict:
        return {
            "reader_id": self.reader_id,
            "tier": self.tier,
            "condition_order": list(self.condition_order),
            "case_orders": [list(order) for order in self.case_orders],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReaderSlot":
        return cls(reader_id=d["reader_id"], tier=d["tier"],
                   condition_order=tuple(d["condition_order"]),
                   case_orders=tuple(tuple(o) for o in d["case_orders"]))


@dataclass(frozen=True)
class StudyPlan:
    readers: tuple  # ReaderSlot per reader, in assignment order
    cases: tuple
    washout_days: int
    seed: int
    conditions: tuple = CONDITIONS

    def reader(self, reader_id: str) -> ReaderSlot:
        for slot in self.readers:
            if slot.reader_id == reader_id:
                return slot
        raise KeyError(reader_id)

    def to_dict(self) -> dict:
        return {
            "conditions": list(self.conditions),
            "washout_days": self.washout_days,
            "seed": self.seed,
            "cases": list(self.cases),
            "readers": [slot.to_dict() for slot in self.readers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StudyPlan":
        return cls(readers=tuple(ReaderSlot.from_dict(r) for r in d["readers"]),
                   cases=tuple(d["cases"]),
                   washout_days=int(d["washout_days"]),
                   seed=int(d["seed"]),
                   conditions=tuple(d["conditions"]))


def save_plan(plan: StudyPlan, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(plan.to_dict(), fh, indent=2)
        fh.write("\n")


def load_plan(path) -> StudyPlan:
    with open(path, encoding="utf-8") as fh:
        return StudyPlan.from_dict(json.load(fh))


def build_plan(readers, cases, seed: int = 0,
               washout_days: int = DEFAULT_WASHOUT_DAYS) -> StudyPlan:
    """Assign condition orders and per-session case orders to readers.

    Readers are grouped by tier (junior, intermediate, senior) and sorted by
    id within each tier; walking that sequence, the three condition orders
    cycle, so each order lands on the same number of readers and consecutive
    readers within a tier get different orders. Case order is drawn
    independently for every (reader, session) pair from a seed derived from
    the plan seed and the reader's position.
    """
    reader_list = [dict(r) for r in readers]
    seen = set()
    for r in reader_list:
        rid = r["reader_id"]
        if rid in seen:
            raise ValueError(f"duplicate reader id {rid!r}")
        seen.add(rid)
        if r["tier"] not in TIERS:
            raise ValueError(f"unknown tier {r['tier']!r} for reader {rid!r}")
    n = len(reader_list)
    if n == 0 or n % 3 != 0:
        raise ValueError(
            f"reader count must be a positive multiple of 3; got {n} "
            f"(remainder {n % 3})")
    case_ids = [str(c) for c in cases]
    if not case_ids:
        raise ValueError("case list is empty")
    if len(set(case_ids)) != len(case_ids):
        dupes = sorted({c for c in case_ids if case_ids.count(c) > 1})
        raise ValueError(f"duplicate case ids: {dupes}")

    ordered = []
    for tier in TIERS:
        ordered.extend(sorted((r for r in reader_list if r["tier"] == tier),
                              key=lambda r: r["reader_id"]))
    slots = []
    for pos, r in enumerate(ordered):
        condition_order = LATIN_ORDERS[pos % 3]
        case_orders = []
        for session in range(3):
            rng = np.random.default_rng(np.random.SeedSequence([seed, pos, session]))
            perm = rng.permutation(len(case_ids))
            case_orders.append(tuple(case_ids[i] for i in perm))
        slots.append(ReaderSlot(reader_id=r["reader_id"], tier=r["tier"],
                                condition_order=condition_order,
                                case_orders=tuple(case_orders)))
    return StudyPlan(readers=tuple(slots), cases=tuple(case_ids),
                     washout_days=washout_days, seed=seed)


def fleiss_kappa(matrix, categories=None) -> float:
    """Fleiss' kappa for a cases-by-readers matrix of category labels.

    Every case must be rated by the same number (>= 2) of readers.
    categories fixes the category universe; by default it is the sorted set
    of observed labels. Raises KappaUndefinedError when all ratings fall in
    a single category (chance agreement is exactly 1).
    """
    rows = [list(row) for row in matrix]
    if not rows:
        raise ValueError("empty rating matrix")
    n = len(rows[0])
    if n < 2:
        raise ValueError("each case needs at least 2 ratings")
    if any(len(row) != n for row in rows):
        raise ValueError("every case must be rated by the same number of readers")
    if categories is None:
        categories = sorted({c for row in rows for c in row}, key=repr)
    else:
        categories = list(categories)
        observed = {c for row in rows for c in row}
        extra = observed - set(categories)
        if extra:
            raise ValueError(f"ratings outside the category set: {sorted(extra, key=repr)}")
    index = {c: j for j, c in enumerate(categories)}
    counts = np.zeros((len(rows), len(categories)))
    for i, row in enumerate(rows):
        for c in row:
            counts[i, index[c]] += 1
    # per-case agreement and category base rates
    p_case = (np.sum(counts * counts, axis=1) - n) / (n * (n - 1))
    p_bar = float(np.mean(p_case))
    p_cat = np.sum(counts, axis=0) / (len(rows) * n)
    p_e = float(np.sum(p_cat * p_cat))
    if p_e >= 1.0:
        raise KappaUndefinedError("all ratings in one category; kappa undefined")
    return (p_bar - p_e) / (1.0 - p_e)


def kappa_from_ratings(ratings, condition: str, scale: str = "binary") -> float:
    """Fleiss' kappa across readers for one condition.

    scale "binary" uses the triage calls (BI-RADS-only ratings are mapped
    through the 1-3 / 4-6 split); scale "birads" uses the raw 0-6
    categories and requires every rating to carry one.
    """
    if scale not in ("binary", "birads"):
        raise ValueError(f"scale must be 'binary' or 'birads', got {scale!r}")
    cells = {}
    readers = set()
    for r in ratings:
        rid, cid, cond, call, birads, _ = _rating_fields(r)
        if cond != condition:
            continue
        if scale == "binary":
            value = effective_call(call, birads)
        else:
            if birads is None:
                raise ValueError(f"rating {rid}/{cid} has no BI-RADS category")
            value = birads
        if (rid, cid) in cells:
            raise ValueError(f"duplicate rating for reader {rid!r} case {cid!r}")
        cells[(rid, cid)] = value
        readers.add(rid)
    if not cells:
        raise ValueError(f"no ratings for condition {condition!r}")
    reader_order = sorted(readers)
    case_order = sorted({cid for _, cid in cells})
    matrix = []
    for cid in case_order:
        row = []
        for rid in reader_order:
            if (rid, cid) not in cells:
                raise ValueError(f"missing rating for reader {rid!r} case {cid!r}")
            row.append(cells[(rid, cid)])
        matrix.append(row)
    categories = list(BINARY_CALLS) if scale == "binary" else list(range(7))
    return fleiss_kappa(matrix, categories=categories)


@dataclass(frozen=True)
class ReaderConditionRow:
    reader_id: str
    tier: str | None
    condition: str
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    sensitivity: float
    specificity: float

    def to_dict(self) -> dict:
        return {
            "reader_id": self.reader_id, "tier": self.tier,
            "condition": self.condition,
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
            "accuracy": self.accuracy, "sensitivity": self.sensitivity,
            "specificity": self.specificity,
        }


@dataclass(frozen=True)
class ReaderTable:
    """Per-reader diagnostic performance plus condition and tier summaries."""
    rows: tuple
    by_condition: dict
    by_tier: dict

    def to_dict(self) -> dict:
        return {
            "rows": [r.to_dict() for r in self.rows],
            "by_condition": self.by_condition,
            "by_tier": self.by_tier,
        }


_METRIC_NAMES = ("accuracy", "sensitivity", "specificity")


def _condition_rank(cond: str):
    try:
        return (0, CONDITIONS.index(cond))
    except ValueError:
        return (1, cond)


def _tier_rank(tier):
    try:
        return (0, TIERS.index(tier))
    except (ValueError, TypeError):
        return (1, str(tier))


def reader_table(ratings, reference, tiers=None) -> ReaderTable:
    """Confusion counts and accuracy/sensitivity/specificity per reader.

    reference maps case_id to 0/1 truth (1 = suspicious). Equivocal
    reference cases must already be excluded from the mapping; a rating for
    a case that is absent from it is an error. tiers optionally maps
    reader_id to tier for the tier-level summary.
    """
    tiers = dict(tiers or {})
    for case_id, label in reference.items():
        if label not in (0, 1):
            raise ValueError(f"reference for {case_id!r} must be 0 or 1, got {label!r}")
    counts = {}
    for r in ratings:
        rid, cid, cond, call, birads, _ = _rating_fields(r)
        if cid not in reference:
            raise ValueError(f"rating references unknown case {cid!r}")
        predicted = effective_call(call, birads) == "suspicious"
        truth = reference[cid] == 1
        key = (rid, cond)
        tp, fp, tn, fn = counts.get(key, (0, 0, 0, 0))
        if truth and predicted:
            tp += 1
        elif truth:
            fn += 1
        elif predicted:
            fp += 1
        else:
            tn += 1
        counts[key] = (tp, fp, tn, fn)
    if not counts:
        raise ValueError("no ratings given")

    rows = []
    for (rid, cond), (tp, fp, tn, fn) in counts.items():
        rows.append(ReaderConditionRow(
            reader_id=rid, tier=tiers.get(rid), condition=cond,
            tp=tp, fp=fp, tn=tn, fn=fn,
            accuracy=_ratio(tp + tn, tp + fp + tn + fn),
            sensitivity=_ratio(tp, tp + fn),
            specificity=_ratio(tn, tn + fp)))
    rows.sort(key=lambda r: (_tier_rank(r.tier), r.reader_id,
                             _condition_rank(r.condition)))

    def summarize(selected):
        return {name: float(np.mean([getattr(r, name) for r in selected]))
                for name in _METRIC_NAMES}

    by_condition = {}
    for cond in sorted({r.condition for r in rows}, key=_condition_rank):
        by_condition[cond] = summarize([r for r in rows if r.condition == cond])
    by_tier = {}
    for tier in sorted({r.tier for r in rows if r.tier is not None}, key=_tier_rank):
        tier_rows = [r for r in rows if r.tier == tier]
        by_tier[tier] = {
            cond: summarize([r for r in tier_rows if r.condition == cond])
            for cond in sorted({r.condition for r in tier_rows}, key=_condition_rank)
        }
    return ReaderTable(rows=tuple(rows), by_condition=by_condition, by_tier=by_tier)


def reading_time(ratings) -> dict:
    """Total reading seconds per reader per condition.

    Sums (stop - start) over each rating's pause/resume intervals, then over
    cases. Overlapping intervals within a rating are rejected.
    """
    totals = {}
    for r in ratings:
        if isinstance(r, ReaderRating):
            seconds = sum(stop - start
                          for start, stop in _check_intervals(r.intervals))
            rid, cond = r.reader_id, r.condition
        else:
            rid, _, cond, _, _, seconds = _rating_fields(r)
        totals.setdefault(rid, {})
        totals[rid][cond] = totals[rid].get(cond, 0.0) + seconds
    return totals


def trials_from_ratings(ratings, reference) -> list:
    """Bernoulli correctness trials for the mixed-model comparison."""
    trials = []
    for r in ratings:
        rid, cid, cond, call, birads, _ = _rating_fields(r)
        if cid not in reference:
            raise ValueError(f"rating references unknown case {cid!r}")
        truth = int(reference[cid])
        predicted = int(effective_call(call, birads) == "suspicious")
        trials.append({"reader_id": rid, "case_id": cid, "condition": cond,
                       "correct": int(predicted == truth), "reference": truth})
    return trials


def write_ratings_csv(ratings, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RATINGS_CSV_HEADER)
        for r in ratings:
            rid, cid, cond, call, birads, seconds = _rating_fields(r)
            writer.writerow([rid, cid, cond, call or "",
                             "" if birads is None else birads, repr(float(seconds))])


def read_ratings_csv(path) -> list:
    """Rows as dicts; timing comes back as total_seconds only."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != list(RATINGS_CSV_HEADER):
            raise ValueError(f"unexpected ratings header: {header}")
        rows = []
        for rec in reader:
            if len(rec) != len(RATINGS_CSV_HEADER):
                raise ValueError(f"malformed ratings row: {rec}")
            rows.append({
                "reader_id": rec[0], "case_id": rec[1], "condition": rec[2],
                "binary_call": rec[3] or None,
                "birads": int(rec[4]) if rec[4] != "" else None,
                "total_seconds": float(rec[5]),
            })
    return rows

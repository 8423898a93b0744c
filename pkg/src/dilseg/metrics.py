"""Evaluation: Dice overlap, per-class reports, report deltas, and the
Wilcoxon signed-rank test.

Per-class DSC is pooled over the whole dataset (global intersection and
size sums across slices) rather than averaged per slice: thin structures
vanish from many individual slices, which would leave per-slice DSC
undefined exactly where the comparison matters. The both-absent
convention scores 1.0 (prediction and truth agree the class is missing);
pass ignore_absent=True to exclude such classes from the summary instead.

Summary rows use the sample standard deviation (n - 1 denominator); the
choice is recorded in the report's std_denominator field.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from dilseg.data import CLASS_NAMES, NUM_CLASSES
from dilseg.errors import (
    DatasetError,
    DegenerateDataError,
    LabelError,
    SchemaError,
    ShapeError,
)

STD_DENOMINATOR = "n-1"


def dice(pred, truth, class_id):
    """2 |P n T| / (|P| + |T|) for one class; 1.0 when both masks are empty."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    if not 0 <= class_id < NUM_CLASSES:
        raise LabelError(f"class_id must be in 0..{NUM_CLASSES - 1}, got {class_id}")
    p = pred == class_id
    t = truth == class_id
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / denom


@dataclass(frozen=True)
class MetricsReport:
    """Per-class DSC plus Table-style summary rows.

    per_class holds one entry per class in the fixed name order; an entry
    is None only when ignore_absent excluded that class. Summaries are
    computed over the non-excluded entries.
    """

    per_class: tuple
    mean: float
    std_dev: float
    min_value: float
    max_value: float
    class_names: tuple = tuple(CLASS_NAMES)
    std_denominator: str = STD_DENOMINATOR


def _summarize(values):
    vals = [v for v in values if v is not None]
    if not vals:
        raise DegenerateDataError("every class was excluded from the report")
    mean = sum(vals) / len(vals)
    if len(vals) > 1:
        std = math.sqrt(sum((v - mean) ** 2 for v in vals) / (len(vals) - 1))
    else:
        std = 0.0
    return mean, std, min(vals), max(vals)


def report_from_values(per_class):
    """Build a MetricsReport from per-class DSC values (None = excluded)."""
    if len(per_class) != NUM_CLASSES:
        raise SchemaError(f"expected {NUM_CLASSES} per-class values, got {len(per_class)}")
    for v in per_class:
        if v is not None and not 0.0 <= v <= 1.0:
            raise ShapeError(f"DSC value {v} outside [0, 1]")
    mean, std, lo, hi = _summarize(per_class)
    return MetricsReport(tuple(per_class), mean, std, lo, hi)


def dsc_report(preds, truths, ignore_absent=False):
    """Pooled per-class DSC over paired label-map lists."""
    preds = list(preds)
    truths = list(truths)
    if not preds:
        raise DatasetError("cannot evaluate an empty dataset")
    if len(preds) != len(truths):
        raise ShapeError(f"{len(preds)} predictions vs {len(truths)} truths")
    inter = np.zeros(NUM_CLASSES, dtype=np.int64)
    p_size = np.zeros(NUM_CLASSES, dtype=np.int64)
    t_size = np.zeros(NUM_CLASSES, dtype=np.int64)
    for p, t in zip(preds, truths):
        p = np.asarray(p)
        t = np.asarray(t)
        if p.shape != t.shape:
            raise ShapeError(f"mask shapes differ: {p.shape} vs {t.shape}")
        if not (np.issubdtype(p.dtype, np.integer) and np.issubdtype(t.dtype, np.integer)):
            raise LabelError("label maps must be integer arrays")
        if p.size and (p.min() < 0 or p.max() >= NUM_CLASSES):
            raise LabelError("prediction labels outside 0..7")
        if t.size and (t.min() < 0 or t.max() >= NUM_CLASSES):
            raise LabelError("truth labels outside 0..7")
        inter += np.bincount(p.reshape(-1)[p.reshape(-1) == t.reshape(-1)],
                             minlength=NUM_CLASSES)
        p_size += np.bincount(p.reshape(-1), minlength=NUM_CLASSES)
        t_size += np.bincount(t.reshape(-1), minlength=NUM_CLASSES)
    per_class = []
    for c in range(NUM_CLASSES):
        denom = int(p_size[c] + t_size[c])
        if denom == 0:
            per_class.append(None if ignore_absent else 1.0)
        else:
            per_class.append(2.0 * int(inter[c]) / denom)
    return report_from_values(per_class)


def _average_ranks(values):
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_two_sided_p(doubled_ranks, doubled_w):
    """P(min(T, S - T) <= W) over uniform sign assignments, by subset-sum
    counting on integer (doubled) ranks."""
    total = int(sum(doubled_ranks))
    counts = np.zeros(total + 1, dtype=object)  # exact big-int counting
    counts[0] = 1
    for r in doubled_ranks:
        r = int(r)
        counts[r:] = counts[r:] + counts[:-r]
    low = int(sum(counts[: doubled_w + 1]))
    high = int(sum(counts[total - doubled_w :]))
    overlap = int(counts[doubled_w]) if 2 * doubled_w == total else 0
    return (low + high - overlap) / 2.0 ** len(doubled_ranks)


def wilcoxon_signed_rank(a, b):
    """Two-sided paired signed-rank test on differences b - a.

    Zero differences are dropped; |differences| are ranked with average
    ranks on ties; W = min(positive-rank sum, negative-rank sum). The
    p-value is exact (full sign-assignment distribution) for n <= 20 and
    a normal approximation with continuity and tie corrections above.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"paired lists must be equal-length 1-D, got {a.shape} vs {b.shape}")
    d = b - a
    d = d[d != 0.0]
    if d.size == 0:
        raise DegenerateDataError("all paired differences are zero")
    if d.size < 5:
        raise DegenerateDataError(
            f"need >= 5 nonzero differences for the signed-rank test, got {d.size}"
        )
    mags = np.abs(d)
    ranks = _average_ranks(mags)
    w_plus = float(ranks[d > 0].sum())
    total = float(ranks.sum())
    w = min(w_plus, total - w_plus)
    n = d.size
    if n <= 20:
        doubled = np.rint(2.0 * ranks).astype(int)
        p = _exact_two_sided_p(doubled, int(round(2.0 * w)))
    else:
        mean = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0
        _, tie_counts = np.unique(mags, return_counts=True)
        var -= float(((tie_counts ** 3 - tie_counts) / 48.0).sum())
        if var <= 0.0:
            raise DegenerateDataError("tied magnitudes leave zero variance")
        z = (w - mean + 0.5) / math.sqrt(var)
        p = min(1.0, math.erfc(-z / math.sqrt(2.0)))
    return w, p


@dataclass(frozen=True)
class DeltaReport:
    """Elementwise report difference (b - a) with the paired test result."""

    deltas: tuple
    mean_delta: float
    wilcoxon_w: float
    wilcoxon_p: float
    degenerate: bool
    class_names: tuple = tuple(CLASS_NAMES)


def compare_reports(a, b):
    """Per-class deltas b - a plus the Wilcoxon test over the pairs."""
    if a.class_names != b.class_names:
        raise SchemaError(f"class sets differ: {a.class_names} vs {b.class_names}")
    if any(v is None for v in a.per_class) or any(v is None for v in b.per_class):
        raise SchemaError("reports with excluded classes cannot be compared")
    deltas = tuple(vb - va for va, vb in zip(a.per_class, b.per_class))
    mean_delta = b.mean - a.mean
    try:
        w, p = wilcoxon_signed_rank(a.per_class, b.per_class)
        return DeltaReport(deltas, mean_delta, w, p, False, a.class_names)
    except DegenerateDataError:
        return DeltaReport(deltas, mean_delta, math.nan, math.nan, True, a.class_names)


def _fmt_fraction(value):
    return "" if value is None else f"{value:.6f}"


def _fmt_percent(value):
    return "" if value is None else f"{100.0 * value:.1f}"


_SUMMARY_ROWS = ("Mean", "Std. dev.", "Min", "Max")


def _summary_values(report):
    return (report.mean, report.std_dev, report.min_value, report.max_value)


def render_report_csv(report):
    """Machine form: class,dsc rows, summary rows, denominator note."""
    lines = ["class,dsc"]
    for name, value in zip(report.class_names, report.per_class):
        lines.append(f"{name},{_fmt_fraction(value)}")
    for name, value in zip(_SUMMARY_ROWS, _summary_values(report)):
        lines.append(f"{name},{_fmt_fraction(value)}")
    lines.append(f"# std denominator: {report.std_denominator}")
    return "\n".join(lines) + "\n"


def render_report_text(report):
    """Human form: aligned two-column table, DSC in percent (one decimal)."""
    rows = list(zip(report.class_names, report.per_class))
    rows += list(zip(_SUMMARY_ROWS, _summary_values(report)))
    name_w = max(len(name) for name, _ in rows)
    lines = [f"{'Region':<{name_w}}  DSC %", "-" * (name_w + 7)]
    for name, value in rows:
        lines.append(f"{name:<{name_w}}  {_fmt_percent(value):>5}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class ComparisonReport:
    """Side-by-side train/test columns for two models plus the test delta."""

    columns: tuple  # of (header, MetricsReport)
    delta: DeltaReport
    delta_header: str = "delta_test"
    class_names: tuple = field(default=tuple(CLASS_NAMES))


def make_comparison(columns, delta_a, delta_b, delta_header="delta_test"):
    """Assemble a comparison table; delta column is delta_b minus delta_a."""
    names = columns[0][1].class_names
    for _, rep in columns:
        if rep.class_names != names:
            raise SchemaError("comparison columns use different class sets")
    return ComparisonReport(tuple(columns), compare_reports(delta_a, delta_b),
                            delta_header, names)


def render_comparison_csv(comp):
    headers = [h for h, _ in comp.columns]
    lines = ["class," + ",".join(headers) + f",{comp.delta_header}"]
    for idx, name in enumerate(comp.class_names):
        cells = [_fmt_fraction(rep.per_class[idx]) for _, rep in comp.columns]
        cells.append(_fmt_fraction(comp.delta.deltas[idx]))
        lines.append(f"{name}," + ",".join(cells))
    summaries = [_summary_values(rep) for _, rep in comp.columns]
    for row_i, row_name in enumerate(_SUMMARY_ROWS):
        cells = [_fmt_fraction(vals[row_i]) for vals in summaries]
        cells.append(_fmt_fraction(comp.delta.mean_delta) if row_name == "Mean" else "")
        lines.append(f"{row_name}," + ",".join(cells))
    if comp.delta.degenerate:
        lines.append("# wilcoxon: degenerate (all deltas zero)")
    else:
        lines.append(
            f"# wilcoxon: W={comp.delta.wilcoxon_w:.1f} p={comp.delta.wilcoxon_p:.6g}"
        )
    return "\n".join(lines) + "\n"


def render_comparison_text(comp):
    headers = [h for h, _ in comp.columns] + [comp.delta_header]
    name_w = max(
        max(len(n) for n in comp.class_names),
        max(len(r) for r in _SUMMARY_ROWS),
        len("Region"),
    )
    col_w = max(8, max(len(h) for h in headers) + 1)
    lines = [
        f"{'Region':<{name_w}}" + "".join(f"{h:>{col_w}}" for h in headers),
        "-" * (name_w + col_w * len(headers)),
    ]
    for idx, name in enumerate(comp.class_names):
        cells = [_fmt_percent(rep.per_class[idx]) for _, rep in comp.columns]
        cells.append(_fmt_percent(comp.delta.deltas[idx]))
        lines.append(f"{name:<{name_w}}" + "".join(f"{c:>{col_w}}" for c in cells))
    summaries = [_summary_values(rep) for _, rep in comp.columns]
    for row_i, row_name in enumerate(_SUMMARY_ROWS):
        cells = [_fmt_percent(vals[row_i]) for vals in summaries]
        cells.append(_fmt_percent(comp.delta.mean_delta) if row_name == "Mean" else "")
        lines.append(f"{row_name:<{name_w}}" + "".join(f"{c:>{col_w}}" for c in cells))
    if comp.delta.degenerate:
        lines.append("Wilcoxon signed-rank: degenerate (all deltas zero)")
    else:
        lines.append(
            f"Wilcoxon signed-rank: W={comp.delta.wilcoxon_w:.1f}, "
            f"two-sided p={comp.delta.wilcoxon_p:.6g}"
        )
    return "\n".join(lines) + "\n"

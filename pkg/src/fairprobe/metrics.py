"""Confusion-based classification and fairness metrics, plus the signed-rank test.

Rates are computed with exact rational arithmetic on counts and converted to
``float`` once at the end, so independent counting code reproduces them bit
for bit. Undefined quantities are ``None``, never 0.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._io import atomic_path
from .dataio import DENSITY_TOKENS, DatasetBundle, get_task
from .errors import ConfigError, DataError, HeaderError

REPORT_COLUMNS = ("metric", "task", "strategy", "dataset", "class", "group1", "group2", "value", "missing")
AGE_BUCKETS = ("<40", "40-70", ">70")


def confusion(y_true: Sequence[int], y_pred: Sequence[int], K: int) -> np.ndarray:
    """K x K counts; entry (i, j) is the number of class-i samples predicted j."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise DataError("y_true and y_pred differ in length")
    if y_true.size and (min(y_true.min(), y_pred.min()) < 0 or max(y_true.max(), y_pred.max()) >= K):
        raise DataError(f"labels must lie in 0..{K - 1}")
    cm = np.zeros((K, K), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _f1_fraction(cm: np.ndarray) -> Fraction | None:
    cm = np.asarray(cm, dtype=np.int64)
    scores = []
    for k in range(cm.shape[0]):
        tp = int(cm[k, k])
        actual = int(cm[k].sum())
        predicted = int(cm[:, k].sum())
        if actual == 0 and predicted == 0:
            continue
        scores.append(Fraction(2 * tp, actual + predicted))
    if not scores:
        return None
    return sum(scores, Fraction(0)) / len(scores)


def f1_macro(cm: np.ndarray) -> float:
    """Unweighted mean of per-class F1 (classes never seen nor predicted are skipped)."""
    cm = np.asarray(cm)
    if cm.size == 0 or cm.sum() == 0:
        raise DataError("empty confusion matrix")
    return float(_f1_fraction(cm))


def per_class_recall(cm: np.ndarray) -> list[float | None]:
    cm = np.asarray(cm, dtype=np.int64)
    out = []
    for k in range(cm.shape[0]):
        total = int(cm[k].sum())
        out.append(float(Fraction(int(cm[k, k]), total)) if total else None)
    return out


def _group_rates(y_true, y_pred, groups, k: int, g) -> tuple[Fraction | None, Fraction | None]:
    """(TPR, FPR) of class ``k`` one-vs-rest within group ``g``."""
    sel = np.asarray(groups, dtype=object) == g
    yt = np.asarray(y_true)[sel]
    yp = np.asarray(y_pred)[sel]
    K = int(max(k, yt.max(initial=0), yp.max(initial=0))) + 1
    cm = confusion(yt, yp, K)
    pos = int(cm[k].sum())
    neg = int(cm.sum()) - pos
    tp = int(cm[k, k])
    fp = int(cm[:, k].sum()) - tp
    return (Fraction(tp, pos) if pos else None, Fraction(fp, neg) if neg else None)


def eod(y_true, y_pred, groups, k: int, g1, g2) -> float | None:
    """P(pred=k | y=k, g1) - P(pred=k | y=k, g2); None if either group lacks class k."""
    t1, _ = _group_rates(y_true, y_pred, groups, k, g1)
    t2, _ = _group_rates(y_true, y_pred, groups, k, g2)
    if t1 is None or t2 is None:
        return None
    return float(t1 - t2)


def aod(y_true, y_pred, groups, k: int, g1, g2) -> float | None:
    """EOD plus the false-positive-rate gap, signed and without the usual 1/2."""
    t1, f1 = _group_rates(y_true, y_pred, groups, k, g1)
    t2, f2 = _group_rates(y_true, y_pred, groups, k, g2)
    if None in (t1, t2, f1, f2):
        return None
    return float((t1 - t2) + (f1 - f2))


# -- signed-rank test --------------------------------------------------------

EXACT_MAX_N = 16


def average_ranks(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def signed_rank_statistic(x, y) -> tuple[float, np.ndarray]:
    """W+ and the rank vector of the non-zero paired differences ``x - y``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DataError("paired samples must have equal length")
    diff = x - y
    diff = diff[diff != 0]
    ranks = average_ranks(np.abs(diff))
    return float(ranks[diff > 0].sum()), ranks


def _exact_upper_tail(ranks: np.ndarray, w_plus: float) -> float:
    # Sign patterns are counted by rank-sum on doubled ranks (ties give half
    # ranks), which is the full 2^n enumeration done as a convolution.
    doubled = np.rint(2 * ranks).astype(np.int64)
    counts = np.zeros(int(doubled.sum()) + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:-r] if r else counts
        counts = counts + shifted
    threshold = int(round(2 * w_plus))
    return float(counts[threshold:].sum() / 2.0 ** len(ranks))


def wilcoxon_one_sided(x, y, alternative: str = "greater") -> float:
    """One-sided Wilcoxon signed-rank p-value; H1 is median(x - y) > 0 by default.

    Zero differences are dropped and ties get average ranks. The p-value is
    exact for up to 16 non-zero pairs, otherwise the normal approximation with
    continuity and tie corrections is used.
    """
    if alternative not in ("greater", "less"):
        raise ConfigError("alternative must be 'greater' or 'less'")
    if alternative == "less":
        return wilcoxon_one_sided(y, x, "greater")
    w_plus, ranks = signed_rank_statistic(x, y)
    n = len(ranks)
    if n == 0:
        return 1.0
    if n <= EXACT_MAX_N:
        return _exact_upper_tail(ranks, w_plus)
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float((tie_counts ** 3 - tie_counts).sum()) / 48.0
    if var <= 0:
        return 1.0
    z = (w_plus - mean - 0.5) / math.sqrt(var)
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def significance_stars(p: float) -> str:
    """Star code: '*' for p<0.01, '**' for p<0.05."""
    if p < 0.01:
        return "*"
    if p < 0.05:
        return "**"
    return ""


# -- reports -----------------------------------------------------------------

@dataclass(frozen=True)
class MetricRow:
    metric: str
    task: str
    strategy: str
    dataset: str
    cls: str = ""
    group1: str = ""
    group2: str = ""
    value: float | None = None

    @property
    def missing(self) -> bool:
        return self.value is None


@dataclass
class MetricsReport:
    rows: list[MetricRow] = field(default_factory=list)

    def extend(self, other: "MetricsReport | Iterable[MetricRow]") -> None:
        self.rows.extend(other.rows if isinstance(other, MetricsReport) else other)

    def select(self, **criteria) -> list[MetricRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in criteria.items())]

    def value(self, **criteria) -> float | None:
        hits = self.select(**criteria)
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} rows match {criteria}")
        return hits[0].value

    def strategies(self) -> list[str]:
        return sorted({r.strategy for r in self.rows})

    def f1_by_dataset(self, strategy: str, metric: str = "f1") -> dict[str, float]:
        return {r.dataset: r.value for r in self.rows
                if r.strategy == strategy and r.metric == metric and not r.group1
                and r.dataset not in ("pooled", "all") and r.value is not None}

    def to_csv(self, path: str | Path) -> None:
        with atomic_path(path) as tmp, open(tmp, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for r in self.rows:
                w.writerow([r.metric, r.task, r.strategy, r.dataset, r.cls, r.group1, r.group2,
                            "" if r.value is None else repr(float(r.value)), int(r.missing)])

    @classmethod
    def from_csv(cls, path: str | Path) -> "MetricsReport":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader, ()))
            if header != REPORT_COLUMNS:
                raise HeaderError(f"{path}: not a metrics report (header {header})")
            rows = []
            for line, rec in enumerate(reader, start=2):
                if len(rec) != len(REPORT_COLUMNS):
                    raise DataError(f"{path}: row {line} has {len(rec)} fields")
                metric, task, strategy, dataset, klass, g1, g2, value, missing = rec
                try:
                    val = None if missing == "1" else float(value)
                except ValueError:
                    raise DataError(f"{path}: row {line} value {value!r} is not a number") from None
                rows.append(MetricRow(metric, task, strategy, dataset, klass, g1, g2, val))
        return cls(rows)


def age_bucket(age: float | None) -> str | None:
    if age is None:
        return None
    if age < 40:
        return "<40"
    return "40-70" if age <= 70 else ">70"


def _attribute_groups(bundle: DatasetBundle, attribute: str) -> tuple[list, list[str]]:
    if attribute == "dataset":
        values = [r.dataset_id for r in bundle.records]
        order = sorted(set(values))
    elif attribute == "density":
        values = [r.density for r in bundle.records]
        order = [t for t in DENSITY_TOKENS if t in set(values)]
    elif attribute == "age":
        values = [age_bucket(r.age) for r in bundle.records]
        order = [b for b in AGE_BUCKETS if b in set(values)]
    else:
        raise ConfigError(f"unknown attribute {attribute!r}")
    return values, order


def evaluate_predictions(y_true: np.ndarray, y_pred: np.ndarray, datasets: Sequence[str],
                         K: int, *, task: str, strategy: str, metric: str = "f1") -> MetricsReport:
    """Per-dataset and pooled macro-F1 plus mean/std across datasets."""
    datasets = np.asarray(datasets, dtype=object)
    rows = []
    per = []
    for ds in sorted(set(datasets)):
        sel = datasets == ds
        val = f1_macro(confusion(y_true[sel], y_pred[sel], K))
        per.append(val)
        rows.append(MetricRow(metric, task, strategy, ds, value=val))
    rows.append(MetricRow(metric, task, strategy, "pooled", value=f1_macro(confusion(y_true, y_pred, K))))
    rows.append(MetricRow(f"{metric}_mean", task, strategy, "all", value=float(np.mean(per))))
    rows.append(MetricRow(f"{metric}_std", task, strategy, "all", value=float(np.std(per))))
    return MetricsReport(rows)


def subgroup_report(bundle: DatasetBundle, model, *, strategy: str | None = None,
                    attributes: Sequence[str] = ("dataset", "density", "age")) -> MetricsReport:
    """F1 per dataset and subgroup, per-class recall, and EOD/AOD per class and group pair.

    Group pairs follow a fixed reference order (datasets alphabetical,
    density A..D, age buckets young to old) and only ``g1 < g2`` is reported,
    so signs are reproducible. Dataset groups are also compared against the
    pool of all other datasets (``group2 = "dataset=rest"``).
    """
    task = get_task(model.task)
    strategy = strategy or model.strategy
    K = task.num_classes
    y_true = bundle.labels(task)
    y_pred = model.predict(bundle.features())
    datasets = [r.dataset_id for r in bundle.records]
    report = evaluate_predictions(y_true, y_pred, datasets, K, task=task.name, strategy=strategy)

    cm = confusion(y_true, y_pred, K)
    for k, rec in enumerate(per_class_recall(cm)):
        report.rows.append(MetricRow("recall", task.name, strategy, "pooled", task.classes[k], value=rec))

    for attr in attributes:
        values, order = _attribute_groups(bundle, attr)
        known = np.array([v is not None for v in values])
        groups = np.array([v if v is not None else "" for v in values], dtype=object)
        for g in order:
            sel = groups == g
            report.rows.append(MetricRow("f1", task.name, strategy, "pooled", "", f"{attr}={g}",
                                         value=f1_macro(confusion(y_true[sel], y_pred[sel], K))))
        yt, yp, gr = y_true[known], y_pred[known], groups[known]
        aods = []
        for k in range(K):
            for i, g1 in enumerate(order):
                for g2 in order[i + 1:]:
                    e = eod(yt, yp, gr, k, g1, g2)
                    a = aod(yt, yp, gr, k, g1, g2)
                    if a is not None:
                        aods.append(a)
                    for name, val in (("eod", e), ("aod", a)):
                        report.rows.append(MetricRow(name, task.name, strategy, "pooled",
                                                     task.classes[k], f"{attr}={g1}",
                                                     f"{attr}={g2}", val))
            if attr == "dataset":
                for g in order:
                    rest = np.where(gr == g, g, "rest")
                    for name, fn in (("eod", eod), ("aod", aod)):
                        report.rows.append(MetricRow(name, task.name, strategy, g, task.classes[k],
                                                     f"{attr}={g}", f"{attr}=rest",
                                                     fn(yt, yp, rest, k, g, "rest")))
        report.rows.append(MetricRow("aod_avg", task.name, strategy, "pooled", "", attr, "",
                                     float(np.mean(aods)) if aods else None))
    return report


def mean_std(values: Iterable[float]) -> tuple[float, float]:
    vals = np.asarray(list(values), dtype=np.float64)
    return float(vals.mean()), float(vals.std())


def markdown_table(entries: Sequence[tuple[str, dict[str, float]]],
                   baselines: dict[str, str] | None = None, title: str = "F1") -> str:
    """Render ``label | mean ± std`` rows, starring significant gaps to a baseline.

    ``baselines`` maps a row label to the label it is tested against; a
    trailing ``+`` or ``-`` tells whether the row is significantly higher or
    lower (one-sided signed-rank on the shared datasets).
    """
    by_label = dict(entries)
    lines = [f"| | {title} |", "|---|---|"]
    for label, scores in entries:
        mean, std = mean_std(scores.values())
        cell = f"{mean:.2f} ± {std:.2f}"
        base = (baselines or {}).get(label)
        if base is not None:
            keys = sorted(set(scores) & set(by_label[base]))
            a = [scores[k] for k in keys]
            b = [by_label[base][k] for k in keys]
            for alt, sign in (("greater", "+"), ("less", "-")):
                stars = significance_stars(wilcoxon_one_sided(a, b, alt))
                if stars:
                    cell += f"{stars}{sign}"
        lines.append(f"| {label} | {cell} |")
    return "\n".join(lines) + "\n"

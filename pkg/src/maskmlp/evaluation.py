"""Grouped cross-validation, classification metrics, and breakdowns.

Metrics keep to a few conventions throughout: ROC-AUC is the Mann-Whitney
pair statistic with ties counted 0.5, PR-AUC is step-integrated (no
trapezoids), and any metric whose denominator is empty is reported as NaN —
an explicit undefined marker, never a silent zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, LabeledView
from .errors import ConfigError, ContractError, DegenerateTestError, SchemaError
from .models import Classifier, predict_proba_rows

SCHOOL_SPLIT = "school_split"
STUDENT_SPLIT = "student_split"
SPLIT_MODES = (SCHOOL_SPLIT, STUDENT_SPLIT)

METRIC_KEYS = ("accuracy", "specificity", "sensitivity", "roc_auc", "pr_auc")

QUANTILE_NAMES_5 = (
    "large_regression",
    "slight_regression",
    "no_change",
    "slight_improvement",
    "large_improvement",
)


# ---------------------------------------------------------------------------
# Fold construction
# ---------------------------------------------------------------------------

@dataclass
class FoldPlan:
    """k disjoint test-index sets that partition the rows, group-pure."""

    k: int
    mode: str
    folds: list[np.ndarray]

    def train_indices(self, fold: int) -> np.ndarray:
        test = set(self.folds[fold].tolist())
        n = sum(len(f) for f in self.folds)
        return np.array([i for i in range(n) if i not in test], dtype=np.int64)


def make_folds(group_ids: np.ndarray, k: int, mode: str, seed: int) -> FoldPlan:
    """Partition rows into k folds without splitting any group.

    Groups are shuffled by the seed, then dealt round-robin in descending
    size order, which keeps fold row-counts close even when group sizes vary.
    """
    if mode not in SPLIT_MODES:
        raise ConfigError(f"unknown split mode {mode!r}")
    ids = np.asarray(group_ids)
    unique, counts = np.unique(ids, return_counts=True)
    if len(unique) < k:
        raise ConfigError(f"{len(unique)} groups cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(unique))
    shuffled, sizes = unique[perm], counts[perm]
    order = np.argsort(-sizes, kind="stable")  # ties keep shuffled order
    fold_groups: list[list] = [[] for _ in range(k)]
    for pos, g_idx in enumerate(order):
        fold_groups[pos % k].append(shuffled[g_idx])
    folds = [np.flatnonzero(np.isin(ids, fg)) for fg in fold_groups]
    return FoldPlan(k, mode, folds)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def confusion_metrics(probs: np.ndarray, labels: np.ndarray,
                      threshold: float = 0.5) -> tuple[float, float, float]:
    """(accuracy, specificity, sensitivity) at a decision threshold."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    if p.size == 0:
        raise ContractError("confusion_metrics on empty input")
    if p.shape != y.shape:
        raise ContractError(f"probs {p.shape} vs labels {y.shape}")
    pred = p >= threshold
    pos = y == 1
    tp = int(np.sum(pred & pos))
    tn = int(np.sum(~pred & ~pos))
    fp = int(np.sum(pred & ~pos))
    fn = int(np.sum(~pred & pos))
    accuracy = (tp + tn) / p.size
    specificity = tn / (tn + fp) if (tn + fp) > 0 else math.nan
    sensitivity = tp / (tp + fn) if (tp + fn) > 0 else math.nan
    return accuracy, specificity, sensitivity


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    sorted_vals = values[order]
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * ((i + 1) + (j + 1))
        i = j + 1
    return ranks


def roc_auc(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney statistic: P(score_pos > score_neg) with ties at 0.5.

    Computed by midranks, which agrees exactly with the all-pairs count.
    Returns NaN when only one class is present.
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        return math.nan
    ranks = _midranks(p)
    r_pos = float(ranks[y == 1].sum())
    return (r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def pr_auc(probs: np.ndarray, labels: np.ndarray) -> float:
    """Area under precision-recall via step integration (no interpolation
    between points; tied scores enter together). NaN for one-class input."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        return math.nan
    order = np.argsort(-p, kind="mergesort")
    ps, ys = p[order], y[order]
    area = 0.0
    tp = fp = 0
    prev_recall = 0.0
    i = 0
    n = len(ps)
    while i < n:
        j = i
        while j + 1 < n and ps[j + 1] == ps[i]:
            j += 1
        tp += int(np.sum(ys[i : j + 1] == 1))
        fp += (j - i + 1) - int(np.sum(ys[i : j + 1] == 1))
        recall = tp / n_pos
        precision = tp / (tp + fp)
        area += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return area


# ---------------------------------------------------------------------------
# Paired t-test on fold metrics
# ---------------------------------------------------------------------------

def _beta_continued_fraction(a: float, b: float, x: float) -> float:
    """Lentz continued fraction for the regularized incomplete beta."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-14:
            break
    return h


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b), absolute error well under 1e-10."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_continued_fraction(a, b, x) / a
    return 1.0 - front * _beta_continued_fraction(b, a, 1.0 - x) / b


def student_t_two_tailed_p(t: float, df: int) -> float:
    """P(|T_df| >= |t|) via the incomplete-beta identity."""
    if df < 1:
        raise ContractError("degrees of freedom must be >= 1")
    x = df / (df + t * t)
    return betainc_reg(df / 2.0, 0.5, x)


def paired_t_test(metric_a: np.ndarray, metric_b: np.ndarray) -> tuple[float, float]:
    """Paired-samples t statistic and two-tailed p over per-fold metrics."""
    a = np.asarray(metric_a, dtype=np.float64)
    b = np.asarray(metric_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError("paired_t_test needs two equal-length vectors")
    k = a.size
    if k < 2:
        raise ContractError("paired_t_test needs at least 2 folds")
    d = a - b
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        raise DegenerateTestError("zero variance in paired differences")
    t = float(d.mean()) * math.sqrt(k) / sd
    return t, student_t_two_tailed_p(t, k - 1)


# ---------------------------------------------------------------------------
# Breakdowns
# ---------------------------------------------------------------------------

def quantile_bucket_edges(improvements: np.ndarray, q: int) -> np.ndarray:
    s = np.sort(np.asarray(improvements, dtype=np.float64))
    n = s.size
    return np.array([s[math.ceil(j * n / q) - 1] for j in range(1, q)])


def quantile_breakdown(improvements: np.ndarray, probs: np.ndarray,
                       labels: np.ndarray, q: int = 5) -> list[dict]:
    """Accuracy per improvement-quantile bucket (ties go to the lower bucket)."""
    if q < 2:
        raise ConfigError("q must be >= 2")
    imp = np.asarray(improvements, dtype=np.float64)
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    if not (imp.shape == p.shape == y.shape):
        raise ContractError("improvements/probs/labels must align")
    if imp.size < q:
        raise ContractError(f"{imp.size} rows cannot fill {q} quantile buckets")
    edges = quantile_bucket_edges(imp, q)
    bucket = (imp[:, None] > edges[None, :]).sum(axis=1)
    names = QUANTILE_NAMES_5 if q == 5 else tuple(f"q{i + 1}" for i in range(q))
    out = []
    for idx in range(q):
        member = bucket == idx
        count = int(member.sum())
        if count == 0:
            acc = math.nan
        else:
            acc = float(np.mean((p[member] >= 0.5) == (y[member] == 1)))
        out.append({"bucket": names[idx], "count": count, "accuracy": acc})
    return out


def metric_block(probs: np.ndarray, labels: np.ndarray) -> dict:
    """All five metrics, NaN-marked when undefined (including on empty input)."""
    if len(probs) == 0:
        return {k: math.nan for k in METRIC_KEYS} | {"n": 0}
    accuracy, specificity, sensitivity = confusion_metrics(probs, labels)
    return {
        "accuracy": accuracy,
        "specificity": specificity,
        "sensitivity": sensitivity,
        "roc_auc": roc_auc(probs, labels),
        "pr_auc": pr_auc(probs, labels),
        "n": int(len(probs)),
    }


def subgroup_breakdown(dataset: Dataset, rows: np.ndarray, probs: np.ndarray,
                       labels: np.ndarray, tag: str, min_support: int = 20) -> dict:
    """Per-group metric table for one registered subgroup tag."""
    if tag not in dataset.subgroup_tags:
        raise SchemaError(f"unknown subgroup tag {tag!r}")
    rows = np.asarray(rows)
    values = dataset.subgroup_tags[tag][rows]
    table = {}
    for value in sorted(set(values.tolist())):
        member = values == value
        block = metric_block(np.asarray(probs)[member], np.asarray(labels)[member])
        block["low_support"] = block["n"] < min_support
        table[str(value)] = block
    return table


# ---------------------------------------------------------------------------
# Per-model evaluation over a fold plan
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    """Per-fold and aggregate metrics for one model kind."""

    kind: str
    task: str
    k: int
    mode: str
    fold_metrics: list[dict]
    aggregate: dict
    quantile: list[dict] | None = None
    subgroups: dict = field(default_factory=dict)
    # pooled out-of-fold predictions (not serialized)
    pooled_positions: np.ndarray | None = None
    pooled_probs: np.ndarray | None = None
    pooled_labels: np.ndarray | None = None

    def fold_values(self, metric: str, scope: str = "all") -> np.ndarray:
        return np.array([fm[scope][metric] for fm in self.fold_metrics])

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "task": self.task,
            "k": self.k,
            "mode": self.mode,
            "fold_metrics": self.fold_metrics,
            "aggregate": self.aggregate,
            "quantile": self.quantile,
            "subgroups": self.subgroups,
        }


def _nanmean(values: list[float]) -> float:
    arr = np.asarray(values, dtype=np.float64)
    finite = arr[np.isfinite(arr)]
    return float(finite.mean()) if finite.size else math.nan


def evaluate(classifiers: list[Classifier], plan: FoldPlan, labeled: LabeledView,
             dataset: Dataset, breakdown_tags: tuple[str, ...] | None = None,
             q: int = 5) -> EvalReport:
    """Score one classifier per fold on its held-out rows.

    Metrics are reported for all test students and for the intervention
    (Tx = 1) subset; aggregates are unweighted means over folds, skipping
    undefined values. Pooled out-of-fold predictions feed the quantile and
    subgroup breakdowns.
    """
    if len(classifiers) != plan.k:
        raise ContractError(f"{len(classifiers)} classifiers for {plan.k} folds")
    covered = np.sort(np.concatenate(plan.folds))
    if covered.size != labeled.n_rows or not np.array_equal(covered, np.arange(labeled.n_rows)):
        raise ContractError("fold plan does not partition the labeled rows")

    fold_metrics = []
    pooled_pos: list[np.ndarray] = []
    pooled_probs: list[np.ndarray] = []
    for clf, test_pos in zip(classifiers, plan.folds):
        ds_rows = labeled.rows[test_pos]
        probs = predict_proba_rows(clf, dataset, ds_rows)
        y = labeled.labels[test_pos]
        tx = dataset.intervention[ds_rows] == 1
        fold_metrics.append({
            "all": metric_block(probs, y),
            "intervention": metric_block(probs[tx], y[tx]),
        })
        pooled_pos.append(test_pos)
        pooled_probs.append(probs)

    aggregate = {
        scope: {m: _nanmean([fm[scope][m] for fm in fold_metrics]) for m in METRIC_KEYS}
        for scope in ("all", "intervention")
    }

    positions = np.concatenate(pooled_pos)
    probs_all = np.concatenate(pooled_probs)
    labels_all = labeled.labels[positions]
    quantile = quantile_breakdown(labeled.improvement[positions], probs_all, labels_all, q=q)

    tags = tuple(sorted(dataset.subgroup_tags)) if breakdown_tags is None else breakdown_tags
    subgroups = {
        tag: subgroup_breakdown(dataset, labeled.rows[positions], probs_all, labels_all, tag)
        for tag in tags
    }

    return EvalReport(
        kind=classifiers[0].kind,
        task=labeled.task,
        k=plan.k,
        mode=plan.mode,
        fold_metrics=fold_metrics,
        aggregate=aggregate,
        quantile=quantile,
        subgroups=subgroups,
        pooled_positions=positions,
        pooled_probs=probs_all,
        pooled_labels=labels_all,
    )


def feature_importance(config, features: tuple[str, ...] | None = None,
                       out_dir=None) -> list[dict]:
    """Drop-one-feature retraining; see ``pipeline.run_feature_importance``."""
    from .pipeline import run_feature_importance

    return run_feature_importance(config, features=features, out_dir=out_dir)

"""AUROC, subgroup analysis, rank-sum tests and the cohort characteristics table."""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats

from .exceptions import ValidationError

EXACT_RANKSUM_LIMIT = 20


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with half credit for ties, via average ranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValidationError("scores and labels differ in shape")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUROC needs both classes")
    ranks = stats.rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _exact_ranksum_pvalue(a: np.ndarray, b: np.ndarray) -> float:
    pooled = np.concatenate([a, b])
    ranks = stats.rankdata(pooled)
    observed = ranks[: len(a)].sum()
    mean = len(a) * (len(pooled) + 1) / 2.0
    dev = abs(observed - mean)
    hits = total = 0
    for idx in itertools.combinations(range(len(pooled)), len(a)):
        total += 1
        if abs(ranks[list(idx)].sum() - mean) >= dev - 1e-9:
            hits += 1
    return hits / total


def ranksum_pvalue(a, b) -> float:
    """Two-sided Wilcoxon rank-sum p-value.

    Small samples (combined size below ``EXACT_RANKSUM_LIMIT``) enumerate every
    relabelling; larger ones use the tie-corrected normal approximation.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValidationError("rank-sum test needs two nonempty samples")
    if len(a) + len(b) < EXACT_RANKSUM_LIMIT:
        return _exact_ranksum_pvalue(a, b)
    pooled = np.concatenate([a, b])
    if np.all(pooled == pooled[0]):
        return 1.0
    res = stats.mannwhitneyu(a, b, alternative="two-sided", method="asymptotic", use_continuity=False)
    return float(res.pvalue)


def distribution_summary(p) -> dict:
    p = np.asarray(p, dtype=np.float64)
    q1, med, q3 = np.percentile(p, [25, 50, 75])
    return {"median": float(med), "q1": float(q1), "q3": float(q3), "iqr": float(q3 - q1),
            "min": float(p.min()), "max": float(p.max())}


@dataclass
class SubgroupResult:
    name: str
    n: int
    n_positive: int
    auroc: float | None = None
    summary: dict | None = None
    pvalue: float | None = None


@dataclass
class EvalReport:
    auroc: float
    n: int
    n_positive: int
    subgroups: list[SubgroupResult] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "auroc": self.auroc,
            "n": self.n,
            "n_positive": self.n_positive,
            "subgroups": [asdict(s) for s in self.subgroups],
            "metadata": self.metadata,
        }

    def to_rows(self) -> tuple[list[str], list[list]]:
        header = ["subgroup", "n", "n_positive", "auroc", "median", "q1", "q3", "min", "max", "pvalue"]
        rows = [["overall", self.n, self.n_positive, self.auroc, "", "", "", "", "", ""]]
        for s in self.subgroups:
            summ = s.summary or {}
            rows.append(
                [s.name, s.n, s.n_positive, _blank(s.auroc)]
                + [_blank(summ.get(k)) for k in ("median", "q1", "q3", "min", "max")]
                + [_blank(s.pvalue)]
            )
        return header, rows


def _blank(v):
    return "" if v is None else v


Predicate = Callable[[object], bool]


def default_subgroups() -> dict[str, Predicate]:
    """Age bands and YES/NO splits over the recorded risk factors.

    Ages 41-44 fall in the middle band.
    """
    groups: dict[str, Predicate] = {
        "age_18_40": lambda r: r.demo.age <= 40,
        "age_41_54": lambda r: 41 <= r.demo.age <= 54,
        "age_55_plus": lambda r: r.demo.age >= 55,
        "sex_male": lambda r: r.demo.sex == 1,
        "sex_female": lambda r: r.demo.sex == 0,
    }
    for flag in ("smoke", "obesity", "hypertension", "diabetes", "ckd", "chd", "lhf", "copd", "vhd"):
        groups[f"{flag}_yes"] = lambda r, f=flag: getattr(r.demo, f) == 1
        groups[f"{flag}_no"] = lambda r, f=flag: getattr(r.demo, f) == 0
    return groups


def subgroup_analysis(
    records: Sequence,
    probabilities,
    labels,
    subgroups: Mapping[str, Predicate] | None = None,
    metadata: dict | None = None,
) -> EvalReport:
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    subgroups = default_subgroups() if subgroups is None else subgroups
    report = EvalReport(
        auroc=auroc(probabilities, labels),
        n=len(labels),
        n_positive=int(labels.sum()),
        metadata=dict(metadata or {}),
    )
    for name, pred in subgroups.items():
        mask = np.array([bool(pred(r)) for r in records], dtype=bool)
        res = SubgroupResult(name=name, n=int(mask.sum()), n_positive=int(labels[mask].sum()))
        if res.n > 0:
            res.summary = distribution_summary(probabilities[mask])
            if 0 < res.n_positive < res.n:
                res.auroc = auroc(probabilities[mask], labels[mask])
            if res.n < len(labels):
                res.pvalue = ranksum_pvalue(probabilities[mask], probabilities[~mask])
        report.subgroups.append(res)
    return report


# --- characteristics table -------------------------------------------------


def mean_sd(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=np.float64)
    return float(x.mean()), float(x.std(ddof=1)) if len(x) > 1 else 0.0


def welch_pvalue(a, b) -> float | None:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        return None
    if a.var(ddof=1) == 0 and b.var(ddof=1) == 0:
        return None
    return float(stats.ttest_ind(a, b, equal_var=False).pvalue)


def chi2_pvalue(table) -> float | None:
    table = np.asarray(table, dtype=np.float64)
    if np.any(table.sum(axis=0) == 0) or np.any(table.sum(axis=1) == 0):
        return None
    return float(stats.chi2_contingency(table, correction=False).pvalue)


CONTINUOUS_FIELDS = ("age", "bmi")
BINARY_FIELDS = ("sex", "obesity", "smoke", "hypertension", "diabetes", "ckd", "chd", "lhf", "copd", "vhd")


@dataclass
class CharacteristicRow:
    """``positive``/``negative`` hold (mean, sd) for continuous fields and (count, percent) for binary ones."""

    field: str
    kind: str
    positive: tuple[float, float]
    negative: tuple[float, float]
    p_value: float | None


def characteristics_table(records: Sequence, label_attr: str = "label_rhf") -> list[CharacteristicRow]:
    """Compare label groups: Welch t-test for continuous fields, chi-square for binary ones.

    Sex is reported as the male count. Continuous fields missing on any record are skipped.
    """
    labels = np.array([getattr(r, label_attr) for r in records])
    pos, neg = labels == 1, labels == 0
    if not pos.any() or not neg.any():
        raise ValidationError("both label groups must be nonempty")
    rows = []
    for name in CONTINUOUS_FIELDS:
        values = [getattr(r.demo, name, None) for r in records]
        if any(v is None for v in values):
            continue
        values = np.array(values, dtype=np.float64)
        rows.append(
            CharacteristicRow(
                name, "continuous", mean_sd(values[pos]), mean_sd(values[neg]),
                welch_pvalue(values[pos], values[neg]),
            )
        )
    for name in BINARY_FIELDS:
        values = np.array([getattr(r.demo, name) for r in records], dtype=np.int64)
        c1, c0 = int(values[pos].sum()), int(values[neg].sum())
        n1, n0 = int(pos.sum()), int(neg.sum())
        rows.append(
            CharacteristicRow(
                name, "binary", (c1, 100.0 * c1 / n1), (c0, 100.0 * c0 / n0),
                chi2_pvalue([[c1, n1 - c1], [c0, n0 - c0]]),
            )
        )
    return rows


def characteristics_csv_rows(rows: Sequence[CharacteristicRow], n_pos: int, n_neg: int):
    header = ["field", f"RHF (n={n_pos})", f"non-RHF (n={n_neg})", "p_value"]
    out = []
    for r in rows:
        if r.kind == "continuous":
            cells = [f"{r.positive[0]:.1f} ± {r.positive[1]:.1f}", f"{r.negative[0]:.1f} ± {r.negative[1]:.1f}"]
        else:
            cells = [f"{r.positive[0]} ({r.positive[1]:.1f}%)", f"{r.negative[0]} ({r.negative[1]:.1f}%)"]
        out.append([r.field] + cells + ["" if r.p_value is None else f"{r.p_value:.4f}"])
    return header, out

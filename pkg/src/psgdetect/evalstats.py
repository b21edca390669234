"""Per-record detection metrics and rank-based group comparisons.

The comparison machinery mirrors the evaluation protocol of the experiments:
Kruskal-Wallis omnibus test per metric over the single-channel experiment
groups, and — only when the omnibus rejects — pairwise Mann-Whitney U tests
with Bonferroni adjustment.  The U test is exact (full permutation
distribution, ties handled through midranks) whenever n_a * n_b <= 400 and
falls back to the tie-corrected normal approximation with continuity
correction above that.

Records without any true events carry an undefined flag and are excluded
from every aggregate.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaincc

from . import events as ev

EXACT_PAIR_LIMIT = 400


class AlignmentError(ValueError):
    """Record sets differ between experiments being compared."""


@dataclass(frozen=True)
class RecordMetrics:
    record_id: str
    tp: int
    fp: int
    fn: int
    precision: float | None
    recall: float | None
    f1: float | None
    defined: bool  # False when the record has no true events


def record_metrics(detected, truth, iou_threshold: float = 0.5,
                   record_id: str = "") -> RecordMetrics:
    m = ev.match_evaluation(detected, truth, iou_threshold)
    tp, fp, fn = m.tp, m.fp, m.fn
    precision = tp / (tp + fp) if tp + fp > 0 else None
    recall = tp / (tp + fn) if tp + fn > 0 else None
    f1 = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn > 0 else None
    return RecordMetrics(
        record_id=record_id, tp=tp, fp=fp, fn=fn,
        precision=precision, recall=recall, f1=f1,
        defined=tp + fn > 0,
    )


METRIC_FIELDS = ("precision", "recall", "f1")


def aggregate(metrics) -> dict:
    """Mean and sample (N-1) std per metric over defined records.

    Undefined records (no true events) are excluded and counted.  Within
    the defined set, a metric that is undefined for some record (e.g.
    precision with zero detections) is skipped for that record only.
    """
    defined = [m for m in metrics if m.defined]
    out = {"n_records": len(defined), "n_excluded": len(metrics) - len(defined)}
    for field in METRIC_FIELDS:
        vals = [getattr(m, field) for m in defined
                if getattr(m, field) is not None]
        if vals:
            mean = float(np.mean(vals))
            std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        else:
            mean = std = float("nan")
        out[field] = {"mean": mean, "std": std, "n": len(vals)}
    return out


# -- rank statistics ----------------------------------------------------------

def _midranks(pooled: np.ndarray):
    """1-based average ranks and the tie-group sizes."""
    order = np.argsort(pooled, kind="stable")
    n = len(pooled)
    ranks = np.empty(n)
    ties = []
    i = 0
    while i < n:
        j = i
        while j < n and pooled[order[j]] == pooled[order[i]]:
            j += 1
        ranks[order[i:j]] = (i + j + 1) / 2.0
        ties.append(j - i)
        i = j
    return ranks, ties


def kruskal_wallis(groups) -> tuple[float, float]:
    """Tie-corrected H and its chi-squared upper-tail p (k-1 dof)."""
    groups = [np.asarray(g, dtype=float) for g in groups]
    if len(groups) < 2:
        raise ValueError("kruskal_wallis needs at least two groups")
    if any(len(g) == 0 for g in groups):
        raise ValueError("kruskal_wallis groups must be non-empty")
    n = sum(len(g) for g in groups)
    if n < 3:
        raise ValueError(f"kruskal_wallis needs >= 3 values, got {n}")
    pooled = np.concatenate(groups)
    ranks, ties = _midranks(pooled)
    correction = 1.0 - sum(t**3 - t for t in ties) / (n**3 - n)
    if correction == 0.0:  # every value identical
        return 0.0, 1.0
    h = 0.0
    i = 0
    for g in groups:
        r = ranks[i:i + len(g)].sum()
        h += r * r / len(g)
        i += len(g)
    h = (12.0 / (n * (n + 1))) * h - 3.0 * (n + 1)
    h /= correction
    df = len(groups) - 1
    p = float(gammaincc(df / 2.0, max(h, 0.0) / 2.0))
    return float(h), p


def _u_statistic(a: np.ndarray, b: np.ndarray) -> float:
    """U for sample a: wins count ties as half."""
    gt = (a[:, None] > b[None, :]).sum()
    eq = (a[:, None] == b[None, :]).sum()
    return float(gt) + 0.5 * float(eq)


def _exact_u_pvalue(a: np.ndarray, b: np.ndarray, u_a: float) -> float:
    """P(|U - n_a n_b / 2| >= |u_a - n_a n_b / 2|) over all label
    assignments, from the subset-sum distribution of doubled midranks."""
    na, nb = len(a), len(b)
    pooled = np.concatenate([a, b])
    ranks, _ = _midranks(pooled)
    doubled = np.rint(2.0 * ranks).astype(int)
    total = doubled.sum()
    # ways[k][s]: subsets of size k with doubled-rank sum s
    ways = [[0] * (total + 1) for _ in range(na + 1)]
    ways[0][0] = 1
    for r in doubled:
        for k in range(na, 0, -1):
            row, prev = ways[k], ways[k - 1]
            for s in range(total, r - 1, -1):
                if prev[s - r]:
                    row[s] += prev[s - r]
    counts = ways[na]
    # doubled U_a = doubled rank sum - n_a (n_a + 1)
    center = na * nb  # doubled n_a n_b / 2
    delta = abs(round(2.0 * u_a) - center)
    hits = sum(
        c for s, c in enumerate(counts)
        if c and abs(s - na * (na + 1) - center) >= delta
    )
    return hits / math.comb(na + nb, na)


def _normal_u_pvalue(a: np.ndarray, b: np.ndarray, u_min: float) -> float:
    na, nb = len(a), len(b)
    n = na + nb
    _, ties = _midranks(np.concatenate([a, b]))
    tie_term = sum(t**3 - t for t in ties) / (n * (n - 1))
    var = na * nb / 12.0 * ((n + 1) - tie_term)
    if var <= 0.0:
        return 1.0
    z = (u_min - na * nb / 2.0 + 0.5) / math.sqrt(var)
    return min(1.0, math.erfc(-z / math.sqrt(2.0)))


def mann_whitney_u(a, b) -> tuple[float, float]:
    """Two-sided Mann-Whitney U test.

    Returns (min(U_a, U_b), p).  Exact permutation p for
    n_a * n_b <= EXACT_PAIR_LIMIT, tie-corrected normal approximation with
    continuity correction otherwise.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("mann_whitney_u samples must be non-empty")
    u_a = _u_statistic(a, b)
    u_b = len(a) * len(b) - u_a
    u = min(u_a, u_b)
    if len(a) * len(b) <= EXACT_PAIR_LIMIT:
        p = _exact_u_pvalue(a, b, u_a)
    else:
        p = _normal_u_pvalue(a, b, u)
    return u, p


def bonferroni(raw_ps) -> list:
    k = len(raw_ps)
    for p in raw_ps:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"p-values must lie in [0, 1], got {p}")
    return [min(1.0, p * k) for p in raw_ps]


def significance_marker(p_adj: float) -> str:
    if p_adj < 1e-4:
        return "****"
    if p_adj < 1e-2:
        return "**"
    return "ns"


# -- experiment comparison ----------------------------------------------------

@dataclass(frozen=True)
class PairResult:
    u: float
    p_raw: float
    p_adj: float
    marker: str


@dataclass(frozen=True)
class GroupComparison:
    metric: str
    groups: tuple
    h: float
    p: float
    pairwise: dict  # (name_a, name_b) -> PairResult; empty unless p < alpha


def compare_experiments(per_experiment: dict, alpha: float = 0.05) -> dict:
    """KW omnibus per metric across experiments, MWU post hoc when it
    rejects.  ``per_experiment`` maps experiment name to a list of
    RecordMetrics over a common record set.
    """
    if len(per_experiment) < 2:
        raise ValueError("compare_experiments needs >= 2 experiments")
    names = list(per_experiment)
    by_id = {}
    id_sets = {}
    for name, metrics in per_experiment.items():
        by_id[name] = {m.record_id: m for m in metrics if m.defined}
        id_sets[name] = set(by_id[name])
    base = id_sets[names[0]]
    for name in names[1:]:
        if id_sets[name] != base:
            raise AlignmentError(
                f"experiments {names[0]} and {name} cover different records: "
                f"{sorted(base ^ id_sets[name])[:5]} ..."
            )
    ids = sorted(base)

    out = {}
    for field in METRIC_FIELDS:
        usable = [
            rid for rid in ids
            if all(getattr(by_id[n][rid], field) is not None for n in names)
        ]
        vectors = {
            n: [getattr(by_id[n][rid], field) for rid in usable] for n in names
        }
        h, p = kruskal_wallis([vectors[n] for n in names])
        pairwise = {}
        if p < alpha:
            pairs = list(itertools.combinations(names, 2))
            stats = [mann_whitney_u(vectors[x], vectors[y]) for x, y in pairs]
            adjusted = bonferroni([pr for _, pr in stats])
            for (x, y), (u, p_raw), p_adj in zip(pairs, stats, adjusted):
                pairwise[(x, y)] = PairResult(
                    u=u, p_raw=p_raw, p_adj=p_adj,
                    marker=significance_marker(p_adj),
                )
        out[field] = GroupComparison(
            metric=field, groups=tuple(names), h=h, p=p, pairwise=pairwise
        )
    return out


# -- reporting ---------------------------------------------------------------

def format_results_table(agg_by_experiment: dict) -> str:
    """Fixed-width table of mean +/- std per experiment and metric."""
    header = f"{'Experiment':<12}{'Precision':<18}{'Recall':<18}{'F1':<18}"
    lines = [header, "-" * len(header)]
    for name, agg in agg_by_experiment.items():
        cells = []
        for field in METRIC_FIELDS:
            m = agg[field]
            cells.append(
                f"{m['mean']:.3f} +/- {m['std']:.3f}" if m["n"] else "--"
            )
        lines.append(
            f"{name:<12}{cells[0]:<18}{cells[1]:<18}{cells[2]:<18}"
        )
    excluded = {agg["n_excluded"] for agg in agg_by_experiment.values()}
    lines.append(
        f"(per-record mean +/- sample std; {max(excluded)} record(s) without "
        f"true events excluded)"
    )
    return "\n".join(lines)


def write_results_csv(path, agg_by_experiment: dict) -> None:
    cols = ["experiment"]
    for field in METRIC_FIELDS:
        cols += [f"{field}_mean", f"{field}_std", f"{field}_n"]
    cols += ["n_records", "n_excluded"]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for name, agg in agg_by_experiment.items():
            row = [name]
            for field in METRIC_FIELDS:
                m = agg[field]
                row += [repr(m["mean"]), repr(m["std"]), str(m["n"])]
            row += [str(agg["n_records"]), str(agg["n_excluded"])]
            fh.write(",".join(row) + "\n")

"""Full-catalog Top-K ranking, accuracy metrics and diversity metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .trainer import cosine_scores, dot_scores


class EvalError(ValueError):
    pass


@dataclass
class RankingResult:
    groups: np.ndarray
    # one array of local item indices per group, best first
    lists: list[np.ndarray]
    k: int


def _as_csr(train_pos, n_groups: int, n_items: int):
    if train_pos is None:
        return None
    if hasattr(train_pos, "csr"):
        return train_pos.csr
    return sp.csr_matrix(train_pos, shape=(n_groups, n_items))


def rank_scores(scores: np.ndarray, groups, k: int, train_pos=None, mask: bool = True) -> RankingResult:
    """Top-k per row of a precomputed group x item score matrix.

    Ties break toward the lower item index. Masked items never appear.
    """
    if k < 1:
        raise EvalError("K must be >= 1")
    groups = np.asarray(groups, dtype=np.int64)
    scores = np.array(scores, dtype=np.float64)
    n_items = scores.shape[1]
    excluded = np.zeros_like(scores, dtype=bool)
    if mask and train_pos is not None:
        pos = train_pos[groups]
        excluded = pos.toarray() > 0
        scores[excluded] = -np.inf
    order = np.argsort(-scores, axis=1, kind="stable")
    lists = []
    for r in range(len(groups)):
        n_cand = n_items - int(excluded[r].sum())
        lists.append(order[r, : min(k, n_cand)])
    return RankingResult(groups, lists, k)


def rank_topk(rows: np.ndarray, n_groups: int, groups, k: int, train_pos=None, mask: bool = True, similarity: str = "cosine") -> RankingResult:
    """Rank every catalog item for each group in ``groups``.

    ``rows`` is the joint-space embedding table (groups first, then items);
    ``train_pos`` is the training group-item relation to mask.
    """
    if similarity == "cosine":
        scores = cosine_scores(rows, n_groups, groups)
    elif similarity == "dot":
        scores = dot_scores(rows, n_groups, groups)
    else:
        raise EvalError(f"unknown similarity {similarity!r}")
    pos = _as_csr(train_pos, n_groups, rows.shape[0] - n_groups)
    return rank_scores(scores, groups, k, pos, mask)


def _idcg(n: int) -> float:
    return sum(1.0 / math.log2(r + 1) for r in range(1, n + 1))


@dataclass
class AccuracyReport:
    ks: list[int]
    recall: dict[int, float] = field(default_factory=dict)
    precision: dict[int, float] = field(default_factory=dict)
    f1: dict[int, float] = field(default_factory=dict)
    ndcg: dict[int, float] = field(default_factory=dict)
    n_groups: int = 0


def accuracy_metrics(rankings: RankingResult, test_pos, ks) -> AccuracyReport:
    """Recall, Precision, F1 and NDCG at each K, averaged over groups that
    have at least one test item. ``test_pos`` is a group x item relation."""
    ks = sorted(set(int(k) for k in ks))
    if ks[-1] > rankings.k:
        raise EvalError(f"rankings were cut at {rankings.k}, metrics asked for K={ks[-1]}")
    test = test_pos.csr if hasattr(test_pos, "csr") else sp.csr_matrix(test_pos)
    sums = {name: dict.fromkeys(ks, 0.0) for name in ("recall", "precision", "f1", "ndcg")}
    counted = 0
    for g, ranked in zip(rankings.groups, rankings.lists):
        truth = test.indices[test.indptr[g] : test.indptr[g + 1]]
        if len(truth) == 0:
            continue
        counted += 1
        hit = np.isin(ranked, truth)
        gains = np.where(hit, 1.0 / np.log2(np.arange(2, len(ranked) + 2)), 0.0)
        for k in ks:
            hits = int(hit[:k].sum())
            rec = hits / len(truth)
            prec = hits / k
            sums["recall"][k] += rec
            sums["precision"][k] += prec
            sums["f1"][k] += 0.0 if hits == 0 else 2 * rec * prec / (rec + prec)
            sums["ndcg"][k] += gains[:k].sum() / _idcg(min(k, len(truth)))
    report = AccuracyReport(ks, n_groups=counted)
    for name, per_k in sums.items():
        getattr(report, name).update({k: (v / counted if counted else 0.0) for k, v in per_k.items()})
    return report


@dataclass
class DiversityReport:
    entropy: float
    coverage: float
    gini: float


def diversity_metrics(rankings: RankingResult, n_items: int, log_base: float = 2.0) -> DiversityReport:
    """Entropy, Item_Coverage and Gini_Index of how often items are recommended.

    Each list counts an item at most once.
    """
    if not rankings.lists:
        raise EvalError("no ranked lists")
    counts = np.zeros(n_items)
    for ranked in rankings.lists:
        counts[np.unique(ranked)] += 1
    return diversity_from_counts(counts, log_base)


def diversity_from_counts(counts, log_base: float = 2.0) -> DiversityReport:
    counts = np.asarray(counts, dtype=np.float64)
    n = len(counts)
    total = counts.sum()
    if total == 0:
        raise EvalError("no recommended items")
    p = counts / total
    nz = p[p > 0]
    entropy = float(-(nz * np.log(nz)).sum() / math.log(log_base))
    coverage = float((counts > 0).sum() / n)
    if n == 1:
        gini = 0.0
    else:
        q = np.sort(p)
        j = np.arange(1, n + 1)
        gini = float(((2 * j - n - 1) * q).sum() / (n - 1))
    return DiversityReport(entropy, coverage, gini)


@dataclass
class MetricsReport:
    accuracy: AccuracyReport
    diversity: DiversityReport
    diversity_k: int
    n_ranked: int = 0

    def records(self) -> list[tuple[str, int, float]]:
        out = []
        for name in ("recall", "precision", "f1", "ndcg"):
            for k in self.accuracy.ks:
                out.append((name, k, getattr(self.accuracy, name)[k]))
        d = self.diversity
        out += [("entropy", self.diversity_k, d.entropy), ("item_coverage", self.diversity_k, d.coverage), ("gini_index", self.diversity_k, d.gini)]
        return out

    def to_tsv(self) -> str:
        return "".join(f"{m}\t{k}\t{v:.10f}\n" for m, k, v in self.records())

    def to_table(self) -> str:
        acc = self.accuracy
        head = f"{'metric':<12}" + "".join(f"{'@' + str(k):>10}" for k in acc.ks)
        lines = [head, "-" * len(head)]
        for name in ("recall", "precision", "f1", "ndcg"):
            per_k = getattr(acc, name)
            lines.append(f"{name:<12}" + "".join(f"{per_k[k]:>10.5f}" for k in acc.ks))
        lines.append("")
        lines.append(f"accuracy over {acc.n_groups} groups with test items; diversity @{self.diversity_k} over {self.n_ranked} ranked groups")
        d = self.diversity
        lines += [f"{'entropy':<14}{d.entropy:>10.5f}", f"{'item_coverage':<14}{d.coverage:>10.5f}", f"{'gini_index':<14}{d.gini:>10.5f}"]
        return "\n".join(lines) + "\n"


def evaluate(rows: np.ndarray, n_groups: int, test_pos, ks=(10, 20, 30), train_pos=None, mask: bool = True, diversity_k: int = 20, groups=None, similarity: str = "cosine") -> MetricsReport:
    """Rank all ``groups`` (default: every group) and compute every metric."""
    if groups is None:
        groups = np.arange(n_groups)
    n_items = rows.shape[0] - n_groups
    k_max = max(max(ks), diversity_k)
    rankings = rank_topk(rows, n_groups, groups, k_max, train_pos, mask, similarity)
    acc = accuracy_metrics(rankings, test_pos, ks)
    cut = RankingResult(rankings.groups, [r[:diversity_k] for r in rankings.lists], diversity_k)
    return MetricsReport(acc, diversity_metrics(cut, n_items), diversity_k, len(groups))


def recall_at(rows: np.ndarray, n_groups: int, test_pos, k: int = 20, train_pos=None, mask: bool = True) -> float:
    """Mean Recall@k over groups with test items (early-stopping signal)."""
    test = test_pos.csr if hasattr(test_pos, "csr") else sp.csr_matrix(test_pos)
    groups = np.flatnonzero(np.diff(test.indptr))
    if len(groups) == 0:
        return 0.0
    rankings = rank_topk(rows, n_groups, groups, k, train_pos, mask)
    return accuracy_metrics(rankings, test, [k]).recall[k]

"""External clustering metrics: B-cubed, V-measure, and the adjusted Rand
index.  All three are computed from the gold-class x predicted-cluster
contingency table, so they depend only on the partition pair, never on
label names.
"""

from dataclasses import asdict, dataclass
from fractions import Fraction
from math import comb, log

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class ContingencyTable:
    """Co-occurrence counts between gold classes and predicted clusters."""

    counts: np.ndarray
    row_sums: np.ndarray
    col_sums: np.ndarray
    n: int

    @classmethod
    def from_labels(cls, gold, pred):
        gold, pred = list(gold), list(pred)
        if len(gold) != len(pred):
            raise ValidationError(
                f"gold has {len(gold)} labels but prediction has {len(pred)}"
            )
        if not gold:
            raise ValidationError("cannot evaluate an empty labeling")
        gold_index = {g: i for i, g in enumerate(sorted(set(gold), key=str))}
        pred_index = {p: j for j, p in enumerate(sorted(set(pred), key=str))}
        counts = np.zeros((len(gold_index), len(pred_index)), dtype=np.int64)
        for g, p in zip(gold, pred):
            counts[gold_index[g], pred_index[p]] += 1
        return cls(
            counts=counts,
            row_sums=counts.sum(axis=1),
            col_sums=counts.sum(axis=0),
            n=len(gold),
        )


def _snap_unit(value):
    # Absorb float drift at the ends of [0, 1].
    if -1e-12 < value < 0.0:
        return 0.0
    if 1.0 < value < 1.0 + 1e-12:
        return 1.0
    return value


def _harmonic(p, r):
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


def b_cubed(gold, pred):
    """Per-instance precision/recall of cluster-vs-class overlap.

    An instance in gold class i and cluster j scores precision n_ij/b_j and
    recall n_ij/a_i.  Both are averaged unweighted over instances; f1 is
    the harmonic mean of the two averages.
    """
    t = ContingencyTable.from_labels(gold, pred)
    nij2 = t.counts.astype(np.float64) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = float(
            np.where(t.col_sums > 0, nij2 / np.maximum(t.col_sums, 1), 0.0).sum() / t.n
        )
        recall = float(
            np.where(
                t.row_sums[:, None] > 0,
                nij2 / np.maximum(t.row_sums, 1)[:, None],
                0.0,
            ).sum()
            / t.n
        )
    precision, recall = _snap_unit(precision), _snap_unit(recall)
    return precision, recall, _harmonic(precision, recall)


def _entropy(sums, n):
    p = sums[sums > 0] / n
    return float(-(p * np.log(p)).sum())


def _conditional_entropy(counts, cond_sums, n, axis):
    # H(target | cond): cells normalized by the conditioning marginal.
    total = 0.0
    for idx, cell in np.ndenumerate(counts):
        if cell == 0:
            continue
        denom = cond_sums[idx[axis]]
        total -= (cell / n) * log(cell / denom)
    return total


def v_measure(gold, pred):
    """Homogeneity, completeness, and their harmonic mean (natural-log
    entropies).  A zero unconditional entropy makes its component 1 by
    convention."""
    t = ContingencyTable.from_labels(gold, pred)
    h_gold = _entropy(t.row_sums, t.n)
    h_pred = _entropy(t.col_sums, t.n)
    if h_gold == 0.0:
        homogeneity = 1.0
    else:
        h_gold_given = _conditional_entropy(t.counts, t.col_sums, t.n, axis=1)
        homogeneity = _snap_unit(1.0 - h_gold_given / h_gold)
    if h_pred == 0.0:
        completeness = 1.0
    else:
        h_pred_given = _conditional_entropy(t.counts, t.row_sums, t.n, axis=0)
        completeness = _snap_unit(1.0 - h_pred_given / h_pred)
    return homogeneity, completeness, _harmonic(homogeneity, completeness)


def ari(gold, pred):
    """Adjusted Rand index via exact integer pair counts.

    Both partitions trivial in the same way (the zero-denominator case)
    scores 1.
    """
    t = ContingencyTable.from_labels(gold, pred)
    sum_cells = sum(comb(int(c), 2) for c in t.counts.flat)
    sum_gold = sum(comb(int(a), 2) for a in t.row_sums)
    sum_pred = sum(comb(int(b), 2) for b in t.col_sums)
    pairs = comb(t.n, 2)
    if pairs == 0:
        return 1.0
    expected = Fraction(sum_gold * sum_pred, pairs)
    denominator = Fraction(sum_gold + sum_pred, 2) - expected
    if denominator == 0:
        return 1.0
    return float((Fraction(sum_cells) - expected) / denominator)


@dataclass(frozen=True)
class EvaluationReport:
    """All scores for one (gold, predicted) pair, fractions in [0, 1]."""

    b3_precision: float
    b3_recall: float
    b3_f1: float
    v_homogeneity: float
    v_completeness: float
    v_f1: float
    ari: float
    n: int
    k_gold: int
    k_pred: int

    def to_dict(self):
        return asdict(self)


def evaluate(gold_dataset, assignment):
    """Join an assignment with gold labels by instance id and score it."""
    if not gold_dataset.relation_inventory:
        raise ValidationError("evaluation requires gold labels")
    by_id = {i.instance_id: i.gold_relation for i in gold_dataset.instances}
    missing = [
        iid
        for iid in assignment.instance_ids
        if by_id.get(iid) is None
    ]
    if missing:
        shown = ", ".join(missing[:5])
        if len(missing) > 5:
            shown += ", ..."
        raise ValidationError(
            f"{len(missing)} assignment instance(s) lack a gold label: {shown}"
        )
    gold = [by_id[iid] for iid in assignment.instance_ids]
    pred = list(assignment.labels)
    p, r, f = b_cubed(gold, pred)
    hom, com, v = v_measure(gold, pred)
    return EvaluationReport(
        b3_precision=p,
        b3_recall=r,
        b3_f1=f,
        v_homogeneity=hom,
        v_completeness=com,
        v_f1=v,
        ari=ari(gold, pred),
        n=len(gold),
        k_gold=len(set(gold)),
        k_pred=assignment.k,
    )

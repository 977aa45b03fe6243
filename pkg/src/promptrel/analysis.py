"""Human-readable views of a scored clustering: confusion matrix with
optimal axis alignment, per-cluster composition tables, and mask-prediction
cluster naming.
"""

import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ValidationError
from .fsio import atomic_write_text


@dataclass(frozen=True)
class ConfusionMatrix:
    """Predicted-cluster x gold-label counts.

    ``row_ids``/``col_labels`` name the axes in their current order;
    ``matches`` maps cluster id to its matched gold label once
    ``diagonalize`` has run (unmatched clusters are absent).
    """

    counts: np.ndarray
    row_ids: tuple[int, ...]
    col_labels: tuple[str, ...]
    matches: dict = field(default_factory=dict)

    @property
    def total(self):
        return int(self.counts.sum())


@dataclass(frozen=True)
class ClusterReport:
    """Size, gold-label composition, and optional naming for one cluster.

    ``composition`` pairs each gold label with its percentage of the
    cluster, descending; it is empty when no gold labels are available.
    """

    cluster_id: int
    size: int
    composition: tuple = ()
    top_tokens: tuple | None = None


def _join_gold(gold_dataset, assignment):
    if not gold_dataset.relation_inventory:
        raise ValidationError("analysis against gold labels requires a labeled dataset")
    by_id = {i.instance_id: i.gold_relation for i in gold_dataset.instances}
    missing = [i for i in assignment.instance_ids if by_id.get(i) is None]
    if missing:
        shown = ", ".join(missing[:5])
        raise ValidationError(
            f"{len(missing)} assignment instance(s) lack a gold label: {shown}"
        )
    return [by_id[i] for i in assignment.instance_ids]


def confusion(gold_dataset, assignment):
    """Raw counts matrix: one row per cluster, one column per gold label."""
    gold = _join_gold(gold_dataset, assignment)
    labels = sorted(set(gold))
    col_index = {g: j for j, g in enumerate(labels)}
    counts = np.zeros((assignment.k, len(labels)), dtype=np.int64)
    for cluster, g in zip(assignment.labels, gold):
        counts[cluster, col_index[g]] += 1
    return ConfusionMatrix(
        counts=counts,
        row_ids=tuple(range(assignment.k)),
        col_labels=tuple(labels),
    )


def diagonalize(matrix):
    """Reorder axes so the best cluster-to-label matching lies on the
    leading diagonal.

    The matching maximizes total matched count via rectangular assignment;
    pairs with zero overlap are treated as unmatched.  Matched pairs are
    placed in descending matched-count order, then unmatched rows and
    columns follow in descending marginal order.  Only the order changes:
    the multiset of entries and both marginals are preserved.
    """
    counts = matrix.counts
    n_rows, n_cols = counts.shape
    rows, cols = linear_sum_assignment(counts, maximize=True)
    pairs = [(int(r), int(c)) for r, c in zip(rows, cols) if counts[r, c] > 0]
    pairs.sort(key=lambda rc: (-int(counts[rc[0], rc[1]]), rc[0]))

    matched_rows = [r for r, _ in pairs]
    matched_cols = [c for _, c in pairs]
    row_marginals = counts.sum(axis=1)
    col_marginals = counts.sum(axis=0)
    rest_rows = sorted(
        (r for r in range(n_rows) if r not in set(matched_rows)),
        key=lambda r: (-int(row_marginals[r]), r),
    )
    rest_cols = sorted(
        (c for c in range(n_cols) if c not in set(matched_cols)),
        key=lambda c: (-int(col_marginals[c]), c),
    )
    row_order = matched_rows + rest_rows
    col_order = matched_cols + rest_cols
    return ConfusionMatrix(
        counts=counts[np.ix_(row_order, col_order)],
        row_ids=tuple(matrix.row_ids[r] for r in row_order),
        col_labels=tuple(matrix.col_labels[c] for c in col_order),
        matches={
            matrix.row_ids[r]: matrix.col_labels[c] for r, c in pairs
        },
    )


def cluster_composition(gold_dataset, assignment, cluster_id):
    """Gold-label breakdown of one cluster, percentages descending."""
    if cluster_id not in range(assignment.k):
        raise ValidationError(f"no cluster with id {cluster_id}")
    gold = _join_gold(gold_dataset, assignment)
    members = [g for c, g in zip(assignment.labels, gold) if c == cluster_id]
    counter = Counter(members)
    size = len(members)
    composition = tuple(
        (label, 100.0 * count / size)
        for label, count in sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))
    )
    return ClusterReport(cluster_id=cluster_id, size=size, composition=composition)


def _normalize_token(token):
    # Strip wordpiece/sentencepiece continuation markers; keep punctuation,
    # since backbones genuinely predict it.
    for marker in ("##", "Ġ", "▁"):
        if token.startswith(marker):
            token = token[len(marker):]
    return token.lower()


def name_clusters(backend, prompts, assignment, m):
    """Name each cluster by its most frequent top-1 mask predictions.

    One predicted token is taken per instance; ``m`` bounds how many
    distinct tokens are reported per cluster.
    """
    if m < 1:
        raise ValidationError("m must be at least 1")
    if len(prompts) != len(assignment.instance_ids):
        raise ValidationError(
            f"{len(prompts)} prompts for {len(assignment.instance_ids)} "
            "assigned instances"
        )
    for p, iid in zip(prompts, assignment.instance_ids):
        if p.source_instance_id != iid:
            raise ValidationError(
                f"prompt order mismatch at instance '{iid}'"
            )
    per_cluster = [Counter() for _ in range(assignment.k)]
    for p, cluster in zip(prompts, assignment.labels):
        token, _ = backend.top_tokens_for_prompt(p, 1)[0]
        per_cluster[cluster][_normalize_token(token)] += 1
    reports = []
    for cid, counter in enumerate(per_cluster):
        ranked = sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))[:m]
        reports.append(
            ClusterReport(
                cluster_id=cid,
                size=sum(counter.values()),
                top_tokens=tuple(ranked),
            )
        )
    return reports


def confusion_to_csv(matrix, path):
    """CSV with a header row of gold labels and one row per cluster."""
    header = "cluster," + ",".join(matrix.col_labels)
    lines = [header]
    for rid, row in zip(matrix.row_ids, matrix.counts):
        lines.append(f"c-{rid}," + ",".join(str(int(v)) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def confusion_to_pgm(matrix, path):
    """Plain-text grayscale heatmap (PGM P2), bright = high count."""
    counts = matrix.counts
    peak = int(counts.max()) if counts.size else 0
    rows, cols = counts.shape if counts.size else (0, 0)
    lines = ["P2", f"{cols} {rows}", "255"]
    for row in counts:
        values = [
            str(round(255 * int(v) / peak)) if peak else "0" for v in row
        ]
        # Keep lines under the 70-character limit of the plain format.
        current = ""
        for v in values:
            if current and len(current) + 1 + len(v) > 68:
                lines.append(current)
                current = v
            else:
                current = f"{current} {v}".strip()
        if current:
            lines.append(current)
    atomic_write_text(path, "\n".join(lines) + "\n")


def reports_to_json(reports, path):
    payload = []
    for r in sorted(reports, key=lambda r: r.cluster_id):
        obj = {"cluster_id": r.cluster_id, "size": r.size}
        if r.composition:
            obj["composition"] = [
                {"label": label, "percent": pct} for label, pct in r.composition
            ]
        if r.top_tokens is not None:
            obj["top_tokens"] = [
                {"token": t, "count": c} for t, c in r.top_tokens
            ]
        payload.append(obj)
    atomic_write_text(path, json.dumps(payload, sort_keys=True, indent=1) + "\n")

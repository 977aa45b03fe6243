"""Grouping relation embeddings into candidate relations.

k-means covers the known-k case.  When k is unknown there are two
estimators: OPTICS (density-based, no k parameter) and the elbow rule on a
silhouette-vs-k curve smoothed by kernel ridge regression.  All distances
are euclidean.
"""

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .errors import FormatError, InputError, ValidationError
from .fsio import atomic_write_text

KMEANS_TOL = 1e-6
KMEANS_MAX_ITER = 300
OPTICS_XI = 0.05
RIDGE_LAMBDA_PER_POINT = 1e-3

# Above this many points the full distance matrix is not materialized;
# silhouette falls back to chunked accumulation.
_DENSE_N = 6000
_CHUNK = 1024


class ClusterMethod(str, Enum):
    KMEANS = "kmeans"
    OPTICS = "optics"
    KMEANS_ELBOW = "kmeans-elbow"


@dataclass(frozen=True)
class ClusterAssignment:
    """Cluster ids per instance, aligned with ``instance_ids``.

    Ids always form the contiguous range [0, k).
    """

    labels: tuple[int, ...]
    k: int
    method: ClusterMethod
    seed: int
    instance_ids: tuple[str, ...]
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.labels:
            raise ValidationError("assignment must cover at least one instance")
        if len(self.labels) != len(self.instance_ids):
            raise ValidationError("labels and instance ids differ in length")
        distinct = sorted(set(self.labels))
        if distinct != list(range(len(distinct))):
            raise ValidationError("cluster ids must form a contiguous range")
        if self.k != len(distinct):
            raise ValidationError(
                f"declared k={self.k} but {len(distinct)} distinct ids present"
            )


@dataclass(frozen=True)
class ElbowCurve:
    """Silhouette-vs-k sweep with its smoothed version and the selected k."""

    k_values: tuple[int, ...]
    silhouette_raw: tuple[float, ...]
    silhouette_smoothed: tuple[float, ...]
    k_hat: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        m = len(self.k_values)
        if len(self.silhouette_raw) != m or len(self.silhouette_smoothed) != m:
            raise ValidationError("elbow curve lists must share one length")
        if self.k_hat not in self.k_values:
            raise ValidationError("k_hat must be one of the candidate k values")


def _as_points(emb):
    data = emb.data if hasattr(emb, "data") else emb
    return np.asarray(data, dtype=np.float64)


def _sq_dists(X, C):
    d2 = (
        (X * X).sum(axis=1)[:, None]
        + (C * C).sum(axis=1)[None, :]
        - 2.0 * (X @ C.T)
    )
    return np.maximum(d2, 0.0)


def _kmeans_pp(X, k, rng):
    """D^2-weighted seeding."""
    n = X.shape[0]
    centroids = np.empty((k, X.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = X[first]
    d2 = ((X - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            target = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(d2), target))
            idx = min(idx, n - 1)
        else:
            idx = int(rng.integers(n))
        centroids[j] = X[idx]
        d2 = np.minimum(d2, ((X - centroids[j]) ** 2).sum(axis=1))
    return centroids


def _contiguous(labels):
    """Remap arbitrary ids to [0, k) keeping numeric order."""
    distinct, new = np.unique(labels, return_inverse=True)
    return new, len(distinct)


def kmeans(emb, k, seed):
    """Lloyd's algorithm from k-means++ seeds.

    Stops when the largest centroid movement drops below 1e-6 or after 300
    iterations.  A cluster that empties is reseeded to the point farthest
    from its stale centroid.  Fully deterministic given the seed.
    """
    X = _as_points(emb)
    n = X.shape[0]
    if n == 0:
        raise ValidationError("cannot cluster an empty matrix")
    if k < 1:
        raise ValidationError(f"k must be positive, got {k}")
    if k > n:
        raise ValidationError(f"k={k} exceeds the {n} available points")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(X, k, rng)

    prev_inertia = math.inf
    descent_step = True
    for _ in range(KMEANS_MAX_ITER):
        d2 = _sq_dists(X, centroids)
        labels = d2.argmin(axis=1)
        inertia = float(d2[np.arange(n), labels].sum())
        # Reseeding jumps a centroid, so only genuine Lloyd steps descend.
        assert not descent_step or inertia <= prev_inertia + 1e-8 * max(
            1.0, abs(prev_inertia)
        ), "k-means inertia increased"
        prev_inertia = inertia

        onehot = (labels[:, None] == np.arange(k)[None, :]).astype(np.float64)
        counts = onehot.sum(axis=0)
        sums = onehot.T @ X
        new_centroids = np.where(
            counts[:, None] > 0, sums / np.maximum(counts, 1)[:, None], centroids
        )
        empties = np.flatnonzero(counts == 0)
        descent_step = empties.size == 0
        taken = set()
        for j in empties:
            order = np.argsort(-d2[:, j])
            pick = next(int(p) for p in order if int(p) not in taken)
            taken.add(pick)
            new_centroids[j] = X[pick]
        movement = float(np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max())
        centroids = new_centroids
        if movement < KMEANS_TOL:
            break

    labels = _sq_dists(X, centroids).argmin(axis=1)
    labels, k_eff = _contiguous(labels)
    return ClusterAssignment(
        labels=tuple(int(c) for c in labels),
        k=k_eff,
        method=ClusterMethod.KMEANS,
        seed=seed,
        instance_ids=_ids_of(emb, n),
        params={"requested_k": int(k), "tol": KMEANS_TOL, "max_iter": KMEANS_MAX_ITER},
    )


def _ids_of(emb, n):
    ids = getattr(emb, "instance_ids", None)
    if ids is not None and len(ids) == n:
        return tuple(ids)
    return tuple(str(i) for i in range(n))


def _xi_flat_clusters(hierarchy, n):
    """Pick a flat cluster set out of the xi hierarchy.

    The hierarchy is a list of (start, end) intervals over the reachability
    ordering, nested or disjoint.  The root interval spanning the whole
    ordering only says "everything is one cluster"; when it has two or more
    maximal sub-clusters, the top-level split is the informative partition,
    so the root is dropped.  Leaf-level extraction is deliberately avoided:
    it shreds coarse structure into noise.
    """
    entries = []
    for start, end in hierarchy:
        item = (int(start), int(end))
        if item not in entries:
            entries.append(item)
    if not entries:
        return []

    def maximal(items):
        return [
            c
            for c in items
            if not any(o != c and o[0] <= c[0] and c[1] <= o[1] for o in items)
        ]

    root = (0, n - 1)
    if root in entries and len(entries) > 1:
        inner = maximal([c for c in entries if c != root])
        return sorted(inner) if len(inner) >= 2 else [root]
    return sorted(maximal(entries))


def optics(emb, min_samples):
    """Density-based clustering via OPTICS with xi extraction (xi=0.05).

    Noise points become their own singleton clusters so downstream metrics
    stay defined over every instance.
    """
    X = _as_points(emb)
    n = X.shape[0]
    if min_samples < 2:
        raise ValidationError("min_samples must be at least 2")
    if min_samples > n:
        raise ValidationError(f"min_samples={min_samples} exceeds the {n} points")
    from sklearn.cluster import OPTICS as _SkOptics

    model = _SkOptics(
        min_samples=min_samples,
        metric="euclidean",
        cluster_method="xi",
        xi=OPTICS_XI,
    ).fit(X)

    labels = np.full(n, -1, dtype=int)
    for cid, (start, end) in enumerate(_xi_flat_clusters(model.cluster_hierarchy_, n)):
        labels[model.ordering_[start : end + 1]] = cid
    next_id = int(labels.max()) + 1
    for i in np.flatnonzero(labels == -1):
        labels[i] = next_id
        next_id += 1

    # Renumber by first occurrence in data order.
    mapping = {}
    remapped = []
    for c in labels:
        if c not in mapping:
            mapping[c] = len(mapping)
        remapped.append(mapping[c])
    return ClusterAssignment(
        labels=tuple(remapped),
        k=len(mapping),
        method=ClusterMethod.OPTICS,
        seed=0,
        instance_ids=_ids_of(emb, n),
        params={"min_samples": int(min_samples), "xi": OPTICS_XI},
    )


def _codes(labels, n):
    labels = np.asarray(list(labels))
    if labels.shape[0] != n:
        raise ValidationError(
            f"{labels.shape[0]} labels for {n} embeddings"
        )
    distinct, codes = np.unique(labels, return_inverse=True)
    return codes, len(distinct)


def _distance_sums(X, onehot, D=None):
    """sums[i, c] = total distance from point i to the members of cluster c."""
    if D is not None:
        return D @ onehot, None
    n = X.shape[0]
    sums = np.empty((n, onehot.shape[1]))
    total = 0.0
    for start in range(0, n, _CHUNK):
        block = cdist(X[start : start + _CHUNK], X)
        total += float(block.sum())
        sums[start : start + _CHUNK] = block @ onehot
    return sums, total


def _silhouette_values(X, codes, k, D=None):
    n = X.shape[0]
    onehot = (codes[:, None] == np.arange(k)[None, :]).astype(np.float64)
    counts = onehot.sum(axis=0)
    sums, total = _distance_sums(X, onehot, D)
    if total is None:
        total = float(D.sum())
    if total == 0.0:
        raise ValidationError(
            "all pairwise distances are zero; silhouette is undefined"
        )
    own = counts[codes]
    a = np.where(own > 1, sums[np.arange(n), codes] / np.maximum(own - 1, 1), 0.0)
    means = sums / np.maximum(counts, 1)[None, :]
    means[np.arange(n), codes] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    with np.errstate(invalid="ignore"):
        s = np.where(denom > 0, (b - a) / denom, 0.0)
    # Singletons score 0 by convention.
    return np.where(own > 1, s, 0.0)


def silhouette(emb, labels):
    """Mean silhouette coefficient of a labeling, in [-1, 1].

    Raises when fewer than two clusters are present or when every pairwise
    distance is zero (identical points), where the score is undefined.
    """
    X = _as_points(emb)
    codes, k = _codes(labels, X.shape[0])
    if k < 2:
        raise ValidationError("silhouette needs at least 2 distinct clusters")
    D = cdist(X, X) if X.shape[0] <= _DENSE_N else None
    return float(_silhouette_values(X, codes, k, D).mean())


def default_k_grid(n):
    """Candidate k sweep: dense to 20, step 4 to 60, step 10 to 2*sqrt(n)."""
    top = int(2 * math.sqrt(n))
    values = list(range(2, 21)) + list(range(24, 61, 4)) + list(range(70, top + 1, 10))
    return [k for k in values if k <= n - 1]


def _gaussian_design(x_row, x_col, bandwidth):
    gap = x_row[:, None] - x_col[None, :]
    return np.exp(-(gap * gap) / (2.0 * bandwidth * bandwidth))


def _chord_knee(x, y):
    """Max-distance-to-chord knee on normalized axes, interior points only."""
    xs = (x - x[0]) / (x[-1] - x[0])
    span = y.max() - y.min()
    ys = (y - y.min()) / span if span > 0 else np.zeros_like(y)
    dy, dx = ys[-1] - ys[0], 1.0
    dist = np.abs(dy * xs - dx * (ys - ys[0])) / math.hypot(dx, dy)
    interior = dist[1:-1]
    return 1 + int(interior.argmax())


def estimate_k_elbow(emb, k_grid, seed):
    """Sweep k, score each clustering by silhouette, pick the elbow.

    The raw curve is smoothed by gaussian-kernel ridge regression
    (bandwidth = median pairwise gap between grid values, ridge strength
    1e-3 per grid point).  The selected k is the grid point nearest the
    smoothed curve's maximum; when that maximum sits on the right edge of
    the sweep the curve is still rising, and the max-distance-to-chord
    knee is used instead.
    """
    X = _as_points(emb)
    n = X.shape[0]
    grid = sorted(set(int(k) for k in k_grid))
    if len(grid) < 4:
        raise ValidationError("k grid needs at least 4 distinct values")
    if grid[0] < 2 or grid[-1] > n:
        raise ValidationError(f"k grid values must lie in [2, {n}]")

    D = cdist(X, X) if n <= _DENSE_N else None
    raw = []
    for k in grid:
        assignment = kmeans(emb, k, seed)
        codes, k_eff = _codes(assignment.labels, n)
        if k_eff < 2:
            raise ValidationError(
                f"k={k} collapsed to a single cluster; silhouette is undefined"
            )
        raw.append(float(_silhouette_values(X, codes, k_eff, D).mean()))

    x = np.array(grid, dtype=np.float64)
    y = np.array(raw)
    gaps = np.abs(x[:, None] - x[None, :])[np.triu_indices(len(grid), 1)]
    bandwidth = float(np.median(gaps))
    lam = RIDGE_LAMBDA_PER_POINT * len(grid)
    K = _gaussian_design(x, x, bandwidth)
    alpha = np.linalg.solve(K + lam * np.eye(len(grid)), y)
    smoothed = K @ alpha

    dense_x = np.linspace(x[0], x[-1], 2048)
    dense_y = _gaussian_design(dense_x, x, bandwidth) @ alpha
    peak = int(dense_y.argmax())
    if peak == len(dense_x) - 1:
        idx = _chord_knee(x, smoothed)
        rule = "chord"
    else:
        idx = int(np.abs(x - dense_x[peak]).argmin())
        rule = "argmax"
    return ElbowCurve(
        k_values=tuple(grid),
        silhouette_raw=tuple(raw),
        silhouette_smoothed=tuple(float(v) for v in smoothed),
        k_hat=grid[idx],
        params={
            "bandwidth": bandwidth,
            "ridge_lambda": lam,
            "seed": seed,
            "selection_rule": rule,
        },
    )


def cluster_auto(emb, seed, k_grid=None):
    """Estimate k via the elbow rule, then cluster with k-means at k_hat."""
    n = _as_points(emb).shape[0]
    if n < 10:
        raise ValidationError("automatic estimation needs at least 10 points")
    grid = default_k_grid(n) if k_grid is None else k_grid
    curve = estimate_k_elbow(emb, grid, seed)
    assignment = kmeans(emb, curve.k_hat, seed)
    assignment = replace(
        assignment,
        method=ClusterMethod.KMEANS_ELBOW,
        params={**assignment.params, "k_hat": curve.k_hat, **curve.params},
    )
    return curve, assignment


def elbow_to_csv(curve, path):
    lines = ["k,silhouette_raw,silhouette_smoothed"]
    for k, r, s in zip(curve.k_values, curve.silhouette_raw, curve.silhouette_smoothed):
        lines.append(f"{k},{r!r},{s!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_elbow_csv(path):
    """Read back a curve CSV; returns (k_values, raw, smoothed) lists."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise InputError(f"cannot read elbow curve {path}: {e}") from e
    if not lines or lines[0].split(",")[0] != "k":
        raise FormatError(f"{path}: not an elbow curve CSV")
    k_values, raw, smoothed = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            k, r, s = line.split(",")
            k_values.append(int(k))
            raw.append(float(r))
            smoothed.append(float(s))
        except ValueError as e:
            raise FormatError(f"{path}:{lineno}: bad curve row: {e}") from e
    return k_values, raw, smoothed


def save_assignment(assignment, path, extra_meta=None):
    """Write an assignment as JSONL: one meta line, then one line per instance."""
    meta = {
        "k": assignment.k,
        "method": assignment.method.value,
        "seed": assignment.seed,
        "params": assignment.params,
    }
    meta.update(extra_meta or {})
    lines = [json.dumps({"meta": meta}, sort_keys=True)]
    for iid, label in zip(assignment.instance_ids, assignment.labels):
        lines.append(
            json.dumps({"cluster_id": int(label), "instance_id": iid}, sort_keys=True)
        )
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_assignment(path):
    """Read an assignment written by ``save_assignment``.

    Returns (assignment, meta).
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise InputError(f"cannot read assignment file {path}: {e}") from e
    if not lines:
        raise FormatError(f"{path}: empty assignment file")
    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: malformed assignment meta line: {e}") from e
    if "meta" not in head:
        raise FormatError(f"{path}: first line must carry the meta object")
    meta = head["meta"]
    ids, labels = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            ids.append(obj["instance_id"])
            labels.append(int(obj["cluster_id"]))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{path}:{lineno}: bad assignment row: {e}") from e
    assignment = ClusterAssignment(
        labels=tuple(labels),
        k=int(meta.get("k", len(set(labels)))),
        method=ClusterMethod(meta.get("method", "kmeans")),
        seed=int(meta.get("seed", 0)),
        instance_ids=tuple(ids),
        params=dict(meta.get("params", {})),
    )
    return assignment, meta

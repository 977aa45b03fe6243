from fractions import Fraction

import numpy as np
import pytest

import promptrel.clustering as clustering
from promptrel.clustering import (
    ClusterAssignment,
    ClusterMethod,
    ElbowCurve,
    cluster_auto,
    default_k_grid,
    elbow_to_csv,
    estimate_k_elbow,
    kmeans,
    load_assignment,
    load_elbow_csv,
    optics,
    save_assignment,
    silhouette,
)
from promptrel.encoder import EmbeddingMatrix
from promptrel.errors import FormatError, InputError, ValidationError
from promptrel.evalmetrics import ari

from _synth import make_blobs_matrix


def matrix_of(points, ids=None):
    points = np.asarray(points, dtype=np.float32)
    if ids is None:
        ids = tuple(f"i#{i}" for i in range(len(points)))
    return EmbeddingMatrix(points, ids, "P", "test")


# ---------------------------------------------------------------------------
# assignment type invariants
# ---------------------------------------------------------------------------

def test_assignment_validation():
    ok = ClusterAssignment((0, 1, 0), 2, ClusterMethod.KMEANS, 0, ("a", "b", "c"))
    assert ok.k == 2
    with pytest.raises(ValidationError, match="at least one"):
        ClusterAssignment((), 0, ClusterMethod.KMEANS, 0, ())
    with pytest.raises(ValidationError, match="contiguous"):
        ClusterAssignment((0, 2), 2, ClusterMethod.KMEANS, 0, ("a", "b"))
    with pytest.raises(ValidationError, match="declared k"):
        ClusterAssignment((0, 1), 3, ClusterMethod.KMEANS, 0, ("a", "b"))
    with pytest.raises(ValidationError, match="length"):
        ClusterAssignment((0, 1), 2, ClusterMethod.KMEANS, 0, ("a",))


def test_elbow_curve_validation():
    with pytest.raises(ValidationError, match="one length"):
        ElbowCurve((2, 3), (0.1,), (0.1, 0.2), 2)
    with pytest.raises(ValidationError, match="candidate"):
        ElbowCurve((2, 3), (0.1, 0.2), (0.1, 0.2), 9)


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

def test_kmeans_k1_groups_everything():
    m = matrix_of(np.random.default_rng(0).standard_normal((20, 3)))
    a = kmeans(m, 1, 0)
    assert set(a.labels) == {0}
    assert a.k == 1
    assert a.method == ClusterMethod.KMEANS


def test_kmeans_k_equals_n_on_distinct_rows():
    m = matrix_of(np.arange(12, dtype=np.float32).reshape(6, 2))
    a = kmeans(m, 6, 3)
    assert sorted(a.labels) == list(range(6))  # every point its own cluster


def test_kmeans_two_blobs_exact_recovery():
    m, gold = make_blobs_matrix(2, 100, 8, seed=5, separation=20.0)
    a = kmeans(m, 2, 0)
    assert ari(list(gold), list(a.labels)) == 1.0


def test_kmeans_argument_errors():
    m = matrix_of(np.ones((4, 2)))
    with pytest.raises(ValidationError, match="positive"):
        kmeans(m, 0, 0)
    with pytest.raises(ValidationError, match="exceeds"):
        kmeans(m, 5, 0)
    with pytest.raises(ValidationError, match="empty"):
        kmeans(matrix_of(np.zeros((0, 2))), 1, 0)


def test_kmeans_deterministic_and_seed_sensitive():
    m, _ = make_blobs_matrix(5, 40, 6, seed=2)
    a = kmeans(m, 5, 11)
    b = kmeans(m, 5, 11)
    assert a.labels == b.labels
    assert a.seed == 11
    assert a.params["requested_k"] == 5


def test_kmeans_survives_duplicate_points():
    base = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]], dtype=np.float32)
    m = matrix_of(np.repeat(base, 5, axis=0))
    a = kmeans(m, 5, 0)  # more clusters than distinct points
    assert 1 <= a.k <= 5
    assert sorted(set(a.labels)) == list(range(a.k))


def test_kmeans_labels_cover_all_points():
    m, _ = make_blobs_matrix(3, 30, 4, seed=9)
    a = kmeans(m, 3, 1)
    assert len(a.labels) == 90
    assert len(a.instance_ids) == 90
    assert a.instance_ids == m.instance_ids


# ---------------------------------------------------------------------------
# OPTICS
# ---------------------------------------------------------------------------

def test_optics_two_blobs_no_noise():
    m, gold = make_blobs_matrix(2, 50, 4, seed=3, separation=30.0)
    a = optics(m, 5)
    assert a.k == 2
    assert ari(list(gold), list(a.labels)) == 1.0
    assert a.method == ClusterMethod.OPTICS
    assert a.params == {"min_samples": 5, "xi": clustering.OPTICS_XI}


def test_optics_identical_points_single_cluster():
    m = matrix_of(np.zeros((12, 3)))
    a = optics(m, 3)
    assert a.k == 1
    assert set(a.labels) == {0}


def test_optics_outlier_becomes_singleton():
    rng = np.random.default_rng(0)
    a_pts = rng.standard_normal((30, 4))
    b_pts = rng.standard_normal((30, 4)) + np.array([40.0, 0, 0, 0])
    outlier = np.array([[20.0, 40.0, 0.0, 0.0]])
    m = matrix_of(np.vstack([a_pts, b_pts, outlier]))
    a = optics(m, 5)
    assert a.k == 3
    assert a.labels.count(a.labels[60]) == 1  # the outlier sits alone
    assert sorted(set(a.labels)) == list(range(a.k))


def test_optics_argument_errors():
    m = matrix_of(np.ones((4, 2)))
    with pytest.raises(ValidationError, match="at least 2"):
        optics(m, 1)
    with pytest.raises(ValidationError, match="exceeds"):
        optics(m, 9)


# ---------------------------------------------------------------------------
# silhouette
# ---------------------------------------------------------------------------

def four_point_example():
    return matrix_of([[0.0], [1.0], [10.0], [11.0]]), [0, 0, 1, 1]


def test_silhouette_four_point_value():
    m, labels = four_point_example()
    expected = float(
        (2 * Fraction(19, 21) + 2 * Fraction(17, 19)) / 4
    )  # outer points (10.5-1)/10.5, inner points (9.5-1)/9.5
    assert abs(silhouette(m, labels) - expected) < 1e-12


def test_silhouette_two_singletons_zero():
    m = matrix_of([[0.0], [5.0]])
    assert silhouette(m, [0, 1]) == 0.0


def test_silhouette_relabeling_invariance():
    m, labels = four_point_example()
    assert silhouette(m, labels) == silhouette(m, [7, 7, 3, 3])
    assert silhouette(m, labels) == silhouette(m, ["x", "x", "y", "y"])


def test_silhouette_isometry_invariance():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((60, 5))
    labels = rng.integers(0, 3, 60)
    q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    moved = X @ q + rng.standard_normal(5)
    # Feed float64 arrays directly: the invariance is a property of the
    # computation, and float32 storage would quantize the rotated copy.
    s0 = silhouette(X, labels)
    s1 = silhouette(moved, labels)
    assert abs(s0 - s1) < 1e-9
    assert -1.0 <= s0 <= 1.0


def test_silhouette_matches_reference_implementation():
    from sklearn.metrics import silhouette_score

    rng = np.random.default_rng(8)
    X = rng.standard_normal((80, 4))
    labels = rng.integers(0, 4, 80)
    ours = silhouette(matrix_of(X), labels)
    ref = float(silhouette_score(np.asarray(X, dtype=np.float64), labels))
    assert abs(ours - ref) < 1e-9


def test_silhouette_chunked_equals_dense(monkeypatch):
    rng = np.random.default_rng(1)
    X = rng.standard_normal((50, 3))
    labels = rng.integers(0, 3, 50)
    dense = silhouette(matrix_of(X), labels)
    monkeypatch.setattr(clustering, "_DENSE_N", 10)
    monkeypatch.setattr(clustering, "_CHUNK", 7)
    chunked = silhouette(matrix_of(X), labels)
    assert abs(dense - chunked) < 1e-9


def test_silhouette_errors():
    m, _ = four_point_example()
    with pytest.raises(ValidationError, match="at least 2"):
        silhouette(m, [0, 0, 0, 0])
    with pytest.raises(ValidationError, match="labels for"):
        silhouette(m, [0, 1])
    with pytest.raises(ValidationError, match="pairwise distances are zero"):
        silhouette(matrix_of(np.zeros((4, 2))), [0, 0, 1, 1])


# ---------------------------------------------------------------------------
# elbow estimation
# ---------------------------------------------------------------------------

def test_default_k_grid_shape():
    g = default_k_grid(10)
    assert g == list(range(2, 10))  # capped at n-1
    g500 = default_k_grid(500)
    assert g500[0] == 2 and 20 in g500 and 24 in g500 and 60 in g500
    assert g500 == sorted(g500)
    assert max(g500) < 500
    g4000 = default_k_grid(4000)
    assert 70 in g4000 and 120 in g4000
    assert max(g4000) <= int(2 * 4000 ** 0.5)


def test_elbow_brackets_true_k_ten_blobs():
    m, gold = make_blobs_matrix(10, 30, 6, seed=7)
    curve = estimate_k_elbow(m, list(range(2, 31)), 0)
    assert 8 <= curve.k_hat <= 12
    assert len(curve.k_values) == 29
    assert len(curve.silhouette_raw) == 29
    assert curve.params["selection_rule"] in ("argmax", "chord")
    assert curve.params["bandwidth"] > 0


def test_elbow_grid_order_invariance():
    m, _ = make_blobs_matrix(4, 25, 4, seed=1)
    grid = [2, 3, 4, 5, 6, 8, 10]
    shuffled = [8, 2, 10, 4, 3, 6, 5]
    assert estimate_k_elbow(m, grid, 0) == estimate_k_elbow(m, shuffled, 0)
    # duplicates collapse
    assert estimate_k_elbow(m, grid + [4, 5], 0) == estimate_k_elbow(m, grid, 0)


def test_elbow_grid_validation():
    m, _ = make_blobs_matrix(3, 10, 3, seed=0)
    with pytest.raises(ValidationError, match="at least 4"):
        estimate_k_elbow(m, [2, 3, 4], 0)
    with pytest.raises(ValidationError, match=r"\[2, 30\]"):
        estimate_k_elbow(m, [2, 3, 4, 99], 0)
    with pytest.raises(ValidationError, match=r"\[2, 30\]"):
        estimate_k_elbow(m, [1, 2, 3, 4], 0)


def test_chord_knee_picks_interior():
    x = np.array([2.0, 3.0, 4.0, 5.0, 6.0])
    line = np.array([0.1, 0.2, 0.3, 0.4, 0.5])
    idx = clustering._chord_knee(x, line)
    assert 1 <= idx <= 3  # interior, never an endpoint
    bend = np.array([0.1, 0.6, 0.72, 0.75, 0.76])
    assert clustering._chord_knee(x, bend) == 1  # the visible knee


def test_cluster_auto_recovers_blobs():
    m, gold = make_blobs_matrix(10, 30, 6, seed=7)
    curve, assignment = cluster_auto(m, 0)
    assert assignment.method == ClusterMethod.KMEANS_ELBOW
    assert assignment.params["k_hat"] == curve.k_hat
    assert 8 <= curve.k_hat <= 12
    assert ari(list(gold), list(assignment.labels)) >= 0.9


def test_cluster_auto_deterministic():
    m, _ = make_blobs_matrix(5, 20, 4, seed=6)
    c1, a1 = cluster_auto(m, 3)
    c2, a2 = cluster_auto(m, 3)
    assert c1 == c2
    assert a1 == a2


def test_cluster_auto_degenerate_inputs():
    with pytest.raises(ValidationError, match="at least 10"):
        cluster_auto(matrix_of(np.ones((5, 2))), 0)
    with pytest.raises(ValidationError, match="collapsed|zero"):
        cluster_auto(matrix_of(np.zeros((12, 3))), 0)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def test_elbow_csv_round_trip(tmp_path):
    m, _ = make_blobs_matrix(4, 10, 3, seed=2)
    curve = estimate_k_elbow(m, [2, 3, 4, 5, 6], 1)
    path = tmp_path / "curve.csv"
    elbow_to_csv(curve, path)
    ks, raw, smoothed = load_elbow_csv(path)
    assert ks == list(curve.k_values)
    assert raw == list(curve.silhouette_raw)  # repr round-trip is exact
    assert smoothed == list(curve.silhouette_smoothed)
    header = path.read_text().splitlines()[0]
    assert header == "k,silhouette_raw,silhouette_smoothed"


def test_elbow_csv_errors(tmp_path):
    with pytest.raises(InputError):
        load_elbow_csv(tmp_path / "none.csv")
    bad = tmp_path / "bad.csv"
    bad.write_text("not,a,curve\n1,2,3\n")
    with pytest.raises(FormatError, match="not an elbow curve"):
        load_elbow_csv(bad)
    bad.write_text("k,silhouette_raw,silhouette_smoothed\noops\n")
    with pytest.raises(FormatError, match="bad curve row"):
        load_elbow_csv(bad)


def test_assignment_round_trip(tmp_path):
    a = ClusterAssignment(
        (0, 1, 1, 0), 2, ClusterMethod.KMEANS, 7, ("w", "x", "y", "z"),
        params={"requested_k": 2},
    )
    path = tmp_path / "a.jsonl"
    save_assignment(a, path, extra_meta={"config_hash": "ff00"})
    back, meta = load_assignment(path)
    assert back.labels == a.labels
    assert back.k == 2
    assert back.method == ClusterMethod.KMEANS
    assert back.seed == 7
    assert back.instance_ids == a.instance_ids
    assert back.params == {"requested_k": 2}
    assert meta["config_hash"] == "ff00"
    save_assignment(a, tmp_path / "b.jsonl", extra_meta={"config_hash": "ff00"})
    assert (tmp_path / "b.jsonl").read_bytes() == path.read_bytes()


def test_assignment_load_errors(tmp_path):
    with pytest.raises(InputError):
        load_assignment(tmp_path / "none.jsonl")
    p = tmp_path / "bad.jsonl"
    p.write_text("")
    with pytest.raises(FormatError, match="empty"):
        load_assignment(p)
    p.write_text('{"nope": 1}\n')
    with pytest.raises(FormatError, match="meta"):
        load_assignment(p)
    p.write_text('{"meta": {"k": 1, "method": "kmeans", "seed": 0}}\nnot json\n')
    with pytest.raises(FormatError, match="bad assignment row"):
        load_assignment(p)

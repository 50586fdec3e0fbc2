import csv
import json

import numpy as np
import pytest

from svllreid.evaluation import (EvalReport, RankingProblem, average_precision, evaluate,
                                 evaluate_distances, pairwise_distances, pca_project_2d,
                                 protocol_filter, separation_ratio, write_scatter_csv)


def brute_force_eval(dist, qids, gids, qcams, gcams, ranks=(1, 5, 10)):
    """Exhaustive reference: python sort with index tie-break, explicit loops."""
    aps, firsts = [], []
    for i in range(len(qids)):
        order = sorted(range(len(gids)), key=lambda j: (dist[i][j], j))
        kept = [j for j in order if gids[j] != -1 and not (gids[j] == qids[i] and gcams[j] == qcams[i])]
        flags = [gids[j] == qids[i] for j in kept]
        if not any(flags):
            continue
        hits, precisions = 0, []
        for k, f in enumerate(flags):
            if f:
                hits += 1
                precisions.append(hits / (k + 1))
        aps.append(sum(precisions) / len(precisions))
        firsts.append(flags.index(True))
    cmc = {r: sum(1 for f in firsts if f < r) / len(firsts) for r in ranks}
    return sum(aps) / len(aps), cmc, len(aps)


# ---- distances ----

def test_pairwise_distances():
    e = np.eye(3)
    d = pairwise_distances(e, np.vstack([e, -e]))
    assert d[0, 0] == 0.0
    assert d[0, 3] == pytest.approx(2.0, abs=1e-12)
    rng = np.random.default_rng(0)
    q, g = rng.normal(size=(5, 4)), rng.normal(size=(7, 4))
    d = pairwise_distances(q, g)
    for i in range(5):
        for j in range(7):
            assert d[i, j] == pytest.approx(np.sqrt(sum((q[i] - g[j]) ** 2)), abs=1e-12)
    with pytest.raises(ValueError):
        pairwise_distances(q, g[:, :3])


# ---- AP ----

def test_average_precision_hand_cases():
    assert average_precision([1, 1, 0, 0]) == 1.0
    assert average_precision([1, 0, 1]) == 5 / 6
    assert average_precision([0] * 9 + [1]) == pytest.approx(1 / 10, abs=1e-15)
    with pytest.raises(ValueError):
        average_precision([0, 0])


# ---- protocol ----

def test_protocol_filter_hand_case():
    # query: id 5, camera 0
    g_ids = [5, 5, 3, 3, -1, 5]
    g_cams = [0, 1, 0, 1, 1, 0]
    p = RankingProblem(np.eye(2)[:1], [5], [0], np.eye(2)[[0] * 6], g_ids, g_cams)
    manual = [not (i == 5 and c == 0) and i != -1 for i, c in zip(g_ids, g_cams)]
    assert protocol_filter(p, 0).tolist() == manual == [False, True, True, True, False, False]


def test_protocol_all_distinct_cameras():
    p = RankingProblem(np.ones((1, 2)), [1], [0], np.ones((4, 2)), [1, 2, -1, 1], [1, 2, 3, 4])
    assert protocol_filter(p, 0).tolist() == [True, True, False, True]


def test_query_with_only_filtered_match_is_skipped():
    q = np.eye(3)[:2]
    g = np.eye(3)
    p = RankingProblem(q, [0, 1], [0, 0], g, [0, 1, 2], [0, 1, 1])
    r = evaluate(p)
    assert r.valid_queries == 1 and r.mAP == 1.0
    with pytest.raises(ValueError):
        evaluate(RankingProblem(q[:1], [0], [0], g[:1], [0], [0]))
    with pytest.raises(ValueError):
        RankingProblem(q, [0, 1], [0, 0], np.zeros((0, 3)), [], [])


def test_self_retrieval_is_perfect():
    rng = np.random.default_rng(1)
    q = rng.normal(size=(6, 5))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    r = evaluate(RankingProblem(q, range(6), [0] * 6, q, range(6), [1] * 6))
    assert r.mAP == 1.0 and r.rank1 == 1.0


# ---- brute force oracle ----

def test_random_problems_match_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(10):
        dist = rng.random((50, 200))
        qids, gids = rng.integers(0, 10, 50), rng.integers(-1, 10, 200)
        qc, gc = rng.integers(0, 3, 50), rng.integers(0, 3, 200)
        r = evaluate_distances(dist, qids, gids, qc, gc)
        m, cmc, n = brute_force_eval(dist.tolist(), qids.tolist(), gids.tolist(), qc.tolist(), gc.tolist())
        assert r.valid_queries == n
        assert abs(r.mAP - m) <= 1e-10
        assert all(abs(r.cmc[k] - cmc[k]) <= 1e-10 for k in cmc)


def test_ties_break_by_gallery_index():
    dist = np.zeros((1, 4))
    # relevant entry at index 2 ties with two irrelevant entries before it
    r = evaluate_distances(dist, [1], [0, 0, 1, 0], [0], [1, 1, 1, 1], ranks=(1, 3))
    assert r.mAP == pytest.approx(1 / 3) and r.cmc == {1: 0.0, 3: 1.0}
    m, cmc, _ = brute_force_eval(dist.tolist(), [1], [0, 0, 1, 0], [0], [1, 1, 1, 1], (1, 3))
    assert r.mAP == m


def test_metric_properties():
    rng = np.random.default_rng(3)
    dist = rng.random((20, 60))
    qids, gids = rng.integers(0, 5, 20), rng.integers(0, 5, 60)
    qc, gc = np.zeros(20, int), np.ones(60, int)
    ranks = (1, 5, 10, 60)
    r = evaluate_distances(dist, qids, gids, qc, gc, ranks)
    # monotone transforms leave everything unchanged
    r2 = evaluate_distances(np.exp(3 * dist) + 7, qids, gids, qc, gc, ranks)
    assert r.per_query_ap == r2.per_query_ap and r.cmc == r2.cmc
    vals = [r.cmc[k] for k in ranks]
    assert vals == sorted(vals) and vals[-1] == 1.0
    assert all(0 <= v <= 1 for v in vals + r.per_query_ap)
    # an irrelevant entry below every relevant one changes no AP
    far = np.hstack([dist, np.full((20, 1), 99.0)])
    r3 = evaluate_distances(far, qids, np.append(gids, 4), qc, np.append(gc, 1), ranks)
    rel_last = [q for q in range(20) if qids[q] != 4]
    assert [r3.per_query_ap[q] for q in rel_last] == [r.per_query_ap[q] for q in rel_last]


def test_report_json_round_trip():
    r = EvalReport(0.5, {1: 0.25, 5: 0.75}, [0.5, 0.5], 2)
    doc = json.loads(r.to_json())
    assert doc["mAP"] == 0.5 and doc["cmc"] == {"1": 0.25, "5": 0.75} and doc["valid_queries"] == 2
    assert r.to_json() == r.to_json()


# ---- PCA ----

def test_pca_two_d_isometry():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(30, 2)) * [3.0, 1.0]
    x -= x.mean(axis=0)
    y = pca_project_2d(x)
    dx = np.linalg.norm(x[:, None] - x[None], axis=-1)
    dy = np.linalg.norm(y[:, None] - y[None], axis=-1)
    assert np.abs(dx - dy).max() <= 1e-6


def test_pca_collinear_rank_one():
    t = np.linspace(-1, 1, 9)[:, None]
    x = t * np.array([[1.0, 2.0, -0.5]]) + 4.0
    y = pca_project_2d(x)
    assert np.abs(y[:, 1]).max() <= 1e-8
    with pytest.raises(ValueError):
        pca_project_2d(np.ones((5, 3)))
    with pytest.raises(ValueError):
        pca_project_2d(np.ones((1, 3)))


def test_pca_variance_matches_eigendecomposition():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(50, 16)) * np.linspace(3, 0.2, 16)
    y, (r1, r2) = pca_project_2d(x, return_variance=True)
    xc = x - x.mean(axis=0)
    w, v = np.linalg.eigh(xc.T @ xc / 49)
    assert abs(r1 - w[-1] / w.sum()) <= 1e-6
    assert abs(r2 - w[-2] / w.sum()) <= 1e-6
    ref = xc @ v[:, [-1, -2]]
    for j in range(2):
        k = np.argmax(np.abs(ref[:, j]))
        ref[:, j] *= np.sign(ref[k, j])
    assert np.abs(y - ref).max() <= 1e-6
    # sign convention: the largest-magnitude coordinate of each column is positive
    for j in range(2):
        assert y[np.argmax(np.abs(y[:, j])), j] > 0


def test_separation_ratio_and_csv(tmp_path):
    coords = np.array([[0, 0], [0, 0.1], [5, 5], [5, 5.1]])
    assert separation_ratio(coords, [0, 0, 1, 1]) < 0.05
    path = tmp_path / "s.csv"
    write_scatter_csv(str(path), coords, [0, 0, 1, 1], "stage2")
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["x", "y", "id", "stage"] and len(rows) == 5 and rows[3][3] == "stage2"

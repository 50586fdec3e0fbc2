"""Retrieval metrics (mAP, CMC) under the cross-camera protocol, and 2-D PCA."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from . import _kernels as K

JUNK = -1


@dataclass
class RankingProblem:
    query: np.ndarray
    query_ids: np.ndarray
    query_cams: np.ndarray
    gallery: np.ndarray
    gallery_ids: np.ndarray
    gallery_cams: np.ndarray

    def __post_init__(self):
        for name in ("query_ids", "query_cams", "gallery_ids", "gallery_cams"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        if len(self.gallery) == 0:
            raise ValueError("empty gallery")


@dataclass
class EvalReport:
    mAP: float
    cmc: dict
    per_query_ap: list = field(repr=False)
    valid_queries: int = 0

    @property
    def rank1(self):
        return self.cmc[1]

    def to_json(self):
        d = asdict(self)
        d["cmc"] = {str(k): v for k, v in self.cmc.items()}
        return json.dumps(d, sort_keys=True, indent=1)


def pairwise_distances(queries, gallery):
    """Euclidean distances between rows; for unit rows this is sqrt(2 - 2 cos)."""
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.shape[1] != g.shape[1]:
        raise ValueError(f"dimension mismatch {q.shape[1]} vs {g.shape[1]}")
    sq = (q * q).sum(1)[:, None] + (g * g).sum(1)[None, :] - 2.0 * q @ g.T
    return np.sqrt(np.maximum(sq, 0.0))


def protocol_filter(problem, query_index):
    """Valid gallery entries for one query: drop same id + same camera, and junk."""
    qid = problem.query_ids[query_index]
    qcam = problem.query_cams[query_index]
    same = (problem.gallery_ids == qid) & (problem.gallery_cams == qcam)
    return ~same & (problem.gallery_ids != JUNK)


def average_precision(relevant):
    """Mean of precision@k over the ranks k holding a relevant entry.

    Summed in exact rationals so the result is the correctly rounded value.
    """
    rel = np.asarray(relevant, dtype=bool)
    hits = np.flatnonzero(rel)
    if hits.size == 0:
        raise ValueError("no relevant entries")
    total = sum(Fraction(n, int(k) + 1) for n, k in enumerate(hits, start=1))
    return float(total / hits.size)


def evaluate_distances(dist, query_ids, gallery_ids, query_cams, gallery_cams,
                       ranks=(1, 5, 10)):
    ap, first, valid = K.rank_queries(dist, query_ids, gallery_ids, query_cams, gallery_cams)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("no query has a valid match in the gallery")
    hits = first[valid]
    cmc = {int(r): float(np.mean(hits < r)) for r in ranks}
    return EvalReport(float(ap[valid].mean()), cmc, [float(a) for a in ap[valid]], n_valid)


def evaluate(problem, ranks=(1, 5, 10)):
    """mAP and CMC@ranks; ties in distance resolve by gallery index."""
    dist = pairwise_distances(problem.query, problem.gallery)
    return evaluate_distances(dist, problem.query_ids, problem.gallery_ids,
                              problem.query_cams, problem.gallery_cams, ranks)


def _power_top(C, rng_vec, iters=5000, tol=1e-13):
    v = rng_vec / np.linalg.norm(rng_vec)
    lam = 0.0
    for _ in range(iters):
        w = C @ v
        n = np.linalg.norm(w)
        if n == 0:
            return v, 0.0
        w /= n
        if np.linalg.norm(w - v) < tol or np.linalg.norm(w + v) < tol:
            v = w
            lam = float(v @ C @ v)
            break
        v = w
        lam = float(v @ C @ v)
    return v, lam


def pca_project_2d(x, return_variance=False):
    """Project mean-centred rows onto the top-2 principal directions.

    Directions come from power iteration with deflation on the covariance.
    Each output column is flipped so its largest-magnitude entry is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least two rows")
    xc = x - x.mean(axis=0)
    C = xc.T @ xc / (len(x) - 1)
    total = float(np.trace(C))
    if total <= 1e-300:
        raise ValueError("data has rank 0")
    d = C.shape[0]
    # fixed start vector keeps the projection deterministic
    start = np.cos(np.arange(1, d + 1) * 1.234) + 0.1
    v1, l1 = _power_top(C, start)
    C2 = C - l1 * np.outer(v1, v1)
    s2 = start - (start @ v1) * v1
    if np.linalg.norm(s2) < 1e-12:
        s2 = np.roll(start, 1) - (np.roll(start, 1) @ v1) * v1
    v2, l2 = _power_top(C2, s2)
    v2 = v2 - (v2 @ v1) * v1
    if np.linalg.norm(v2) < 1e-8:
        # rank-1 data: any unit vector orthogonal to v1 gives an all-zero second column
        v2 = s2 - (s2 @ v1) * v1
    v2 /= np.linalg.norm(v2)
    coords = xc @ np.column_stack([v1, v2])
    for j in range(2):
        k = np.argmax(np.abs(coords[:, j]))
        if coords[k, j] < 0:
            coords[:, j] *= -1
    if return_variance:
        return coords, (max(l1, 0.0) / total, max(l2, 0.0) / total)
    return coords


def separation_ratio(coords, labels):
    """Mean intra-identity over mean inter-identity pairwise distance."""
    coords = np.asarray(coords, dtype=np.float64)
    labels = np.asarray(labels)
    d = np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1))
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    return float(d[same & off].mean() / d[~same].mean())


def write_scatter_csv(path, coords, ids, stage):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "id", "stage"])
        for (x, y), i in zip(coords, ids):
            w.writerow([repr(float(x)), repr(float(y)), int(i), stage])

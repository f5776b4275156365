"""Query/gallery retrieval evaluation: squared-L2 distances, Rank-k, mAP.

Follows the usual multi-camera protocol: gallery entries sharing both
identity and camera with the query are excluded, queries without any
cross-camera positive are dropped from the averages, and ties break by
ascending gallery index (stable sort) so results are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import embedder
from .transforms import circuitous_scale


@dataclass(frozen=True)
class RetrievalMetrics:
    rank1: float
    rank5: float
    rank10: float
    map: float
    n_query: int
    n_excluded: int = 0

    def as_dict(self):
        return {"rank1": self.rank1, "rank5": self.rank5, "rank10": self.rank10,
                "map": self.map, "n_query": self.n_query, "n_excluded": self.n_excluded}


def pairwise_distances(queries, gallery, chunk=64):
    """Squared euclidean distances, shape (n_query, n_gallery).

    Computed from explicit differences (not the expanded dot-product
    form) so identical rows give exact zeros.
    """
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ValueError(f"feature dims do not match: {q.shape} vs {g.shape}")
    out = np.empty((q.shape[0], g.shape[0]), dtype=np.float64)
    for start in range(0, q.shape[0], chunk):
        block = q[start:start + chunk]
        out[start:start + chunk] = ((block[:, None, :] - g[None, :, :]) ** 2).sum(axis=2)
    return out


def _query_order(dist_row, valid):
    # stable sort over valid gallery entries: ties keep ascending index
    candidates = np.nonzero(valid)[0]
    return candidates[np.argsort(dist_row[candidates], kind="stable")]


def _masks(q_label, q_cam, g_labels, g_cams):
    same_id = g_labels == q_label
    same_cam = g_cams == q_cam
    valid = ~(same_id & same_cam)
    positives = same_id & ~same_cam
    return valid, positives


def rank_k_accuracy(distmat, q_labels, g_labels, q_cams, g_cams, k):
    """Fraction of queries with a correct identity in the top k."""
    distmat, q_labels, g_labels, q_cams, g_cams = _check_eval_args(
        distmat, q_labels, g_labels, q_cams, g_cams)
    hits, counted = 0, 0
    for i in range(distmat.shape[0]):
        valid, positives = _masks(q_labels[i], q_cams[i], g_labels, g_cams)
        if not positives.any():
            continue
        order = _query_order(distmat[i], valid)
        hits += bool((g_labels[order[:k]] == q_labels[i]).any())
        counted += 1
    if counted == 0:
        raise ValueError("no query has a cross-camera positive")
    return hits / counted


def mean_average_precision(distmat, q_labels, g_labels, q_cams, g_cams):
    """Mean over queries of average precision under the exclusion protocol."""
    distmat, q_labels, g_labels, q_cams, g_cams = _check_eval_args(
        distmat, q_labels, g_labels, q_cams, g_cams)
    aps = []
    for i in range(distmat.shape[0]):
        valid, positives = _masks(q_labels[i], q_cams[i], g_labels, g_cams)
        if not positives.any():
            continue
        order = _query_order(distmat[i], valid)
        rel = (g_labels[order] == q_labels[i]).astype(np.float64)
        cum_hits = np.cumsum(rel)
        precision_at = cum_hits / np.arange(1, rel.size + 1)
        aps.append(float((precision_at * rel).sum() / rel.sum()))
    if not aps:
        raise ValueError("no query has a cross-camera positive")
    return float(np.mean(aps))


def ap_bruteforce_oracle(dist_row, q_label, q_cam, g_labels, g_cams):
    """Average precision by literally walking the sorted ranking.

    Independent reference for mean_average_precision on small instances;
    returns None when the query has no cross-camera positive.
    """
    entries = []
    for j in range(len(dist_row)):
        if g_labels[j] == q_label and g_cams[j] == q_cam:
            continue
        entries.append((float(dist_row[j]), j))
    entries.sort(key=lambda e: (e[0], e[1]))
    n_pos = sum(1 for _, j in entries if g_labels[j] == q_label)
    if n_pos == 0:
        return None
    hits = 0
    precision_sum = 0.0
    for rank, (_, j) in enumerate(entries, start=1):
        if g_labels[j] == q_label:
            hits += 1
            precision_sum += hits / rank
    return precision_sum / n_pos


def _check_eval_args(distmat, q_labels, g_labels, q_cams, g_cams):
    distmat = np.asarray(distmat)
    q_labels = np.asarray(q_labels)
    g_labels = np.asarray(g_labels)
    q_cams = np.asarray(q_cams)
    g_cams = np.asarray(g_cams)
    if distmat.shape != (q_labels.size, g_labels.size):
        raise ValueError(f"distmat shape {distmat.shape} does not match labels "
                         f"({q_labels.size} queries, {g_labels.size} gallery)")
    if q_cams.size != q_labels.size or g_cams.size != g_labels.size:
        raise ValueError("camera id arrays do not match label arrays")
    return distmat, q_labels, g_labels, q_cams, g_cams


def compute_metrics(distmat, q_labels, g_labels, q_cams, g_cams):
    distmat, q_labels, g_labels, q_cams, g_cams = _check_eval_args(
        distmat, q_labels, g_labels, q_cams, g_cams)
    counted, excluded = 0, 0
    hits = {1: 0, 5: 0, 10: 0}
    aps = []
    for i in range(distmat.shape[0]):
        valid, positives = _masks(q_labels[i], q_cams[i], g_labels, g_cams)
        if not positives.any():
            excluded += 1
            continue
        order = _query_order(distmat[i], valid)
        rel = (g_labels[order] == q_labels[i])
        for k in hits:
            hits[k] += bool(rel[:k].any())
        relf = rel.astype(np.float64)
        precision_at = np.cumsum(relf) / np.arange(1, relf.size + 1)
        aps.append(float((precision_at * relf).sum() / relf.sum()))
        counted += 1
    if counted == 0:
        raise ValueError("no query has a cross-camera positive")
    return RetrievalMetrics(
        rank1=hits[1] / counted, rank5=hits[5] / counted, rank10=hits[10] / counted,
        map=float(np.mean(aps)), n_query=counted, n_excluded=excluded)


def evaluate_retrieval(params, queries, gallery, defense_plan=None, normalize=False):
    """Full evaluation of LabeledImage query/gallery sets on a trained model."""
    if not queries or not gallery:
        raise ValueError("query and gallery sets must be non-empty")
    q_imgs = [s.image for s in queries]
    g_imgs = [s.image for s in gallery]
    if defense_plan is not None:
        q_imgs = [circuitous_scale(im, defense_plan) for im in q_imgs]
        g_imgs = [circuitous_scale(im, defense_plan) for im in g_imgs]
    qf = embedder.extract_features(params, q_imgs, normalize=normalize)
    gf = embedder.extract_features(params, g_imgs, normalize=normalize)
    distmat = pairwise_distances(qf, gf)
    return compute_metrics(
        distmat,
        [s.identity for s in queries], [s.identity for s in gallery],
        [s.camera for s in queries], [s.camera for s in gallery])

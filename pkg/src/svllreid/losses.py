"""Training objectives for both stages.

All losses take ``Tensor`` embeddings plus integer label arrays and return a
scalar ``Tensor``; per-anchor values are averaged over the batch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import as_tensor


@dataclass
class LossWeights:
    lambda_lss: float = 0.8
    lambda_vss: float = 0.8
    epsilon: float = 0.1

    def __post_init__(self):
        if self.lambda_lss < 0 or self.lambda_vss < 0:
            raise ValueError("loss weights must be nonnegative")
        if not 0 <= self.epsilon < 1:
            raise ValueError("label smoothing must lie in [0, 1)")


def _labels(labels, n):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    return labels


def _aligned(text, image, labels, image_labels):
    text, image = as_tensor(text), as_tensor(image)
    if text.shape != image.shape:
        raise ValueError(f"text {text.shape} and image {image.shape} batches differ")
    labels = _labels(labels, text.shape[0])
    if image_labels is not None and not np.array_equal(labels, np.asarray(image_labels)):
        raise ValueError("text and image labels are not aligned")
    pos = (labels[:, None] == labels[None, :]).astype(text.dtype)
    return text, image, pos


def loss_t2i(text, image, labels, image_labels=None):
    """Text-to-image contrastive loss over all same-identity positives.

    With ``S = image @ text.T`` the anchor ``i`` term is
    ``-mean_{p in P(i)} S[p, i] + logsumexp_k S[i, k]``.
    """
    text, image, pos = _aligned(text, image, labels, image_labels)
    S = image @ text.T
    n_pos = pos.sum(axis=0)
    num = (S * pos).sum(axis=0) * (1.0 / n_pos)
    return (T.logsumexp(S, axis=1) - num).mean()


def loss_i2t(image, text, labels, text_labels=None):
    """Image-to-text counterpart: ``-mean_p S[i, p] + logsumexp_k S[k, i]``."""
    text, image, pos = _aligned(text, image, labels, text_labels)
    S = image @ text.T
    n_pos = pos.sum(axis=1)
    num = (S * pos).sum(axis=1) * (1.0 / n_pos)
    return (T.logsumexp(S, axis=0) - num).mean()


def smoothed_targets(labels, n_classes, eps):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label outside 0..{n_classes - 1}")
    q = np.full((labels.size, n_classes), eps / n_classes)
    q[np.arange(labels.size), labels] += 1.0 - eps
    return q


def smoothed_cross_entropy(logits, labels, eps):
    logits = as_tensor(logits)
    q = smoothed_targets(labels, logits.shape[1], eps).astype(logits.dtype)
    return -(T.log_softmax(logits, axis=1) * q).sum(axis=1).mean()


def loss_i2tce(image, id_text_features, labels, eps=0.1):
    """Label-smoothed cross entropy of image rows against every identity's text feature."""
    image = as_tensor(image)
    feats = as_tensor(id_text_features)
    _labels(labels, image.shape[0])
    return smoothed_cross_entropy(image @ feats.T, labels, eps)


def loss_id(logits, labels, eps=0.1):
    """Label-smoothed identity classification loss on classifier-head logits."""
    logits = as_tensor(logits)
    _labels(labels, logits.shape[0])
    return smoothed_cross_entropy(logits, labels, eps)


def _pair_index(n):
    others = np.array([[k for k in range(n) if k != i] for i in range(n)], dtype=np.int64)
    partner = np.arange(n) ^ 1
    # column of the partner inside each row of ``others``
    pos_col = np.where(partner > np.arange(n), partner - 1, partner)
    return others, pos_col


def loss_ntxent(z, tau=0.07):
    """NT-Xent over ``2V`` rows ordered as positive pairs ``(2k, 2k+1)``.

    Each anchor's positive competes against every other row in the batch.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    z = as_tensor(z)
    n = z.shape[0]
    if n < 2 or n % 2:
        raise ValueError(f"need an even number (>= 2) of rows, got {n}")
    sim = T.cosine_similarity(z, z) * (1.0 / tau)
    others, pos_col = _pair_index(n)
    rows = np.arange(n)[:, None]
    off = sim[rows, others]
    pos = off[np.arange(n), pos_col]
    return (T.logsumexp(off, axis=1) - pos).mean()


def hardest_pairs(x, labels):
    """Indices of the farthest positive and the nearest negative for every anchor."""
    labels = np.asarray(labels)
    sq = (x * x).sum(axis=1)
    d = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2 * x @ x.T, 0))
    same = labels[:, None] == labels[None, :]
    not_self = ~np.eye(len(labels), dtype=bool)
    hp = np.where(same & not_self, d, -np.inf).argmax(axis=1)
    hn = np.where(~same, d, np.inf).argmin(axis=1)
    return hp, hn


def loss_triplet(x, labels, margin=0.3):
    """Batch-hard triplet loss with Euclidean distance, hinged at zero."""
    x = as_tensor(x)
    labels = _labels(labels, x.shape[0])
    ids, counts = np.unique(labels, return_counts=True)
    if len(ids) < 2 or counts.min() < 2:
        raise ValueError("triplet loss needs >= 2 identities with >= 2 rows each")
    hp, hn = hardest_pairs(x.data, labels)
    dp = T.sqrt(((x - x[hp]) * (x - x[hp])).sum(axis=1))
    dn = T.sqrt(((x - x[hn]) * (x - x[hn])).sum(axis=1))
    return T.relu(dp - dn + margin).mean()


def stage1_total(t2i, i2t, lss, lambda_lss=0.8):
    return t2i + i2t + lss * lambda_lss


def stage2_total(i2tce, id_, tri, vss, lambda_vss=0.8):
    return i2tce + id_ + tri + vss * lambda_vss

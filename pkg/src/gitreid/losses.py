"""BNNeck head, cross-entropy and batch-hard triplet losses."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor

logger = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class HeadParams:
    bn_gain: Tensor  # [D]
    bn_bias: Tensor  # [D]
    classifier: Tensor  # [D, K], no bias
    running_mean: np.ndarray
    running_var: np.ndarray

    def named(self, prefix: str = "head") -> dict[str, Tensor]:
        return {
            f"{prefix}.bn_gain": self.bn_gain,
            f"{prefix}.bn_bias": self.bn_bias,
            f"{prefix}.classifier": self.classifier,
        }

    def buffers(self, prefix: str = "head") -> dict[str, np.ndarray]:
        return {f"{prefix}.running_mean": self.running_mean, f"{prefix}.running_var": self.running_var}


def init_head(rng: np.random.Generator, width: int, classes: int) -> HeadParams:
    return HeadParams(
        bn_gain=nx.parameter(np.ones(width)),
        bn_bias=nx.parameter(np.zeros(width)),
        classifier=nx.parameter(nx.trunc_normal((width, classes), rng)),
        running_mean=np.zeros(width, dtype=np.float32),
        running_var=np.ones(width, dtype=np.float32),
    )


def batch_norm(x: Tensor, head: HeadParams, training: bool, update_stats: bool = True) -> Tensor:
    """Per-feature BN over a ``[B, D]`` batch.

    In training mode the batch statistics normalise ``x`` and the running
    statistics are updated in place (unbiased variance, momentum 0.1).
    """
    if training:
        mu = x.mean(axis=0, keepdims=True)
        centred = x - mu
        var = (centred * centred).mean(axis=0, keepdims=True)
        xhat = centred / nx.sqrt(var + BN_EPS)
        b = x.shape[0]
        if update_stats:
            unbiased = var.data[0] * (b / max(b - 1, 1))
            head.running_mean[...] = (1 - BN_MOMENTUM) * head.running_mean + BN_MOMENTUM * mu.data[0]
            head.running_var[...] = (1 - BN_MOMENTUM) * head.running_var + BN_MOMENTUM * unbiased
    else:
        mean = head.running_mean.astype(x.dtype)
        inv = (1.0 / np.sqrt(head.running_var.astype(x.dtype) + BN_EPS)).astype(x.dtype)
        xhat = (x - nx.Tensor(mean)) * nx.Tensor(inv)
    return xhat * head.bn_gain + head.bn_bias


def bnneck(class_feature: Tensor, head: HeadParams, training: bool, update_stats: bool = True) -> dict[str, Tensor]:
    ce_feature = batch_norm(class_feature, head, training, update_stats)
    return {
        "triplet_feature": class_feature,
        "ce_feature": ce_feature,
        "logits": nx.matmul(ce_feature, head.classifier),
    }


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the true class; no label smoothing."""
    labels = np.asarray(labels)
    b, k = logits.shape
    if labels.shape != (b,) or labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must be {b} class ids in [0, {k})")
    onehot = np.zeros((b, k), dtype=logits.dtype)
    onehot[np.arange(b), labels] = 1
    logp = nx.log_softmax(logits, axis=-1)
    return -(logp * nx.Tensor(onehot)).sum() * (1.0 / b)


def hardest_pairs(dist: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Indices of the hardest positive and negative for each anchor.

    Returns ``(pos_idx, neg_idx, has_pos)``. Positives exclude the anchor
    itself; ties go to the lowest index.
    """
    same = labels[:, None] == labels[None, :]
    eye = np.eye(len(labels), dtype=bool)
    pos_mask = same & ~eye
    neg_mask = ~same
    has_pos = pos_mask.any(axis=1)
    pos_idx = np.where(pos_mask, dist, -np.inf).argmax(axis=1)
    neg_idx = np.where(neg_mask, dist, np.inf).argmin(axis=1)
    return pos_idx, neg_idx, has_pos


def triplet_hard(features: Tensor, labels, mode: str = "soft") -> Tensor:
    """Batch-hard triplet loss on non-squared Euclidean distances.

    ``mode="soft"`` is the soft-margin form ``mean softplus(d_ap - d_an)``;
    ``mode="literal"`` is ``-mean max(d_an - d_ap, 0)``.
    """
    labels = np.asarray(labels)
    b = features.shape[0]
    dist = nx.pairwise_distance(features)
    pos_idx, neg_idx, has_pos = hardest_pairs(dist.data, labels)
    if not (labels[:, None] != labels[None, :]).any():
        raise ValueError("triplet loss needs at least two distinct labels in the batch")
    if not has_pos.all():
        logger.warning("%d anchors have no positive in the batch", int((~has_pos).sum()))
    rows = np.arange(b)
    pos_sel = np.zeros((b, b), dtype=features.dtype)
    pos_sel[rows[has_pos], pos_idx[has_pos]] = 1
    neg_sel = np.zeros((b, b), dtype=features.dtype)
    neg_sel[rows, neg_idx] = 1
    d_ap = (dist * nx.Tensor(pos_sel)).sum(axis=1)
    d_an = (dist * nx.Tensor(neg_sel)).sum(axis=1)
    if mode == "soft":
        return nx.softplus(d_ap - d_an).mean()
    if mode == "literal":
        return -nx.relu(d_an - d_ap).mean()
    raise ValueError(f"unknown triplet mode {mode!r}")


def total_loss(ce: Tensor, tri: Tensor, alpha: float = 1.0, beta: float = 1.0) -> Tensor:
    if alpha < 0 or beta < 0:
        raise ValueError("loss weights must be non-negative")
    return ce * alpha + tri * beta

"""Identity, weighted-regularization-triplet and total training objectives."""

from dataclasses import dataclass

import numpy as np

from .errors import require
from .tensor import Tensor, cross_entropy, global_avg_pool, masked_softmax, pairwise_distance, softplus


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.8
    beta: float = 0.4
    lambda1: float = 0.2
    lambda2: float = 0.25
    lambda3: float = 0.25
    rho: float = 0.65

    def __post_init__(self):
        for k, v in vars(self).items():
            require(v >= 0, f"loss weight {k}={v} must be non-negative")


@dataclass
class DistanceMatrix:
    dist: Tensor  # [M,M]
    labels: np.ndarray  # [M]

    @classmethod
    def from_features(cls, f_c, labels):
        """Pairwise Euclidean distances between pooled rows of ``f_c``."""
        vecs = global_avg_pool(f_c) if f_c.ndim == 4 else f_c
        labels = np.asarray(labels)
        require(labels.shape == (vecs.shape[0],), "one label per feature row required")
        return cls(pairwise_distance(vecs), labels)

    def masks(self):
        same = self.labels[:, None] == self.labels[None, :]
        pos = same & ~np.eye(len(self.labels), dtype=bool)
        return pos, ~same


def id_loss(f_c, cls, labels):
    vecs = global_avg_pool(f_c) if f_c.ndim == 4 else f_c
    return cross_entropy(cls(vecs), labels)


def wrt_weights(dm: DistanceMatrix):
    """Softmax weights over each anchor's positive and negative distance sets."""
    pos, neg = dm.masks()
    require(bool(pos.any(axis=1).all()), "every anchor needs a positive besides itself")
    require(bool(neg.any(axis=1).all()), "every anchor needs a negative")
    return masked_softmax(dm.dist, pos), masked_softmax(dm.dist, neg)


def wrt_loss(dm: DistanceMatrix):
    """mean_i log(1 + exp(sum_+ w_p d_+ - sum_- w_n d_-))."""
    w_p, w_n = wrt_weights(dm)
    far_pos = (w_p * dm.dist).sum(axis=1)
    near_neg = (w_n * dm.dist).sum(axis=1)
    return softplus(far_pos - near_neg).mean()


def total_loss(l_id, l_wrt, l_mfe, l_mft, w: LossWeights):
    return w.alpha * (l_id + l_wrt) + w.beta * (l_mfe + l_mft)

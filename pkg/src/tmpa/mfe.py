"""
Modality feature extraction.

Three extractors with identical architecture and disjoint parameters map
the mixed batch to modality-shared features and the raw visible/infrared
batches to modality-specific features.
"""

from dataclasses import dataclass

import numpy as np

from .errors import require
from .layers import ConvStack, Module
from .tensor import (
    Tensor,
    concat,
    cross_entropy,
    global_avg_pool,
    l2_distance,
    matmul,
    relu,
    reshape,
)

DEFAULT_WIDTHS = (16, 32, 64)


class ExtractorStack(ConvStack):
    """Stride-2 [conv3x3 -> BN -> ReLU] blocks; 48x24 input -> 6x3 maps."""

    def __init__(self, seed, name, widths=DEFAULT_WIDTHS, in_channels=3):
        super().__init__(in_channels, widths, 2, seed, name)


class FeatureExtraction(Module):
    def __init__(self, seed, widths=DEFAULT_WIDTHS):
        self.e_sh = ExtractorStack(seed, "e_sh", widths)
        self.e_sp_v = ExtractorStack(seed, "e_sp_v", widths)
        self.e_sp_i = ExtractorStack(seed, "e_sp_i", widths)

    @property
    def channels(self):
        return self.e_sh.out_channels


@dataclass
class FeatureBundle:
    f_sh: Tensor  # [2N,C,H',W'] from the mixed batch
    f_sp_v: Tensor  # [N,C,H',W']
    f_sp_i: Tensor  # [N,C,H',W']
    labels: np.ndarray  # [N], shared by index across modalities

    @property
    def n(self):
        return self.f_sp_v.shape[0]

    @property
    def f_sp(self):
        return concat([self.f_sp_v, self.f_sp_i], axis=0)

    @property
    def labels2(self):
        return np.concatenate([self.labels, self.labels])


def extract(mfe: FeatureExtraction, x_hat, x_v, x_i, labels):
    labels = np.asarray(labels, dtype=np.int64)
    n = x_v.shape[0]
    require(x_i.shape[0] == n and labels.shape == (n,), "visible/infrared/label batches must align")
    require(x_hat.shape[0] == 2 * n, f"mixed batch must hold 2N={2 * n} images, got {x_hat.shape[0]}")
    return FeatureBundle(
        f_sh=mfe.e_sh(x_hat),
        f_sp_v=mfe.e_sp_v(x_v),
        f_sp_i=mfe.e_sp_i(x_i),
        labels=labels,
    )


def identity_means(labels):
    """[P_batch, len(labels)] matrix whose row p averages the entries of
    identity p; identities are taken in sorted order."""
    ids = np.unique(labels)
    onehot = (labels[None, :] == ids[:, None]).astype(np.float64)
    return onehot / onehot.sum(axis=1, keepdims=True)


def mss_loss(bundle: FeatureBundle, rho=0.65):
    """Hinge that pushes, per identity, the visible/infrared specific distance
    plus the shared/specific distance above ``rho``; summed over identities."""
    n = bundle.n
    sp_v = global_avg_pool(bundle.f_sp_v)
    sp_i = global_avg_pool(bundle.f_sp_i)
    sh = global_avg_pool(bundle.f_sh)
    d_sp = l2_distance(sp_v, sp_i)
    d_ss = l2_distance(sh, concat([sp_v, sp_i], axis=0))
    per_id = matmul(Tensor(identity_means(bundle.labels)), reshape(d_sp, (n, 1))) + matmul(
        Tensor(identity_means(bundle.labels2)), reshape(d_ss, (2 * n, 1))
    )
    return relu(rho - per_id).sum()


def msi_loss(bundle: FeatureBundle, cls_v, cls_i):
    """Identity cross-entropy of each modality's classifier on its own
    specific features."""
    return cross_entropy(cls_v(global_avg_pool(bundle.f_sp_v)), bundle.labels) + cross_entropy(
        cls_i(global_avg_pool(bundle.f_sp_i)), bundle.labels
    )


def mfe_loss(msi, mss, lambda1=0.2):
    require(lambda1 >= 0, "lambda1 must be non-negative")
    return msi + lambda1 * mss

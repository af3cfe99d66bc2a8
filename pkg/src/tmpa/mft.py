"""
Modality feature transfer.

Shared 1x1 projections turn the specific features into queries and the
shared features into keys/values. The projections feed two aggregations:
per-sample cross attention, which generates the missing modality's
specific feature, and small conv branches. Their sum is the generated
specific feature; concatenated with the real one and added to the shared
conv branch it forms the modality-complete representation.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import require
from .layers import ConvStack, Module, Pointwise
from .tensor import (
    Tensor,
    concat,
    cross_entropy,
    global_avg_pool,
    matmul,
    reshape,
    softmax,
    transpose,
)


class ProjectionSet(Module):
    """1x1 projections C -> d: one query per modality, shared key and value."""

    def __init__(self, channels, d, seed):
        self.d = d
        self.q_v = Pointwise(channels, d, seed, "proj.q_v")
        self.q_i = Pointwise(channels, d, seed, "proj.q_i")
        self.k = Pointwise(channels, d, seed, "proj.k")
        self.v = Pointwise(channels, d, seed, "proj.v")


class ConvBranch(ConvStack):
    """Two stride-1 [conv3x3 -> BN -> ReLU] blocks; spatial size preserved."""

    def __init__(self, cin, cout, seed, name):
        super().__init__(cin, (cout, cout), 1, seed, name)


class FeatureTransfer(Module):
    def __init__(self, channels, d, seed):
        self.proj = ProjectionSet(channels, d, seed)
        self.conv_v = ConvBranch(d, d, seed, "conv_v")
        self.conv_i = ConvBranch(d, d, seed, "conv_i")
        self.conv_sh = ConvBranch(d, 2 * d, seed, "conv_sh")


@dataclass
class AttentionOutput:
    f_ca_v: Tensor
    f_ca_i: Tensor


@dataclass
class CompleteFeature:
    f_sp_v_gen: Tensor
    f_sp_i_gen: Tensor
    f_conv_v: Tensor
    f_conv_i: Tensor
    f_conv_sh: Tensor
    f_c: Tensor


def project_qkv(bundle, proj: ProjectionSet):
    c = proj.q_v.kernel.shape[1]
    for f in (bundle.f_sh, bundle.f_sp_v, bundle.f_sp_i):
        require(f.shape[1] == c, f"projection expects {c} channels, feature has {f.shape[1]}")
    return proj.q_v(bundle.f_sp_v), proj.q_i(bundle.f_sp_i), proj.k(bundle.f_sh), proj.v(bundle.f_sh)


def split_halves(t):
    n = t.shape[0] // 2
    return t[:n], t[n:]


def cross_attention(q, k, v):
    """Single-head scaled dot-product attention over spatial positions,
    sample j attending only to sample j's keys/values."""
    require(q.ndim == 4 and q.shape == k.shape == v.shape,
            f"attention shape mismatch q{q.shape} k{k.shape} v{v.shape}")
    n, d, h, w = q.shape

    def seq(t):
        return transpose(reshape(t, (n, d, h * w)), (0, 2, 1))

    qs, ks, vs = seq(q), seq(k), seq(v)
    weights = softmax(matmul(qs, transpose(ks, (0, 2, 1))) * (1.0 / math.sqrt(d)))
    out = matmul(weights, vs)
    return reshape(transpose(out, (0, 2, 1)), (n, d, h, w))


def attend(q_v, q_i, k_sh, v_sh):
    """Generated visible-specific attention comes from the infrared query over
    the infrared images' shared keys/values, and vice versa."""
    k_v, k_i = split_halves(k_sh)
    v_v, v_i = split_halves(v_sh)
    return AttentionOutput(
        f_ca_v=cross_attention(q_i, k_i, v_i),
        f_ca_i=cross_attention(q_v, k_v, v_v),
    )


def transfer(bundle, proj):
    q_v, q_i, k_sh, v_sh = project_qkv(bundle, proj)
    return attend(q_v, q_i, k_sh, v_sh)


def conv_branches(mft: FeatureTransfer, q_v, q_i, v_sh):
    """Conv aggregations over the reused projections.

    Each generated-feature branch consumes the query of the image it is
    generated from (Conv^V reads the infrared query, Conv^I the visible
    one), so every generated feature depends on a single input image.
    """
    require(q_v.shape == q_i.shape, "query shapes must match")
    require(v_sh.shape[0] == 2 * q_v.shape[0] and v_sh.shape[1:] == q_v.shape[1:],
            f"value tensor {v_sh.shape} does not align with queries {q_v.shape}")
    return mft.conv_v(q_i), mft.conv_i(q_v), mft.conv_sh(v_sh)


def compose_specific(att: AttentionOutput, f_conv_v, f_conv_i):
    require(att.f_ca_v.shape == f_conv_v.shape and att.f_ca_i.shape == f_conv_i.shape,
            "attention and conv outputs must share a shape")
    return att.f_ca_v + f_conv_v, att.f_ca_i + f_conv_i


def fuse_visible(f_sp_v, f_sp_i_gen, f_conv_sh, lambda3):
    return lambda3 * concat([f_sp_v, f_sp_i_gen], axis=1) + f_conv_sh


def fuse_infrared(f_sp_v_gen, f_sp_i, f_conv_sh, lambda2):
    return lambda2 * concat([f_sp_v_gen, f_sp_i], axis=1) + f_conv_sh


def fuse_complete(bundle, gen, f_conv_sh, lambda2=0.25, lambda3=0.25):
    """Modality-complete feature for the [2N] batch.

    Visible rows: lambda3 * (real visible || generated infrared) + shared conv.
    Infrared rows: lambda2 * (generated visible || real infrared) + shared conv.
    """
    f_sp_v_gen, f_sp_i_gen = gen
    n = bundle.n
    require(f_sp_v_gen.shape == bundle.f_sp_v.shape and f_sp_i_gen.shape == bundle.f_sp_i.shape,
            f"generated features {f_sp_v_gen.shape} must match real ones {bundle.f_sp_v.shape}")
    require(f_conv_sh.shape[0] == 2 * n and f_conv_sh.shape[1] == 2 * bundle.f_sp_v.shape[1],
            f"shared conv feature {f_conv_sh.shape} must have 2N rows and twice the specific channels")
    sh_v, sh_i = split_halves(f_conv_sh)
    return concat(
        [
            fuse_visible(bundle.f_sp_v, f_sp_i_gen, sh_v, lambda3),
            fuse_infrared(f_sp_v_gen, bundle.f_sp_i, sh_i, lambda2),
        ],
        axis=0,
    )


def mft_loss(gen, cls_v, cls_i, labels):
    f_sp_v_gen, f_sp_i_gen = gen
    labels = np.asarray(labels)
    return cross_entropy(cls_v(global_avg_pool(f_sp_v_gen)), labels) + cross_entropy(
        cls_i(global_avg_pool(f_sp_i_gen)), labels
    )


def run_transfer(bundle, mft: FeatureTransfer, lambda2=0.25, lambda3=0.25):
    """Full transfer stage: one projection pass shared by attention and conv."""
    q_v, q_i, k_sh, v_sh = project_qkv(bundle, mft.proj)
    att = attend(q_v, q_i, k_sh, v_sh)
    f_conv_v, f_conv_i, f_conv_sh = conv_branches(mft, q_v, q_i, v_sh)
    gen = compose_specific(att, f_conv_v, f_conv_i)
    f_c = fuse_complete(bundle, gen, f_conv_sh, lambda2, lambda3)
    return CompleteFeature(gen[0], gen[1], f_conv_v, f_conv_i, f_conv_sh, f_c)

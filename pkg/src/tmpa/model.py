"""The full network: extractors, transfer stage and identity classifiers."""

import numpy as np

from .errors import require
from .layers import IdentityClassifier, Module
from .mfe import DEFAULT_WIDTHS, FeatureExtraction, extract, mfe_loss, msi_loss, mss_loss
from .mft import FeatureTransfer, cross_attention, fuse_infrared, fuse_visible, mft_loss, run_transfer
from .objective import DistanceMatrix, LossWeights, id_loss, total_loss, wrt_loss
from .tensor import Tensor, global_avg_pool

VISIBLE, INFRARED = "visible", "infrared"
LOSS_KEYS = ("l_id", "l_wrt", "l_mss", "l_msi", "l_mft", "l_total")

# parameters only the transfer path (and the specific extractors feeding it) touches
TRANSFER_ONLY_PREFIXES = (
    "mfe.e_sp_v.",
    "mfe.e_sp_i.",
    "mft.proj.q_v.",
    "mft.proj.q_i.",
    "mft.proj.k.",
    "mft.conv_v.",
    "mft.conv_i.",
    "cls_v.",
    "cls_i.",
)


class TMPANet(Module):
    """With ``use_mft=False`` the network is the baseline: shared extractor,
    value projection and shared conv branch, trained with ID + WRT only."""

    def __init__(self, num_classes, seed=0, widths=DEFAULT_WIDTHS, use_mft=True):
        self.mfe = FeatureExtraction(seed, widths)
        c = self.mfe.channels
        # the specific features are concatenated with generated ones of width d
        # and added to the 2d-wide shared branch, which forces d == C
        self.mft = FeatureTransfer(c, c, seed)
        self.cls_v = IdentityClassifier(c, num_classes, seed, "cls_v")
        self.cls_i = IdentityClassifier(c, num_classes, seed, "cls_i")
        self.cls = IdentityClassifier(2 * c, num_classes, seed, "cls")
        self.num_classes = num_classes
        self.use_mft = use_mft

    @property
    def embed_dim(self):
        return 2 * self.mfe.channels

    def forward_train(self, x_hat, x_v, x_i, labels, weights: LossWeights):
        """Loss tensors for one identity-aligned batch.

        ``x_hat`` is the [2N] (possibly mixed) batch for the shared extractor,
        ``x_v``/``x_i`` the raw [N] batches for the specific extractors.
        """
        labels = np.asarray(labels, dtype=np.int64)
        labels2 = np.concatenate([labels, labels])
        x_hat, x_v, x_i = (x if isinstance(x, Tensor) else Tensor(x) for x in (x_hat, x_v, x_i))
        if self.use_mft:
            bundle = extract(self.mfe, x_hat, x_v, x_i, labels)
            comp = run_transfer(bundle, self.mft, weights.lambda2, weights.lambda3)
            f_c = comp.f_c
            l_mss = mss_loss(bundle, weights.rho)
            l_msi = msi_loss(bundle, self.cls_v, self.cls_i)
            l_mft = mft_loss((comp.f_sp_v_gen, comp.f_sp_i_gen), self.cls_v, self.cls_i, labels)
        else:
            f_sh = self.mfe.e_sh(x_hat)
            f_c = self.mft.conv_sh(self.mft.proj.v(f_sh))
            l_mss = l_msi = l_mft = None
        l_id = id_loss(f_c, self.cls, labels2)
        l_wrt = wrt_loss(DistanceMatrix.from_features(f_c, labels2))
        if self.use_mft:
            total = total_loss(l_id, l_wrt, mfe_loss(l_msi, l_mss, weights.lambda1), l_mft, weights)
        else:
            total = weights.alpha * (l_id + l_wrt)
        return dict(l_id=l_id, l_wrt=l_wrt, l_mss=l_mss, l_msi=l_msi, l_mft=l_mft, l_total=total), f_c

    def complete_feature(self, x, modality, weights: LossWeights):
        """Per-image modality-complete feature map [B,2C,H',W'].

        Every row depends on its own image only, so batching is just a
        convenience; call in eval mode for single-image semantics.
        """
        require(modality in (VISIBLE, INFRARED), f"unknown modality {modality!r}")
        x = x if isinstance(x, Tensor) else Tensor(x)
        proj = self.mft.proj
        f_sh = self.mfe.e_sh(x)
        v = proj.v(f_sh)
        f_conv_sh = self.mft.conv_sh(v)
        if not self.use_mft:
            return f_conv_sh
        k = proj.k(f_sh)
        if modality == VISIBLE:
            f_sp = self.mfe.e_sp_v(x)
            q = proj.q_v(f_sp)
            gen_i = cross_attention(q, k, v) + self.mft.conv_i(q)
            return fuse_visible(f_sp, gen_i, f_conv_sh, weights.lambda3)
        f_sp = self.mfe.e_sp_i(x)
        q = proj.q_i(f_sp)
        gen_v = cross_attention(q, k, v) + self.mft.conv_v(q)
        return fuse_infrared(gen_v, f_sp, f_conv_sh, weights.lambda2)

    def embed(self, x, modality, weights: LossWeights):
        """Pooled, L2-normalized embeddings as a numpy [B,2C] array."""
        vec = global_avg_pool(self.complete_feature(x, modality, weights)).data
        norm = np.linalg.norm(vec, axis=1, keepdims=True)
        return vec / np.where(norm > 0, norm, 1.0)

import math

import numpy as np
import pytest

from tmpa import ContractViolation
from tmpa.layers import IdentityClassifier
from tmpa.mfe import FeatureBundle, FeatureExtraction, extract, identity_means, mfe_loss, msi_loss, mss_loss
from tmpa.tensor import Tensor


def bundle_from_vectors(sp_v, sp_i, sh, labels):
    def as4(a):
        return Tensor(np.asarray(a, dtype=float)[:, :, None, None])

    return FeatureBundle(f_sh=as4(sh), f_sp_v=as4(sp_v), f_sp_i=as4(sp_i), labels=np.asarray(labels))


class FixedLogits:
    """Stand-in classifier returning preset logits."""

    def __init__(self, logits):
        self.logits = Tensor(np.asarray(logits, dtype=float))

    def __call__(self, _):
        return self.logits


def test_desk_shapes():
    mfe = FeatureExtraction(seed=0)
    rng = np.random.default_rng(0)
    x_hat = rng.random((16, 3, 48, 24))
    b = extract(mfe, Tensor(x_hat), Tensor(x_hat[:8]), Tensor(x_hat[8:]), np.arange(8))
    assert b.f_sh.shape == (16, 64, 6, 3)
    assert b.f_sp_v.shape == b.f_sp_i.shape == (8, 64, 6, 3)
    assert np.array_equal(b.f_sp.data, np.concatenate([b.f_sp_v.data, b.f_sp_i.data]))
    assert b.labels2.tolist() == list(range(8)) * 2


def test_extractors_share_architecture_not_parameters():
    mfe = FeatureExtraction(seed=0)
    shapes = [{k.split(".", 1)[1]: v.shape for k, v in m.named_parameters("x.").items()}
              for m in (mfe.e_sh, mfe.e_sp_v, mfe.e_sp_i)]
    assert shapes[0] == shapes[1] == shapes[2]
    a, b, c = (list(m.parameters()) for m in (mfe.e_sh, mfe.e_sp_v, mfe.e_sp_i))
    assert all(x is not y for x, y in zip(a, b))
    assert not np.array_equal(a[0].data, b[0].data) and not np.array_equal(a[0].data, c[0].data)


def test_zero_weight_stack_gives_zero_features():
    mfe = FeatureExtraction(seed=0)
    for p in mfe.e_sh.parameters():
        p.data[...] = 0.0
    out = mfe.e_sh(Tensor(np.random.default_rng(1).random((4, 3, 48, 24))))
    assert not out.data.any()


def test_extract_rejects_misaligned_batches():
    mfe = FeatureExtraction(seed=0, widths=(2, 2, 2))
    x = Tensor(np.zeros((4, 3, 8, 8)))
    with pytest.raises(ContractViolation):
        extract(mfe, x, Tensor(np.zeros((3, 3, 8, 8))), Tensor(np.zeros((2, 3, 8, 8))), [0, 1])


def test_mss_identical_features_gives_p_times_rho():
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(8), 4)
    v = rng.standard_normal((1, 5))
    same = np.repeat(v, 32, axis=0)
    b = bundle_from_vectors(same, same, np.concatenate([same, same]), labels)
    assert abs(float(mss_loss(b, 0.65).data) - 5.2) < 1e-9


def test_mss_saturated_hinge_is_zero():
    b = bundle_from_vectors([[0.0]], [[1.0]], [[5.0], [5.0]], [0])
    assert float(mss_loss(b, 0.65).data) == 0.0


def test_mss_hand_evaluated_hinge():
    # d_sp = 0.2, both shared/specific distances 0.3 -> 0.65 - 0.5
    b = bundle_from_vectors([[0.0]], [[0.2]], [[0.3], [0.5]], [0])
    assert abs(float(mss_loss(b, 0.65).data) - 0.15) < 1e-12


def test_mss_averages_within_identity_and_sums_over_identities():
    # identity 0 has two samples with d_sp 0.1 and 0.3, identity 1 one sample with d_sp 0
    sp_v = [[0.0], [0.0], [0.0]]
    sp_i = [[0.1], [0.3], [0.0]]
    sh = sp_v + sp_i  # d_ss = 0 everywhere
    b = bundle_from_vectors(sp_v, sp_i, sh, [0, 0, 1])
    assert abs(float(mss_loss(b, 0.65).data) - ((0.65 - 0.2) + 0.65)) < 1e-12


def test_identity_means_rows():
    m = identity_means(np.array([3, 1, 3, 3]))
    np.testing.assert_allclose(m, [[0, 1, 0, 0], [1 / 3, 0, 1 / 3, 1 / 3]])


def test_msi_uniform_logits():
    labels = np.arange(8)
    b = bundle_from_vectors(np.zeros((8, 2)), np.zeros((8, 2)), np.zeros((16, 2)), labels)
    cls = FixedLogits(np.zeros((8, 8)))
    assert abs(float(msi_loss(b, cls, cls).data) - 2 * math.log(8)) < 1e-12


def test_msi_closed_form_single_sample():
    # the true class gets probability 0.75 under each classifier
    b = bundle_from_vectors([[0.0]], [[0.0]], [[0.0], [0.0]], [1])
    cls = FixedLogits([[0.0, math.log(3)]])
    got = float(msi_loss(b, cls, cls).data)
    assert abs(got - 2 * -math.log(0.75)) < 1e-12
    assert abs(got - 0.5754) < 1e-4


def test_msi_perfect_classifier():
    b = bundle_from_vectors(np.zeros((2, 1)), np.zeros((2, 1)), np.zeros((4, 1)), [0, 1])
    cls = FixedLogits([[1000.0, 0.0], [0.0, 1000.0]])
    assert float(msi_loss(b, cls, cls).data) < 1e-12


def test_mfe_loss_combination():
    assert abs(float(mfe_loss(Tensor(1.0), Tensor(0.5), 0.2).data) - 1.1) < 1e-12
    assert float(mfe_loss(Tensor(1.3), Tensor(0.5), 0.0).data) == 1.3
    assert float(mfe_loss(Tensor(1.3), Tensor(0.0), 0.2).data) == 1.3


def test_identity_classifier_uses_pooled_dim():
    cls = IdentityClassifier(4, 3, seed=0, name="c")
    out = cls(Tensor(np.random.default_rng(0).standard_normal((5, 4))))
    assert out.shape == (5, 3)

"""Finite-difference checks for every differentiable primitive and for the
full training objective on a tiny two-identity batch."""

import numpy as np

from . import tensor as T
from .gradcheck import grad_check
from .model import TMPANet
from .objective import LossWeights
from .pedmix import MixRatios, partition_regions, pedmix_batch
from .tensor import Tensor


def _param(rng, *shape, away_from_zero=False, positive=False):
    x = rng.standard_normal(shape)
    if away_from_zero:
        x = np.sign(x) * (0.2 + np.abs(x))
    if positive:
        x = 0.5 + np.abs(x)
    return Tensor(x, requires_grad=True)


def _weighted(rng, fn):
    """Reduce ``fn``'s output to a scalar with fixed random weights so every
    output element contributes a distinct gradient."""
    cache = {}

    def f(*xs):
        out = fn(*xs)
        if out.shape not in cache:
            cache[out.shape] = Tensor(rng.standard_normal(out.shape))
        return T.tsum(out * cache[out.shape])

    return f


def primitive_cases(seed=0):
    """(name, scalar function, inputs) for each differentiable primitive."""
    rng = np.random.default_rng(seed)
    p = lambda *s, **kw: _param(rng, *s, **kw)  # noqa: E731
    w = lambda fn: _weighted(rng, fn)  # noqa: E731
    labels = np.array([0, 2, 1, 2])
    mask = rng.random((4, 5)) < 0.6
    mask[:, 0] = True
    stats4, stats2 = T.RunningStats(3), T.RunningStats(3)
    stats4.var = 0.5 + rng.random(3)
    stats2.mean = rng.standard_normal(3)

    cases = [
        ("add", w(T.add), [p(3, 4), p(4)]),
        ("sub", w(T.sub), [p(3, 1), p(3, 4)]),
        ("mul", w(T.mul), [p(2, 3), p(2, 3)]),
        ("div", w(T.div), [p(2, 3), p(3, positive=True)]),
        ("exp", w(T.exp), [p(3, 4)]),
        ("log", w(T.log), [p(3, 4, positive=True)]),
        ("relu", w(T.relu), [p(3, 4, away_from_zero=True)]),
        ("softplus", w(T.softplus), [p(3, 4)]),
        ("reshape", w(lambda x: T.reshape(x, (6, 2))), [p(3, 4)]),
        ("transpose", w(lambda x: T.transpose(x, (2, 0, 1))), [p(2, 3, 4)]),
        ("getitem.slice", w(lambda x: x[1:, ::2]), [p(3, 4)]),
        ("getitem.gather", w(lambda x: x[np.array([0, 2, 0])]), [p(3, 4)]),
        ("concat", w(lambda a, b: T.concat([a, b], axis=1)), [p(2, 3), p(2, 2)]),
        ("sum", w(lambda x: T.tsum(x, axis=1, keepdims=True)), [p(3, 4)]),
        ("mean", w(lambda x: T.mean(x, axis=0)), [p(3, 4)]),
        ("global_avg_pool", w(T.global_avg_pool), [p(2, 3, 4, 5)]),
        ("matmul", w(T.matmul), [p(2, 3, 4), p(2, 4, 5)]),
        ("softmax", w(T.softmax), [p(3, 5)]),
        ("masked_softmax", w(lambda x: T.masked_softmax(x, mask)), [p(4, 5)]),
        ("log_softmax", w(T.log_softmax), [p(3, 5)]),
        ("cross_entropy", lambda x: T.cross_entropy(x, labels), [p(4, 3)]),
        ("l2_distance", w(T.l2_distance), [p(4, 3), p(4, 3)]),
        ("pairwise_distance", w(T.pairwise_distance), [p(5, 3)]),
        ("batch_norm.train4d", w(lambda x, g, b: T.batch_norm(x, g, b, True, T.RunningStats(3))),
         [p(4, 3, 2, 3), p(3), p(3)]),
        ("batch_norm.train2d", w(lambda x, g, b: T.batch_norm(x, g, b, True, T.RunningStats(3))),
         [p(5, 3), p(3), p(3)]),
        ("batch_norm.eval4d", w(lambda x, g, b: T.batch_norm(x, g, b, False, stats4)),
         [p(2, 3, 2, 2), p(3), p(3)]),
        ("batch_norm.eval2d", w(lambda x, g, b: T.batch_norm(x, g, b, False, stats2)),
         [p(2, 3), p(3), p(3)]),
    ]
    for k, stride, pad in ((1, 1, 0), (3, 1, 1), (3, 2, 1), (1, 2, 0), (3, 1, 0)):
        cases.append((
            f"conv2d.k{k}s{stride}p{pad}",
            w(lambda x, kern, s=stride, q=pad: T.conv2d(x, kern, s, q)),
            [p(2, 3, 6, 5), p(4, 3, k, k)],
        ))
    return cases


def run_primitive_suite(seed=0, h=1e-5, tol=1e-4):
    return [(name, grad_check(f, inputs, h=h, tol=tol)) for name, f, inputs in primitive_cases(seed)]


MICRO_WIDTHS = (3, 4, 4)


def micro_batch(seed=0, height=24, width=12, patch_size=6):
    """Two identities, one image per modality each, PedMix already applied."""
    rng = np.random.default_rng([seed, 11])
    x_v = rng.random((2, 3, height, width))
    x_i = rng.random((2, 3, height, width))
    region_map = partition_regions(height, width, patch_size)
    x_hat = pedmix_batch(x_v, x_i, region_map, MixRatios(), rng)
    return x_hat, x_v, x_i, np.array([0, 1])


def end_to_end_check(seed=0, h=1e-5, tol=1e-4, weights=None):
    """Check d L_total / d theta for every parameter of a tiny network.

    ``rho`` is raised so the specific/shared hinge is active and its
    gradient path is exercised too.
    """
    weights = weights or LossWeights(rho=50.0)
    model = TMPANet(num_classes=2, seed=seed, widths=MICRO_WIDTHS)
    model.train()
    x_hat, x_v, x_i, labels = micro_batch(seed)
    names, params = zip(*model.named_parameters().items())

    def loss(*_):
        losses, _ = model.forward_train(x_hat, x_v, x_i, labels, weights)
        return losses["l_total"]

    return names, grad_check(loss, list(params), h=h, tol=tol)

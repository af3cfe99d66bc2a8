"""Parameter containers and the small building blocks shared by the model."""

import zlib

import numpy as np

from .errors import require
from .tensor import RunningStats, Tensor, batch_norm, conv2d, matmul, relu


def _param_rng(seed, name):
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def kaiming(shape, fan_in, seed, name):
    w = _param_rng(seed, name).standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return Tensor(w, requires_grad=True, name=name)


class Module:
    """Walks attributes to collect parameters (tensors that require grad),
    batch-norm running stats and child modules, in attribute order."""

    training = True

    def children(self):
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix=""):
        out = {}
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out[prefix + key] = val
        for key, child in self.children():
            out.update(child.named_parameters(f"{prefix}{key}."))
        return out

    def named_stats(self, prefix=""):
        out = {}
        for key, val in vars(self).items():
            if isinstance(val, RunningStats):
                out[prefix + key] = val
        for key, child in self.children():
            out.update(child.named_stats(f"{prefix}{key}."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def train(self, mode=True):
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)


class BatchNorm(Module):
    def __init__(self, channels, name):
        self.gamma = Tensor(np.ones(channels), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels), requires_grad=True, name=f"{name}.beta")
        self.stats = RunningStats(channels)

    def __call__(self, x):
        return batch_norm(x, self.gamma, self.beta, self.training, self.stats)


class ConvBlock(Module):
    """3x3 conv -> batch norm -> ReLU."""

    def __init__(self, cin, cout, stride, seed, name):
        self.stride = stride
        self.kernel = kaiming((cout, cin, 3, 3), cin * 9, seed, f"{name}.kernel")
        self.bn = BatchNorm(cout, f"{name}.bn")

    def __call__(self, x):
        return relu(self.bn(conv2d(x, self.kernel, stride=self.stride, padding=1)))


class ConvStack(Module):
    def __init__(self, cin, widths, stride, seed, name):
        self.blocks = []
        for i, cout in enumerate(widths):
            self.blocks.append(ConvBlock(cin, cout, stride, seed, f"{name}.{i}"))
            cin = cout
        self.out_channels = cin

    def __call__(self, x):
        for block in self.blocks:
            x = block(x)
        return x


class Pointwise(Module):
    """Bias-free 1x1 convolution."""

    def __init__(self, cin, cout, seed, name):
        self.name = name
        self.kernel = kaiming((cout, cin, 1, 1), cin, seed, f"{name}.kernel")

    def __call__(self, x):
        return conv2d(x, self.kernel, tag=self.name)


class IdentityClassifier(Module):
    """Batch norm -> fully connected layer producing identity logits.

    The softmax is folded into the cross-entropy loss.
    """

    def __init__(self, dim, num_classes, seed, name):
        self.dim = dim
        self.bn = BatchNorm(dim, f"{name}.bn")
        self.weight = kaiming((dim, num_classes), dim, seed, f"{name}.weight")
        self.bias = Tensor(np.zeros(num_classes), requires_grad=True, name=f"{name}.bias")

    def __call__(self, v):
        require(v.ndim == 2 and v.shape[1] == self.dim, f"classifier expects [B,{self.dim}], got {v.shape}")
        return matmul(self.bn(v), self.weight) + self.bias

"""Tiny parameter containers on top of :mod:`geoguide.autograd`."""

import numpy as np

from . import autograd as ag

_ONES = {}


def ones_column(lead):
    """Cached constant of shape ``lead + (1,)`` used to lift biases explicitly."""
    key = tuple(lead)
    t = _ONES.get(key)
    if t is None:
        t = ag.constant(np.ones(key + (1,)))
        _ONES[key] = t
    return t


class Module:
    def named_parameters(self, prefix=""):
        for attr, val in vars(self).items():
            if isinstance(val, ag.DiffTensor):
                yield val.name or f"{prefix}{attr}", val
            elif isinstance(val, Module):
                yield from val.named_parameters()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.named_parameters()
                    elif isinstance(item, ag.DiffTensor):
                        yield item.name, item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def freeze(self, frozen=True):
        for p in self.parameters():
            p.requires_grad = not frozen
        return self


def param(array, name):
    return ag.tensor(array, requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, name, gain=1.0, bias=True):
        self.weight = param(rng.normal(0.0, gain / np.sqrt(d_in), size=(d_in, d_out)), f"{name}.weight")
        self.bias = param(np.zeros((1, d_out)), f"{name}.bias") if bias else None

    def __call__(self, x):
        y = ag.matmul(x, self.weight)
        if self.bias is None:
            return y
        return ag.add(y, ag.matmul(ones_column(x.shape[:-1]), self.bias))


class LayerNorm(Module):
    def __init__(self, dim, name):
        self.gamma = param(np.ones(dim), f"{name}.gamma")
        self.beta = param(np.zeros(dim), f"{name}.beta")

    def __call__(self, x):
        return ag.layernorm(x, self.gamma, self.beta)

"""Small parameter-holding building blocks over the autodiff core."""
import numpy as np

from .numerics import Tensor, ops


class Module:
    """Base container; parameters are discovered by attribute scan."""

    def params(self, prefix=""):
        """Flat name -> Tensor dict over this module and its children."""
        out = {}
        for k, v in vars(self).items():
            if isinstance(v, Tensor):
                if v.requires_grad:
                    out[prefix + k] = v
            elif isinstance(v, Module):
                out.update(v.params(prefix + k + "."))
            elif isinstance(v, (list, tuple)):
                for i, item in enumerate(v):
                    if isinstance(item, Module):
                        out.update(item.params("%s%s.%d." % (prefix, k, i)))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out["%s%s.%d" % (prefix, k, i)] = item
        return out


class Linear(Module):
    def __init__(self, din, dout, rng, zero_init=False):
        if zero_init:
            w = np.zeros((din, dout))
        else:
            w = rng.normal(0.0, 1.0 / np.sqrt(din), size=(din, dout))
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(dout), requires_grad=True)

    def __call__(self, x):
        return ops.add(ops.matmul(x, self.w), self.b)


class Conv3d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, pad=None, zero_init=False):
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        if zero_init:
            w = np.zeros((cout, cin, k, k, k))
        else:
            w = rng.normal(0.0, 1.0 / np.sqrt(cin * k ** 3), size=(cout, cin, k, k, k))
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x):
        return ops.conv3d(x, self.w, self.b, self.stride, self.pad)


class LayerNorm(Module):
    """Normalize the trailing feature axis; learned scale and shift."""

    def __init__(self, dim, eps=1e-6):
        self.eps = eps
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x):
        mu = ops.tmean(x, axis=-1, keepdims=True)
        xc = ops.sub(x, mu)
        var = ops.tmean(ops.mul(xc, xc), axis=-1, keepdims=True)
        y = ops.div(xc, ops.sqrt(ops.add(var, self.eps)))
        return ops.add(ops.mul(y, self.gamma), self.beta)

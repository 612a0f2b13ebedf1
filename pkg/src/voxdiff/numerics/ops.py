"""Differentiable operations; every forward result is checked finite."""
import numpy as np

from .. import kernels
from .tensor import Tensor, as_tensor, check_finite, record


def _unbroadcast(g, shape):
    """Sum g down to `shape`, undoing trailing-axis broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(check_finite(a.data + b.data, "add"))
    return record(out, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(check_finite(a.data - b.data, "sub"))
    return record(out, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(check_finite(a.data * b.data, "mul"))
    return record(out, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape),
                             _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(check_finite(a.data / b.data, "div"))
    return record(out, (a, b),
                  lambda g: (_unbroadcast(g / b.data, a.shape),
                             _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a):
    out = Tensor(-a.data)
    return record(out, (a,), lambda g: (-g,))


def exp(a):
    y = check_finite(np.exp(a.data), "exp")
    out = Tensor(y)
    return record(out, (a,), lambda g: (g * y,))


def log(a):
    y = check_finite(np.log(a.data), "log")
    out = Tensor(y)
    return record(out, (a,), lambda g: (g / a.data,))


def sqrt(a):
    y = check_finite(np.sqrt(a.data), "sqrt")
    out = Tensor(y)
    return record(out, (a,), lambda g: (g * 0.5 / y,))


def sigmoid(a):
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(check_finite(y, "sigmoid"))
    return record(out, (a,), lambda g: (g * y * (1.0 - y),))


def silu(a):
    """x * sigmoid(x); smooth everywhere, which finite-difference checks like."""
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(check_finite(x * s, "silu"))
    return record(out, (a,), lambda g: (g * s * (1.0 + x * (1.0 - s)),))


def tsum(a, axis=None, keepdims=False):
    out = Tensor(check_finite(np.sum(a.data, axis=axis, keepdims=keepdims), "sum"))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return record(out, (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    out = Tensor(check_finite(np.mean(a.data, axis=axis, keepdims=keepdims), "mean"))
    n = a.size // max(out.size, 1)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, a.shape).copy(),)

    return record(out, (a,), bwd)


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-d operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError("matmul inner dims disagree: %d vs %d"
                         % (a.shape[1], b.shape[0]))
    out = Tensor(check_finite(a.data @ b.data, "matmul"))
    return record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape))
    return record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    inv = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(np.transpose(a.data, axes)))
    return record(out, (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors, axis=0):
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return record(out, tuple(tensors), bwd)


def narrow(a, axis, start, length):
    sl = (slice(None),) * axis + (slice(start, start + length),)
    out = Tensor(np.ascontiguousarray(a.data[sl]))

    def bwd(g):
        da = np.zeros_like(a.data)
        da[sl] = g
        return (da,)

    return record(out, (a,), bwd)


def take(a, indices, axis=0):
    """Gather along an axis with constant integer indices."""
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor(np.take(a.data, idx, axis=axis))
    sl = (slice(None),) * axis + (idx,)

    def bwd(g):
        da = np.zeros_like(a.data)
        np.add.at(da, sl, g)
        return (da,)

    return record(out, (a,), bwd)


def softmax(a, axis=-1):
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(check_finite(y, "softmax"))

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record(out, (a,), bwd)


def log_softmax(a, axis=-1):
    x = a.data - a.data.max(axis=axis, keepdims=True)
    y = x - np.log(np.exp(x).sum(axis=axis, keepdims=True))
    out = Tensor(check_finite(y, "log_softmax"))

    def bwd(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return record(out, (a,), bwd)


def conv3d(x, w, b, stride=1, pad=1):
    """Cross-correlation of x [Ci,D1,D2,D3] with w [Co,Ci,k,k,k] plus bias."""
    k = w.shape[2]
    if k % 2 != 1:
        raise ValueError("conv3d kernel must be odd-sized, got %d" % k)
    out_shape = kernels.conv3d_out_shape(x.shape[1:], k, stride, pad)
    if min(out_shape) < 1:
        raise ValueError("conv3d output extent <= 0 for input %s, k=%d, stride=%d, pad=%d"
                         % (x.shape, k, stride, pad))
    y = kernels.conv3d_fwd(x.data, w.data, b.data, stride, pad)
    out = Tensor(check_finite(y, "conv3d"))

    def bwd(g):
        dx = kernels.conv3d_bwd_x(g, w.data, stride, pad, x.shape[1:])
        dw, db = kernels.conv3d_bwd_w(g, x.data, k, stride, pad)
        return (dx, dw, db)

    return record(out, (x, w, b), bwd)


def trilinear_sample(f, pts):
    """Sample f [C,D1,D2,D3] at continuous voxel coords pts [M,3] -> [M,C]."""
    y = kernels.trilinear_fwd(f.data, pts.data)
    out = Tensor(check_finite(y, "trilinear_sample"))

    def bwd(g):
        return kernels.trilinear_bwd(f.data, pts.data, g)

    return record(out, (f, pts), bwd)


def scatter_splat(weights, feats, vox, out_dims):
    """Scatter weights[b,p] * feats[:,p] into a volume at flat voxel ids vox[b,p].

    vox < 0 marks out-of-bounds points, which contribute nothing.
    """
    nvox = int(np.prod(out_dims))
    y = kernels.splat_fwd(weights.data, feats.data, vox, nvox)
    c = feats.shape[0]
    out = Tensor(check_finite(y.reshape((c,) + tuple(out_dims)), "scatter_splat"))

    def bwd(g):
        return kernels.splat_bwd(g.reshape(c, nvox), weights.data, feats.data, vox)

    return record(out, (weights, feats), bwd)


def avgpool2(a):
    """2x2x2 mean pooling over the trailing three axes of [C,D1,D2,D3]."""
    c, d1, d2, d3 = a.shape
    if d1 % 2 or d2 % 2 or d3 % 2:
        raise ValueError("avgpool2 needs even spatial dims, got %s" % (a.shape,))
    blocks = a.data.reshape(c, d1 // 2, 2, d2 // 2, 2, d3 // 2, 2)
    out = Tensor(blocks.mean(axis=(2, 4, 6)))

    def bwd(g):
        gg = g[:, :, None, :, None, :, None] / 8.0
        return (np.broadcast_to(gg, blocks.shape).reshape(a.shape).copy(),)

    return record(out, (a,), bwd)


def upsample2(a):
    """Nearest-neighbor x2 along the trailing three axes of [C,D1,D2,D3]."""
    c, d1, d2, d3 = a.shape
    y = a.data.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)
    out = Tensor(y)

    def bwd(g):
        return (g.reshape(c, d1, 2, d2, 2, d3, 2).sum(axis=(2, 4, 6)),)

    return record(out, (a,), bwd)


def hard_onehot_st(soft, axis=0):
    """Exact one-hot of the argmax with a straight-through gradient.

    Forward output entries are exactly 0/1 (ties go to the lowest index);
    backward passes the upstream gradient to `soft` unchanged, so the
    soft distribution's own Jacobian supplies d(one-hot)/d(logits).
    """
    idx = np.argmax(soft.data, axis=axis)
    hard = np.zeros_like(soft.data)
    np.put_along_axis(hard, np.expand_dims(idx, axis), 1.0, axis=axis)
    out = Tensor(hard)
    return record(out, (soft,), lambda g: (g,))


def _rebind_dunders():
    Tensor.__add__ = add
    Tensor.__radd__ = lambda self, other: add(other, self)
    Tensor.__sub__ = sub
    Tensor.__rsub__ = lambda self, other: sub(other, self)
    Tensor.__mul__ = mul
    Tensor.__rmul__ = lambda self, other: mul(other, self)
    Tensor.__truediv__ = div
    Tensor.__rtruediv__ = lambda self, other: div(other, self)
    Tensor.__neg__ = neg
    Tensor.__matmul__ = matmul
    Tensor.sum = tsum
    Tensor.mean = tmean
    Tensor.reshape = reshape


_rebind_dunders()

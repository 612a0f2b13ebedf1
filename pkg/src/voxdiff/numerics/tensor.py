"""Tensor container and tape-based reverse-mode autodiff core."""
import numpy as np


class NonFiniteError(ArithmeticError):
    """A forward op produced NaN or Inf."""


_ACTIVE_TAPE = None


def active_tape():
    return _ACTIVE_TAPE


class Tensor:
    """Dense float64 array with an optional gradient slot.

    Data is immutable by convention once produced by an op (the optimizer
    rebinds .data rather than writing in place). Gradients accumulate in
    .grad when a Tape is active during the forward pass.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return "Tensor(shape=%s, requires_grad=%s)" % (self.shape, self.requires_grad)

    # arithmetic dunders are attached by voxdiff.numerics.ops at import


class _Node:
    __slots__ = ("out", "parents", "bwd")

    def __init__(self, out, parents, bwd):
        self.out = out
        self.parents = parents
        self.bwd = bwd


class Tape:
    """Records ops in creation order, which is already topological.

    Used as a context manager; ops executed while a tape is active and
    touching at least one requires_grad tensor are recorded. With no
    active tape the same ops run forward-only (inference mode).
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def backward(self, loss):
        """Reverse sweep from a scalar loss; leaf .grad fields accumulate.

        Every requires_grad leaf that appears on the tape receives a
        gradient, zero-filled if the loss does not depend on it.
        """
        if loss.data.size != 1:
            raise ValueError("backward expects a scalar loss, got shape %s"
                             % (loss.shape,))
        produced = {id(n.out) for n in self.nodes}
        flows = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for node in reversed(self.nodes):
            for p in node.parents:
                if p.requires_grad and id(p) not in produced:
                    leaves[id(p)] = p
            g = flows.pop(id(node.out), None)
            if g is None:
                continue
            for p, pg in zip(node.parents, node.bwd(g)):
                if pg is None or not p.requires_grad:
                    continue
                prev = flows.get(id(p))
                flows[id(p)] = pg if prev is None else prev + pg
        for tid, leaf in leaves.items():
            pg = flows.get(tid)
            if pg is None:
                pg = np.zeros_like(leaf.data)
            leaf.grad = pg if leaf.grad is None else leaf.grad + pg


def record(out, parents, bwd):
    """Register a backward closure for `out` on the active tape."""
    tape = _ACTIVE_TAPE
    if tape is None:
        return out
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.nodes.append(_Node(out, parents, bwd))
    return out


def check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NonFiniteError("non-finite values produced by %s" % op)
    return arr


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)

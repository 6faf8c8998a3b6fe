"""Reverse-mode autodiff variable over numpy arrays.

A ``Tensor`` records, when gradients are enabled, the operation that produced
it (parents plus a vector-Jacobian closure).  ``backward()`` walks the
recorded graph once in reverse topological order, accumulates gradients
additively into every tensor that requires them, and then releases the graph
(define-by-run, single use).
"""

import contextlib

import numpy as np

from .errors import DimensionError, GraphError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


class Tensor:
    """Dense float array plus optional gradient bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def zeros(shape, dtype=np.float32, requires_grad=False):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad)

    @staticmethod
    def from_result(data, parents, vjp):
        """Wrap a kernel result, recording the edge only when it matters.

        `vjp(grad_out)` must return one gradient array (or None) per parent.
        """
        req = _grad_enabled and any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=req)
        if req:
            out._parents = tuple(parents)
            out._vjp = vjp
        return out

    # -- basic protocol ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, " \
               f"requires_grad={self.requires_grad})"

    # -- arithmetic (same-shape elementwise plus scalars) ---------------------

    def __add__(self, other):
        if not isinstance(other, Tensor):
            return self._scalar_affine(float(other), 1.0)
        if other.shape != self.shape:
            raise DimensionError(
                f"add: shapes {self.shape} vs {other.shape} differ")
        out_data = self.data + other.data

        def vjp(go):
            return go, go

        return Tensor.from_result(out_data, (self, other), vjp)

    def __sub__(self, other):
        if not isinstance(other, Tensor):
            return self._scalar_affine(-float(other), 1.0)
        if other.shape != self.shape:
            raise DimensionError(
                f"sub: shapes {self.shape} vs {other.shape} differ")
        out_data = self.data - other.data

        def vjp(go):
            return go, -go

        return Tensor.from_result(out_data, (self, other), vjp)

    def __mul__(self, other):
        if not isinstance(other, Tensor):
            return self._scalar_affine(0.0, float(other))
        if other.shape != self.shape:
            raise DimensionError(
                f"mul: shapes {self.shape} vs {other.shape} differ")
        a, b = self, other
        out_data = a.data * b.data

        def vjp(go):
            return go * b.data, go * a.data

        return Tensor.from_result(out_data, (a, b), vjp)

    __radd__ = __add__
    __rmul__ = __mul__

    def _scalar_affine(self, shift, scale):
        out_data = self.data * self.data.dtype.type(scale)
        if shift:
            out_data = out_data + self.data.dtype.type(shift)

        def vjp(go):
            return (go * scale,)

        return Tensor.from_result(out_data, (self,), vjp)

    def sum(self):
        out_data = np.asarray(self.data.sum(), dtype=self.dtype)

        def vjp(go):
            return (np.broadcast_to(go, self.shape).astype(self.dtype),)

        return Tensor.from_result(out_data, (self,), vjp)

    def mean(self):
        return self.sum() * (1.0 / self.size)

    # -- reverse pass ----------------------------------------------------------

    def backward(self):
        """Backpropagate from this scalar through the recorded graph.

        Gradients accumulate additively into ``.grad`` of every tensor with
        ``requires_grad``; the graph is released afterwards.
        """
        if self.data.size != 1:
            raise GraphError(
                f"backward requires a scalar loss, got shape {self.data.shape}")

        topo = []
        seen = {id(self)}
        stack = [(self, iter(self._parents))]
        while stack:
            node, it = stack[-1]
            advanced = False
            for parent in it:
                if id(parent) not in seen:
                    seen.add(id(parent))
                    stack.append((parent, iter(parent._parents)))
                    advanced = True
                    break
            if not advanced:
                topo.append(node)
                stack.pop()

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._vjp is None or node.grad is None:
                continue
            grads = node._vjp(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                g = np.asarray(g, dtype=parent.dtype).reshape(parent.shape)
                if parent.grad is None:
                    # adopt arrays the vjp freshly allocated; copy anything
                    # that aliases other storage (views, the upstream grad)
                    if g.base is None and g is not node.grad:
                        parent.grad = g
                    else:
                        parent.grad = g.copy()
                else:
                    parent.grad += g
        # release the graph; leaves keep their accumulated gradients
        for node in topo:
            was_intermediate = node._vjp is not None
            node._parents = ()
            node._vjp = None
            if was_intermediate and node is not self:
                node.grad = None


def as_tensor(x, dtype=np.float32):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))

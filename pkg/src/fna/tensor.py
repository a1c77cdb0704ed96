"""Dense n-d tensor with reverse-mode automatic differentiation.

A Tensor wraps one numpy array plus an optional gradient of the same
shape. Operations (in `fna.ops`) build a DAG through `_prev`/`_backward`
closures; `Tensor.backward()` runs a topological sweep from a scalar
loss and accumulates gradients into every reachable tensor that has
`requires_grad` set.

Training code uses float32 by default; tests and function-preservation
checks run the same graphs in float64.
"""

from __future__ import annotations

import numpy as np

from fna.errors import GraphError

DEFAULT_DTYPE = np.float32


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype if dtype is not None else None)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._prev = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def from_op(data: np.ndarray, prev, backward, requires_grad: bool) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out._prev = tuple(prev) if requires_grad else ()
        out._backward = backward if requires_grad else None
        return out

    @staticmethod
    def zeros(shape, requires_grad=False, dtype=DEFAULT_DTYPE):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad)

    # -- basic properties ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- gradients -------------------------------------------------------------

    def accumulate_grad(self, g: np.ndarray):
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            raise GraphError(f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse sweep from a scalar; accumulates into `.grad` of inputs."""
        if self.data.ndim != 0:
            raise GraphError(f"backward requires a scalar loss, got shape {self.data.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in visited:
                    stack.append((p, False))
        self.accumulate_grad(np.ones((), dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

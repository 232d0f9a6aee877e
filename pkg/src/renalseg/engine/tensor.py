"""Dense tensor with reverse-mode automatic differentiation.

The payload is a contiguous row-major numpy array of 32-bit floats (the
production dtype). Float64 payloads are also accepted so the finite
difference checkers can evaluate the exact same operation graph at high
precision; nothing else should create float64 tensors.
"""

from __future__ import annotations

import numpy as np

_ALLOWED_DTYPES = (np.float32, np.float64)


class Tensor:
    """Node of the computation graph.

    ``data`` is never mutated once the tensor has been produced by an
    operation; gradients accumulate into ``grad`` during ``backward``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, _parents=(), _backward_fn=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward_fn = _backward_fn

    @property
    def dims(self):
        return self.data.shape

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.flat[0])

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def backward(self, seed=None):
        """Reverse-mode sweep from this tensor.

        ``seed`` defaults to 1.0 and is only optional for scalar outputs.
        """
        if seed is None:
            if self.data.size != 1:
                raise ValueError(
                    "backward() without a seed gradient requires a scalar tensor, "
                    f"got shape {self.data.shape}"
                )
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise ValueError(
                    f"seed gradient shape {seed.shape} does not match tensor shape "
                    f"{self.data.shape}"
                )

        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self.accumulate_grad(seed)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name})"


class Parameter(Tensor):
    """Trainable tensor with a unique name inside its network.

    ``value`` aliases ``data``; the optimizer is the only code allowed to
    mutate it.
    """

    __slots__ = ("name",)

    def __init__(self, data, name):
        super().__init__(data, requires_grad=True)
        self.name = name

    @property
    def value(self):
        return self.data

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def needs_grad(*tensors):
    return any(t.requires_grad for t in tensors if isinstance(t, Tensor))

"""Reverse-mode automatic differentiation on numpy arrays.

A Tensor wraps an ndarray and, while gradient recording is enabled,
remembers the operation that produced it as a closure plus parent
references. backward() walks that graph once in reverse topological
order. Gradients accumulate by summation, so a parameter used many
times (e.g. the same convolution applied at every time step of a
sequence) receives the sum of all its contributions.

Intentional differences from the big frameworks, sized for this
package:
  * no broadcasting between tensors; operands must share a shape
    (scalars are folded into the closures instead);
  * graphs are truncated either by passing stop tensors to backward()
    or by detaching a tensor in place, which frees everything behind it
    (that is how truncated backpropagation through time is realized);
  * intermediate gradients are reset at the start of every backward
    call, while leaves keep accumulating until zero_grad.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from ..errors import GraphError, ShapeError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the context (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Array node of the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "tag")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple = (),
        backward_fn=None,
        tag=None,
    ):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.parents = parents if self.requires_grad else ()
        self.backward_fn = backward_fn if self.requires_grad else None
        self.tag = tag

    # -- bookkeeping -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """New leaf sharing this tensor's data."""
        return Tensor(self.data, requires_grad=False, tag=self.tag)

    def detach_(self) -> "Tensor":
        """Cut the graph behind this tensor in place.

        The tensor becomes a leaf; whatever produced it can be garbage
        collected. Used by the trainer to bound how far gradients can
        flow back through a recurrent state chain.
        """
        self.parents = ()
        self.backward_fn = None
        self.requires_grad = False
        return self

    # -- arithmetic (same-shape tensors or python scalars) -----------

    def _binary(self, other, forward, back_self, back_other):
        if isinstance(other, Tensor):
            if other.shape != self.shape:
                raise ShapeError(
                    f"shape mismatch {self.shape} vs {other.shape}; "
                    "broadcasting between tensors is not supported"
                )
            out_data = forward(self.data, other.data)
            req = self.requires_grad or other.requires_grad
            out = Tensor(out_data, requires_grad=req, parents=(self, other))
            if out.requires_grad:
                # capture forward-time arrays: optimizers rebind
                # Parameter.data, and a late backward must still see the
                # values the forward used
                a, b = self, other
                a_data, b_data = self.data, other.data

                def bwd(g):
                    if a.requires_grad:
                        a.accumulate_grad(back_self(g, a_data, b_data))
                    if b.requires_grad:
                        b.accumulate_grad(back_other(g, a_data, b_data))

                out.backward_fn = bwd
            return out
        scalar = float(other)
        out_data = forward(self.data, scalar)
        out = Tensor(out_data, requires_grad=self.requires_grad, parents=(self,))
        if out.requires_grad:
            a = self
            a_data = self.data

            def bwd(g):
                a.accumulate_grad(back_self(g, a_data, scalar))

            out.backward_fn = bwd
        return out

    def __add__(self, other):
        return self._binary(
            other,
            lambda x, y: x + y,
            lambda g, x, y: g,
            lambda g, x, y: g,
        )

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(
            other,
            lambda x, y: x - y,
            lambda g, x, y: g,
            lambda g, x, y: -g,
        )

    def __rsub__(self, other):
        # other - self with other a scalar
        scalar = float(other)
        out = Tensor(
            scalar - self.data, requires_grad=self.requires_grad, parents=(self,)
        )
        if out.requires_grad:
            a = self
            out.backward_fn = lambda g: a.accumulate_grad(-g)
        return out

    def __mul__(self, other):
        return self._binary(
            other,
            lambda x, y: x * y,
            lambda g, x, y: g * y,
            lambda g, x, y: g * x,
        )

    __rmul__ = __mul__

    def __neg__(self):
        out = Tensor(-self.data, requires_grad=self.requires_grad, parents=(self,))
        if out.requires_grad:
            a = self
            out.backward_fn = lambda g: a.accumulate_grad(-g)
        return out

    def __repr__(self):
        return (
            f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, "
            f"requires_grad={self.requires_grad})"
        )


class Parameter(Tensor):
    """Named trainable leaf tensor."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str, trainable: bool = True):
        super().__init__(np.asarray(data), requires_grad=trainable)
        # Parameters stay trainable even when constructed inside a
        # no_grad block; recording state only matters for graph nodes.
        self.requires_grad = bool(trainable)
        self.name = name
        self.trainable = trainable

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def backward(loss: Tensor, stop: tuple = (), return_visited: bool = False):
    """Propagate d(loss)/dx through the recorded graph.

    stop tensors are treated as constants: traversal does not continue
    past them even if they have parents. Returns the list of visited
    graph nodes when return_visited is set (used by tests asserting how
    far a truncated graph actually reaches).
    """
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError(
            "loss has no recorded graph; it was computed with gradients "
            "disabled or from constants only"
        )
    stop_ids = {id(t) for t in stop}

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if id(node) in stop_ids:
            continue
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    # Interior gradients are per-call scratch; leaves (parameters,
    # inputs, stop tensors) accumulate across calls.
    for node in topo:
        if node.parents and id(node) not in stop_ids:
            node.grad = None

    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(topo):
        if id(node) in stop_ids or node.backward_fn is None:
            continue
        if node.grad is None:
            continue
        node.backward_fn(node.grad)

    if return_visited:
        return topo
    return None

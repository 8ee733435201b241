"""A small tape-based reverse-mode differentiator over numpy arrays.

Only the operations the two network families need are provided: affine maps,
1-D convolution, rectifiers, addition and reshapes.  Every array carries a
leading batch axis; parameter gradients are summed over it.
"""
from __future__ import annotations

from typing import Callable

import numpy as np


class Node:
    __slots__ = ("value", "grad", "backward_fn", "param")

    def __init__(self, value: np.ndarray, backward_fn: Callable | None = None, param: str | None = None):
        self.value = value
        self.grad = None
        self.backward_fn = backward_fn
        self.param = param

    def accumulate(self, g: np.ndarray, fresh: bool = False) -> None:
        """Add ``g`` to the gradient; ``fresh`` arrays are owned by no one else and are kept as is."""
        if self.grad is None:
            self.grad = g if fresh and g.dtype == float else np.array(g, dtype=float, copy=True)
        else:
            self.grad += g


class TapeConsumedError(RuntimeError):
    pass


class GradTape:
    """Records one forward evaluation; supports exactly one backward sweep."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}
        self.output: Node | None = None
        self.consumed = False
        # when a list, relu appends its activation pattern (used by fd_check)
        self.masks: list | None = None

    def param(self, name: str, value: np.ndarray) -> Node:
        node = Node(value, param=name)
        self.params[name] = node
        self.nodes.append(node)
        return node

    def input(self, value: np.ndarray) -> Node:
        node = Node(np.asarray(value, dtype=float))
        self.nodes.append(node)
        return node

    def record(self, value: np.ndarray, backward_fn: Callable) -> Node:
        node = Node(value, backward_fn)
        self.nodes.append(node)
        return node

    def backward(self, upstream) -> dict[str, np.ndarray]:
        """Gradients of ``sum(upstream * output)`` for every parameter leaf."""
        if self.consumed:
            raise TapeConsumedError("this tape has already been used for a backward sweep")
        if self.output is None:
            raise RuntimeError("tape has no recorded output")
        self.consumed = True
        out = self.output
        out.grad = np.broadcast_to(np.asarray(upstream, dtype=float), out.value.shape).copy()
        for node in reversed(self.nodes):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)
        grads = {}
        for name, node in self.params.items():
            grads[name] = node.grad if node.grad is not None else np.zeros_like(node.value)
        return grads


def linear(tape: GradTape, x: Node, W: Node, b: Node | None = None) -> Node:
    """``x @ W.T + b`` with ``W`` of shape ``(out, in)``."""
    y = x.value @ W.value.T
    if b is not None:
        y = y + b.value

    def back(g):
        W.accumulate(g.T @ x.value, fresh=True)
        if b is not None:
            b.accumulate(g.sum(axis=0), fresh=True)
        x.accumulate(g @ W.value, fresh=True)

    return tape.record(y, back)


def conv1d(tape: GradTape, x: Node, W: Node, b: Node, padding: int = 1) -> Node:
    """Stride-1 cross-correlation. ``x``: (n, C_in, L); ``W``: (C_out, C_in, k)."""
    n, C_in, L = x.value.shape
    C_out, _, k = W.value.shape
    xp = np.pad(x.value, ((0, 0), (0, 0), (padding, padding)))
    L_out = xp.shape[2] - k + 1
    # (k * C_in, n * L_out) patch matrix, so forward and backward are single matmuls
    patches = np.stack([xp[:, :, j : j + L_out] for j in range(k)], axis=0)  # (k, n, C_in, L_out)
    patches = patches.transpose(0, 2, 1, 3).reshape(k * C_in, n * L_out)
    Wm = W.value.transpose(0, 2, 1).reshape(C_out, k * C_in)
    y = (Wm @ patches).reshape(C_out, n, L_out).transpose(1, 0, 2) + b.value[None, :, None]

    def back(g):
        gm = g.transpose(1, 0, 2).reshape(C_out, n * L_out)
        W.accumulate((gm @ patches.T).reshape(C_out, k, C_in).transpose(0, 2, 1))
        b.accumulate(gm.sum(axis=1))
        dp = (Wm.T @ gm).reshape(k, C_in, n, L_out).transpose(0, 2, 1, 3)
        dxp = np.zeros_like(xp)
        for j in range(k):
            dxp[:, :, j : j + L_out] += dp[j]
        x.accumulate(dxp[:, :, padding : padding + L])

    return tape.record(y, back)


def relu(tape: GradTape, x: Node) -> Node:
    mask = x.value > 0
    y = np.maximum(x.value, 0.0)
    if tape.masks is not None:
        tape.masks.append(mask)

    def back(g):
        x.accumulate(g * mask, fresh=True)

    return tape.record(y, back)


def add(tape: GradTape, a: Node, b: Node) -> Node:
    def back(g):
        a.accumulate(g)
        b.accumulate(g)

    return tape.record(a.value + b.value, back)


def reshape(tape: GradTape, x: Node, shape: tuple[int, ...]) -> Node:
    orig = x.value.shape

    def back(g):
        x.accumulate(g.reshape(orig))

    return tape.record(x.value.reshape(shape), back)

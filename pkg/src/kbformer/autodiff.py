"""Reverse-mode autodiff over the core primitives.

A ``Tape`` records nodes in creation order, which is a topological order by
construction. Forward values are computed with the functions in
:mod:`kbformer.core`, so a tape forward pass is numerically identical to the
plain one.

    tape = Tape()
    w = tape.leaf(w0, name="w")
    x = tape.const(x0)
    loss = tape.sum(tape.matmul(w, x))
    grads = tape.backward(loss)   # {"w": dL/dw}
"""

from __future__ import annotations

import numpy as np

from . import core


class Node:
    __slots__ = ("tape", "index", "value", "parents", "backward_fn", "name", "trainable", "needs_grad")

    def __init__(self, tape, value, parents=(), backward_fn=None, name=None, trainable=False):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name
        self.trainable = trainable
        self.needs_grad = trainable or any(p.needs_grad for p in parents)
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = self.name or f"#{self.index}"
        return f"Node({label}, shape={self.value.shape})"


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` over axes that were broadcast to reach its shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: list[Node] = []

    # -- leaves ---------------------------------------------------------------

    def leaf(self, value: np.ndarray, name: str | None = None, trainable: bool = True) -> Node:
        node = Node(self, np.asarray(value, dtype=np.float64), name=name, trainable=trainable)
        self.leaves.append(node)
        return node

    def const(self, value: np.ndarray, name: str | None = None) -> Node:
        return self.leaf(value, name=name, trainable=False)

    def _op(self, value, parents, backward_fn) -> Node:
        parents = tuple(parents)
        if any(p.tape is not self for p in parents):
            raise ValueError("operands belong to a different tape")
        return Node(self, value, parents, backward_fn)

    # -- primitives -------------------------------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        out = core.matmul(a.value, b.value)

        def back(g):
            ga = gb = None
            if a.needs_grad:
                ga = _unbroadcast(core.matmul(g, core.transpose(b.value)), a.shape)
            if b.needs_grad:
                gb = _unbroadcast(core.matmul(core.transpose(a.value), g), b.shape)
            return ga, gb

        return self._op(out, (a, b), back)

    def add(self, a: Node, b: Node) -> Node:
        return self._op(core.add(a.value, b.value), (a, b), lambda g: (g, _unbroadcast(g, b.shape)))

    def add_row(self, a: Node, row: Node) -> Node:
        out = core.add_row(a.value, row.value)
        return self._op(out, (a, row), lambda g: (g, g.reshape(-1, g.shape[-1]).sum(axis=0, keepdims=True)))

    def scale(self, a: Node, s: float) -> Node:
        return self._op(core.scale(a.value, s), (a,), lambda g: (g * s,))

    def relu(self, a: Node) -> Node:
        out = core.relu(a.value)
        # derivative at exactly 0 is 0
        return self._op(out, (a,), lambda g: (np.where(a.value > 0.0, g, 0.0),))

    def transpose(self, a: Node) -> Node:
        return self._op(core.transpose(a.value), (a,), lambda g: (core.transpose(g),))

    def softmax_rows(self, a: Node) -> Node:
        y = core.softmax_rows(a.value)

        def back(g):
            return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

        return self._op(y, (a,), back)

    def layer_norm(self, a: Node, gain: Node, bias: Node, eps: float = core.LN_EPS) -> Node:
        x = a.value
        out = core.layer_norm(x, gain.value, bias.value, eps)
        mean = x.mean(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(((x - mean) ** 2).mean(axis=-1, keepdims=True) + eps)
        xhat = (x - mean) * inv_std

        def back(g):
            n = x.shape[-1]
            flat_g = g.reshape(-1, n)
            g_gain = (flat_g * xhat.reshape(-1, n)).sum(axis=0, keepdims=True)
            g_bias = flat_g.sum(axis=0, keepdims=True)
            gx_hat = g * gain.value[0]
            gx = inv_std * (
                gx_hat
                - gx_hat.mean(axis=-1, keepdims=True)
                - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
            )
            return gx, g_gain, g_bias

        return self._op(out, (a, gain, bias), back)

    def embedding(self, table: Node, ids) -> Node:
        ids = np.asarray(ids, dtype=np.int64)
        out = core.embedding_lookup(table.value, ids)

        def back(g):
            gt = np.zeros_like(table.value)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
            return (gt,)

        return self._op(out, (table,), back)

    def causal_mask_fill(self, a: Node) -> Node:
        out = core.causal_mask_fill(a.value)
        keep = out != core.MASK_VALUE
        return self._op(out, (a,), lambda g: (np.where(keep, g, 0.0),))

    def cross_entropy(self, logits: Node, targets) -> Node:
        targets = np.asarray(targets, dtype=np.int64)
        loss = core.cross_entropy(logits.value, targets)

        def back(g):
            p = core.softmax_rows(logits.value)
            np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1.0, -1)
            return (p * (g[0, 0] / targets.size),)

        return self._op(np.array([[loss]]), (logits,), back)

    def split_heads(self, a: Node, heads: int) -> Node:
        return self._op(core.split_heads(a.value, heads), (a,), lambda g: (core.merge_heads(g),))

    def merge_heads(self, a: Node) -> Node:
        heads = a.shape[-3]
        return self._op(core.merge_heads(a.value), (a,), lambda g: (core.split_heads(g, heads),))

    def reshape(self, a: Node, shape: tuple) -> Node:
        return self._op(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))

    def sum(self, a: Node) -> Node:
        return self._op(np.array([[a.value.sum()]]), (a,), lambda g: (np.full(a.shape, g[0, 0]),))

    def multiply(self, a: Node, b: Node) -> Node:
        """Elementwise product (same shapes); used by tests and masks."""
        if a.shape != b.shape:
            raise core.ShapeError(f"multiply: {a.shape} vs {b.shape}")
        out = core.checked(a.value * b.value)
        return self._op(out, (a, b), lambda g: (g * b.value, g * a.value))

    # -- backward -----------------------------------------------------------------

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        """Gradients of a 1x1 ``loss`` for every trainable leaf, keyed by name.

        Trainable leaves that do not influence the loss get zero matrices.
        Unnamed leaves are keyed by ``"#<index>"``.
        """
        if loss.tape is not self:
            raise ValueError("loss belongs to a different tape")
        if loss.value.size != 1:
            raise core.ShapeError(f"loss must be scalar (1x1), got {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
        for node in reversed(self.nodes[: loss.index + 1]):
            g = grads.pop(node.index, None) if node.backward_fn is not None else grads.get(node.index)
            if g is None or node.backward_fn is None or not node.needs_grad:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.needs_grad:
                    continue
                if parent.index in grads:
                    grads[parent.index] = grads[parent.index] + pg
                else:
                    grads[parent.index] = pg
        out = {}
        for leaf in self.leaves:
            if leaf.trainable:
                key = leaf.name if leaf.name is not None else f"#{leaf.index}"
                g = grads.get(leaf.index)
                out[key] = np.zeros_like(leaf.value) if g is None else core.checked(np.asarray(g, dtype=np.float64), key)
        return out

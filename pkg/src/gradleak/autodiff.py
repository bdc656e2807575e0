"""Minimal reverse-mode autodiff over numpy arrays.

The gradient-matching objectives need the derivative, w.r.t. a candidate
layer input, of quantities that are themselves gradients of the network
loss.  Those inner gradients have a closed backpropagation form, so one
level of reverse-mode differentiation through that explicit graph is
enough.  The engine below supports exactly the primitives that graph
uses; each op records vector-Jacobian products against its parents.
"""

from __future__ import annotations

import numpy as np


class Node:
    __slots__ = ("value", "parents", "grad")

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=float)
        self.parents = parents  # tuple of (Node, vjp) pairs
        self.grad = None

    # convenience arithmetic -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_node(x):
    return x if isinstance(x, Node) else Node(x)


def backward(out: Node) -> None:
    """Accumulate d(out)/d(node) into .grad over the whole graph."""
    order = []
    seen = set()
    stack = [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            stack.append((parent, False))
    for node in order:
        node.grad = None
    out.grad = np.ones_like(out.value)
    for node in reversed(order):
        if node.grad is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(node.grad)
            if parent.grad is None:
                parent.grad = contrib
            else:
                parent.grad = parent.grad + contrib


def grad(out: Node, leaf: Node) -> np.ndarray:
    backward(out)
    return np.zeros_like(leaf.value) if leaf.grad is None else leaf.grad


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    a, b = as_node(a), as_node(b)
    return Node(a.value + b.value, ((a, lambda g: g), (b, lambda g: g)))


def sub(a, b):
    a, b = as_node(a), as_node(b)
    return Node(a.value - b.value, ((a, lambda g: g), (b, lambda g: -g)))


def mul(a, b):
    a, b = as_node(a), as_node(b)
    return Node(a.value * b.value,
                ((a, lambda g: g * b.value), (b, lambda g: g * a.value)))


def scale(a, c: float):
    a = as_node(a)
    return Node(a.value * c, ((a, lambda g: g * c),))


def matvec(m: np.ndarray, x):
    """Constant matrix times variable vector."""
    x = as_node(x)
    return Node(m @ x.value, ((x, lambda g: m.T @ g),))


def dot_const(c: np.ndarray, x):
    x = as_node(x)
    return Node(np.dot(c, x.value), ((x, lambda g: g * c),))


def sumsq(x):
    x = as_node(x)
    return Node(np.dot(x.value, x.value), ((x, lambda g: g * 2.0 * x.value),))


def sqrt(x):
    x = as_node(x)
    y = np.sqrt(x.value)
    return Node(y, ((x, lambda g: g * 0.5 / y),))


def reciprocal(x):
    x = as_node(x)
    y = 1.0 / x.value
    return Node(y, ((x, lambda g: -g * y * y),))


def tanh(x):
    x = as_node(x)
    y = np.tanh(x.value)
    return Node(y, ((x, lambda g: g * (1.0 - y * y)),))


def concat(nodes):
    nodes = [as_node(n) for n in nodes]
    sizes = [n.value.size for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        return lambda g: g[offsets[i]:offsets[i + 1]].reshape(nodes[i].value.shape)

    value = np.concatenate([n.value.ravel() for n in nodes])
    return Node(value, tuple((nodes[i], make_vjp(i)) for i in range(len(nodes))))


def softmax_minus_onehot(logits, label: int):
    """Gradient of cross-entropy w.r.t. logits as a differentiable node."""
    logits = as_node(logits)
    e = np.exp(logits.value - logits.value.max())
    p = e / e.sum()
    y = p.copy()
    y[label] -= 1.0

    def vjp(g):
        # Jacobian of softmax: diag(p) - p p^T
        return p * g - p * np.dot(p, g)

    return Node(y, ((logits, vjp),))


def total_variation_node(x, shape):
    """Anisotropic TV of a flattened (C,H,W) image; sign(0) = 0 subgradient."""
    x = as_node(x)
    c, h, w = shape
    img = x.value.reshape(c, h, w)
    dv = img[:, 1:, :] - img[:, :-1, :]
    dh = img[:, :, 1:] - img[:, :, :-1]
    value = np.abs(dv).sum() + np.abs(dh).sum()

    def vjp(g):
        out = np.zeros_like(img)
        sv, sh = np.sign(dv), np.sign(dh)
        out[:, 1:, :] += sv
        out[:, :-1, :] -= sv
        out[:, :, 1:] += sh
        out[:, :, :-1] -= sh
        return g * out.ravel()

    return Node(value, ((x, vjp),))


# conv primitives -----------------------------------------------------------


def conv_apply_node(geom, kernel: np.ndarray, x):
    """Circulant conv as one linear primitive (kernel held constant)."""
    from . import network
    x = as_node(x)
    value = network.conv_apply(geom, kernel, x.value)
    return Node(value, ((x, lambda g: network.conv_apply_transpose(geom, kernel, g)),))


def conv_input_grad_node(geom, kernel: np.ndarray, dz):
    """W^T dz with dz variable; adjoint is W g."""
    from . import network
    dz = as_node(dz)
    value = network.conv_apply_transpose(geom, kernel, dz.value)
    return Node(value, ((dz, lambda g: network.conv_apply(geom, kernel, g)),))


def conv_weight_grad_node(geom, dz, x):
    """Bilinear kernel-gradient primitive: gw[o,j] = sum_p dz[o,p] x[idx[p,j]]."""
    from .network import _patches
    dz, x = as_node(dz), as_node(x)
    patches = _patches(geom, x.value)  # (P, CKK)
    dzm = dz.value.reshape(-1, geom.num_pos)
    value = (dzm @ patches).ravel()

    def vjp_dz(g):
        gm = g.reshape(-1, geom.ckk)  # (O, CKK)
        return (gm @ patches.T).ravel()

    def vjp_x(g):
        gm = g.reshape(-1, geom.ckk)
        m = dzm.T @ gm  # (P, CKK)
        out = np.zeros(geom.n + 1)
        np.add.at(out, geom.idx.ravel(), m.ravel())
        return out[:geom.n]

    return Node(value, ((dz, vjp_dz), (x, vjp_x)))


def outer_flat(a, b):
    """Flattened outer product (FC weight gradient)."""
    a, b = as_node(a), as_node(b)
    value = np.outer(a.value, b.value).ravel()
    na, nb = a.value.size, b.value.size

    def vjp_a(g):
        return g.reshape(na, nb) @ b.value

    def vjp_b(g):
        return g.reshape(na, nb).T @ a.value

    return Node(value, ((a, vjp_a), (b, vjp_b)))

"""Mini-batch Adam pre-training of the catalog networks.

The attack engine is single-example by design; training needs throughput,
so this module carries batched forward/backward passes over column-stacked
inputs.  Batched gradients are checked against the single-example engine
in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .network import (NetworkSpec, WeightSet, conv_geometry, init_weights)

# CIFAR-10 class indices for the published two-class training subset
CLASS_INDICES = {"airplane": 0, "automobile": 1, "bird": 2, "cat": 3,
                 "deer": 4, "dog": 5, "frog": 6, "horse": 7, "ship": 8,
                 "truck": 9}
DEFAULT_CLASSES = ("automobile", "bird")


@dataclass
class TrainingCurves:
    train_loss: list = field(default_factory=list)
    test_loss: list = field(default_factory=list)


def _forward_batch(spec, weights, X):
    """Forward over a column-stacked batch X of shape (n, B)."""
    shapes = spec.layer_input_shapes()
    acts = [X]
    caches = []
    for i, layer in enumerate(spec.layers):
        lw = weights[i]
        x = acts[-1]
        if layer.kind == "conv":
            geom = conv_geometry(layer, shapes[i])
            xaug = np.vstack([x, np.zeros((1, x.shape[1]))])
            patches = xaug[geom.idx]  # (P, CKK, B)
            kf = lw.weight.reshape(layer.out_channels, geom.ckk)
            z = np.einsum("ok,pkb->opb", kf, patches, optimize=True)
            z = z.reshape(geom.out_len, x.shape[1])
            if lw.bias is not None:
                z += np.repeat(lw.bias, geom.num_pos)[:, None]
            caches.append((geom, patches))
        else:
            z = lw.weight @ x
            if lw.bias is not None:
                z = z + lw.bias[:, None]
            caches.append(None)
        acts.append(np.tanh(z) if layer.activation == "tanh" else z)
    return acts, caches


def _batch_loss(logits, labels):
    m = logits.max(axis=0)
    lse = m + np.log(np.exp(logits - m).sum(axis=0))
    return float(np.mean(lse - logits[labels, np.arange(logits.shape[1])]))


def _backward_batch(spec, weights, acts, caches, labels):
    """Mean-loss gradients for every weight/bias, batched."""
    shapes = spec.layer_input_shapes()
    logits = acts[-1]
    B = logits.shape[1]
    e = np.exp(logits - logits.max(axis=0))
    gx = e / e.sum(axis=0)
    gx[labels, np.arange(B)] -= 1.0
    gx /= B
    grads = [None] * len(spec.layers)
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        lw = weights[i]
        post = acts[i + 1]
        dz = gx * (1.0 - post ** 2) if layer.activation == "tanh" else gx
        x_in = acts[i]
        if layer.kind == "conv":
            geom, patches = caches[i]
            dz3 = dz.reshape(layer.out_channels, geom.num_pos, B)
            gw = np.einsum("opb,pkb->ok", dz3, patches,
                           optimize=True).reshape(lw.weight.shape)
            gb = dz3.sum(axis=(1, 2)) if lw.bias is not None else None
            if i > 0:
                kf = lw.weight.reshape(layer.out_channels, geom.ckk)
                m = np.einsum("ok,opb->pkb", kf, dz3, optimize=True)
                gxaug = np.zeros((geom.n + 1, B))
                np.add.at(gxaug, geom.idx, m)
                gx = gxaug[:geom.n]
        else:
            gw = dz @ x_in.T
            gb = dz.sum(axis=1) if lw.bias is not None else None
            if i > 0:
                gx = lw.weight.T @ dz
        grads[i] = (gw, gb)
    return grads


def evaluate_loss(spec, weights, X, labels, batch_size=256):
    losses, counts = [], []
    for s in range(0, X.shape[1], batch_size):
        xb, yb = X[:, s:s + batch_size], labels[s:s + batch_size]
        acts, _ = _forward_batch(spec, weights, xb)
        losses.append(_batch_loss(acts[-1], yb) * len(yb))
        counts.append(len(yb))
    return float(sum(losses) / sum(counts))


def select_classes(records, classes=DEFAULT_CLASSES):
    """Filter CIFAR records down to the named classes."""
    if not classes:
        raise ConfigError("pre-training needs at least one class")
    wanted = {CLASS_INDICES[c] if isinstance(c, str) else int(c) for c in classes}
    return [r for r in records if r.label in wanted]


def pretrain(spec: NetworkSpec, records, epochs: int, batch_size: int = 64,
             lr: float = 0.001, classes=DEFAULT_CLASSES, seed: int = 0,
             test_records=None, weights: WeightSet | None = None,
             exclude_indices=()):
    """Adam training of cross-entropy on a class subset.

    Returns (WeightSet, TrainingCurves).  `exclude_indices` keeps attack
    target images out of the training set.
    """
    records = [r for i, r in enumerate(records) if i not in set(exclude_indices)]
    records = select_classes(records, classes)
    if not records:
        raise ConfigError("no training records left after class filtering")
    X = np.stack([r.flat() for r in records], axis=1)
    y = np.array([r.label for r in records])
    Xt = yt = None
    if test_records:
        test = select_classes(test_records, classes)
        Xt = np.stack([r.flat() for r in test], axis=1)
        yt = np.array([r.label for r in test])

    if weights is None:
        weights = init_weights(spec, seed=seed)
    else:
        weights = weights.copy()
    rng = np.random.default_rng(seed + 1)
    curves = TrainingCurves()

    params = []
    for lw in weights.layers:
        params.append(lw.weight)
        if lw.bias is not None:
            params.append(lw.bias)
    m_state = [np.zeros_like(p) for p in params]
    v_state = [np.zeros_like(p) for p in params]
    t = 0
    for _ in range(epochs):
        order = rng.permutation(len(records))
        epoch_loss, seen = 0.0, 0
        for s in range(0, len(records), batch_size):
            sel = order[s:s + batch_size]
            acts, caches = _forward_batch(spec, weights, X[:, sel])
            epoch_loss += _batch_loss(acts[-1], y[sel]) * len(sel)
            seen += len(sel)
            grads = _backward_batch(spec, weights, acts, caches, y[sel])
            flat_grads = []
            for gw, gb in grads:
                flat_grads.append(gw)
                if gb is not None:
                    flat_grads.append(gb)
            t += 1
            for p, g, ms, vs in zip(params, flat_grads, m_state, v_state):
                ms *= 0.9
                ms += 0.1 * g
                vs *= 0.999
                vs += 0.001 * g * g
                p -= lr * (ms / (1 - 0.9 ** t)) / (np.sqrt(vs / (1 - 0.999 ** t)) + 1e-8)
        curves.train_loss.append(epoch_loss / seen)
        if Xt is not None:
            curves.test_loss.append(evaluate_loss(spec, weights, Xt, yt))
    return weights, curves

"""Per-layer block linear systems and their minimum-norm solutions.

Each conv layer contributes a stacked system: the circulant weight matrix
on top (forward constraint, right-hand side is the inverted activation of
the next layer's input) and the circulant expansion of the pre-activation
gradient below (backward constraint, right-hand side is the flattened
kernel gradient).  The true layer input satisfies the system exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericsError, ShapeError
from .network import (LayerSpec, activation_invert, circulant_expand,
                      conv_geometry, grad_circulant_expand)

# Singular values above sigma_max * max(m,n) * eps * RANK_TOL_FACTOR count
# toward the rank.  The 100x safety factor absorbs the clustering that
# repeated kernel entries produce in circulant systems.
RANK_TOL_FACTOR = 100.0
EPS = 2.0 ** -52


@dataclass
class LayerSystem:
    u: np.ndarray
    v: np.ndarray
    layer_index: int
    n_inputs: int
    augmented: bool = False  # bias column + constant-one unknown appended
    numeric_rank: int | None = None
    condition_estimate: float | None = None

    def residual(self, x: np.ndarray) -> float:
        return float(np.linalg.norm(self.u @ x - self.v))


def build_layer_system(layer: LayerSpec, kernel: np.ndarray,
                       x_next_estimate: np.ndarray, grad_w: np.ndarray,
                       grad_z: np.ndarray, input_shape,
                       bias: np.ndarray | None = None,
                       layer_index: int = 0) -> LayerSystem:
    """Stack weight and gradient constraints for one conv layer.

    With a bias present the weight block is augmented by the bias column
    and the unknown by a trailing constant-one entry.
    """
    geom = conv_geometry(layer, input_shape)
    if x_next_estimate.size != geom.out_len:
        raise ShapeError(
            f"x_next_estimate length {x_next_estimate.size}, expected {geom.out_len}")
    if grad_z.size != geom.out_len:
        raise ShapeError(f"grad_z length {grad_z.size}, expected {geom.out_len}")
    if grad_w.size != geom.out_len // geom.num_pos * geom.ckk:
        raise ShapeError("kernel gradient size does not match layer geometry")
    w = circulant_expand(layer, kernel, input_shape)
    g = grad_circulant_expand(np.asarray(grad_z, float).ravel(), layer, input_shape)
    v_top = activation_invert(layer.activation, np.asarray(x_next_estimate, float).ravel())
    v_bot = np.asarray(grad_w, float).ravel()
    augmented = bias is not None
    if augmented:
        w = np.hstack([w, np.repeat(bias, geom.num_pos)[:, None]])
        g = np.hstack([g, np.zeros((g.shape[0], 1))])
    u = np.vstack([w, g])
    v = np.concatenate([v_top, v_bot])
    return LayerSystem(u=u, v=v, layer_index=layer_index, n_inputs=geom.n,
                       augmented=augmented)


def rank_tolerance(s: np.ndarray, shape, tol_factor=RANK_TOL_FACTOR) -> float:
    return float(s[0]) * max(shape) * EPS * tol_factor if s.size else 0.0


def numeric_rank(u: np.ndarray, tol_factor=RANK_TOL_FACTOR) -> int:
    """Singular values above the scaled-roundoff tolerance."""
    s = np.linalg.svd(u, compute_uv=False)
    return int(np.count_nonzero(s > rank_tolerance(s, u.shape, tol_factor)))


def condition_number(u: np.ndarray, tol_factor=RANK_TOL_FACTOR) -> float:
    """sigma_max over the smallest singular value above the rank tolerance."""
    s = np.linalg.svd(u, compute_uv=False)
    above = s[s > rank_tolerance(s, u.shape, tol_factor)]
    if above.size == 0:
        raise NumericsError("condition number undefined for a (numerically) zero matrix")
    return float(above[0] / above[-1])


def min_norm_lstsq(system: LayerSystem, tol_factor=RANK_TOL_FACTOR) -> np.ndarray:
    """Minimum-norm least-squares solution of u x = v via SVD.

    Fills the system's rank and condition diagnostics as a side effect.
    """
    u, v = system.u, system.v
    if u.size == 0:
        raise NumericsError(f"layer {system.layer_index}: empty system")
    rcond = max(u.shape) * EPS * tol_factor
    try:
        x, _, rank, s = np.linalg.lstsq(u, v, rcond=rcond)
    except np.linalg.LinAlgError as exc:
        raise NumericsError(f"layer {system.layer_index}: SVD failed: {exc}") from exc
    system.numeric_rank = int(rank)
    if rank > 0:
        above = s[s > s[0] * rcond] if s.size else s
        if above.size:
            system.condition_estimate = float(above[0] / above[-1])
    return x

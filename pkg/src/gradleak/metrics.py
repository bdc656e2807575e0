"""Architecture security metric and image-quality scores."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .linsys import RANK_TOL_FACTOR, numeric_rank
from .network import (NetworkSpec, WeightSet, circulant_expand,
                      collect_gradients, grad_circulant_expand)

PSNR_CAP_DB = 200.0
PEAK = 255.0


@dataclass
class LayerRankRecord:
    layer_index: int
    n_inputs: int
    rank: int
    weight: float  # position weight (d - (i-1)) / d

    @property
    def deficiency(self) -> int:
        return self.rank - self.n_inputs


@dataclass
class SecurityAudit:
    layers: list
    c_exact: float
    seed: int | None = None
    init_note: str = ""
    extras: dict = field(default_factory=dict)

    @property
    def deficiencies(self):
        return [rec.deficiency for rec in self.layers]

    @property
    def c_rounded(self) -> int:
        """Round half away from zero, the display convention."""
        c = self.c_exact
        return int(math.floor(c + 0.5)) if c >= 0 else -int(math.floor(-c + 0.5))

    @property
    def c_truncated(self) -> int:
        return int(self.c_exact)


def weighted_deficiency_sum(deficiencies) -> float:
    """Position-weighted sum: layer i of d contributes (d-(i-1))/d * rd_i."""
    d = len(deficiencies)
    if d == 0:
        return 0.0
    return float(sum((d - i) / d * rd for i, rd in enumerate(deficiencies)))


def security_metric(spec: NetworkSpec, weights: WeightSet,
                    probe_image: np.ndarray, label: int = 0,
                    seed: int | None = None,
                    tol_factor: float = RANK_TOL_FACTOR) -> SecurityAudit:
    """Per-conv-layer rank deficiencies and their weighted sum.

    Each layer's block system is built from the probe image's true trace;
    only the conv layers count (the FC layer is exactly invertible and
    carries no deficiency).
    """
    bundle = collect_gradients(spec, weights, probe_image, label)
    shapes = spec.layer_input_shapes()
    conv_layers = [i for i, l in enumerate(spec.layers) if l.kind == "conv"]
    d = len(conv_layers)
    records = []
    for pos, i in enumerate(conv_layers):
        layer = spec.layers[i]
        w = circulant_expand(layer, weights[i].weight, shapes[i])
        g = grad_circulant_expand(bundle.grad_z[i], layer, shapes[i])
        u = np.vstack([w, g])
        rank = numeric_rank(u, tol_factor)
        records.append(LayerRankRecord(
            layer_index=i, n_inputs=u.shape[1], rank=rank,
            weight=(d - pos) / d))
    c = float(sum(rec.weight * rec.deficiency for rec in records))
    return SecurityAudit(layers=records, c_exact=c, seed=seed,
                         init_note="uniform [-1/sqrt(fan_in), 1/sqrt(fan_in)]")


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(a: np.ndarray = None, b: np.ndarray = None, *,
         mse_value: float = None) -> float:
    """PSNR in dB with MSE on [0,1] pixels against a 255 peak.

    This mixed convention is what makes published (mse, psnr) pairs such
    as (0.0346, 62.75) consistent.
    """
    if mse_value is None:
        mse_value = mse(a, b)
    if mse_value <= 0.0:
        return PSNR_CAP_DB
    return float(min(20.0 * np.log10(PEAK) - 10.0 * np.log10(mse_value),
                     PSNR_CAP_DB))

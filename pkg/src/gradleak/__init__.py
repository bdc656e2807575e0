"""Gradient-leakage analysis toolkit for shallow convolutional classifiers.

Reconstructs single training images from shared gradients by solving each
layer's block linear system and correcting the minimum-norm solution with
gradient matching, and scores architectures for leakage vulnerability via
a position-weighted rank-deficiency metric.
"""

from .attack import (HybridHyperparams, ReconstructionReport, cosine_distance,
                     cosinetv_reconstruct, dlg_reconstruct, fc_invert,
                     hybrid_reconstruct, rgap_reconstruct, total_variation)
from . import catalog
from .catalog import get as get_architecture
from .linsys import (LayerSystem, build_layer_system, condition_number,
                     min_norm_lstsq, numeric_rank)
from .metrics import SecurityAudit, mse, psnr, security_metric
from .network import (GradientBundle, LayerSpec, NetworkSpec, WeightSet,
                      backward, circulant_expand, collect_gradients,
                      cross_entropy_loss, forward, grad_circulant_expand,
                      init_weights, label_from_fc_gradients)

__all__ = [
    "HybridHyperparams", "ReconstructionReport", "cosine_distance",
    "cosinetv_reconstruct", "dlg_reconstruct", "fc_invert",
    "hybrid_reconstruct", "rgap_reconstruct", "total_variation",
    "catalog", "get_architecture",
    "LayerSystem", "build_layer_system", "condition_number",
    "min_norm_lstsq", "numeric_rank",
    "SecurityAudit", "mse", "psnr", "security_metric",
    "GradientBundle", "LayerSpec", "NetworkSpec", "WeightSet", "backward",
    "circulant_expand", "collect_gradients", "cross_entropy_loss", "forward",
    "grad_circulant_expand", "init_weights", "label_from_fc_gradients",
]

__version__ = "0.1.0"

"""Reconstruction attacks: closed-form FC inversion, the recursive
least-squares chain, gradient-matching baselines, and the hybrid method
that corrects each layer's minimum-norm solution with a soft-constraint
gradient-matching objective.

All methods consume only what a gradient-sharing victim exposes: the
architecture, the weights, the per-layer weight/bias gradients and the
label (which is itself recoverable from the FC gradient signs).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import NotInvertibleError, NumericsError, ShapeError
from .linsys import LayerSystem, build_layer_system, min_norm_lstsq
from .network import (NetworkSpec, TANH_CLAMP, WeightSet, collect_gradients,
                      conv_apply_transpose, conv_geometry)

PIVOT_FLOOR = 1e-12
ZERO_GRAD_FLOOR = 1e-30


# ---------------------------------------------------------------------------
# elementary pieces


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - <a,b>/(|a||b|); in [0,2], zero iff positively parallel."""
    a, b = np.asarray(a, float).ravel(), np.asarray(b, float).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise NumericsError("cosine distance undefined for a zero vector")
    return float(1.0 - np.dot(a, b) / (na * nb))


def total_variation(image: np.ndarray) -> float:
    """Anisotropic TV: per-channel sum of absolute forward differences."""
    img = np.asarray(image, float)
    if img.ndim != 3:
        raise ShapeError("total_variation expects a (C, H, W) array")
    dv = np.abs(img[:, 1:, :] - img[:, :-1, :]).sum()
    dh = np.abs(img[:, :, 1:] - img[:, :, :-1]).sum()
    return float(dv + dh)


def _tv_terms(shape) -> int:
    """Number of neighbor differences in the anisotropic TV of a (C,H,W) grid."""
    c, h, w = shape
    return max(c * ((h - 1) * w + h * (w - 1)), 1)


def fc_invert(fc_weight_grad: np.ndarray, grad_z: np.ndarray) -> np.ndarray:
    """Closed-form input of a fully-connected layer from its gradients.

    `grad_z` is the gradient w.r.t. the layer's pre-activation; with a
    nonzero bias it equals the observed bias gradient.  Uses the row with
    the largest |grad_z| as pivot (ties break to the lowest index).
    """
    g = np.asarray(fc_weight_grad, float)
    gz = np.asarray(grad_z, float).ravel()
    if g.ndim != 2 or g.shape[0] != gz.size:
        raise ShapeError("weight gradient rows must match grad_z length")
    k = int(np.argmax(np.abs(gz)))
    if abs(gz[k]) <= PIVOT_FLOOR:
        raise NotInvertibleError("all pre-activation gradients below pivot floor")
    return g[k, :] / gz[k]


def truncated_gradients(spec: NetworkSpec, weights: WeightSet, x: np.ndarray,
                        start_layer: int, label: int):
    """Weight/bias gradients of the truncated model starting at `start_layer`.

    Returns [(grad_w, grad_b), ...] for layers start_layer..d-1.
    """
    sub = spec.truncate(start_layer)
    subw = WeightSet(weights.layers[start_layer:])
    bundle = collect_gradients(sub, subw, x, label)
    return list(zip(bundle.grad_w, bundle.grad_b))


def flatten_gradients(grads) -> np.ndarray:
    """Concatenate (grad_w, grad_b) pairs into one comparison vector."""
    parts = []
    for gw, gb in grads:
        parts.append(np.asarray(gw, float).ravel())
        if gb is not None:
            parts.append(np.asarray(gb, float).ravel())
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# differentiable truncated-gradient graph


def _gradient_graph(spec: NetworkSpec, weights: WeightSet, x_node: ad.Node,
                    start_layer: int, label: int):
    """Build the truncated weight/bias gradients as autodiff nodes.

    Returns (grad_nodes, z_nodes) where grad_nodes is the flat list of
    per-layer gradient nodes in (weights, bias) order and z_nodes[j] is
    the pre-activation node of absolute layer j (used to share the
    forward pass with the linear-system residual).
    """
    shapes = spec.layer_input_shapes()
    d = len(spec.layers)
    acts = [x_node]
    z_nodes = {}
    geoms = {}
    for j in range(start_layer, d):
        layer = spec.layers[j]
        lw = weights[j]
        if layer.kind == "conv":
            geom = geoms[j] = conv_geometry(layer, shapes[j])
            z = ad.conv_apply_node(geom, lw.weight, acts[-1])
            if lw.bias is not None:
                z = ad.add(z, ad.Node(np.repeat(lw.bias, geom.num_pos)))
        else:
            z = ad.matvec(lw.weight, acts[-1])
            if lw.bias is not None:
                z = ad.add(z, ad.Node(lw.bias))
        z_nodes[j] = z
        acts.append(ad.tanh(z) if layer.activation == "tanh" else z)

    gx = ad.softmax_minus_onehot(acts[-1], label)
    grad_nodes = [None] * d
    for j in range(d - 1, start_layer - 1, -1):
        layer = spec.layers[j]
        lw = weights[j]
        post = acts[j - start_layer + 1]
        if layer.activation == "tanh":
            ones = ad.Node(np.ones_like(post.value))
            dz = ad.mul(gx, ad.sub(ones, ad.mul(post, post)))
        else:
            dz = gx
        x_in = acts[j - start_layer]
        if layer.kind == "conv":
            geom = geoms[j]
            gw = ad.conv_weight_grad_node(geom, dz, x_in)
            gb = None
            if lw.bias is not None:
                pos_sum = np.kron(np.eye(layer.out_channels), np.ones(geom.num_pos))
                gb = ad.matvec(pos_sum, dz)
            if j > start_layer:
                gx = ad.conv_input_grad_node(geom, lw.weight, dz)
        else:
            gw = ad.outer_flat(dz, x_in)
            gb = dz if lw.bias is not None else None
            if j > start_layer:
                gx = ad.matvec(lw.weight.T, dz)
        grad_nodes[j] = (gw, gb)

    flat = []
    for j in range(start_layer, d):
        gw, gb = grad_nodes[j]
        flat.append(gw)
        if gb is not None:
            flat.append(gb)
    return flat, z_nodes


# ---------------------------------------------------------------------------
# objectives


@dataclass
class SoftCorrection:
    """Per-layer soft-constraint objective, prebuilt for repeated evaluation.

    objective(x) = mu1 * cosine-distance of truncated gradients to target
                 + mu2 * TV(x)
                 + mu3 * ||u x - v||^2

    The linear-system residual reuses the forward pre-activation of the
    current layer for its top block instead of multiplying by the dense
    circulant matrix a second time.
    """

    spec: NetworkSpec
    weights: WeightSet
    start_layer: int
    label: int
    target: np.ndarray  # flattened observed gradients, layers >= start_layer
    mu1: float
    mu2: float
    mu3: float
    z_target: np.ndarray  # inverted activation of the next-layer estimate
    grad_matrix: np.ndarray  # circulant expansion of the grad_z estimate
    grad_w_target: np.ndarray  # observed flat kernel gradient at this layer
    zero_grad_seen: bool = False

    def __post_init__(self):
        self._target_norm = float(np.linalg.norm(self.target))
        self._shape = self.spec.layer_input_shapes()[self.start_layer]
        # the TV term is averaged over difference terms so its pull is
        # commensurate with the gradient-match and residual terms; the raw
        # sum at mu2 = 1 flattens the estimate outright
        self._tv_scale = 1.0 / _tv_terms(self._shape)

    def _graph(self, x: np.ndarray):
        x_node = ad.Node(np.asarray(x, float).ravel())
        terms = []
        grad_nodes, z_nodes = _gradient_graph(
            self.spec, self.weights, x_node, self.start_layer, self.label)
        if self.mu1 != 0.0:
            g = ad.concat(grad_nodes)
            gnorm_sq = ad.sumsq(g)
            if gnorm_sq.value < ZERO_GRAD_FLOOR or self._target_norm == 0.0:
                self.zero_grad_seen = True
            else:
                cos = ad.mul(ad.dot_const(self.target, g),
                             ad.reciprocal(ad.scale(ad.sqrt(gnorm_sq),
                                                    self._target_norm)))
                terms.append(ad.scale(ad.sub(ad.Node(1.0), cos), self.mu1))
        if self.mu2 != 0.0:
            terms.append(ad.scale(ad.total_variation_node(x_node, self._shape),
                                  self.mu2 * self._tv_scale))
        if self.mu3 != 0.0:
            top = ad.sub(z_nodes[self.start_layer], ad.Node(self.z_target))
            bottom = ad.sub(ad.matvec(self.grad_matrix, x_node),
                            ad.Node(self.grad_w_target))
            terms.append(ad.scale(ad.sumsq(ad.concat([top, bottom])), self.mu3))
        if not terms:
            return ad.Node(0.0), x_node
        out = terms[0]
        for t in terms[1:]:
            out = ad.add(out, t)
        return out, x_node

    def value(self, x: np.ndarray) -> float:
        out, _ = self._graph(x)
        return float(out.value)

    def value_and_grad(self, x: np.ndarray):
        out, x_node = self._graph(x)
        g = ad.grad(out, x_node)
        return float(out.value), g


def _make_correction(spec, weights, start_layer, label, targets_flat,
                     z_target, grad_z_est, grad_w_obs, mu):
    from .network import grad_circulant_expand
    layer = spec.layers[start_layer]
    shape = spec.layer_input_shapes()[start_layer]
    gmat = grad_circulant_expand(grad_z_est, layer, shape)
    return SoftCorrection(
        spec=spec, weights=weights, start_layer=start_layer, label=label,
        target=targets_flat, mu1=mu[0], mu2=mu[1], mu3=mu[2],
        z_target=z_target, grad_matrix=gmat,
        grad_w_target=np.asarray(grad_w_obs, float).ravel())


def hybrid_objective(x, spec, weights, label, target_grads, system: LayerSystem,
                     mu1, mu2, mu3, start_layer) -> float:
    """Soft-constraint correction objective at one layer (reference form).

    `target_grads` are (grad_w, grad_b) pairs for layers >= start_layer;
    `system` supplies the u/v residual term directly.
    """
    corr = _ref_correction(x, spec, weights, label, target_grads, system,
                           mu1, mu2, mu3, start_layer)
    val = corr.value(np.asarray(x, float).ravel())
    return val


def hybrid_objective_gradient(x, spec, weights, label, target_grads,
                              system: LayerSystem, mu1, mu2, mu3, start_layer):
    corr = _ref_correction(x, spec, weights, label, target_grads, system,
                           mu1, mu2, mu3, start_layer)
    return corr.value_and_grad(np.asarray(x, float).ravel())


def _ref_correction(x, spec, weights, label, target_grads, system,
                    mu1, mu2, mu3, start_layer):
    layer = spec.layers[start_layer]
    geom = conv_geometry(layer, spec.layer_input_shapes()[start_layer])
    z_target = system.v[:geom.out_len]
    grad_w_obs = system.v[geom.out_len:]
    gmat = system.u[geom.out_len:, :geom.n]
    return SoftCorrection(
        spec=spec, weights=weights, start_layer=start_layer, label=label,
        target=flatten_gradients(target_grads), mu1=mu1, mu2=mu2, mu3=mu3,
        z_target=z_target, grad_matrix=gmat,
        grad_w_target=np.asarray(grad_w_obs, float).ravel())


# ---------------------------------------------------------------------------
# optimizer


def adam_minimize(fun, x0: np.ndarray, iterations: int, step: float = 0.001,
                  beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Adam on fun(x) -> (value, grad); returns the best-objective iterate.

    Deterministic given x0.  The best-iterate rule guards against the
    late-iterate regressions common in nonconvex gradient matching.
    """
    x = np.asarray(x0, float).copy()
    if iterations <= 0:
        return x, {"best_value": None, "evaluations": 0, "history": []}
    value, g = fun(x)
    if not np.isfinite(value):
        raise NumericsError("objective not finite at the initial point")
    best_x, best_val = x.copy(), value
    history = [value]
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    for t in range(1, iterations + 1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mh = m / (1 - beta1 ** t)
        vh = v / (1 - beta2 ** t)
        x = x - step * mh / (np.sqrt(vh) + eps)
        value, g = fun(x)
        if np.isfinite(value) and value < best_val:
            best_val, best_x = value, x.copy()
        history.append(value)
    return best_x, {"best_value": best_val, "evaluations": iterations + 1,
                    "history": history}


# ---------------------------------------------------------------------------
# hyperparameters and reports


@dataclass
class HybridHyperparams:
    """Per-conv-layer correction budgets: (iterations, mu1, mu2, mu3).

    Indexed by the conv layer's position in the network (0 = first conv).
    """

    per_layer: dict
    step: float = 0.001

    @classmethod
    def defaults(cls, step: float = 0.001) -> "HybridHyperparams":
        # first layer gets the largest budget; deeper layers lean on the
        # linear system more heavily
        return cls(per_layer={
            0: (10000, 1.0, 1.0, 0.05),
            1: (8000, 1.0, 1.0, 0.1),
            "other": (1000, 10.0, 0.1, 1.0),
        }, step=step)

    @classmethod
    def zero_budget(cls) -> "HybridHyperparams":
        return cls(per_layer={"other": (0, 0.0, 0.0, 0.0)})

    def for_layer(self, conv_index: int):
        entry = self.per_layer.get(conv_index, self.per_layer.get("other"))
        if entry is None:
            raise ShapeError(f"no hyperparameters for conv layer {conv_index}")
        iters, mu1, mu2, mu3 = entry
        if iters < 0 or mu1 < 0 or mu2 < 0 or mu3 < 0:
            raise ShapeError("iteration counts and weights must be nonnegative")
        return entry

    def scaled(self, factor: float) -> "HybridHyperparams":
        """Same weights with iteration counts scaled (for quick runs)."""
        per = {k: (int(round(v[0] * factor)), v[1], v[2], v[3])
               for k, v in self.per_layer.items()}
        return HybridHyperparams(per_layer=per, step=self.step)


@dataclass
class ReconstructionReport:
    method: str
    image: np.ndarray
    layer_records: list = field(default_factory=list)
    iterations_used: int = 0
    wall_time: float = 0.0
    seed: int | None = None
    flags: list = field(default_factory=list)
    init_info: str = ""


# ---------------------------------------------------------------------------
# reconstruction methods


def _observed_slices(spec, observed, start_layer):
    return [(observed.grad_w[j], observed.grad_b[j])
            for j in range(start_layer, len(spec.layers))]


def hybrid_reconstruct(spec: NetworkSpec, weights: WeightSet, observed,
                       label: int, hyperparams: HybridHyperparams | None = None,
                       seed: int | None = None) -> ReconstructionReport:
    """Layer-by-layer reconstruction with soft-constraint correction.

    Walks backward from the FC layer: the FC input comes from the
    closed-form inversion; each conv layer's input is the minimum-norm
    solution of its block system, then corrected by Adam on the
    gradient-matching objective for the configured number of iterations.
    `observed` only needs per-layer grad_w/grad_b lists.
    """
    if hyperparams is None:
        hyperparams = HybridHyperparams.defaults()
    t0 = time.perf_counter()
    d = len(spec.layers)
    shapes = spec.layer_input_shapes()
    report = ReconstructionReport(method="hybrid", image=None, seed=seed,
                                  init_info="fc closed-form seed")
    if spec.layers[-1].kind != "fc":
        raise ShapeError("reconstruction expects a final fully-connected layer")

    # final layer: closed-form inversion; with a bias the pre-activation
    # gradient is observed directly as the bias gradient
    fc = spec.layers[-1]
    lw = weights[d - 1]
    if observed.grad_b[d - 1] is None:
        raise NotInvertibleError(
            "bias-free final layer: pre-activation gradient unobservable")
    dz = np.asarray(observed.grad_b[d - 1], float)
    estimate = fc_invert(observed.grad_w[d - 1], dz)
    report.layer_records.append({
        "layer": d - 1, "kind": "fc", "residual_ls": 0.0,
        "residual_final": 0.0, "iterations": 0, "objective_final": None})
    gx = lw.weight.T @ dz  # gradient w.r.t. the FC input

    total_iters = 0
    for i in range(d - 2, -1, -1):
        layer = spec.layers[i]
        if layer.kind != "conv":
            raise ShapeError("only conv layers may precede the final FC layer")
        geom = conv_geometry(layer, shapes[i])
        x_next = np.clip(estimate, -1.0 + TANH_CLAMP, 1.0 - TANH_CLAMP) \
            if layer.activation == "tanh" else estimate
        if layer.activation == "tanh":
            dz = gx * (1.0 - x_next ** 2)
            z_est = np.arctanh(x_next)
        else:
            dz = gx.copy()
            z_est = x_next.copy()
        system = build_layer_system(
            layer, weights[i].weight, x_next, observed.grad_w[i], dz,
            shapes[i], bias=weights[i].bias, layer_index=i)
        x_ls = min_norm_lstsq(system)
        if system.augmented:
            x_ls = x_ls[:-1]
        res_ls = system.residual(np.append(x_ls, 1.0) if system.augmented else x_ls)

        iters, mu1, mu2, mu3 = hyperparams.for_layer(i)
        record = {"layer": i, "kind": "conv", "residual_ls": res_ls,
                  "iterations": iters, "rank": system.numeric_rank}
        if iters > 0:
            corr = _make_correction(
                spec, weights, i, label,
                flatten_gradients(_observed_slices(spec, observed, i)),
                z_est, dz, observed.grad_w[i], (mu1, mu2, mu3))
            x_bar, info = adam_minimize(corr.value_and_grad, x_ls, iters,
                                        step=hyperparams.step)
            if corr.zero_grad_seen:
                report.flags.append(f"layer {i}: gradient-match term skipped "
                                    "(zero gradient vector)")
            record["objective_final"] = info["best_value"]
            total_iters += iters
        else:
            x_bar = x_ls
            record["objective_final"] = None
        record["residual_final"] = system.residual(
            np.append(x_bar, 1.0) if system.augmented else x_bar)
        report.layer_records.append(record)
        estimate = x_bar
        gx = conv_apply_transpose(geom, weights[i].weight, dz)

    report.image = estimate
    report.iterations_used = total_iters
    report.wall_time = time.perf_counter() - t0
    return report


def rgap_reconstruct(spec: NetworkSpec, weights: WeightSet, observed,
                     label: int, seed: int | None = None) -> ReconstructionReport:
    """Pure least-squares chain: the hybrid method with zero correction."""
    report = hybrid_reconstruct(spec, weights, observed, label,
                                HybridHyperparams.zero_budget(), seed=seed)
    report.method = "rgap"
    return report


def _matching_attack(spec, weights, observed, label, iterations, seed, step,
                     objective, method, init_info):
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    n = int(np.prod(spec.input_shape))
    x0 = rng.uniform(0.0, 1.0, size=n)
    x, info = adam_minimize(objective, x0, iterations, step=step)
    return ReconstructionReport(
        method=method, image=x,
        layer_records=[{"layer": 0, "kind": "image",
                        "objective_final": info["best_value"],
                        "iterations": iterations}],
        iterations_used=iterations, wall_time=time.perf_counter() - t0,
        seed=seed, init_info=init_info)


def dlg_reconstruct(spec: NetworkSpec, weights: WeightSet, observed,
                    label: int, iterations: int = 300, seed: int = 0,
                    step: float = 0.001) -> ReconstructionReport:
    """Gradient matching with the L2 distance, label held fixed.

    Uses Adam rather than the original second-order optimizer so all
    methods share one optimizer; divergence is reported, not raised.
    """
    target = flatten_gradients(_observed_slices(spec, observed, 0))

    def objective(x):
        x_node = ad.Node(x)
        grad_nodes, _ = _gradient_graph(spec, weights, x_node, 0, label)
        diff = ad.sub(ad.concat(grad_nodes), ad.Node(target))
        out = ad.sumsq(diff)
        return float(out.value), ad.grad(out, x_node)

    return _matching_attack(spec, weights, observed, label, iterations, seed,
                            step, objective, "dlg",
                            "uniform [0,1] dummy image, Adam instead of L-BFGS")


def cosinetv_reconstruct(spec: NetworkSpec, weights: WeightSet, observed,
                         label: int, iterations: int = 4800, seed: int = 0,
                         step: float = 0.001,
                         tv_weight: float = 0.01) -> ReconstructionReport:
    """Gradient matching with cosine distance plus a TV regularizer."""
    target = flatten_gradients(_observed_slices(spec, observed, 0))
    tnorm = np.linalg.norm(target)
    shape = spec.input_shape
    tv_scale = tv_weight / _tv_terms(shape)
    flags = []

    def objective(x):
        x_node = ad.Node(x)
        grad_nodes, _ = _gradient_graph(spec, weights, x_node, 0, label)
        g = ad.concat(grad_nodes)
        gnorm_sq = ad.sumsq(g)
        tv = ad.scale(ad.total_variation_node(x_node, shape), tv_scale)
        if gnorm_sq.value < ZERO_GRAD_FLOOR or tnorm == 0.0:
            if not flags:
                flags.append("gradient-match term skipped (zero gradient vector)")
            out = tv
        else:
            cos = ad.mul(ad.dot_const(target, g),
                         ad.reciprocal(ad.scale(ad.sqrt(gnorm_sq), tnorm)))
            out = ad.add(ad.sub(ad.Node(1.0), cos), tv)
        return float(out.value), ad.grad(out, x_node)

    report = _matching_attack(spec, weights, observed, label, iterations, seed,
                              step, objective, "cosinetv",
                              f"uniform [0,1] dummy image, tv_weight={tv_weight}")
    report.flags.extend(flags)
    return report

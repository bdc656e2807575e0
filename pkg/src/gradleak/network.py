"""Deterministic forward/backward engine for shallow conv+FC classifiers.

Everything works on flattened vectors in channel-major (channel, row, col)
order, double precision throughout.  Convolutions can be expanded to their
dense circulant matrix form, and the gradient of the loss w.r.t. a conv
kernel can likewise be expressed as a dense matrix acting on the layer
input; both expansions share one geometry helper so the flattening
convention cannot drift between them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AmbiguityError, NumericsError, ShapeError, UsageError

TANH_CLAMP = 1e-6  # pre-atanh clamp to keep estimates off +/-1


# ---------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" | "fc"
    kernel_width: int
    in_channels: int
    out_channels: int
    stride: int = 1
    padding: int = 0
    activation: str = "tanh"  # "tanh" | "identity"
    has_bias: bool = False

    def __post_init__(self):
        if self.kind not in ("conv", "fc"):
            raise ShapeError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ("tanh", "identity"):
            raise ShapeError(f"unknown activation {self.activation!r}")
        if self.kind == "conv":
            if self.kernel_width < 1 or self.stride < 1 or self.padding < 0:
                raise ShapeError("conv layer needs kernel_width>=1, stride>=1, padding>=0")


def conv_layer(kernel_width, in_channels, out_channels, stride=1, padding=0,
               activation="tanh", has_bias=False) -> LayerSpec:
    return LayerSpec("conv", kernel_width, in_channels, out_channels,
                     stride, padding, activation, has_bias)


def fc_layer(in_features, out_features, activation="identity", has_bias=True) -> LayerSpec:
    return LayerSpec("fc", 0, in_features, out_features, 1, 0, activation, has_bias)


def conv_output_shape(layer: LayerSpec, input_shape):
    """Spatial output shape (out_channels, Ho, Wo) of a conv layer."""
    c, h, w = input_shape
    if c != layer.in_channels:
        raise ShapeError(f"conv expects {layer.in_channels} input channels, got {c}")
    k, s, p = layer.kernel_width, layer.stride, layer.padding
    # floor semantics: trailing rows/cols that no window reaches are dropped
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv geometry k={k} s={s} p={p} does not fit a {h}x{w} input")
    return (layer.out_channels, ho, wo)


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_shape: tuple  # (C, H, W)
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers or self.layers[-1].kind != "fc":
            raise ShapeError("network must end with a fully-connected layer")
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv":
                shape = conv_output_shape(layer, shape)
            else:
                n = int(np.prod(shape))
                if layer.in_channels != n:
                    raise ShapeError(
                        f"layer {i}: fc expects input dim {layer.in_channels}, "
                        f"previous layer produces {n}")
                shape = (layer.out_channels,)
        if shape != (self.num_classes,):
            raise ShapeError("final layer output does not match num_classes")

    def layer_input_shapes(self):
        """Per-layer input shapes; conv shapes are (C,H,W), fc shapes are (n,)."""
        shapes = []
        shape = self.input_shape
        for layer in self.layers:
            shapes.append(shape)
            if layer.kind == "conv":
                shape = conv_output_shape(layer, shape)
            else:
                shape = (layer.out_channels,)
        return shapes

    def layer_input_dims(self):
        return [int(np.prod(s)) for s in self.layer_input_shapes()]

    @property
    def num_conv_layers(self):
        return sum(1 for l in self.layers if l.kind == "conv")

    def truncate(self, start_layer: int) -> "NetworkSpec":
        """Sub-network whose first layer is `start_layer`."""
        shapes = self.layer_input_shapes()
        shape = shapes[start_layer]
        if len(shape) == 1:
            shape = (shape[0], 1, 1)
        return NetworkSpec(self.layers[start_layer:], shape, self.num_classes)


# ---------------------------------------------------------------------------
# weights


@dataclass
class LayerWeights:
    weight: np.ndarray  # conv: (O, C, k, k); fc: (out, in)
    bias: np.ndarray | None = None


@dataclass
class WeightSet:
    layers: list

    def __getitem__(self, i) -> LayerWeights:
        return self.layers[i]

    def __len__(self):
        return len(self.layers)

    def copy(self) -> "WeightSet":
        return WeightSet([
            LayerWeights(lw.weight.copy(), None if lw.bias is None else lw.bias.copy())
            for lw in self.layers])


def init_weights(spec: NetworkSpec, seed=0) -> WeightSet:
    """Uniform init on [-1/sqrt(fan_in), +1/sqrt(fan_in)], seeded."""
    rng = np.random.default_rng(seed)
    out = []
    for layer in spec.layers:
        if layer.kind == "conv":
            shape = (layer.out_channels, layer.in_channels,
                     layer.kernel_width, layer.kernel_width)
            fan_in = layer.in_channels * layer.kernel_width ** 2
        else:
            shape = (layer.out_channels, layer.in_channels)
            fan_in = layer.in_channels
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=shape)
        b = rng.uniform(-bound, bound, size=layer.out_channels) if layer.has_bias else None
        out.append(LayerWeights(w, b))
    return WeightSet(out)


def check_weights(spec: NetworkSpec, weights: WeightSet):
    if len(weights) != len(spec.layers):
        raise ShapeError("weight count does not match layer count")
    for i, (layer, lw) in enumerate(zip(spec.layers, weights.layers)):
        if layer.kind == "conv":
            want = (layer.out_channels, layer.in_channels,
                    layer.kernel_width, layer.kernel_width)
        else:
            want = (layer.out_channels, layer.in_channels)
        if lw.weight.shape != want:
            raise ShapeError(f"layer {i}: weight shape {lw.weight.shape}, expected {want}")
        if not np.all(np.isfinite(lw.weight)):
            raise NumericsError(f"layer {i}: non-finite weights")


# ---------------------------------------------------------------------------
# conv geometry

_GEOM_CACHE = {}


class ConvGeometry:
    """Gather-index bookkeeping for one conv layer on one input shape.

    `idx` has shape (P, C*k*k) with P the number of output spatial
    positions; entry (p, j) is the flat channel-major input index seen by
    kernel element j at output position p, or `n` (a zero slot) when the
    receptive field falls into the padding.
    """

    def __init__(self, layer: LayerSpec, input_shape):
        c, h, w = input_shape
        o, ho, wo = conv_output_shape(layer, input_shape)
        k, s, p = layer.kernel_width, layer.stride, layer.padding
        self.input_shape = (c, h, w)
        self.output_shape = (o, ho, wo)
        self.n = c * h * w
        self.out_len = o * ho * wo
        self.num_pos = ho * wo
        self.ckk = c * k * k

        oy, ox = np.divmod(np.arange(self.num_pos), wo)
        cc, rest = np.divmod(np.arange(self.ckk), k * k)
        ky, kx = np.divmod(rest, k)
        iy = oy[:, None] * s - p + ky[None, :]
        ix = ox[:, None] * s - p + kx[None, :]
        valid = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
        idx = cc[None, :] * h * w + iy * w + ix
        self.idx = np.where(valid, idx, self.n)


def conv_geometry(layer: LayerSpec, input_shape) -> ConvGeometry:
    key = (layer.kernel_width, layer.in_channels, layer.out_channels,
           layer.stride, layer.padding, tuple(input_shape))
    geom = _GEOM_CACHE.get(key)
    if geom is None:
        geom = _GEOM_CACHE[key] = ConvGeometry(layer, input_shape)
    return geom


def _patches(geom: ConvGeometry, x: np.ndarray) -> np.ndarray:
    """im2col matrix of shape (P, C*k*k); padding reads the appended zero."""
    return np.append(x, 0.0)[geom.idx]


def conv_apply(geom: ConvGeometry, kernel: np.ndarray, x: np.ndarray) -> np.ndarray:
    """flatten(conv(x)) via im2col; equals circulant_expand(...) @ x."""
    kf = kernel.reshape(kernel.shape[0], -1)
    return (kf @ _patches(geom, x).T).ravel()


def conv_apply_transpose(geom: ConvGeometry, kernel: np.ndarray, dz: np.ndarray) -> np.ndarray:
    """W^T dz for the circulant form W, without materializing W."""
    kf = kernel.reshape(kernel.shape[0], -1)
    m = kf.T @ dz.reshape(kernel.shape[0], geom.num_pos)  # (CKK, P)
    out = np.zeros(geom.n + 1)
    np.add.at(out, geom.idx.ravel(), m.T.ravel())
    return out[:geom.n]


def conv_weight_grad(geom: ConvGeometry, dz: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Flat kernel gradient Sum_p dz[o,p] * x[patch(p,j)], shape (O*C*k*k,)."""
    dzm = dz.reshape(-1, geom.num_pos)
    return (dzm @ _patches(geom, x)).ravel()


def circulant_expand(layer: LayerSpec, kernel: np.ndarray, input_shape) -> np.ndarray:
    """Dense circulant matrix W with W @ flatten(x) = flatten(conv(x))."""
    if layer.kind != "conv":
        raise UsageError("circulant_expand requires a conv layer")
    geom = conv_geometry(layer, input_shape)
    o = layer.out_channels
    kf = kernel.reshape(o, geom.ckk)
    w = np.zeros((geom.out_len, geom.n + 1))
    rows = (np.arange(o)[:, None, None] * geom.num_pos
            + np.arange(geom.num_pos)[None, :, None])  # (O, P, 1)
    rows = np.broadcast_to(rows, (o, geom.num_pos, geom.ckk))
    cols = np.broadcast_to(geom.idx[None, :, :], rows.shape)
    vals = np.broadcast_to(kf[:, None, :], rows.shape)
    np.add.at(w, (rows.ravel(), cols.ravel()), vals.ravel())
    return w[:, :geom.n]


def grad_circulant_expand(grad_z: np.ndarray, layer: LayerSpec, input_shape) -> np.ndarray:
    """Dense matrix G with G @ flatten(x) = flatten(kernel gradient).

    Row (o,c,a,b) accumulates grad_z over every output position where that
    kernel element touches the input.
    """
    if layer.kind != "conv":
        raise UsageError("grad_circulant_expand requires a conv layer")
    geom = conv_geometry(layer, input_shape)
    o = layer.out_channels
    if grad_z.shape != (geom.out_len,):
        raise ShapeError(
            f"grad_z has length {grad_z.shape}, expected ({geom.out_len},)")
    gz = grad_z.reshape(o, geom.num_pos)
    g = np.zeros((o * geom.ckk, geom.n + 1))
    rows = (np.arange(o)[:, None, None] * geom.ckk
            + np.arange(geom.ckk)[None, None, :])  # (O, 1, CKK)
    rows = np.broadcast_to(rows, (o, geom.num_pos, geom.ckk))
    cols = np.broadcast_to(geom.idx[None, :, :], rows.shape)
    vals = np.broadcast_to(gz[:, :, None], rows.shape)
    np.add.at(g, (rows.ravel(), cols.ravel()), vals.ravel())
    return g[:, :geom.n]


# ---------------------------------------------------------------------------
# activations


def activation_apply(kind: str, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise NumericsError("non-finite input to activation")
    if kind == "tanh":
        return np.tanh(z)
    if kind == "identity":
        return z.copy()
    raise UsageError(f"unknown activation {kind!r}")


def activation_invert(kind: str, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise NumericsError("non-finite input to activation inverse")
    if kind == "tanh":
        return np.arctanh(np.clip(x, -1.0 + TANH_CLAMP, 1.0 - TANH_CLAMP))
    if kind == "identity":
        return x.copy()
    raise UsageError(f"unknown activation {kind!r}")


def activation_deriv(kind: str, post: np.ndarray) -> np.ndarray:
    """Derivative of the activation expressed through its output value."""
    if kind == "tanh":
        return 1.0 - post ** 2
    if kind == "identity":
        return np.ones_like(post)
    raise UsageError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# forward / loss / backward


@dataclass
class ForwardTrace:
    xs: list  # xs[i] = flattened input to layer i; xs[-1] = network output
    zs: list  # zs[i] = pre-activation of layer i
    logits: np.ndarray
    loss: float | None = None
    label: int | None = None


def forward(spec: NetworkSpec, weights: WeightSet, image: np.ndarray) -> ForwardTrace:
    check_weights(spec, weights)
    x = np.asarray(image, dtype=float).ravel()
    shapes = spec.layer_input_shapes()
    if x.size != int(np.prod(spec.input_shape)):
        raise ShapeError(
            f"image length {x.size} != input size {int(np.prod(spec.input_shape))}")
    xs, zs = [x], []
    for i, layer in enumerate(spec.layers):
        lw = weights[i]
        if layer.kind == "conv":
            geom = conv_geometry(layer, shapes[i])
            if x.size != geom.n:
                raise ShapeError(f"layer {i}: input length {x.size}, expected {geom.n}")
            z = conv_apply(geom, lw.weight, x)
            if lw.bias is not None:
                z += np.repeat(lw.bias, geom.num_pos)
        else:
            if x.size != layer.in_channels:
                raise ShapeError(
                    f"layer {i}: input length {x.size}, expected {layer.in_channels}")
            z = lw.weight @ x
            if lw.bias is not None:
                z = z + lw.bias
        x = activation_apply(layer.activation, z)
        zs.append(z)
        xs.append(x)
    return ForwardTrace(xs=xs, zs=zs, logits=xs[-1])


def cross_entropy_loss(logits: np.ndarray, label: int) -> float:
    logits = np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(logits)):
        raise NumericsError("non-finite logits")
    if not 0 <= label < logits.size:
        raise ShapeError(f"label {label} out of range for {logits.size} classes")
    m = logits.max()
    lse = m + np.log(np.exp(logits - m).sum())
    return float(lse - logits[label])


def softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max())
    return e / e.sum()


@dataclass
class GradientBundle:
    grad_w: list  # per layer, same shape as the weight array
    grad_b: list  # per layer, vector or None
    grad_z: list  # per layer, flat vector
    grad_x: list  # per layer, gradient w.r.t. the layer input
    loss: float = 0.0


def backward(spec: NetworkSpec, weights: WeightSet, trace: ForwardTrace,
             label: int) -> GradientBundle:
    """Reverse pass; gradients of cross-entropy at `label` w.r.t. everything."""
    shapes = spec.layer_input_shapes()
    d = len(spec.layers)
    grad_w = [None] * d
    grad_b = [None] * d
    grad_zs = [None] * d
    grad_xs = [None] * d

    loss = cross_entropy_loss(trace.logits, label)
    gx = softmax(trace.logits).copy()
    gx[label] -= 1.0  # gradient w.r.t. final pre-activation through identity
    # gx enters layer i as the gradient w.r.t. x^(i+1)
    for i in range(d - 1, -1, -1):
        layer = spec.layers[i]
        dz = gx * activation_deriv(layer.activation, trace.xs[i + 1])
        x_in = trace.xs[i]
        lw = weights[i]
        if layer.kind == "conv":
            geom = conv_geometry(layer, shapes[i])
            grad_w[i] = conv_weight_grad(geom, dz, x_in).reshape(lw.weight.shape)
            if lw.bias is not None:
                grad_b[i] = dz.reshape(layer.out_channels, geom.num_pos).sum(axis=1)
            gx = conv_apply_transpose(geom, lw.weight, dz)
        else:
            grad_w[i] = np.outer(dz, x_in)
            if lw.bias is not None:
                grad_b[i] = dz.copy()
            gx = lw.weight.T @ dz
        grad_zs[i] = dz
        grad_xs[i] = gx
    return GradientBundle(grad_w=grad_w, grad_b=grad_b, grad_z=grad_zs,
                          grad_x=grad_xs, loss=loss)


def collect_gradients(spec: NetworkSpec, weights: WeightSet, image: np.ndarray,
                      label: int) -> GradientBundle:
    """One forward/backward pass; what a federated client would share."""
    trace = forward(spec, weights, image)
    return backward(spec, weights, trace, label)


# ---------------------------------------------------------------------------
# label recovery


def label_from_fc_gradients(fc_weight_grad: np.ndarray, floor=1e-12) -> int:
    """Recover the label from the last FC layer's weight gradient.

    For single-example softmax cross-entropy the rows of the gradient are
    x scaled by (p_k - [k == label]); the label row is the only one whose
    scale is negative, so it is the unique row with negative inner product
    against every other nonzero row.
    """
    g = np.asarray(fc_weight_grad, dtype=float)
    if g.ndim != 2:
        raise ShapeError("fc weight gradient must be a matrix")
    gram = g @ g.T
    norms = np.sqrt(np.diag(gram))
    active = norms > floor
    if active.sum() < 2:
        raise AmbiguityError("gradient matrix has no usable sign structure")
    candidates = []
    for k in np.flatnonzero(active):
        others = [j for j in np.flatnonzero(active) if j != k]
        if all(gram[k, j] < 0 for j in others):
            candidates.append(int(k))
    if len(candidates) != 1:
        raise AmbiguityError(
            f"expected exactly one sign-opposed row, found {len(candidates)}")
    return candidates[0]

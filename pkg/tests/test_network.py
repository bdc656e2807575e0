import numpy as np
import pytest

from gradleak import catalog
from gradleak.errors import AmbiguityError, NumericsError, ShapeError
from gradleak.network import (NetworkSpec, WeightSet, activation_apply,
                              activation_invert, backward, circulant_expand,
                              collect_gradients, conv_apply, conv_geometry,
                              conv_layer, cross_entropy_loss, fc_layer,
                              forward, grad_circulant_expand, init_weights,
                              label_from_fc_gradients)

from conftest import smooth_image, tiny_spec, tiny_spec_3layer


# ---------------------------------------------------------------------------
# forward


def test_forward_zero_weights_gives_zero_activations():
    spec = tiny_spec()
    w = init_weights(spec, seed=0)
    for lw in w.layers:
        lw.weight[:] = 0
        if lw.bias is not None:
            lw.bias[:] = 0
    tr = forward(spec, w, np.ones(72))
    assert np.all(tr.zs[0] == 0)
    assert np.all(tr.xs[1] == 0)
    assert np.all(tr.logits == 0)


def test_forward_identity_fc_passes_input_through():
    spec = NetworkSpec((fc_layer(5, 5),), (5, 1, 1), 5)
    w = init_weights(spec, seed=0)
    w[0].weight[:] = np.eye(5)
    w[0].bias[:] = 0
    v = np.linspace(-1, 1, 5)
    assert np.allclose(forward(spec, w, v).logits, v)


def test_forward_cnn2_v1_layer_widths_match_published_fc_input():
    spec = catalog.get("cnn2_v1")
    w = init_weights(spec, seed=0)
    tr = forward(spec, w, smooth_image(0))
    assert tr.xs[1].size == 5400


def test_forward_shape_mismatch_names_layer():
    spec = tiny_spec()
    w = init_weights(spec, seed=0)
    with pytest.raises(ShapeError):
        forward(spec, w, np.ones(10))


# ---------------------------------------------------------------------------
# loss


def test_cross_entropy_uniform_logits():
    assert cross_entropy_loss(np.zeros(10), 3) == pytest.approx(np.log(10))


def test_cross_entropy_confident_prediction():
    logits = np.zeros(10)
    logits[4] = 20.0
    assert cross_entropy_loss(logits, 4) < 1e-7


def test_cross_entropy_hand_value():
    # -log softmax([1,2,3])[2] = log(e^1 + e^2 + e^3) - 3
    assert cross_entropy_loss(np.array([1.0, 2.0, 3.0]), 2) == pytest.approx(
        0.40761, abs=1e-5)


def test_cross_entropy_rejects_nonfinite():
    with pytest.raises(NumericsError):
        cross_entropy_loss(np.array([np.nan, 0.0]), 0)


# ---------------------------------------------------------------------------
# backward


def _finite_diff_check(spec, seed, n_coords=12, h=1e-4, tol=1e-5):
    rng = np.random.default_rng(seed)
    w = init_weights(spec, seed=seed)
    x = rng.uniform(0, 1, int(np.prod(spec.input_shape)))
    label = int(rng.integers(spec.num_classes))
    bundle = collect_gradients(spec, w, x, label)

    def loss_at(img):
        return cross_entropy_loss(forward(spec, w, img).logits, label)

    for c in rng.choice(x.size, min(n_coords, x.size), replace=False):
        xp, xm = x.copy(), x.copy()
        xp[c] += h
        xm[c] -= h
        fd = (loss_at(xp) - loss_at(xm)) / (2 * h)
        assert abs(fd - bundle.grad_x[0][c]) <= tol * max(abs(fd), 1e-6)

    for li, lw in enumerate(w.layers):
        flat = lw.weight.ravel()
        for c in rng.choice(flat.size, min(6, flat.size), replace=False):
            wp, wm = w.copy(), w.copy()
            wp[li].weight.ravel()[c] += h
            wm[li].weight.ravel()[c] -= h
            fd = (cross_entropy_loss(forward(spec, wp, x).logits, label)
                  - cross_entropy_loss(forward(spec, wm, x).logits, label)) / (2 * h)
            assert abs(fd - bundle.grad_w[li].ravel()[c]) <= tol * max(abs(fd), 1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences_tiny(seed):
    _finite_diff_check(tiny_spec(), seed)


@pytest.mark.parametrize("seed", range(3))
def test_backward_matches_finite_differences_3layer(seed):
    _finite_diff_check(tiny_spec_3layer(), seed)


def test_backward_zero_at_confident_minimum():
    spec = NetworkSpec((fc_layer(4, 4),), (4, 1, 1), 4)
    w = init_weights(spec, seed=0)
    w[0].weight[:] = 0
    w[0].bias[:] = np.array([50.0, 0.0, 0.0, 0.0])
    bundle = collect_gradients(spec, w, np.ones(4) * 0.5, 0)
    assert np.abs(bundle.grad_w[0]).max() < 1e-7
    assert np.abs(bundle.grad_b[0]).max() < 1e-7


def test_fc_bias_gradient_equals_preactivation_gradient():
    spec = tiny_spec()
    w = init_weights(spec, seed=2)
    bundle = collect_gradients(spec, w, smooth_image(2, (2, 6, 6)), 1)
    assert np.allclose(bundle.grad_b[1], bundle.grad_z[1])


def test_gradient_constraint_identity():
    # circulant form of grad_z applied to the input reproduces grad_w
    spec = tiny_spec()
    w = init_weights(spec, seed=3)
    x = smooth_image(3, (2, 6, 6))
    bundle = collect_gradients(spec, w, x, 0)
    g = grad_circulant_expand(bundle.grad_z[0], spec.layers[0], (2, 6, 6))
    assert np.abs(g @ x - bundle.grad_w[0].ravel()).max() < 1e-12


# ---------------------------------------------------------------------------
# circulant expansion


def test_circulant_pointwise_conv_is_scaled_identity():
    layer = conv_layer(1, 1, 1)
    kernel = np.full((1, 1, 1, 1), 2.5)
    w = circulant_expand(layer, kernel, (1, 3, 3))
    assert np.allclose(w, 2.5 * np.eye(9))


def test_circulant_matches_direct_convolution(rng):
    layer = conv_layer(3, 1, 1)
    kernel = rng.standard_normal((1, 1, 3, 3))
    w = circulant_expand(layer, kernel, (1, 4, 4))
    assert w.shape == (4, 16)
    for _ in range(100):
        x = rng.standard_normal(16)
        img = x.reshape(4, 4)
        direct = np.array([
            np.sum(kernel[0, 0] * img[r:r + 3, c:c + 3])
            for r in range(2) for c in range(2)])
        assert np.abs(w @ x - direct).max() < 1e-12


def test_circulant_cnn2_v2_shape_matches_published_fc_input():
    spec = catalog.get("cnn2_v2")
    w = init_weights(spec, seed=0)
    mat = circulant_expand(spec.layers[0], w[0].weight, (3, 32, 32))
    assert mat.shape == (1350, 3072)


def test_circulant_agrees_with_fast_apply(rng):
    spec = catalog.get("cnn3_v2")
    w = init_weights(spec, seed=1)
    geom = conv_geometry(spec.layers[0], (3, 32, 32))
    mat = circulant_expand(spec.layers[0], w[0].weight, (3, 32, 32))
    x = rng.standard_normal(3072)
    assert np.abs(mat @ x - conv_apply(geom, w[0].weight, x)).max() < 1e-12


def test_circulant_rejects_fc_layer():
    from gradleak.errors import UsageError
    with pytest.raises(UsageError):
        circulant_expand(fc_layer(4, 4), np.zeros((4, 4)), (4, 1, 1))


def test_grad_circulant_zero_gradient_gives_zero_matrix():
    layer = conv_layer(3, 1, 1)
    g = grad_circulant_expand(np.zeros(4), layer, (1, 4, 4))
    assert g.shape == (9, 16)
    assert np.all(g == 0)


def test_grad_circulant_row_count_cnn2_v1():
    spec = catalog.get("cnn2_v1")
    g = grad_circulant_expand(np.zeros(5400), spec.layers[0], (3, 32, 32))
    assert g.shape[0] == 6 * 3 * 3 * 3


def test_grad_circulant_length_mismatch():
    with pytest.raises(ShapeError):
        grad_circulant_expand(np.zeros(5), conv_layer(3, 1, 1), (1, 4, 4))


# ---------------------------------------------------------------------------
# activations


def test_tanh_invert_roundtrip():
    assert activation_invert("tanh", np.array([0.0]))[0] == 0.0
    z = np.array([1.2345])
    assert activation_invert("tanh", activation_apply("tanh", z))[0] == pytest.approx(
        1.2345, abs=1e-6)


def test_identity_invert_is_exact():
    v = np.linspace(-3, 3, 7)
    assert np.array_equal(activation_invert("identity", v), v)


def test_tanh_roundtrip_range():
    z = np.linspace(-5, 5, 101)
    back = activation_invert("tanh", activation_apply("tanh", z))
    assert np.abs(back - z).max() < 1e-6


def test_activation_rejects_nonfinite():
    with pytest.raises(NumericsError):
        activation_invert("tanh", np.array([np.inf]))


# ---------------------------------------------------------------------------
# label recovery


def test_label_recovery_tiny():
    spec = tiny_spec()
    w = init_weights(spec, seed=9)
    bundle = collect_gradients(spec, w, smooth_image(9, (2, 6, 6)), 2)
    assert label_from_fc_gradients(bundle.grad_w[1]) == 2


def test_label_recovery_cnn2_known_label():
    spec = catalog.get("cnn2_v1")
    w = init_weights(spec, seed=4)
    bundle = collect_gradients(spec, w, smooth_image(4), 7)
    assert label_from_fc_gradients(bundle.grad_w[1]) == 7


def test_label_recovery_monte_carlo():
    spec = tiny_spec(num_classes=6)
    rng = np.random.default_rng(77)
    for trial in range(100):
        w = init_weights(spec, seed=1000 + trial)
        x = rng.uniform(0, 1, 72)
        label = int(rng.integers(6))
        bundle = collect_gradients(spec, w, x, label)
        assert label_from_fc_gradients(bundle.grad_w[1]) == label


def test_label_recovery_zero_matrix_is_ambiguous():
    with pytest.raises(AmbiguityError):
        label_from_fc_gradients(np.zeros((10, 48)))


# ---------------------------------------------------------------------------
# weight init


def test_init_weights_bounded_by_fan_in():
    spec = tiny_spec()
    w = init_weights(spec, seed=5)
    assert np.abs(w[0].weight).max() <= 1 / np.sqrt(2 * 9)
    assert np.abs(w[1].weight).max() <= 1 / np.sqrt(48)
    assert w[0].bias is None  # conv bias-free by default
    assert w[1].bias is not None  # fc bias present by default


def test_init_weights_deterministic():
    spec = tiny_spec()
    a, b = init_weights(spec, seed=8), init_weights(spec, seed=8)
    assert np.array_equal(a[0].weight, b[0].weight)

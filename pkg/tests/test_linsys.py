import numpy as np
import pytest

from gradleak.errors import NumericsError, ShapeError
from gradleak.linsys import (LayerSystem, build_layer_system, condition_number,
                             min_norm_lstsq, numeric_rank)
from gradleak.network import (activation_apply, collect_gradients, forward,
                              init_weights)

from conftest import smooth_image, tiny_spec, tiny_spec_3layer


def _system_for(spec, seed, layer=0):
    w = init_weights(spec, seed=seed)
    x = smooth_image(seed, spec.input_shape)
    tr = forward(spec, w, x)
    bundle = collect_gradients(spec, w, x, 1)
    shapes = spec.layer_input_shapes()
    sys = build_layer_system(
        spec.layers[layer], w[layer].weight, tr.xs[layer + 1],
        bundle.grad_w[layer], bundle.grad_z[layer], shapes[layer],
        bias=w[layer].bias, layer_index=layer)
    truth = tr.xs[layer] if layer > 0 else x
    return sys, truth


# ---------------------------------------------------------------------------
# build_layer_system


def test_truth_satisfies_system_exactly():
    sys, truth = _system_for(tiny_spec(), 0)
    assert sys.residual(truth) < 1e-12


def test_truth_satisfies_system_second_layer():
    sys, truth = _system_for(tiny_spec_3layer(), 1, layer=1)
    assert sys.residual(truth) < 1e-10


def test_system_block_shapes():
    spec = tiny_spec()
    sys, _ = _system_for(spec, 2)
    # 48 forward rows (3ch x 4x4) + 54 gradient rows (3*2*9), 72 unknowns
    assert sys.u.shape == (48 + 54, 72)
    assert sys.v.shape == (102,)
    assert not sys.augmented


def test_system_top_block_is_inverted_activation():
    spec = tiny_spec()
    w = init_weights(spec, seed=3)
    x = smooth_image(3, spec.input_shape)
    tr = forward(spec, w, x)
    bundle = collect_gradients(spec, w, x, 0)
    sys = build_layer_system(spec.layers[0], w[0].weight, tr.xs[1],
                             bundle.grad_w[0], bundle.grad_z[0], (2, 6, 6))
    assert np.allclose(sys.v[:48], tr.zs[0], atol=1e-9)


def test_system_bias_augmentation():
    # a biased conv layer appends the bias column and a constant-one unknown
    from gradleak.network import NetworkSpec, conv_layer, fc_layer
    spec = NetworkSpec(
        (conv_layer(3, 2, 3, has_bias=True), fc_layer(48, 4)), (2, 6, 6), 4)
    w = init_weights(spec, seed=5)
    x = smooth_image(5, (2, 6, 6))
    tr = forward(spec, w, x)
    bundle = collect_gradients(spec, w, x, 2)
    sys = build_layer_system(spec.layers[0], w[0].weight, tr.xs[1],
                             bundle.grad_w[0], bundle.grad_z[0], (2, 6, 6),
                             bias=w[0].bias)
    assert sys.augmented
    assert sys.u.shape[1] == 73
    assert sys.residual(np.append(x, 1.0)) < 1e-12


def test_system_rejects_wrong_estimate_length():
    spec = tiny_spec()
    w = init_weights(spec, seed=0)
    with pytest.raises(ShapeError):
        build_layer_system(spec.layers[0], w[0].weight, np.zeros(5),
                           np.zeros(54), np.zeros(48), (2, 6, 6))


def test_system_rejects_wrong_gradient_length():
    spec = tiny_spec()
    w = init_weights(spec, seed=0)
    with pytest.raises(ShapeError):
        build_layer_system(spec.layers[0], w[0].weight, np.zeros(48),
                           np.zeros(54), np.zeros(7), (2, 6, 6))


# ---------------------------------------------------------------------------
# numeric rank


def test_rank_identity():
    assert numeric_rank(np.eye(7)) == 7


def test_rank_rank_one_matrix(rng):
    a = np.outer(rng.standard_normal(20), rng.standard_normal(15))
    assert numeric_rank(a) == 1


def test_rank_known_deficiency(rng):
    basis = rng.standard_normal((30, 11))
    coeff = rng.standard_normal((11, 25))
    assert numeric_rank(basis @ coeff) == 11


def test_rank_zero_matrix():
    assert numeric_rank(np.zeros((4, 9))) == 0


def test_rank_ignores_roundoff_perturbation(rng):
    a = np.outer(rng.standard_normal(40), rng.standard_normal(40))
    a += 1e-15 * rng.standard_normal((40, 40))
    assert numeric_rank(a) == 1


def test_rank_tol_factor_matters():
    s = np.diag([1.0, 1e-12, 1e-16])
    assert numeric_rank(s, tol_factor=100.0) == 2
    assert numeric_rank(s, tol_factor=1e6) == 1


# ---------------------------------------------------------------------------
# condition number


def test_condition_of_identity_is_one():
    assert condition_number(np.eye(5)) == pytest.approx(1.0)


def test_condition_diagonal():
    assert condition_number(np.diag([8.0, 2.0])) == pytest.approx(4.0)


def test_condition_excludes_below_tolerance_singulars():
    # the zero direction must not drive the condition number to infinity
    a = np.diag([1.0, 0.5, 0.0])
    assert condition_number(a) == pytest.approx(2.0)


def test_condition_zero_matrix_raises():
    with pytest.raises(NumericsError):
        condition_number(np.zeros((3, 3)))


# ---------------------------------------------------------------------------
# min_norm_lstsq


def test_lstsq_exact_square_system(rng):
    a = rng.standard_normal((6, 6)) + 3 * np.eye(6)
    x_true = rng.standard_normal(6)
    sys = LayerSystem(u=a, v=a @ x_true, layer_index=0, n_inputs=6)
    x = min_norm_lstsq(sys)
    assert np.abs(x - x_true).max() < 1e-10
    assert sys.numeric_rank == 6
    assert sys.condition_estimate is not None


def test_lstsq_underdetermined_returns_min_norm():
    # u = [1 1], v = [2]: minimum-norm solution is (1, 1)
    sys = LayerSystem(u=np.array([[1.0, 1.0]]), v=np.array([2.0]),
                      layer_index=0, n_inputs=2)
    assert np.allclose(min_norm_lstsq(sys), [1.0, 1.0])


def test_lstsq_inconsistent_minimizes_residual():
    # overdetermined rank-1: x = 1.5 minimizes (x-1)^2 + (x-2)^2
    sys = LayerSystem(u=np.array([[1.0], [1.0]]), v=np.array([1.0, 2.0]),
                      layer_index=0, n_inputs=1)
    assert min_norm_lstsq(sys)[0] == pytest.approx(1.5)


def test_lstsq_recovers_layer_input_full_rank():
    sys, truth = _system_for(tiny_spec(), 7)
    x = min_norm_lstsq(sys)
    if sys.augmented:
        x = x[:-1]
    assert np.abs(x - truth).max() < 1e-8
    assert sys.numeric_rank == 72


def test_lstsq_empty_system_raises():
    sys = LayerSystem(u=np.zeros((0, 0)), v=np.zeros(0), layer_index=2,
                      n_inputs=0)
    with pytest.raises(NumericsError):
        min_norm_lstsq(sys)


def test_residual_reports_l2_norm():
    sys = LayerSystem(u=np.eye(2), v=np.array([1.0, 1.0]), layer_index=0,
                      n_inputs=2)
    assert sys.residual(np.zeros(2)) == pytest.approx(np.sqrt(2.0))

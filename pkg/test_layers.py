import itertools
import math

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.integrate import trapezoid

from app.core.errors import ConfigurationError, InvalidControlError, InvalidLabelError, ShapeError
from app.core.tensor import Tensor4, new_filled
from app.layers.classifier import (
    ClassifierParams,
    classifier_forward,
    classifier_invert,
    classifier_loss_and_grad,
    one_hot,
)
from app.layers.folding import fold_array, fold_backward_control, fold_forward, unfold_array
from app.layers.gmm import (
    LOG_2PI,
    GmmParams,
    draw_components,
    gmm_forward,
    gmm_grad,
    gmm_loss,
    gmm_sample_control,
    neighbourhood_kernel,
    selection_distribution,
)
from app.layers.pooling import pool_backward_control, pool_forward, pool_gradient_array
from app.models.architecture import FoldingParams, PoolingParams
from app.models.sampling import SamplingConfig


def F(fy, fx, dy, dx):
    return FoldingParams(f_y=fy, f_x=fx, delta_y=dy, delta_x=dx)


def P(k, d):
    return PoolingParams(k_y=k, k_x=k, delta_y=d, delta_x=d)


def random_gmm(rng, K, D):
    return GmmParams(
        pi_logits=rng.standard_normal(K),
        centroids=rng.uniform(0.0, 1.0, size=(K, D)),
        precisions=rng.uniform(0.5, 2.0, size=(K, D)),
    )


# Folding

def test_unit_fold_is_identity(rng):
    x = Tensor4(rng.standard_normal((2, 3, 4, 2)))
    out = fold_forward(x, F(1, 1, 1, 1))
    assert out.dims == x.dims
    assert np.array_equal(out.data, x.data)


def test_single_window_channel_dump_order():
    x = Tensor4(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1))
    out = fold_forward(x, F(2, 2, 2, 2))
    assert out.dims == (1, 1, 1, 4)
    assert out.flat.tolist() == [1.0, 2.0, 3.0, 4.0]


def test_fold_output_dims():
    x = new_filled((1, 28, 28, 1), 0.0)
    assert fold_forward(x, F(8, 8, 2, 2)).dims == (1, 11, 11, 64)


def test_overlapping_windows():
    x = Tensor4(np.arange(1.0, 10.0).reshape(1, 3, 3, 1))
    out = fold_forward(x, F(2, 2, 1, 1))
    assert out.dims == (1, 2, 2, 4)
    assert out.data[0, 0, 0].tolist() == [1.0, 2.0, 4.0, 5.0]
    assert out.data[0, 1, 1].tolist() == [5.0, 6.0, 8.0, 9.0]


def test_fold_channel_decomposition(rng):
    """Test c = (dy*f_x + dx)*C_in + c' against the input for every element."""
    p = F(3, 2, 2, 1)
    x = rng.standard_normal((2, 7, 5, 3))
    out = fold_array(x, p)
    n, ho, wo, co = out.shape
    assert (ho, wo, co) == (3, 4, 18)
    for b, h, w, dy, dx, c in itertools.product(range(n), range(ho), range(wo), range(3), range(2), range(3)):
        assert out[b, h, w, (dy * p.f_x + dx) * 3 + c] == x[b, h * p.delta_y + dy, w * p.delta_x + dx, c]


def test_non_overlapping_unfold_roundtrip(rng):
    x = Tensor4(rng.standard_normal((3, 6, 4, 2)))
    p = F(2, 2, 2, 2)
    back = fold_backward_control(fold_forward(x, p), p, x.dims)
    assert np.array_equal(back.data, x.data)


def test_unfold_averages_overlaps():
    a, b, c, d = 1.0, 2.0, 6.0, 10.0
    control = Tensor4(np.array([[a, b], [c, d]]).reshape(1, 1, 2, 2))
    out = fold_backward_control(control, F(1, 2, 1, 1), (1, 1, 3, 1))
    assert out.flat.tolist() == [a, (b + c) / 2, d]


def test_unfold_zero_control():
    out = fold_backward_control(new_filled((2, 2, 2, 4), 0.0), F(2, 2, 1, 1), (2, 3, 3, 1))
    assert out.dims == (2, 3, 3, 1)
    assert not out.data.any()


def test_unfold_dim_mismatch():
    with pytest.raises(ShapeError):
        fold_backward_control(new_filled((1, 2, 2, 3), 0.0), F(2, 2, 1, 1), (1, 3, 3, 1))


def test_fold_gradient_is_adjoint(rng):
    p = F(3, 3, 2, 1)
    x = rng.standard_normal((2, 7, 6, 2))
    y = rng.standard_normal(fold_array(x, p).shape)
    lhs = np.sum(fold_array(x, p) * y)
    rhs = np.sum(x * unfold_array(y, p, x.shape[1:], average=False))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_fold_incompatible_stride():
    with pytest.raises(ConfigurationError):
        fold_forward(new_filled((1, 5, 5, 1), 0.0), F(2, 2, 2, 2))


# Pooling

def test_pool_forward_examples():
    x = Tensor4(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1))
    assert pool_forward(x, P(2, 2)).flat.tolist() == [4.0]

    constant = new_filled((2, 4, 6, 3), 0.25)
    out = pool_forward(constant, P(2, 2))
    assert out.dims == (2, 2, 3, 3)
    assert np.all(out.data == 0.25)

    assert pool_forward(new_filled((1, 26, 26, 25), 0.0), P(2, 2)).dims == (1, 13, 13, 25)


def test_upsampling():
    out = pool_backward_control(Tensor4(np.full((1, 1, 1, 1), 5.0)), P(2, 2), (1, 2, 2, 1))
    assert out.flat.tolist() == [5.0] * 4


def test_unit_pooling_is_identity(rng):
    x = Tensor4(rng.standard_normal((2, 3, 3, 2)))
    assert np.array_equal(pool_forward(x, P(1, 1)).data, x.data)
    assert np.array_equal(pool_backward_control(x, P(1, 1), x.dims).data, x.data)


def test_upsampling_fixed_point(rng):
    blocks = rng.standard_normal((2, 3, 2, 4))
    x = Tensor4(np.repeat(np.repeat(blocks, 2, axis=1), 2, axis=2))
    p = P(2, 2)
    assert np.array_equal(pool_backward_control(pool_forward(x, p), p, x.dims).data, x.data)


def test_pool_gradient_routes_to_first_argmax():
    x = np.array([[1.0, 4.0], [4.0, 2.0]]).reshape(1, 2, 2, 1)
    grad = pool_gradient_array(np.array([7.0]).reshape(1, 1, 1, 1), x, P(2, 2))
    assert grad[0, :, :, 0].tolist() == [[0.0, 7.0], [0.0, 0.0]]


def test_pooled_values_come_from_their_window(rng):
    x = rng.standard_normal((3, 6, 4, 2))
    out = pool_forward(Tensor4(x), P(2, 2)).data
    for n, i, j, c in itertools.product(range(3), range(3), range(2), range(2)):
        window = x[n, 2 * i:2 * i + 2, 2 * j:2 * j + 2, c]
        assert out[n, i, j, c] in window
        assert out[n, i, j, c] == window.max()


def test_pooling_kernel_must_equal_stride():
    with pytest.raises(ValidationError):
        PoolingParams(k_y=3, k_x=3, delta_y=2, delta_x=2)


def test_upsampling_dim_mismatch():
    with pytest.raises(ShapeError):
        pool_backward_control(new_filled((1, 2, 2, 1), 0.0), P(2, 2), (1, 6, 6, 1))


# GMM forward and loss

def test_single_component_activities_are_one(rng):
    g = random_gmm(rng, 1, 3)
    activities, _ = gmm_forward(Tensor4(rng.standard_normal((2, 3, 2, 3))), g)
    assert np.all(activities.data == 1.0)


def test_symmetric_components_split_evenly():
    g = GmmParams(np.zeros(2), np.array([[0.7], [-0.7]]), np.ones((2, 1)))
    activities, _ = gmm_forward(new_filled((1, 1, 1, 1), 0.0), g)
    np.testing.assert_allclose(activities.flat, [0.5, 0.5], rtol=0, atol=1e-15)


def test_standard_normal_at_its_mean():
    x = np.array([0.3, -0.7])
    g = GmmParams(np.zeros(1), x[np.newaxis, :].copy(), np.ones((1, 2)))
    _, loglik = gmm_forward(Tensor4(x.reshape(1, 1, 1, 2)), g)
    assert loglik.dims == (1, 1, 1, 1)
    assert loglik.flat[0] == pytest.approx(-math.log(2 * math.pi), abs=1e-12)
    assert loglik.flat[0] == pytest.approx(-1.837877, abs=1e-6)


def test_forward_matches_scalar_oracle(rng):
    g = random_gmm(rng, 3, 2)
    x = rng.uniform(0.0, 1.0, size=(2, 2, 2, 2))
    activities, loglik = gmm_forward(Tensor4(x), g)
    weights = np.exp(g.pi_logits) / np.exp(g.pi_logits).sum()
    for n, h, w in itertools.product(range(2), range(2), range(2)):
        densities = []
        for k in range(3):
            p = 1.0
            for d in range(2):
                prec = g.precisions[k, d]
                diff = x[n, h, w, d] - g.centroids[k, d]
                p *= math.sqrt(prec / (2 * math.pi)) * math.exp(-0.5 * prec * diff * diff)
            densities.append(p)
        total = sum(densities)
        for k in range(3):
            assert activities.data[n, h, w, k] == pytest.approx(densities[k] / total, rel=1e-10)
        mixture = sum(weights[k] * densities[k] for k in range(3))
        assert loglik.data[n, h, w, 0] == pytest.approx(math.log(mixture), rel=1e-10)


def test_responsibilities_are_normalised(rng):
    g = random_gmm(rng, 7, 5)
    activities, _ = gmm_forward(Tensor4(rng.standard_normal((4, 3, 3, 5)) * 3.0), g)
    np.testing.assert_allclose(activities.data.sum(axis=-1), 1.0, atol=1e-9)


def test_gmm_dim_mismatch(rng):
    with pytest.raises(ShapeError):
        gmm_forward(new_filled((1, 1, 1, 4), 0.0), random_gmm(rng, 2, 3))


def test_full_loss_single_component_at_mean():
    g = GmmParams(np.zeros(1), np.array([[0.2, 0.4]]), np.ones((1, 2)))
    x = Tensor4(np.array([0.2, 0.4]).reshape(1, 1, 1, 2))
    assert gmm_loss(x, g, "full") == pytest.approx(-LOG_2PI, abs=1e-12)


def test_full_loss_is_permutation_invariant(rng):
    g = random_gmm(rng, 4, 3)
    x = Tensor4(rng.uniform(0.0, 1.0, size=(3, 2, 2, 3)))
    order = rng.permutation(4)
    permuted = GmmParams(g.pi_logits[order], g.centroids[order], g.precisions[order])
    assert gmm_loss(x, permuted, "full") == pytest.approx(gmm_loss(x, g, "full"), rel=1e-12)


def test_permuting_components_permutes_activities(rng):
    g = random_gmm(rng, 4, 3)
    x = Tensor4(rng.uniform(0.0, 1.0, size=(3, 2, 2, 3)))
    order = rng.permutation(4)
    permuted = GmmParams(g.pi_logits[order], g.centroids[order], g.precisions[order])
    activities, loglik = gmm_forward(x, g)
    permuted_activities, permuted_loglik = gmm_forward(x, permuted)
    np.testing.assert_allclose(permuted_activities.data, activities.data[..., order], rtol=1e-12)
    np.testing.assert_allclose(permuted_loglik.data, loglik.data, rtol=1e-12)


def test_mixture_density_integrates_to_one(rng):
    g = random_gmm(rng, 3, 2)
    sigma = 1.0 / np.sqrt(g.precisions)
    axes = [
        np.linspace((g.centroids[:, d] - 10.0 * sigma[:, d]).min(), (g.centroids[:, d] + 10.0 * sigma[:, d]).max(), 801)
        for d in range(2)
    ]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    _, loglik = gmm_forward(Tensor4(grid[np.newaxis]), g)
    density = np.exp(loglik.data[0, :, :, 0])
    mass = trapezoid(trapezoid(density, axes[1], axis=1), axes[0])
    assert mass == pytest.approx(1.0, rel=0.01)


def test_loss_is_spatial_mean_of_batch_sum(rng):
    g = random_gmm(rng, 3, 2)
    x = Tensor4(rng.uniform(0.0, 1.0, size=(3, 2, 4, 2)))
    _, loglik = gmm_forward(x, g)
    expected = loglik.data.sum() / 8.0
    assert gmm_loss(x, g, "full") == pytest.approx(expected, rel=1e-12)


def test_max_component_loss_on_a_centroid():
    g = GmmParams(
        np.log(np.array([0.2, 0.8])),
        np.array([[0.0, 0.0], [10.0, 10.0]]),
        np.array([[2.0, 3.0], [1.0, 1.0]]),
    )
    x = Tensor4(np.zeros((1, 1, 1, 2)))
    expected = math.log(0.2) + 0.5 * (math.log(2.0) + math.log(3.0) - 2 * LOG_2PI)
    assert gmm_loss(x, g, "max_component", None) == pytest.approx(expected, rel=1e-12)
    assert gmm_loss(x, g, "max_component", 0.0) == pytest.approx(expected, rel=1e-12)


def test_unknown_loss_mode(rng):
    with pytest.raises(ConfigurationError):
        gmm_loss(new_filled((1, 1, 1, 2), 0.0), random_gmm(rng, 2, 2), "median")


def test_neighbourhood_kernel_rows():
    assert np.array_equal(neighbourhood_kernel(4, None), np.eye(4))
    kernel = neighbourhood_kernel(9, 1.0)
    np.testing.assert_allclose(kernel.sum(axis=1), 1.0, atol=1e-12)
    # the centre of a 3x3 grid is equidistant from its four neighbours
    assert kernel[4, 1] == pytest.approx(kernel[4, 3])
    assert kernel[4, 4] > kernel[4, 1] > kernel[4, 0]


# GMM gradients

def test_centroid_gradient_vanishes_at_the_mean():
    g = GmmParams(np.zeros(1), np.array([[0.5, -0.25, 1.5]]), np.array([[1.0, 2.0, 0.5]]))
    x = Tensor4(g.centroids.reshape(1, 1, 1, 3).copy())
    grads, _ = gmm_grad(x, g, "full")
    np.testing.assert_allclose(grads.d_centroids, 0.0, atol=1e-12)


def test_logit_gradient_sums_to_zero(rng):
    g = random_gmm(rng, 5, 4)
    x = Tensor4(rng.uniform(0.0, 1.0, size=(3, 2, 2, 4)))
    for mode, sigma in (("full", None), ("max_component", 1.0), ("max_component", None)):
        grads, d_x = gmm_grad(x, g, mode, sigma)
        assert abs(grads.d_pi_logits.sum()) < 1e-12
        assert d_x.dims == x.dims


# Component selection

def test_top_one_selects_the_argmax(rng):
    probs = selection_distribution(np.array([[0.1, 0.7, 0.2]]), 1)
    assert probs.tolist() == [[0.0, 1.0, 0.0]]
    draws = draw_components(np.repeat(probs, 500, axis=0), rng)
    assert np.all(draws == 1)


def test_full_width_keeps_the_renormalised_row():
    row = np.array([[0.1, 0.7, 0.2, 0.5]])
    expected = row / row.sum()
    assert np.array_equal(selection_distribution(row, 4), expected)
    assert np.array_equal(selection_distribution(row, 4), selection_distribution(row, None))


def test_negative_entries_are_clipped():
    probs = selection_distribution(np.array([[-1.0, 3.0, 1.0]]), 2)
    assert probs.tolist() == [[0.0, 0.75, 0.25]]


def test_invalid_controls():
    with pytest.raises(InvalidControlError):
        selection_distribution(np.array([[0.0, 0.0, 0.0]]), None)
    with pytest.raises(InvalidControlError):
        selection_distribution(np.array([[-1.0, -2.0]]), 1)
    with pytest.raises(InvalidControlError):
        selection_distribution(np.array([[np.nan, 1.0]]), None)
    with pytest.raises(ConfigurationError):
        selection_distribution(np.array([[0.5, 0.5]]), 3)
    with pytest.raises(ConfigurationError):
        selection_distribution(np.array([[0.5, 0.5]]), 0)


def test_single_component_mean_mode(rng):
    g = GmmParams(np.zeros(1), np.array([[0.3, 0.6]]), np.ones((1, 2)))
    out = gmm_sample_control(None, g, (2, 3), SamplingConfig(top_s=1), rng, count=4)
    assert out.dims == (4, 2, 3, 2)
    assert np.all(out.data == g.centroids[0])


def test_stochastic_single_component_moments(rng):
    g = GmmParams(np.zeros(1), np.zeros((1, 1)), np.ones((1, 1)))
    out = gmm_sample_control(None, g, (1, 1), SamplingConfig(stochastic=True), rng, count=10000).flat
    assert abs(out.mean()) < 4.0 / math.sqrt(10000)
    assert abs(out.var() - 1.0) < 0.1


def test_draws_from_mixing_weights_follow_pi(rng):
    """Test that top-S leaves draws from the mixing weights unrestricted."""
    pi = np.array([0.2, 0.3, 0.5])
    g = GmmParams(np.log(pi), np.array([[0.0], [1.0], [2.0]]), np.ones((3, 1)))
    out = gmm_sample_control(None, g, (1, 1), SamplingConfig(top_s=1), rng, count=10000)
    counts = np.bincount(out.flat.astype(int), minlength=3)
    bound = 4.0 * np.sqrt(10000 * pi * (1 - pi))
    assert np.all(np.abs(counts - 10000 * pi) <= bound)


def test_selector_dims_are_checked(rng):
    g = random_gmm(rng, 3, 2)
    with pytest.raises(ShapeError):
        gmm_sample_control(new_filled((1, 2, 2, 2), 1.0), g, (2, 2), SamplingConfig(), rng)


# Classifier

def test_identity_classifier_passes_input_through(rng):
    c = ClassifierParams(np.eye(4), np.zeros(4))
    x = Tensor4(rng.standard_normal((3, 1, 1, 4)))
    np.testing.assert_array_equal(classifier_forward(x, c), x.data.reshape(3, 4))


def test_zero_input_gives_bias(rng):
    c = ClassifierParams(rng.standard_normal((6, 3)), np.array([0.5, -1.0, 2.0]))
    logits = classifier_forward(new_filled((2, 1, 2, 3), 0.0), c)
    assert logits.tolist() == [[0.5, -1.0, 2.0]] * 2


def test_classifier_forward_matches_loops(rng):
    c = ClassifierParams(rng.standard_normal((3, 4)), rng.standard_normal(4))
    x = rng.standard_normal((2, 1, 1, 3))
    logits = classifier_forward(Tensor4(x), c)
    for n, m in itertools.product(range(2), range(4)):
        expected = sum(x[n, 0, 0, d] * c.weights[d, m] for d in range(3)) + c.bias[m]
        assert logits[n, m] == pytest.approx(expected, rel=1e-12)


def test_identity_inversion_gives_unit_vector():
    c = ClassifierParams(np.eye(4), np.zeros(4))
    control = classifier_invert(one_hot([2], 4), c, (1, 1, 4))
    assert control.flat.tolist() == [0.0, 0.0, 1.0, 0.0]


def test_bias_only_inversion_is_zero():
    c = ClassifierParams(np.zeros((5, 3)), np.array([0.3, -0.2, 1.0]))
    control = classifier_invert(one_hot([0, 1, 2], 3), c, (1, 1, 5))
    assert control.dims == (3, 1, 1, 5)
    assert not control.data.any()


def test_inversion_matches_loops(rng):
    c = ClassifierParams(rng.standard_normal((6, 3)), rng.standard_normal(3))
    t = one_hot([1, 0], 3)
    control = classifier_invert(t, c, (1, 2, 3)).data.reshape(2, 6)
    for n, d in itertools.product(range(2), range(6)):
        expected = sum(c.weights[d, m] * (t[n, m] - c.bias[m]) for m in range(3))
        assert control[n, d] == pytest.approx(expected, rel=1e-12)


def test_inversion_rejects_non_one_hot():
    c = ClassifierParams(np.eye(3), np.zeros(3))
    with pytest.raises(InvalidLabelError):
        classifier_invert(np.array([[0.5, 0.5, 0.0]]), c, (1, 1, 3))
    with pytest.raises(InvalidLabelError):
        classifier_invert(np.array([[1.0, 1.0, 0.0]]), c, (1, 1, 3))
    with pytest.raises(InvalidLabelError):
        one_hot([3], 3)


def test_uniform_logits_give_log_m():
    c = ClassifierParams(np.zeros((4, 5)), np.zeros(5))
    loss, _, _ = classifier_loss_and_grad(new_filled((3, 2, 2, 1), 0.7), np.array([0, 2, 4]), c)
    assert loss == pytest.approx(math.log(5), rel=1e-12)


def test_confident_logits_give_zero_loss():
    c = ClassifierParams(np.zeros((2, 3)), np.array([100.0, 0.0, 0.0]))
    loss, _, _ = classifier_loss_and_grad(new_filled((1, 1, 1, 2), 0.0), np.array([0]), c)
    assert 0.0 <= loss < 1e-12


def test_label_out_of_range():
    c = ClassifierParams(np.zeros((2, 3)), np.zeros(3))
    with pytest.raises(InvalidLabelError):
        classifier_loss_and_grad(new_filled((1, 1, 1, 2), 0.0), np.array([3]), c)


def test_classifier_initialisation(rng):
    c = ClassifierParams.initial(10, 4, rng)
    assert c.weights.shape == (10, 4)
    assert np.all(np.abs(c.weights) <= 0.05)
    assert not c.bias.any()

"""Gradient correctness against the central finite-difference oracle.

Every scalar parameter of small random models is swept; the probe step is
1e-5 in float64 and the pass bar is relative error < 1e-4.
"""

import numpy as np
import pytest

from hiermil import mil
from helpers import fd_max_rel_error, smooth_batch, tiny_model


@pytest.mark.parametrize("seed", range(6))
def test_gradients_match_finite_differences(seed):
    params = tiny_model(seed=seed)
    batch = smooth_batch(params, seed=seed * 7 + 1, M=2, K=2)
    worst, name = fd_max_rel_error(params, batch)
    assert worst < 1e-4, f"worst {worst:.2e} at {name}"


def test_gradients_mean_distillation_mode():
    params = tiny_model(seed=31)
    batch = smooth_batch(params, seed=5, M=2, K=3)
    worst, name = fd_max_rel_error(params, batch, distill_mode="mean")
    assert worst < 1e-4, f"worst {worst:.2e} at {name}"


def test_gradients_multi_volume_ragged_batch():
    params = tiny_model(seed=17)
    gen = np.random.default_rng(40)
    batch = (smooth_batch(params, seed=41, M=2, K=2)
             + smooth_batch(params, seed=42, M=3, K=2))
    worst, name = fd_max_rel_error(params, batch)
    assert worst < 1e-4, f"worst {worst:.2e} at {name}"


def test_zero_classifier_bias_gradient_is_mean_residual():
    # with both classifier weights zero every prediction is 0.5, making the
    # bias gradients equal the mean logistic residual (0.5 - y) per tier
    params = tiny_model(seed=2)
    params.subbag_classifier.weight[:] = 0.0
    params.subbag_classifier.bias[:] = 0.0
    params.bag_classifier.weight[:] = 0.0
    params.bag_classifier.bias[:] = 0.0
    patches = np.random.default_rng(3).standard_normal((2, 2, 8, 8))
    for y in (0, 1):
        grads, info = mil.compute_gradients([(patches, y)], params)
        assert info["bag_predictions"][0] == pytest.approx(0.5, abs=1e-12)
        assert grads["subbag_classifier.bias"][0] == pytest.approx(0.5 - y, abs=1e-12)
        assert grads["bag_classifier.bias"][0] == pytest.approx(0.5 - y, abs=1e-12)


def test_bag_weight_scaling_is_exact():
    # doubling the bag term scales pure bag-path gradients by exactly 2
    params = tiny_model(seed=23)
    patches = np.random.default_rng(9).standard_normal((2, 2, 8, 8))
    g1, _ = mil.compute_gradients([(patches, 1)], params, bag_weight=1.0)
    g2, _ = mil.compute_gradients([(patches, 1)], params, bag_weight=2.0)
    for name in ("bag_classifier.weight", "bag_classifier.bias",
                 "bag_attention.V", "bag_attention.w"):
        np.testing.assert_array_equal(g2[name], 2.0 * g1[name])


def test_non_finite_propagates_as_numeric_failure():
    params = tiny_model(seed=4)
    params.subbag_attention.V[0, 0] = np.nan
    patches = np.random.default_rng(5).standard_normal((2, 2, 8, 8))
    with pytest.raises(Exception) as exc_info:
        mil.compute_gradients([(patches, 1)], params)
    # either the input-validation or the gradient finiteness guard fires
    from hiermil.errors import HiermilError
    assert isinstance(exc_info.value, HiermilError)

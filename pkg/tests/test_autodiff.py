"""Finite-difference gradient suite and checker self-tests."""

import numpy as np
import pytest

from voxelweave import ops
from voxelweave.gradcheck import (
    build_cases,
    central_difference,
    max_rel_error,
    run_case,
    run_suite,
)
from voxelweave.tensor import Tensor, backward, parameter


def test_full_suite_passes_at_1e4():
    results = run_suite(seeds=(0, 1))
    worst = max(r.max_rel_err for r in results)
    assert all(r.passed for r in results), \
        [r.name for r in results if not r.passed]
    assert worst <= 1e-4


def test_case_names_are_unique():
    names = [c.name for c in build_cases()]
    assert len(names) == len(set(names))


def test_losses_have_cases():
    covered = {c.op for c in build_cases()}
    assert {"loss_iou", "loss_xent", "loss_focal", "loss_iou_xent"} <= covered


def test_corruption_hook_is_detected():
    """Damaging one analytic gradient must flip that case to failed."""
    results = run_suite(seeds=(0,), corrupt="relu")
    by_name = {r.name: r for r in results}
    assert not by_name["relu"].passed
    assert by_name["mul"].passed


def test_run_case_is_deterministic():
    case = next(c for c in build_cases() if c.name == "conv3d_s1")
    a = run_case(case, seed=5)
    b = run_case(case, seed=5)
    assert a.max_rel_err == b.max_rel_err


def test_central_difference_on_quadratic():
    x = parameter(np.array([1.0, -2.0, 0.5], np.float64))
    fn = lambda: ops.sum(ops.mul(x, x))
    (num,) = central_difference(fn, [x], h=1e-5)
    np.testing.assert_allclose(num, 2 * x.data, atol=1e-8)


def test_max_rel_error_scales_by_magnitude():
    a = np.array([1000.0])
    b = np.array([1000.1])
    assert max_rel_error(a, b) == pytest.approx(0.1 / 1000.1, rel=1e-6)
    assert max_rel_error(np.zeros(3), np.zeros(3)) == 0.0


class TestGradientEdgeBehaviour:
    """Subgradient routing at ties and zero-gradient paths."""

    def test_min_tie_routes_to_first_argument(self):
        a = parameter(np.array([1.0, 2.0], np.float64))
        b = parameter(np.array([1.0, 3.0], np.float64))
        backward(ops.sum(ops.min_elem(a, b)))
        np.testing.assert_array_equal(a.grad, [1.0, 1.0])
        np.testing.assert_array_equal(b.grad, [0.0, 0.0])

    def test_max_tie_routes_to_second_argument(self):
        a = parameter(np.array([1.0, 5.0], np.float64))
        b = parameter(np.array([1.0, 3.0], np.float64))
        backward(ops.sum(ops.max_elem(a, b)))
        # Element 0 ties -> b; element 1 is a strict a-win.
        np.testing.assert_array_equal(a.grad, [0.0, 1.0])
        np.testing.assert_array_equal(b.grad, [1.0, 0.0])

    def test_relu_gradient_zero_at_origin(self):
        x = parameter(np.array([0.0], np.float64))
        backward(ops.sum(ops.relu(x)))
        np.testing.assert_array_equal(x.grad, [0.0])

    def test_bilinear_outside_points_send_nothing_back(self):
        f = parameter(np.ones((1, 3, 3), np.float64))
        out = ops.bilinear_sample2d(f, np.array([[-2.0, 1.0], [5.0, 1.0]]))
        backward(ops.sum(out))
        np.testing.assert_array_equal(f.grad, np.zeros((1, 3, 3)))

    def test_softmax_gradient_sums_to_zero_per_row(self, rng):
        """Shift invariance implies the logit gradient has zero row-sum."""
        x = parameter(rng.normal(size=(4, 5)), dtype=np.float64)
        w = Tensor(rng.normal(size=(4, 5)), dtype=np.float64)
        backward(ops.sum(ops.mul(ops.softmax(x, axis=1), w)))
        np.testing.assert_allclose(x.grad.sum(axis=1), 0.0, atol=1e-12)

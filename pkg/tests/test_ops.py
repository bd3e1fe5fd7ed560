"""Forward-value contracts for the differentiable op set.

Convolutions are checked against independent nested-loop references; the
remaining ops against hand-computed values. Gradient correctness lives in
test_autodiff.py.
"""

import numpy as np
import pytest

from voxelweave import ops
from voxelweave.errors import ContractError, DimensionError
from voxelweave.tensor import Tensor


def conv2d_loops(x, k, stride=1, padding=0):
    """Reference cross-correlation, (N,C,H,W) x (O,C,kh,kw)."""
    n, c, h, w = x.shape
    o, c2, kh, kw = k.shape
    assert c == c2
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for b in range(n):
        for f in range(o):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[b, :, i * stride:i * stride + kh,
                               j * stride:j * stride + kw]
                    out[b, f, i, j] = (patch * k[f]).sum()
    return out


def conv3d_loops(x, k, stride=1, padding=0):
    n, c, d, h, w = x.shape
    o, c2, kd, kh, kw = k.shape
    assert c == c2
    pad = ((0, 0), (0, 0)) + ((padding, padding),) * 3
    xp = np.pad(x, pad)
    od = (d + 2 * padding - kd) // stride + 1
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, od, oh, ow))
    for b in range(n):
        for f in range(o):
            for z in range(od):
                for i in range(oh):
                    for j in range(ow):
                        patch = xp[b, :, z * stride:z * stride + kd,
                                   i * stride:i * stride + kh,
                                   j * stride:j * stride + kw]
                        out[b, f, z, i, j] = (patch * k[f]).sum()
    return out


class TestElementwise:
    def test_softmax_of_equal_logits_is_uniform(self):
        out = ops.softmax(Tensor([[0.0, 0.0]]), axis=1)
        np.testing.assert_allclose(out.data, [[0.5, 0.5]], atol=1e-12)

    def test_softmax_rows_sum_to_one(self, rng):
        x = Tensor(rng.normal(size=(4, 7)) * 20)
        out = ops.softmax(x, axis=1)
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-6)

    def test_softmax_shift_invariance(self, rng):
        x = rng.normal(size=(3, 5))
        a = ops.softmax(Tensor(x, dtype=np.float64), axis=1)
        b = ops.softmax(Tensor(x + 100.0, dtype=np.float64), axis=1)
        np.testing.assert_allclose(a.data, b.data, atol=1e-12)

    def test_min_max_elem_worked_values(self):
        a, b = Tensor([1.0, 2.0]), Tensor([2.0, 1.0])
        np.testing.assert_array_equal(ops.min_elem(a, b).data, [1, 1])
        np.testing.assert_array_equal(ops.max_elem(a, b).data, [2, 2])

    def test_relu_and_leaky(self):
        x = Tensor([-2.0, 0.0, 3.0])
        np.testing.assert_array_equal(ops.relu(x).data, [0, 0, 3])
        np.testing.assert_allclose(ops.leaky_relu(x, 0.1).data, [-0.2, 0, 3],
                                   atol=1e-7)

    def test_log_exp_inverse(self, rng):
        x = Tensor(rng.uniform(0.1, 5.0, 10), dtype=np.float64)
        np.testing.assert_allclose(ops.exp(ops.log(x)).data, x.data, rtol=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            ops.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


class TestReductionsAndShape:
    def test_sum_axis_tuple(self, rng):
        x = rng.normal(size=(2, 3, 4))
        out = ops.sum(Tensor(x, dtype=np.float64), axis=(0, 2))
        np.testing.assert_allclose(out.data, x.sum(axis=(0, 2)), atol=1e-12)

    def test_mean_matches_numpy(self, rng):
        x = rng.normal(size=(5, 2))
        assert ops.mean(Tensor(x, dtype=np.float64)).item() == pytest.approx(
            x.mean(), abs=1e-12)

    def test_reshape_rejects_wrong_size(self):
        with pytest.raises(DimensionError):
            ops.reshape(Tensor(np.ones((2, 3))), (4, 2))

    def test_transpose_roundtrip(self, rng):
        x = rng.normal(size=(2, 3, 4))
        t = ops.transpose(Tensor(x, dtype=np.float64), (2, 0, 1))
        np.testing.assert_array_equal(t.data, x.transpose(2, 0, 1))

    def test_concat_matches_numpy(self, rng):
        parts = [rng.normal(size=(2, k)) for k in (1, 2, 3)]
        out = ops.concat([Tensor(p, dtype=np.float64) for p in parts], axis=1)
        np.testing.assert_array_equal(out.data, np.concatenate(parts, axis=1))

    def test_broadcast_only_expands_unit_axes(self):
        x = Tensor(np.ones((2, 3)))
        with pytest.raises(DimensionError):
            ops.broadcast_to(x, (4, 3))


class TestConv2d:
    def test_all_ones_3x3(self):
        x = Tensor(np.ones((1, 1, 3, 3)), dtype=np.float64)
        k = Tensor(np.ones((1, 1, 3, 3)), dtype=np.float64)
        out = ops.conv2d(x, k)
        assert out.shape == (1, 1, 1, 1)
        assert out.data.item() == pytest.approx(9.0, abs=1e-12)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_against_loops(self, stride, padding, rng):
        x = rng.normal(size=(2, 3, 7, 6))
        k = rng.normal(size=(4, 3, 3, 3))
        got = ops.conv2d(Tensor(x, dtype=np.float64),
                         Tensor(k, dtype=np.float64), stride, padding)
        want = conv2d_loops(x, k, stride, padding)
        np.testing.assert_allclose(got.data, want, atol=1e-6)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            ops.conv2d(Tensor(np.ones((1, 2, 5, 5))),
                       Tensor(np.ones((1, 3, 3, 3))))


class TestConv3d:
    def test_all_ones_2cubed(self):
        x = Tensor(np.ones((1, 1, 2, 2, 2)), dtype=np.float64)
        k = Tensor(np.ones((1, 1, 2, 2, 2)), dtype=np.float64)
        out = ops.conv3d(x, k)
        assert out.shape == (1, 1, 1, 1, 1)
        assert out.data.item() == pytest.approx(8.0, abs=1e-12)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
    def test_against_loops(self, stride, padding, rng):
        x = rng.normal(size=(1, 2, 5, 6, 4))
        k = rng.normal(size=(3, 2, 3, 3, 3))
        got = ops.conv3d(Tensor(x, dtype=np.float64),
                         Tensor(k, dtype=np.float64), stride, padding)
        want = conv3d_loops(x, k, stride, padding)
        np.testing.assert_allclose(got.data, want, atol=1e-6)


class TestConv3dTransposed:
    def test_single_tap_spreads_kernel(self):
        """A 1-voxel input stamps the kernel, scaled by the input value."""
        x = np.zeros((1, 1, 1, 1, 1))
        x[0, 0, 0, 0, 0] = 2.5
        k = np.arange(8, dtype=np.float64).reshape(1, 1, 2, 2, 2)
        out = ops.conv3d_transposed(Tensor(x, dtype=np.float64),
                                    Tensor(k, dtype=np.float64), stride=2)
        assert out.shape == (1, 1, 2, 2, 2)
        np.testing.assert_allclose(out.data[0, 0], 2.5 * k[0, 0], atol=1e-12)

    def test_stride2_doubles_resolution(self, rng):
        x = Tensor(rng.normal(size=(1, 3, 4, 4, 4)), dtype=np.float64)
        k = Tensor(rng.normal(size=(3, 5, 2, 2, 2)), dtype=np.float64)
        assert ops.conv3d_transposed(x, k, stride=2).shape == (1, 5, 8, 8, 8)

    @pytest.mark.parametrize("stride,padding,d,ksz",
                             [(1, 0, 5, 2), (2, 0, 6, 2), (1, 1, 5, 3)])
    def test_adjoint_of_conv3d(self, stride, padding, d, ksz, rng):
        """<conv(x), y> == <x, conv_T(y)> when the geometries line up.

        conv3d kernels are (out,in,...) while the transposed op reads the
        same array as (in,out,...), so one kernel serves both directions.
        """
        x = rng.normal(size=(1, 2, d, d, d))
        k = rng.normal(size=(3, 2, ksz, ksz, ksz))
        fwd = ops.conv3d(Tensor(x, dtype=np.float64),
                         Tensor(k, dtype=np.float64), stride, padding)
        y = rng.normal(size=fwd.shape)
        bwd = ops.conv3d_transposed(Tensor(y, dtype=np.float64),
                                    Tensor(k, dtype=np.float64),
                                    stride, padding)
        assert bwd.shape == x.shape
        lhs = float((fwd.data * y).sum())
        rhs = float((x * bwd.data).sum())
        np.testing.assert_allclose(lhs, rhs, rtol=1e-6)


class TestBilinearSample:
    def test_exact_texel_centers(self):
        f = Tensor(np.arange(12, dtype=np.float64).reshape(1, 3, 4))
        out = ops.bilinear_sample2d(f, np.array([[1.0, 2.0], [3.0, 2.0]]))
        np.testing.assert_allclose(out.data.ravel(), [9.0, 11.0], atol=1e-12)

    def test_midpoint_averages_neighbours(self):
        f = Tensor(np.arange(12, dtype=np.float64).reshape(1, 3, 4))
        out = ops.bilinear_sample2d(f, np.array([[1.5, 2.0]]))
        assert out.data.item() == pytest.approx(9.5, abs=1e-12)

    def test_outside_returns_zero(self):
        f = Tensor(np.ones((2, 3, 4)))
        pts = np.array([[-0.5, 1.0], [3.5, 1.0], [1.0, -1.0], [1.0, 2.5]])
        out = ops.bilinear_sample2d(f, pts)
        np.testing.assert_array_equal(out.data, np.zeros((4, 2)))

    def test_multi_channel_rows(self, rng):
        f = rng.normal(size=(3, 4, 5))
        out = ops.bilinear_sample2d(Tensor(f, dtype=np.float64),
                                    np.array([[2.0, 1.0]]))
        np.testing.assert_allclose(out.data, f[:, 1, 2][None, :], atol=1e-12)

    def test_nonfinite_coords_rejected(self):
        f = Tensor(np.ones((1, 3, 3)))
        with pytest.raises(ContractError):
            ops.bilinear_sample2d(f, np.array([[np.nan, 1.0]]))


def test_registry_lists_every_gradient_case_op():
    from voxelweave.gradcheck import build_cases

    covered = {c.op for c in build_cases()}
    missing = set(ops.DIFFERENTIABLE_OPS) - covered
    assert not missing, f"registered ops without a gradient case: {sorted(missing)}"

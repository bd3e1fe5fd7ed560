"""Finite-difference validation of every registered gradient.

Each case builds float64 leaf tensors, evaluates a scalar-valued function of
them, and compares tape gradients against central differences with step h.
The case list must cover ``ops.DIFFERENTIABLE_OPS`` plus the four losses;
a test enforces the coverage.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .rng import substream
from .tensor import Tensor, backward, parameter

DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-4


@dataclass
class GradCase:
    name: str          # unique case id
    op: str            # which op this case certifies
    build: Callable[[np.random.Generator], tuple[list[Tensor], Callable[[], Tensor]]]


@dataclass
class CaseResult:
    name: str
    op: str
    max_rel_err: float
    passed: bool


def central_difference(fn: Callable[[], Tensor], leaves: list[Tensor],
                       h: float = DEFAULT_H) -> list[np.ndarray]:
    """Numeric gradient of a scalar fn wrt each leaf, by central differences."""
    grads = []
    for leaf in leaves:
        flat = leaf.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = fn().item()
            flat[i] = orig - h
            f_minus = fn().item()
            flat[i] = orig
            g[i] = (f_plus - f_minus) / (2 * h)
        grads.append(g.reshape(leaf.data.shape))
    return grads


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference normalized by the larger gradient magnitude."""
    scale = max(float(np.abs(analytic).max(initial=0.0)),
                float(np.abs(numeric).max(initial=0.0)), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def run_case(case: GradCase, seed: int, h: float = DEFAULT_H,
             tol: float = DEFAULT_TOL, corrupt: str | None = None) -> CaseResult:
    rng = substream(seed, "gradcheck", case.name)
    leaves, fn = case.build(rng)
    for leaf in leaves:
        leaf.zero_grad()
    out = fn()
    backward(out)
    analytic = [leaf.grad_or_zeros().copy() for leaf in leaves]
    if corrupt is not None and corrupt in (case.name, case.op):
        # Test hook: damage the first analytic gradient so the check must fail.
        analytic[0] = analytic[0] * 1.01 + 1e-3
    numeric = central_difference(fn, leaves, h=h)
    err = max(max_rel_error(a, n) for a, n in zip(analytic, numeric))
    return CaseResult(case.name, case.op, err, err <= tol)


def run_suite(seeds=(0, 1, 2), h: float = DEFAULT_H, tol: float = DEFAULT_TOL,
              corrupt: str | None = None,
              names: list[str] | None = None) -> list[CaseResult]:
    results = []
    for case in build_cases():
        if names and case.name not in names and case.op not in names:
            continue
        worst: CaseResult | None = None
        for seed in seeds:
            res = run_case(case, seed, h=h, tol=tol, corrupt=corrupt)
            if worst is None or res.max_rel_err > worst.max_rel_err:
                worst = res
        results.append(worst)
    return results


# -- case construction ----------------------------------------------------------


def _rand(rng, shape, lo=-1.0, hi=1.0):
    return parameter(rng.uniform(lo, hi, shape), dtype=np.float64)


def _away_from(rng, shape, margin=0.05):
    """Uniform in [-1,1] but at least `margin` from zero (kink avoidance)."""
    x = rng.uniform(margin, 1.0, shape) * rng.choice([-1.0, 1.0], shape)
    return parameter(x, dtype=np.float64)


def _scalarize(out: Tensor, rng) -> Tensor:
    w = Tensor(rng.normal(size=out.shape), dtype=np.float64)
    return ops.sum(ops.mul(out, w))


def build_cases() -> list[GradCase]:
    cases: list[GradCase] = []

    def case(name, op):
        def wrap(build):
            cases.append(GradCase(name, op, build))
            return build
        return wrap

    @case("add", "add")
    def _(rng):
        a, b = _rand(rng, (3, 4)), _rand(rng, (3, 4))
        return [a, b], lambda: _scalarize(ops.add(a, b), substream(7, "w", "add"))

    @case("sub", "sub")
    def _(rng):
        a, b = _rand(rng, (3, 4)), _rand(rng, (3, 4))
        return [a, b], lambda: _scalarize(ops.sub(a, b), substream(7, "w", "sub"))

    @case("mul", "mul")
    def _(rng):
        a, b = _rand(rng, (3, 4)), _rand(rng, (3, 4))
        return [a, b], lambda: _scalarize(ops.mul(a, b), substream(7, "w", "mul"))

    @case("div", "div")
    def _(rng):
        a = _rand(rng, (3, 4))
        b = _away_from(rng, (3, 4), margin=0.5)
        return [a, b], lambda: _scalarize(ops.div(a, b), substream(7, "w", "div"))

    @case("add_scalar", "add_scalar")
    def _(rng):
        a = _rand(rng, (2, 5))
        return [a], lambda: _scalarize(ops.add_scalar(a, 0.7), substream(7, "w", "adds"))

    @case("mul_scalar", "mul_scalar")
    def _(rng):
        a = _rand(rng, (2, 5))
        return [a], lambda: _scalarize(ops.mul_scalar(a, -1.3), substream(7, "w", "muls"))

    @case("pow_scalar", "pow_scalar")
    def _(rng):
        a = _rand(rng, (2, 5), lo=0.5, hi=1.5)
        return [a], lambda: _scalarize(ops.pow_scalar(a, 2.5), substream(7, "w", "pow"))

    @case("log", "log")
    def _(rng):
        a = _rand(rng, (2, 5), lo=0.5, hi=2.0)
        return [a], lambda: _scalarize(ops.log(a), substream(7, "w", "log"))

    @case("exp", "exp")
    def _(rng):
        a = _rand(rng, (2, 5))
        return [a], lambda: _scalarize(ops.exp(a), substream(7, "w", "exp"))

    @case("relu", "relu")
    def _(rng):
        a = _away_from(rng, (3, 4))
        return [a], lambda: _scalarize(ops.relu(a), substream(7, "w", "relu"))

    @case("leaky_relu", "leaky_relu")
    def _(rng):
        a = _away_from(rng, (3, 4))
        return [a], lambda: _scalarize(ops.leaky_relu(a, 0.1), substream(7, "w", "lrelu"))

    @case("min_elem", "min_elem")
    def _(rng):
        a = _rand(rng, (3, 4))
        gap = 0.05 + rng.uniform(0, 0.5, (3, 4))
        b = parameter(a.data + gap * rng.choice([-1.0, 1.0], (3, 4)), dtype=np.float64)
        return [a, b], lambda: _scalarize(ops.min_elem(a, b), substream(7, "w", "min"))

    @case("max_elem", "max_elem")
    def _(rng):
        a = _rand(rng, (3, 4))
        gap = 0.05 + rng.uniform(0, 0.5, (3, 4))
        b = parameter(a.data + gap * rng.choice([-1.0, 1.0], (3, 4)), dtype=np.float64)
        return [a, b], lambda: _scalarize(ops.max_elem(a, b), substream(7, "w", "max"))

    @case("concat", "concat")
    def _(rng):
        ts = [_rand(rng, (2, k)) for k in (2, 3, 1)]
        return ts, lambda: _scalarize(ops.concat(ts, axis=1), substream(7, "w", "cat"))

    @case("softmax", "softmax")
    def _(rng):
        a = _rand(rng, (2, 5), lo=-2.0, hi=2.0)
        return [a], lambda: _scalarize(ops.softmax(a, axis=1), substream(7, "w", "sm"))

    @case("sum_full", "sum")
    def _(rng):
        a = _rand(rng, (2, 3, 4))
        return [a], lambda: ops.sum(a)

    @case("sum_axis", "sum")
    def _(rng):
        a = _rand(rng, (2, 3, 4))
        return [a], lambda: _scalarize(ops.sum(a, axis=(0, 2)), substream(7, "w", "sax"))

    @case("mean", "mean")
    def _(rng):
        a = _rand(rng, (3, 4))
        return [a], lambda: ops.mean(a)

    @case("reshape", "reshape")
    def _(rng):
        a = _rand(rng, (3, 4))
        return [a], lambda: _scalarize(ops.reshape(a, (2, 6)), substream(7, "w", "rs"))

    @case("transpose", "transpose")
    def _(rng):
        a = _rand(rng, (2, 3, 4))
        return [a], lambda: _scalarize(ops.transpose(a, (2, 0, 1)), substream(7, "w", "tr"))

    @case("broadcast_to", "broadcast_to")
    def _(rng):
        a = _rand(rng, (1, 3, 1))
        return [a], lambda: _scalarize(ops.broadcast_to(a, (2, 3, 4)), substream(7, "w", "bc"))

    @case("conv2d_s1", "conv2d")
    def _(rng):
        x = _rand(rng, (1, 2, 5, 6))
        k = _rand(rng, (3, 2, 3, 3))
        return [x, k], lambda: _scalarize(ops.conv2d(x, k), substream(7, "w", "c2a"))

    @case("conv2d_s2p1", "conv2d")
    def _(rng):
        x = _rand(rng, (2, 2, 5, 6))
        k = _rand(rng, (3, 2, 3, 3))
        return [x, k], lambda: _scalarize(
            ops.conv2d(x, k, stride=2, padding=1), substream(7, "w", "c2b"))

    @case("conv3d_s1", "conv3d")
    def _(rng):
        x = _rand(rng, (1, 2, 4, 4, 4))
        k = _rand(rng, (2, 2, 2, 2, 2))
        return [x, k], lambda: _scalarize(ops.conv3d(x, k), substream(7, "w", "c3a"))

    @case("conv3d_s2p1", "conv3d")
    def _(rng):
        x = _rand(rng, (1, 2, 5, 5, 4))
        k = _rand(rng, (2, 2, 3, 3, 3))
        return [x, k], lambda: _scalarize(
            ops.conv3d(x, k, stride=2, padding=1), substream(7, "w", "c3b"))

    @case("conv3d_transposed_s2", "conv3d_transposed")
    def _(rng):
        x = _rand(rng, (1, 3, 3, 3, 3))
        k = _rand(rng, (3, 2, 2, 2, 2))
        return [x, k], lambda: _scalarize(
            ops.conv3d_transposed(x, k, stride=2), substream(7, "w", "ct2"))

    @case("conv3d_transposed_s1p1", "conv3d_transposed")
    def _(rng):
        x = _rand(rng, (1, 2, 3, 3, 3))
        k = _rand(rng, (2, 3, 3, 3, 3))
        return [x, k], lambda: _scalarize(
            ops.conv3d_transposed(x, k, stride=1, padding=1), substream(7, "w", "ct1"))

    @case("bilinear_sample2d", "bilinear_sample2d")
    def _(rng):
        f = _rand(rng, (2, 5, 6))
        # Cell interiors only: keep >= 0.1 away from integer grid lines so the
        # finite-difference probe never crosses a kink. A few points are
        # deliberately out of bounds (zero everywhere nearby, still smooth).
        m = 14
        base_u = rng.integers(0, 5, m) + rng.uniform(0.1, 0.9, m)
        base_v = rng.integers(0, 4, m) + rng.uniform(0.1, 0.9, m)
        base_u[-2:] = [-3.0, 9.5]
        base_v[-1] = 7.7
        coords = np.stack([base_u, base_v], axis=1)
        return [f], lambda: _scalarize(
            ops.bilinear_sample2d(f, coords), substream(7, "w", "bs"))

    # Losses, end to end through softmax.
    from . import losses

    def loss_case(name, fn):
        @case(name, name)
        def _(rng):
            c = 3
            shape = (3, 3, 3)
            labels = rng.integers(0, c, shape)
            g = np.eye(c, dtype=np.float64)[labels]
            logits = parameter(rng.normal(0, 1.5, shape + (c,)), dtype=np.float64)

            def run():
                p = ops.softmax(logits, axis=3)
                return fn(Tensor(g, dtype=np.float64), p)
            return [logits], run

    loss_case("loss_iou", lambda g, p: losses.loss_iou(g, p))
    loss_case("loss_xent", lambda g, p: losses.loss_xent(g, p))
    loss_case("loss_focal", lambda g, p: losses.loss_focal(g, p, gamma=2.0))
    loss_case("loss_iou_xent", lambda g, p: losses.loss_iou_xent(g, p))

    return cases

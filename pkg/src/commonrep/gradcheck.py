"""Central-difference gradient oracle and the per-op check registry."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .autodiff import REGISTRY, Variable, backward, no_grad

ScalarFn = Callable[[Variable], Variable]

TOLERANCE = 1e-4


def finite_diff_check(f: ScalarFn, x: np.ndarray, eps: float = 1e-6) -> float:
    """Max over coordinates of |a - b| / max(1e-8, |a| + |b|), where a is the
    tape gradient of ``f`` at ``x`` and b the central difference."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    v = Variable(x, requires_grad=True)
    out = f(v)
    if not np.isfinite(out.value).all():
        raise FloatingPointError("f returned a non-finite value")
    backward(out)
    analytic = v.grad.ravel()
    numeric = np.empty_like(analytic)
    flat = x.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Variable(x)).value)
        flat[i] = orig - eps
        fm = float(f(Variable(x)).value)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"f is not finite near coordinate {i}")
        numeric[i] = (fp - fm) / (2 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(err.max()) if err.size else 0.0


@dataclass
class Case:
    """A scalar probe of one op: ``build(rng)`` returns (f, x0)."""

    name: str
    build: Callable[[np.random.Generator], tuple[ScalarFn, np.ndarray]]


def _projected(fn: Callable[[Variable], Variable], out_shape, rng):
    # random projection keeps every output coordinate's gradient well scaled
    w = rng.standard_normal(out_shape)
    return lambda v: ops.sum(ops.mul(fn(v), w))


def _unary(fn: Callable[[Variable], Variable], x: np.ndarray, rng):
    with no_grad():
        shape = fn(Variable(x)).shape
    return _projected(fn, shape, rng)


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _op_cases() -> list[Case]:
    cases: list[Case] = []

    def binary(name, fn, positive_b=False):
        def build(rng):
            b = rng.uniform(0.5, 2.0, (3, 4)) if positive_b else rng.standard_normal((3, 4))
            return _projected(lambda v: fn(v, Variable(b)), (3, 4), rng), rng.standard_normal((3, 4))

        cases.append(Case(name, build))

    binary("add", ops.add)
    binary("sub", ops.sub)
    binary("mul", ops.mul)
    cases.append(Case("div", _div_case))

    def unary(name, fn, sampler):
        def build(rng):
            x = sampler(rng)
            return _unary(fn, x, rng), x

        cases.append(Case(name, build))

    normal = lambda rng: rng.standard_normal((3, 4))  # noqa: E731
    positive = lambda rng: rng.uniform(0.2, 2.0, (3, 4))  # noqa: E731
    unary("scale", lambda v: ops.scale(v, -1.7), normal)
    unary("add_scalar", lambda v: ops.add(v, 0.3), normal)
    unary("tanh", ops.tanh, normal)
    unary("sigmoid", ops.sigmoid, normal)
    unary("relu", ops.relu, lambda rng: _away_from_zero(rng, (3, 4)))
    unary("softplus", ops.softplus, normal)
    unary("exp", ops.exp, normal)
    unary("log", ops.log, positive)
    unary("sqrt", ops.sqrt, positive)
    unary("square", ops.square, normal)
    unary("smooth_l1", ops.smooth_l1, lambda rng: _smooth_l1_points(rng))

    def reduction(name, fn):
        def build(rng):
            w = rng.standard_normal(4)
            return (lambda v: ops.sum(ops.mul(fn(v), w))), rng.standard_normal((3, 4))

        cases.append(Case(name, build))

    reduction("sum", lambda v: ops.sum(v, axes=0))
    reduction("mean", lambda v: ops.mean(v, axes=0))
    reduction("max", lambda v: ops.max(v, axes=0))
    unary("reshape", lambda v: ops.reshape(v, (4, 3)), normal)
    cases.append(
        Case(
            "broadcast_to",
            lambda rng: (_projected(lambda v: ops.broadcast_to(v, (3, 4)), (3, 4), rng), rng.standard_normal((1, 4))),
        )
    )
    unary("getitem", lambda v: ops.getitem(v, (slice(1, 3), slice(None, None, 2))), normal)
    cases.append(Case("concat", _concat_case))
    cases.append(Case("conv2d", _conv_case))
    cases.append(
        Case(
            "upsample_bilinear",
            lambda rng: (
                _projected(lambda v: ops.upsample_bilinear(v, (7, 5)), (2, 7, 5), rng),
                rng.standard_normal((2, 3, 4)),
            ),
        )
    )
    cases.append(Case("softmax_cross_entropy", _ce_case))
    return cases


def _div_case(rng):
    # numerator and denominator packed in one vector so both gradients are probed
    x = np.concatenate([rng.standard_normal(12), rng.uniform(0.5, 2.0, 12)])
    return _projected(lambda v: ops.div(ops.getitem(v, slice(0, 12)), ops.getitem(v, slice(12, 24))), (12,), rng), x


def _smooth_l1_points(rng):
    # keep clear of the |x| = 1 seam where the second derivative jumps
    mag = np.where(rng.random((3, 4)) < 0.5, rng.uniform(0.05, 0.9, (3, 4)), rng.uniform(1.1, 3.0, (3, 4)))
    return mag * rng.choice([-1.0, 1.0], size=(3, 4))


def _concat_case(rng):
    b = rng.standard_normal((2, 4))
    return _projected(lambda v: ops.concat([v, Variable(b), v], axis=0), (8, 4), rng), rng.standard_normal((3, 4))


def _conv_case(rng):
    # input (1x2x6x6) and kernel (3x2x3x3) packed in one vector
    n_in = 72

    def f(v):
        x = ops.reshape(ops.getitem(v, slice(0, n_in)), (1, 2, 6, 6))
        w = ops.reshape(ops.getitem(v, slice(n_in, None)), (3, 2, 3, 3))
        a = ops.conv2d(x, w, stride=2, dilation=2, padding=2)
        b = ops.conv2d(x, w, stride=1, dilation=1, padding=1)
        return ops.concat([ops.reshape(a, (-1,)), ops.reshape(b, (-1,))])

    proj = _projected(f, (3 * 3 * 3 + 3 * 6 * 6,), rng)
    return proj, rng.standard_normal(n_in + 54)


def _ce_case(rng):
    labels = rng.integers(0, 5, size=(2, 3, 3))
    labels[0, 0, 0] = 1
    return (lambda v: ops.softmax_cross_entropy(v, labels)), rng.standard_normal((2, 4, 3, 3))


@dataclass
class Report:
    name: str
    worst: float
    passed: bool


def run_gradcheck(seed: int = 0, points: int = 10, tol: float = TOLERANCE, extra: list[Case] | None = None) -> list[Report]:
    """Check every registered op and every loss at ``points`` random points."""
    rng = np.random.default_rng(seed)
    cases = _op_cases() + (extra if extra is not None else loss_cases())
    missing = set(REGISTRY) - {c.name for c in cases}
    if missing:
        raise RuntimeError(f"registered ops without a gradient check: {sorted(missing)}")
    reports = []
    for case in cases:
        worst = 0.0
        for _ in range(points):
            f, x = case.build(rng)
            worst = max(worst, finite_diff_check(f, x))
        reports.append(Report(case.name, worst, worst < tol))
    return reports


def loss_cases() -> list[Case]:
    from .losses import (
        cross_entropy_loss,
        l2_loss,
        scale_invariant_loss,
        smooth_l1_loss,
    )
    from .mvae import correlation, init_mvae, reconstruction_loss

    def ce(rng):
        labels = rng.integers(0, 4, size=(2, 4, 4))
        labels[0, 0, 0] = 2
        return (lambda v: cross_entropy_loss(v, labels)), rng.standard_normal((2, 3, 4, 4))

    def depth_case(fn, positive=False):
        def build(rng):
            gt = rng.uniform(0.5, 3.0, (2, 4, 4))
            mask = rng.random((2, 4, 4)) < 0.8
            if positive:
                pred = rng.uniform(0.5, 3.0, (2, 4, 4))
            else:
                pred = gt + _smooth_l1_points(rng).ravel()[rng.integers(0, 12, (2, 4, 4))]
            return (lambda v: fn(v, gt, mask)), pred

        return build

    def rec(rng):
        params = init_mvae(4, 2, rng, scale=0.5)
        d = rng.standard_normal((2, 4, 3, 3))
        return (lambda v: reconstruction_loss(params, v, Variable(d))), rng.standard_normal((2, 4, 3, 3))

    def corr(rng):
        hd = rng.standard_normal((5, 2, 2, 2))
        return (lambda v: correlation(v, Variable(hd))), rng.standard_normal((5, 2, 2, 2))

    return [
        Case("loss:cross_entropy", ce),
        Case("loss:smooth_l1", depth_case(smooth_l1_loss)),
        Case("loss:l2", depth_case(l2_loss)),
        Case("loss:scale_invariant", depth_case(scale_invariant_loss, positive=True)),
        Case("loss:reconstruction", rec),
        Case("loss:correlation", corr),
    ]


def main_report(seed: int = 0, points: int = 10) -> tuple[list[Report], float]:
    t0 = time.perf_counter()
    reports = run_gradcheck(seed=seed, points=points)
    return reports, time.perf_counter() - t0

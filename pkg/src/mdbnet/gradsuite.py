"""Finite-difference checks of every differentiable op and block, in float64."""
from __future__ import annotations

import time

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .blocks import BlockVariant, PcrBlock, ResidualBlock, itrm_forward, preact_residual_forward
from .losses import ClassWeights, weighted_ce, smooth_ce

TOLERANCE = 1e-5


def _leaf(rng, shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)


def _probe(rng, shape):
    """Random projection turning an op output into a scalar with a dense gradient."""
    return rng.normal(size=shape)


def _scalar(out: Tensor, probe) -> Tensor:
    return ad.reduce_sum(ad.mul(out, probe))


def _check_unary(rng, op, shape, **kw):
    x = _leaf(rng, shape, kw.pop("scale", 1.0))
    probe = _probe(rng, op(Tensor(x.data)).shape)
    return grad_check(lambda t: _scalar(op(t), probe), [x])


def _block_params(block):
    return [p for _, p in block.named_parameters()]


def _check_module(rng, block, forward, shape):
    x = _leaf(rng, shape)
    probe = _probe(rng, forward(Tensor(x.data)).shape)
    params = _block_params(block)
    for p in params:
        p.data = p.data + rng.normal(0.0, 0.05, p.shape)  # non-zero BN shifts/biases
    return grad_check(lambda t, *_: _scalar(forward(t), probe), [x] + params)


def gradient_cases(seed: int = 0) -> dict:
    """Name -> zero-argument callable returning the max relative error for that case."""
    rng = np.random.default_rng(seed)
    f64 = np.float64
    cases = {}

    def add(name):
        def deco(fn):
            cases[name] = fn
            return fn
        return deco

    @add("add_broadcast")
    def _():
        a, b = _leaf(rng, (2, 3, 4)), _leaf(rng, (3, 1))
        probe = _probe(rng, (2, 3, 4))
        return grad_check(lambda x, y: _scalar(ad.add(x, y), probe), [a, b])

    @add("sub")
    def _():
        a, b = _leaf(rng, (3, 4)), _leaf(rng, (4,))
        probe = _probe(rng, (3, 4))
        return grad_check(lambda x, y: _scalar(ad.sub(x, y), probe), [a, b])

    @add("mul_broadcast")
    def _():
        a, b = _leaf(rng, (2, 3, 4)), _leaf(rng, (1, 3, 1))
        probe = _probe(rng, (2, 3, 4))
        return grad_check(lambda x, y: _scalar(ad.mul(x, y), probe), [a, b])

    @add("relu")
    def _():
        # keep inputs away from the kink so central differences are exact
        x = Tensor(rng.choice([-1, 1], size=(3, 5)) * rng.uniform(0.1, 1.0, (3, 5)), requires_grad=True)
        probe = _probe(rng, (3, 5))
        return grad_check(lambda t: _scalar(ad.relu(t), probe), [x])

    cases["tanh"] = lambda: _check_unary(rng, ad.tanh, (3, 5))
    cases["sum_axis"] = lambda: _check_unary(rng, lambda t: ad.reduce_sum(t, axis=1), (3, 4, 2))
    cases["mean_axis"] = lambda: _check_unary(rng, lambda t: ad.mean(t, axis=(0, 2)), (3, 4, 2))
    cases["reshape"] = lambda: _check_unary(rng, lambda t: ad.reshape(t, (4, 6)), (2, 3, 4))
    cases["log_softmax"] = lambda: _check_unary(rng, lambda t: ad.log_softmax(t, 1), (2, 5, 3))

    @add("stack")
    def _():
        a, b = _leaf(rng, (2, 3)), _leaf(rng, (2, 3))
        probe = _probe(rng, (2, 2, 3))
        return grad_check(lambda x, y: _scalar(ad.stack([x, y], axis=1), probe), [a, b])

    def conv_case(shape, cout, kernel, stride, padding, bias=True):
        def run():
            x = _leaf(rng, shape)
            w = _leaf(rng, (cout, shape[1]) + kernel, 0.5)
            inputs = [x, w] + ([_leaf(rng, (cout,))] if bias else [])
            probe = _probe(rng, ad.conv3d(Tensor(x.data), Tensor(w.data), None, stride, padding).shape)
            return grad_check(lambda *t: _scalar(ad.conv3d(t[0], t[1], t[2] if bias else None, stride, padding),
                                                 probe), inputs)
        return run

    cases["conv3d_3x3x3"] = conv_case((2, 2, 4, 3, 4), 3, (3, 3, 3), 1, 1)
    cases["conv3d_stride2"] = conv_case((1, 2, 5, 4, 4), 2, (3, 3, 3), 2, 1)
    cases["conv3d_planar"] = conv_case((1, 2, 4, 4, 3), 2, (3, 1, 3), 1, (1, 0, 1), bias=False)
    cases["conv3d_1x1x1"] = conv_case((2, 3, 2, 2, 2), 2, (1, 1, 1), 2, 0)

    @add("conv2d")
    def _():
        x, w, b = _leaf(rng, (2, 2, 5, 4)), _leaf(rng, (3, 2, 3, 3), 0.5), _leaf(rng, (3,))
        probe = _probe(rng, (2, 3, 5, 4))
        return grad_check(lambda *t: _scalar(ad.conv2d(*t, 1, 1), probe), [x, w, b])

    def bn_case(training):
        def run():
            x = _leaf(rng, (3, 2, 2, 3, 2))
            scale, shift = _leaf(rng, (2,)), _leaf(rng, (2,))
            rm, rv = rng.normal(size=2), rng.uniform(0.5, 2.0, 2)
            probe = _probe(rng, x.shape)

            def build(t, s, h):
                # running statistics are copied so repeated evaluations see the same buffers
                return _scalar(ad.batch_norm(t, s, h, rm.copy(), rv.copy(), training), probe)
            return grad_check(build, [x, scale, shift])
        return run

    cases["batch_norm_train"] = bn_case(True)
    cases["batch_norm_eval"] = bn_case(False)

    def resample_case(shape, dims, mode):
        return lambda: _check_unary(rng, lambda t: ad.resample_volume(t, dims, mode), shape)

    cases["resample_trilinear_up"] = resample_case((1, 2, 3, 2, 3), (6, 4, 6), "trilinear")
    cases["resample_trilinear_down"] = resample_case((1, 2, 4, 4, 2), (2, 2, 1), "trilinear")
    cases["resample_nearest"] = resample_case((1, 1, 2, 3, 2), (4, 6, 4), "nearest")

    @add("scatter_mean")
    def _():
        x = _leaf(rng, (2, 3, 10))
        index = rng.integers(-1, 6, size=(2, 10))
        probe = _probe(rng, (2, 3, 6))
        return grad_check(lambda t: _scalar(ad.scatter_mean(t, index, 6), probe), [x])

    @add("weighted_ce")
    def _():
        logits = _leaf(rng, (2, 12, 3, 2))
        labels = rng.integers(0, 12, size=(2, 3, 2))
        labels[0, 0, 0] = 255
        w = ClassWeights(rng.uniform(0.5, 2.0, 12))
        return grad_check(lambda t: weighted_ce(t, labels, w), [logits])

    @add("smooth_ce")
    def _():
        logits = _leaf(rng, (2, 12, 3, 4))
        labels = rng.integers(0, 12, size=(2, 3, 4))
        labels[1, 2, 3] = 255
        return grad_check(lambda t: smooth_ce(t, labels, 0.1), [logits])

    def block_case(variant, forward):
        def run():
            block = ResidualBlock(2, variant, rng, dtype=f64)
            return _check_module(rng, block, lambda t: forward(t, block), (2, 2, 3, 3, 3))
        return run

    cases["block_preact"] = block_case(BlockVariant.PREACT, preact_residual_forward)
    cases["block_itrm"] = block_case(BlockVariant.ITRM, itrm_forward)

    @add("block_pcr")
    def _():
        block = PcrBlock(2, 3, rng, stride=2, dtype=f64)
        return _check_module(rng, block, block, (2, 2, 4, 4, 4))

    return cases


def run_gradient_suite(seed: int = 0, names=None) -> dict:
    """Run each case; returns name -> (max relative error, seconds)."""
    results = {}
    for name, case in gradient_cases(seed).items():
        if names is not None and name not in names:
            continue
        t0 = time.perf_counter()
        results[name] = (float(case()), time.perf_counter() - t0)
    return results

"""Gradient-check suite covering every differentiable operation.

Each case rebuilds a small float64 graph and compares analytic
gradients against central finite differences.  The suite backs both the
command-line gradcheck and the acceptance tests, so the tolerances are
defined here: 1e-4 for primitives, 1e-3 for the end-to-end composites
(deep graphs accumulate rounding).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dsl import parse_prefix
from .executor import ExecutionEngine, GridConfig, render_features
from .scenes import sample_scene

PRIMITIVE_TOL = 1e-4
END_TO_END_TOL = 1e-3


@dataclass
class GradCheckResult:
    name: str
    worst: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.worst < self.tol


def _t(rng, *shape):
    return Tensor(rng.standard_normal(shape), req=True)


def _primitive_cases(rng):
    a, b = _t(rng, 4, 5), _t(rng, 4, 5)
    row = _t(rng, 5)
    yield "add", lambda: ad.tsum(ad.mul(ad.add(a, row), b)), [a, b, row]
    yield "mul", lambda: ad.tsum(ad.mul(a, b)), [a, b]
    yield "scale", lambda: ad.tsum(ad.scale(a, -1.7)), [a]
    m1, m2 = _t(rng, 3, 4), _t(rng, 4, 6)
    yield "matmul", lambda: ad.tsum(ad.matmul(m1, m2)), [m1, m2]
    x, w, bias = _t(rng, 3, 4), _t(rng, 4, 6), _t(rng, 6)
    yield "linear", lambda: ad.tsum(ad.linear(x, w, bias)), [x, w, bias]
    # offset keeps entries away from relu's kink, where the two-sided
    # difference quotient is not the derivative
    r = Tensor(rng.standard_normal((4, 5)) + 0.3, req=True)
    yield "relu", lambda: ad.tsum(ad.mul(ad.relu(r), b)), [r]
    yield "tanh", lambda: ad.tsum(ad.tanh(a)), [a]
    yield "sigmoid", lambda: ad.tsum(ad.sigmoid(a)), [a]
    yield "tsum_axis", lambda: ad.tsum(ad.mul(ad.tsum(a, axis=0), row)), [a]
    yield "mean", lambda: ad.mean(ad.mul(a, b)), [a]
    yield "reshape", lambda: ad.tsum(ad.mul(ad.reshape(a, (2, 10)), ad.reshape(b, (2, 10)))), [a]
    yield "narrow", lambda: ad.tsum(ad.narrow(a, 1, 1, 3)), [a]
    c1, c2 = _t(rng, 2, 3), _t(rng, 2, 3)
    cmix = _fixed(rng, 2, 6)
    yield "concat", lambda: ad.tsum(ad.mul(ad.concat([c1, c2], axis=1), cmix)), [c1, c2]
    table = _t(rng, 7, 3)
    ids = np.array([1, 4, 4, 0])
    yield "embedding_lookup", lambda: ad.tsum(ad.embedding_lookup(table, ids)), [table]
    g = _t(rng, 4, 5)
    idx = np.array([0, 3, 1, 4])
    yield "gather_rows", lambda: ad.tsum(ad.gather_rows(g, idx)), [g]
    ls = _t(rng, 3, 6)
    yield "log_softmax", lambda: ad.tsum(ad.gather_rows(ad.log_softmax(ls, axis=1), np.array([0, 2, 5]))), [ls]
    ce = _t(rng, 4, 6)
    targets = np.array([0, 5, 2, 2])
    yield "softmax_cross_entropy", lambda: ad.softmax_cross_entropy(ce, targets), [ce]
    cx, cw, cb = _t(rng, 3, 5, 5), _t(rng, 4, 3, 3, 3), _t(rng, 4)
    yield "conv2d_k3", lambda: ad.tsum(ad.conv2d(cx, cw, cb)), [cx, cw, cb]
    pw, pb = _t(rng, 4, 3, 1, 1), _t(rng, 4)
    yield "conv2d_k1", lambda: ad.tsum(ad.conv2d(cx, pw, pb)), [cx, pw, pb]
    bx, bw, bb = _t(rng, 2, 3, 4, 4), _t(rng, 5, 3, 3, 3), _t(rng, 5)
    yield "conv2d_batch", lambda: ad.tsum(ad.conv2d_batch(bx, bw, bb)), [bx, bw, bb]
    # distinct entries keep the pooling argmax stable under perturbation
    mp = Tensor(rng.permutation(36).reshape(3, 4, 3).astype(np.float64), req=True)
    yield "maxpool2x2", lambda: ad.tsum(ad.maxpool2x2(ad.narrow(mp, 2, 0, 2))), [mp]
    mpb = Tensor(rng.permutation(64).reshape(2, 2, 4, 4).astype(np.float64), req=True)
    yield "maxpool2x2_batch", lambda: ad.tsum(ad.maxpool2x2_batch(mpb)), [mpb]


def _fixed(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def _lstm_case(rng):
    x, h, c = _t(rng, 2, 5), _t(rng, 2, 7), _t(rng, 2, 7)
    wx, wh, bias = _t(rng, 5, 28), _t(rng, 7, 28), _t(rng, 28)
    mix_h, mix_c = _fixed(rng, 2, 7), _fixed(rng, 2, 7)

    def fn():
        h2, c2 = ad.lstm_cell(x, h, c, wx, wh, bias)
        return ad.tsum(ad.add(ad.mul(h2, mix_h), ad.mul(c2, mix_c)))

    return fn, [x, h, c, wx, wh, bias]


def _module_network_case(rng):
    grid = GridConfig(cells_x=4, cells_y=4, width=8.0, height=8.0, channels=6, classifier_hidden=10)
    engine = ExecutionEngine(grid, rng=np.random.default_rng(5), dtype=np.float64)
    scene = sample_scene(np.random.default_rng(3), 4)
    feats = render_features(scene, grid)
    program = parse_prefix(["exist", "filter_color[red]", "scene"])
    names = [
        "mod.scene.w1",
        "mod.scene.b1",
        "mod.scene.w4",
        "mod.filter_color[red].w1",
        "mod.filter_color[red].w2",
        "mod.exist.w1",
        "cls.conv.w",
        "cls.fc1.w",
        "cls.fc2.w",
    ]
    tensors = [engine.store[n] for n in names]

    def fn():
        return engine.loss(feats, program, "yes")

    return fn, tensors


def gradcheck_suite(max_entries: int = 60, seed: int = 0) -> list[GradCheckResult]:
    """Run every case; order and contents are deterministic given seed."""
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, tensors in _primitive_cases(rng):
        worst = ad.finite_difference_check(
            fn, tensors, max_entries=max_entries, rng=np.random.default_rng(seed)
        )
        results.append(GradCheckResult(name, worst, PRIMITIVE_TOL))
    fn, tensors = _lstm_case(rng)
    worst = ad.finite_difference_check(
        fn, tensors, max_entries=max_entries, rng=np.random.default_rng(seed)
    )
    results.append(GradCheckResult("lstm_cell", worst, PRIMITIVE_TOL))
    fn, tensors = _module_network_case(rng)
    worst = ad.finite_difference_check(
        fn, tensors, max_entries=40, rng=np.random.default_rng(seed)
    )
    results.append(GradCheckResult("module_network", worst, END_TO_END_TOL))
    return results

"""Finite-difference checks for every differentiable op and loss.

Each case draws a random instance away from kinks and clips (relu at 0,
clamp bounds, the PU max) so central differences are meaningful.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import grid as G
from . import losses as L

Case = Callable[[np.random.Generator], tuple[Callable[..., G.Node], list[np.ndarray]]]


def _away_from_zero(rng, shape, gap=1e-2):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap * 2, x)


def _probs(rng, shape):
    return rng.uniform(0.05, 0.95, size=shape)


def _box(rng, b, h, w):
    m = np.zeros((b, h, w))
    for i in range(b):
        r0, c0 = rng.integers(0, h - 2), rng.integers(0, w - 2)
        r1, c1 = rng.integers(r0 + 1, h), rng.integers(c0 + 1, w)
        m[i, r0:r1, c0:c1] = 1
    return m


def _weighted(rng, node):
    """Contract ``node`` with fixed random weights into a scalar."""
    return G.sum_all(G.mul(node, G.constant(rng.normal(size=node.shape))))


def _elementwise(fn):
    def case(rng):
        w = rng.normal(size=(3, 4))
        return (lambda x: G.sum_all(G.mul(fn(x), G.constant(w)))), [_away_from_zero(rng, (3, 4))]
    return case


def _clamp_case(rng):
    x = rng.uniform(-1, 2, size=(3, 4))
    # keep every coordinate well clear of the bounds 0.2 and 0.8
    x = np.where(np.abs(x - 0.2) < 0.05, x + 0.1, x)
    x = np.where(np.abs(x - 0.8) < 0.05, x + 0.1, x)
    w = rng.normal(size=(3, 4))
    return (lambda a: G.sum_all(G.mul(G.clamp(a, 0.2, 0.8), G.constant(w)))), [x]


def _log_case(rng):
    w = rng.normal(size=(3, 4))
    return (lambda a: G.sum_all(G.mul(G.log(a), G.constant(w)))), [rng.uniform(0.1, 3, (3, 4))]


def _binary(fn):
    def case(rng):
        w = rng.normal(size=(2, 3))
        return (lambda a, b: G.sum_all(G.mul(fn(a, b), G.constant(w)))), \
            [rng.normal(size=(2, 3)), rng.normal(size=(2, 3))]
    return case


def _reduce(fn, over):
    def case(rng):
        w = rng.normal(size=(3,)) if over == "image" else None

        def build(a):
            r = G.reduce(a, fn, over)
            return r if w is None else G.sum_all(G.mul(r, G.constant(w)))
        return build, [rng.normal(size=(3, 1, 2, 3))]
    return case


def _reshape_case(rng):
    w = rng.normal(size=(6, 2))
    return (lambda a: G.sum_all(G.mul(G.reshape(a, (6, 2)), G.constant(w)))), \
        [rng.normal(size=(3, 4))]


def _upsample_case(rng):
    w = rng.normal(size=(2, 1, 6, 4))
    return (lambda a: G.sum_all(G.mul(G.upsample_nearest(a, 2), G.constant(w)))), \
        [rng.normal(size=(2, 1, 3, 2))]


def _conv(stride, padding):
    def case(rng):
        x = rng.normal(size=(2, 2, 5, 5))
        k = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=(3,))
        out_shape = G.conv2d(G.constant(x), G.constant(k), G.constant(b), stride, padding).shape
        w = rng.normal(size=out_shape)
        return (lambda a, kk, bb: G.sum_all(G.mul(G.conv2d(a, kk, bb, stride, padding),
                                                  G.constant(w)))), [x, k, b]
    return case


def _seg_ce(rng):
    y = (rng.random((2, 4, 4)) < 0.5).astype(float)
    return (lambda p: L.seg_ce_loss(p, y)), [_probs(rng, (2, 4, 4))]


def _pu(normalization):
    cfg = L.PULossConfig(normalization=normalization)

    def case(rng):
        while True:
            box = _box(rng, 2, 5, 5)
            p = _probs(rng, (2, 5, 5))
            p = np.where(box == 1, rng.uniform(0.05, 0.4, p.shape), p)
            prior = rng.uniform(0.05, 0.3, size=2)
            nl = -np.log(p)
            if normalization == "per-set-mean":
                eu = (nl * box).sum((1, 2)) / box.sum((1, 2))
                ep = (nl * (1 - box)).sum((1, 2)) / (1 - box).sum((1, 2))
            else:
                eu = (nl * box).sum((1, 2)) / 25
                ep = (nl * (1 - box)).sum((1, 2)) / 25
            if np.all(eu - prior * ep > 0.05):  # max-clip inactive
                break
        return (lambda q: L.pu_box_loss(q, box, list(prior), cfg)), [p]
    return case


def _self_da(rng):
    q = rng.uniform(0, 1, (2, 4, 4))
    return (lambda p: L.self_da_loss(p, q)), [_probs(rng, (2, 4, 4))]


def _self_box(rng):
    box = _box(rng, 2, 5, 5)
    s = rng.uniform(0, 1, (2, 5, 5))
    s = np.where(np.abs(s - 0.5) < 0.01, 0.6, s)
    return (lambda p: L.self_box_loss(p, s, box, 0.5)), [_probs(rng, (2, 5, 5))]


CASES: dict[str, Case] = {
    "relu": _elementwise(G.relu),
    "sigmoid": _elementwise(G.sigmoid),
    "neg": _elementwise(G.neg),
    "add_const": _elementwise(lambda x: G.add_const(x, 0.7)),
    "mul_const": _elementwise(lambda x: G.mul_const(x, -1.3)),
    "log": _log_case,
    "clamp": _clamp_case,
    "add": _binary(G.add),
    "sub": _binary(G.sub),
    "mul": _binary(G.mul),
    "reshape": _reshape_case,
    "sum_all": _reduce("sum", "all"),
    "mean_all": _reduce("mean", "all"),
    "sum_image": _reduce("sum", "image"),
    "mean_image": _reduce("mean", "image"),
    "upsample_nearest": _upsample_case,
    "conv2d": _conv(1, 0),
    "conv2d_pad": _conv(1, 1),
    "conv2d_stride2_pad": _conv(2, 1),
    "seg_ce_loss": _seg_ce,
    "pu_box_loss_per_set_mean": _pu("per-set-mean"),
    "pu_box_loss_per_image": _pu("per-image"),
    "self_da_loss": _self_da,
    "self_box_loss": _self_box,
}


@dataclass
class SuiteResult:
    name: str
    instances: int
    max_rel_error: float
    failures: list[str]

    @property
    def passed(self) -> bool:
        return not self.failures


def run_suite(instances: int = 20, seed: int = 0, tol: float = 1e-5,
              names=None) -> list[SuiteResult]:
    """Run every case ``instances`` times; returns one result per case."""
    results = []
    for k, name in enumerate(names or CASES):
        rng = np.random.default_rng([seed, k])
        worst, failures = 0.0, []
        for i in range(instances):
            builder, inputs = CASES[name](rng)
            rep = G.finite_diff_check(builder, inputs, tol=tol)
            worst = max(worst, max(rep.max_rel_error, default=0.0))
            if not rep.passed:
                failures.append(f"instance {i}: max rel err {max(rep.max_rel_error):.3g} "
                                f"{'; '.join(rep.failures)}".strip())
        results.append(SuiteResult(name, instances, worst, failures))
    return results


def main(instances: int = 20, seed: int = 0, out=None) -> bool:
    t0 = time.perf_counter()
    results = run_suite(instances, seed)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name:28s} n={r.instances} max_rel_err={r.max_rel_error:.2e}", file=out)
    print(f"{sum(r.passed for r in results)}/{len(results)} ops passed "
          f"in {time.perf_counter() - t0:.1f}s", file=out)
    return all(r.passed for r in results)

"""Finite-difference gradient checks for every layer and architecture.

Checks run at float64 on small random shapes.  Parameters are moved to a
random generic point first: identity-style initializations (zero reductor
convolutions, tiny cross-connections) would otherwise leave ReLU inputs
close enough to the kink for central differences to straddle it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, Tensor, grad_check
from .models import KINDS, AttentionBlock, TaskSpec, _CTL_TYPES, build_model, default_backbone
from .nn import FDYConv, conv2d, dense, frequency_layer_norm, global_avg_pool, max_pool2d, softmax_cross_entropy

F64 = np.float64


@dataclass
class CheckResult:
    name: str
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<28} max_rel_err={self.report.max_rel_err:.2e} checked={self.report.n_checked}"


def _t(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=F64)


def _weighted(rng, shape):
    # fixed random projection so the scalar loss depends on every output element
    w = Tensor(rng.standard_normal(shape), dtype=F64)
    return lambda y: ad.reduce("sum", ad.mul(y, w))


def layer_checks(seed: int = 0, tol: float = 1e-5) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []

    def run(name: str, f: Callable, inputs):
        out.append(CheckResult(name, grad_check(f, inputs, tol=tol)))

    x = _t(rng, 2, 3, 8, 6)
    w = _t(rng, 4, 3, 3, 3)
    b = _t(rng, 4)
    proj = _weighted(rng, (2, 4, 8, 6))
    run("conv2d", lambda x, w, b: proj(conv2d(x, w, b, 1, 1)), [x, w, b])
    proj2 = _weighted(rng, (2, 4, 4, 3))
    run("conv2d_stride2", lambda x, w, b: proj2(conv2d(x, w, b, 2, 1)), [x, w, b])
    proj3 = _weighted(rng, (2, 3, 4, 3))
    run("max_pool2d", lambda x: proj3(max_pool2d(x, 2)), [x])
    g, be = _t(rng, 8), _t(rng, 8)
    proj4 = _weighted(rng, (2, 3, 8, 6))
    run("frequency_layer_norm", lambda x, g, be: proj4(frequency_layer_norm(x, g, be)), [x, g, be])
    fdy = FDYConv(3, 2, 3, rng=rng, dtype=F64)
    for p in fdy.params.values():
        p.data += rng.standard_normal(p.shape) * 0.3
    proj5 = _weighted(rng, (2, 2, 8, 6))
    run("fdy_conv", lambda x, *ps: proj5(fdy(x)), [x, *fdy.params.values()])
    proj6 = _weighted(rng, (2, 3))
    run("global_avg_pool", lambda x: proj6(global_avg_pool(x)), [x])
    xd, wd, bd = _t(rng, 2, 5), _t(rng, 5, 4), _t(rng, 4)
    labels = np.array([1, 3])
    run("dense+softmax_ce", lambda x, w, b: softmax_cross_entropy(dense(w, b, x), labels), [xd, wd, bd])
    a, c = _t(rng, 3, 4), _t(rng, 4, 2)
    proj7 = _weighted(rng, (3, 2))
    run("matmul", lambda a, c: proj7(ad.matmul(a, c)), [a, c])
    e = _t(rng, 3, 4)
    proj8 = _weighted(rng, (3, 4))
    run("sigmoid/exp", lambda e: proj8(ad.add(ad.sigmoid(e), ad.exp(ad.scale(e, 0.5)))), [e])
    pos = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True, dtype=F64)
    run("log", lambda p: proj8(ad.log(p)), [pos])
    run("softmax", lambda e: proj8(ad.softmax(e, axis=1)), [e])
    proj9 = _weighted(rng, (3, 8))
    run("concat/slice", lambda a, e: proj9(ad.concat([a, ad.slice_axis(e, 1, 0, 4)], axis=1)), [a, e])
    run("transpose/reduce_max", lambda e: ad.reduce("sum", ad.reduce("max", ad.transpose(e, (1, 0)), axes=1)), [e])

    feats = [_t(rng, 2, 3, 4, 4) for _ in range(3)]
    projs = [_weighted(rng, (2, 3, 4, 4)) for _ in range(3)]
    for kind, cls in _CTL_TYPES.items():
        ctl = cls(3, 3, rng, F64)
        for p in ctl.params.values():
            p.data += rng.standard_normal(p.shape) * 0.3
        params = list(ctl.params.values())

        def f(*ts, ctl=ctl):
            ys = ctl(list(ts[:3]))
            total = projs[0](ys[0])
            for pj, y in zip(projs[1:], ys[1:]):
                total = ad.add(total, pj(y))
            return total

        run(f"ctl_{kind}", f, feats + params)
    att = AttentionBlock(3, rng, F64, depth=2)
    for p in att.params.values():
        p.data += rng.standard_normal(p.shape) * 0.3
    run("mtan_attention", lambda x, *ps: projs[0](att(x)), [feats[0], *att.params.values()])
    return out


def check_architecture(kind: str, seed: int = 0, tol: float = 1e-5, fdy: bool = True) -> CheckResult:
    """Whole-model check with FLN in every block and FDY on the last two."""
    rng = np.random.default_rng(seed + 1000)
    tasks = [TaskSpec("main", 4), TaskSpec("aux_a", 3, "auxiliary"), TaskSpec("aux_b", 2, "auxiliary")]
    if kind == "stl":
        tasks = tasks[:1]
    bb = default_backbone(1, 16, fdy=fdy, ctl=kind in ("cs", "cc", "nddr", "rndr"), channels=(3, 4, 4), pools=(2, 2, 1))
    model = build_model(kind, bb, tasks, seed=seed, dtype=F64)
    params = model.parameters()
    for p in params.values():
        p.data += rng.standard_normal(p.shape) * 0.2
    x = Tensor(rng.standard_normal((2, 1, 16, 8)), dtype=F64)
    labels = [rng.integers(0, t.n_classes, 2) for t in tasks]
    names = list(params)

    def loss(*ps):
        logits = model(x)
        total = softmax_cross_entropy(logits[0], labels[0])
        for lg, lb in zip(logits[1:], labels[1:]):
            total = ad.add(total, softmax_cross_entropy(lg, lb))
        return total

    report = grad_check(loss, [params[n] for n in names], tol=tol, max_per_input=24, seed=seed)
    return CheckResult(f"arch_{kind}", report)


def architecture_checks(seed: int = 0, tol: float = 1e-5) -> list[CheckResult]:
    return [check_architecture(k, seed, tol) for k in KINDS]


def run_all(seed: int = 0, tol: float = 1e-5) -> list[CheckResult]:
    return layer_checks(seed, tol) + architecture_checks(seed, tol)

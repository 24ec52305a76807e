"""Named finite-difference checks for every primitive and the composed loss.

Cases look primitives up on the ``autodiff`` module at call time, so a
patched primitive is what gets checked.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .adaptation import AdaptationBlock, block_output, sample_reg_subset
from .attention import AttentionState, attend
from .autodiff import GradCheckReport, Tensor, grad_check, parameter
from .mmd import KernelSpec, mmd2

TOL = 1e-4
MICRO_BATCH = 4

Builder = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


@dataclass
class CaseResult:
    name: str
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def _p(rng, *shape, lo=None):
    x = rng.normal(size=shape)
    if lo is not None:
        x = np.abs(x) + lo
    return parameter(x)


def _unary(fn_name: str, lo=None):
    def build(rng):
        x = _p(rng, 3, 4, lo=lo)
        w = rng.normal(size=(3, 4))  # random projection keeps every output coordinate in play
        return (lambda: (getattr(ad, fn_name)(x) * w).sum()), [x]

    return build


def _binary(fn_name: str, positive_b: bool = False):
    def build(rng):
        a = _p(rng, 3, 4)
        b = _p(rng, 1, 4, lo=0.5 if positive_b else None)  # broadcast along rows
        w = rng.normal(size=(3, 4))
        return (lambda: (getattr(ad, fn_name)(a, b) * w).sum()), [a, b]

    return build


def _power(rng):
    x = _p(rng, 3, 4, lo=0.3)
    w = rng.normal(size=(3, 4))
    return (lambda: (ad.power(x, 2.5) * w).sum()), [x]


def _clip(rng):
    x = _p(rng, 4, 5)
    w = rng.normal(size=(4, 5))
    return (lambda: (ad.clip(x, -0.5, 0.5) * w).sum()), [x]


def _xlogx(rng):
    x = _p(rng, 3, 4, lo=0.05)
    w = rng.normal(size=(3, 4))
    return (lambda: (ad.xlogx(x) * w).sum()), [x]


def _softmax(kind: str):
    def build(rng):
        x = _p(rng, 4, 5)
        w = rng.normal(size=(4, 5))
        return (lambda: (getattr(ad, kind)(x, axis=1) * w).sum()), [x]

    return build


def _reduce(kind: str):
    def build(rng):
        x = _p(rng, 3, 4, 2)
        w = rng.normal(size=(3, 2))
        return (lambda: (getattr(ad, kind)(x, axis=1) * w).sum()), [x]

    return build


def _reshape(rng):
    x = _p(rng, 3, 4)
    w = rng.normal(size=(2, 6))
    return (lambda: (ad.reshape(x, (2, 6)) * w).sum()), [x]


def _transpose(rng):
    x = _p(rng, 2, 3, 4)
    w = rng.normal(size=(4, 2, 3))
    return (lambda: (ad.transpose(x, (2, 0, 1)) * w).sum()), [x]


def _take(rng):
    x = _p(rng, 5, 3)
    idx = np.array([0, 2, 2, 4])  # repeated index accumulates
    w = rng.normal(size=(4, 3))
    return (lambda: (ad.take(x, idx) * w).sum()), [x]


def _concat(rng):
    a, b = _p(rng, 2, 3), _p(rng, 4, 3)
    w = rng.normal(size=(6, 3))
    return (lambda: (ad.concat([a, b], axis=0) * w).sum()), [a, b]


def _matmul(rng):
    a, b = _p(rng, 3, 4), _p(rng, 4, 2)
    w = rng.normal(size=(3, 2))
    return (lambda: (ad.matmul(a, b) * w).sum()), [a, b]


def _linear(rng):
    x, W, b = _p(rng, MICRO_BATCH, 5), _p(rng, 3, 5), _p(rng, 3)
    w = rng.normal(size=(MICRO_BATCH, 3))
    return (lambda: (ad.linear(x, W, b) * w).sum()), [x, W, b]


def _conv2d(rng):
    x, W, b = _p(rng, 2, 3, 6, 6), _p(rng, 4, 3, 3, 3), _p(rng, 4)
    w = rng.normal(size=(2, 4, 3, 3))
    return (lambda: (ad.conv2d(x, W, b, stride=2, pad=1) * w).sum()), [x, W, b]


def _mmd(estimator: str):
    def build(rng):
        A, B = _p(rng, MICRO_BATCH, 3), _p(rng, 5, 3)
        spec = KernelSpec().resolve(A.data, B.data)
        return (lambda: mmd2(A, B, spec, estimator=estimator)), [A, B]

    return build


def _attention(rng):
    state = AttentionState.init(8, tau=2, seed=rng)
    state.fc_t.W.data += rng.normal(0, 0.1, state.fc_t.W.shape)
    X = _p(rng, 2, 8, 3, 3)
    w = rng.normal(size=(2, 8, 3, 3))

    def f():
        out_s, _ = attend(X, state, "source")
        out_t, _ = attend(X, state, "target")
        return (out_s * w).sum() + (out_t * w).sum() * 0.5

    return f, [X] + state.params()


def _adaptation(rng):
    blk = AdaptationBlock.init(5, seed=rng)
    blk.fc2.W.data[:] = rng.normal(0, 0.3, blk.fc2.W.shape)
    G = _p(rng, MICRO_BATCH, 5)
    w = rng.normal(size=(MICRO_BATCH, 5))
    return (lambda: (block_output(G, blk) * w).sum()), [G] + blk.params()


def _renormalize(rng):
    blk = AdaptationBlock.init(4, post_softmax=True, seed=rng)
    blk.fc2.W.data[:] = rng.normal(0, 0.05, blk.fc2.W.shape)
    P = parameter(ad.softmax(Tensor(rng.normal(size=(MICRO_BATCH, 4))), axis=1).data)
    w = rng.normal(size=(MICRO_BATCH, 4))
    return (lambda: (block_output(P, blk) * w).sum()), [P] + blk.params()


def _objective(rng):
    # imported here: train pulls in the model, which imports this package's leaves
    from .config import TrainConfig
    from .data import DomainPairSpec, generate
    from .routing import RoutingPolicy
    from .train import build_model, layer_kernels, objective

    cfg = TrainConfig(channels=(4, 8), hidden_dim=8, tau=2)
    src, tgt = generate(DomainPairSpec(classes=3, samples_per_class=3, image_size=(3, 8, 8), seed=11))
    model = build_model(cfg, 3)
    model.calibrate_norm(src.images.astype(np.float64))
    # move blocks and target branches off their identity initialization
    for blk in model.blocks:
        blk.fc2.W.data[:] = rng.normal(0, 0.05, blk.fc2.W.shape)
        blk.fc2.b.data[:] = rng.normal(0, 0.01, blk.fc2.b.shape)
    for st in model.stages:
        st.attention.fc_t.W.data += rng.normal(0, 0.1, st.attention.fc_t.W.shape)
    policy = RoutingPolicy(lambda_schedule=[0.0, 1.0])  # one separated, one shared module
    x_s = src.images[:MICRO_BATCH].astype(np.float64)
    y_s = src.labels[:MICRO_BATCH]
    x_t = tgt.images[:MICRO_BATCH].astype(np.float64)
    R = sample_reg_subset(MICRO_BATCH, 2.0, 3, rng)
    first = objective(model, x_s, y_s, x_t, cfg, policy, R, detach_reg=False)
    kernels = layer_kernels(first.out, KernelSpec())

    def f():
        return objective(model, x_s, y_s, x_t, cfg, policy, R, kernels=kernels, detach_reg=False).total

    return f, model.parameters()


CASES: dict[str, Builder] = {
    "add": _binary("add"),
    "sub": _binary("sub"),
    "mul": _binary("mul"),
    "div": _binary("div", positive_b=True),
    "power": _power,
    "exp": _unary("exp"),
    "log": _unary("log", lo=0.2),
    "sqrt": _unary("sqrt", lo=0.2),
    "xlogx": _xlogx,
    "clip": _clip,
    "relu": _unary("relu"),
    "sigmoid": _unary("sigmoid"),
    "tanh": _unary("tanh"),
    "log_softmax": _softmax("log_softmax"),
    "softmax": _softmax("softmax"),
    "sum": _reduce("tsum"),
    "mean": _reduce("tmean"),
    "reshape": _reshape,
    "transpose": _transpose,
    "take": _take,
    "concat": _concat,
    "matmul": _matmul,
    "linear": _linear,
    "conv2d": _conv2d,
    "mmd2_biased": _mmd("biased"),
    "mmd2_unbiased": _mmd("unbiased"),
    "attention": _attention,
    "adaptation_block": _adaptation,
    "renormalize": _renormalize,
    "objective": _objective,
}


def run_case(name: str, seed: int = 0, tol: float = TOL) -> CaseResult:
    if name not in CASES:
        raise KeyError(f"unknown grad-check case {name!r}")
    rng = np.random.default_rng(seed)
    f, params = CASES[name](rng)
    return CaseResult(name, grad_check(f, params, tol=tol))


def run_suite(names=None, seed: int = 0, tol: float = TOL) -> list[CaseResult]:
    names = list(CASES) if names is None else list(names)
    return [run_case(n, seed, tol) for n in names]

"""Training objective and optimization protocol.

The loss is ``L_s + alpha * (L_M + L_reg) + beta * L_e``: source cross
entropy, layer-wise MMD between source features and corrected target
features, the regularization of the correction blocks on a random source
subset, and the entropy of target predictions. Optimization is SGD with
momentum, an inverse-power annealed learning rate and per-group multipliers.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .adaptation import regularization_loss, sample_reg_subset
from .autodiff import Tensor, as_tensor, log_softmax, xlogx
from .config import TrainConfig
from .data import LabeledImageSet
from .mmd import KernelSpec, mmd2
from .model import Model, PairOutput
from .routing import RouteDecision, RoutingPolicy

log = logging.getLogger(__name__)

METRIC_KEYS = ("epoch", "L_s", "L_M", "L_reg", "L_e", "total", "src_acc", "tgt_acc", "lr")


class DivergenceError(RuntimeError):
    def __init__(self, step: int, components: dict[str, float]):
        self.step = step
        self.components = components
        bad = ", ".join(f"{k}={v}" for k, v in components.items())
        super().__init__(f"non-finite loss at step {step}: {bad}")


# ----------------------------------------------------------------------------
# loss terms
# ----------------------------------------------------------------------------


def source_ce_loss(logits_s: Tensor, labels_s) -> Tensor:
    """Mean cross entropy; labels are class ids in ``0..C_n-1``."""
    logits_s = as_tensor(logits_s)
    labels = np.asarray(labels_s)
    n, c = logits_s.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range 0..{c - 1}")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    return -(log_softmax(logits_s, axis=1) * onehot).sum() * (1.0 / n)


def target_entropy_loss(probs_t: Tensor, atol: float = 1e-6) -> Tensor:
    probs_t = as_tensor(probs_t)
    sums = probs_t.data.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > atol) or np.any(probs_t.data < 0):
        raise ValueError("target_entropy_loss expects rows that are probability distributions")
    return -xlogx(probs_t).sum() * (1.0 / probs_t.shape[0])


def total_loss(L_s, L_M, L_reg, L_e, cfg: TrainConfig):
    comps = {k: as_tensor(v) for k, v in {"L_s": L_s, "L_M": L_M, "L_reg": L_reg, "L_e": L_e}.items()}
    vals = {k: v.item() for k, v in comps.items()}
    if not all(math.isfinite(v) for v in vals.values()):
        raise DivergenceError(-1, vals)
    return comps["L_s"] + (comps["L_M"] + comps["L_reg"]) * cfg.alpha + comps["L_e"] * cfg.beta


def lr_at(q: float, cfg: TrainConfig) -> float:
    """Base learning rate at training progress ``q`` in [0, 1]."""
    if not 0.0 <= q <= 1.0:
        raise ValueError("progress must lie in [0, 1]")
    return cfg.base_lr * (1.0 + cfg.anneal.a * q) ** (-cfg.anneal.b)


def group_lrs(q: float, cfg: TrainConfig) -> dict[str, float]:
    lr = lr_at(q, cfg)
    return {"backbone": lr, "classifier": lr * cfg.classifier_lr_mult, "adapt": lr * cfg.adapt_lr_mult}


def sgd_step(params: Sequence, grads: Sequence, velocities: Sequence, lrs, momentum: float):
    """In-place ``v <- momentum * v + g; theta <- theta - lr * v``.

    ``params`` may be tensors or arrays; ``lrs`` is one rate or one per param.
    """
    if not (len(params) == len(grads) == len(velocities)):
        raise ValueError("params, grads and velocities differ in length")
    if np.isscalar(lrs):
        lrs = [lrs] * len(params)
    out = []
    for p, g, v, lr in zip(params, grads, velocities, lrs):
        arr = p.data if isinstance(p, Tensor) else p
        if g is None:
            g = np.zeros_like(arr)
        if np.shape(g) != arr.shape or v.shape != arr.shape:
            raise ValueError(f"shape mismatch: param {arr.shape}, grad {np.shape(g)}, velocity {v.shape}")
        v *= momentum
        v += g
        arr -= lr * v
        out.append(p)
    return out


# ----------------------------------------------------------------------------
# one objective evaluation
# ----------------------------------------------------------------------------


@dataclass
class LossTerms:
    total: Tensor
    L_s: Tensor
    L_M: Tensor
    L_reg: Tensor
    L_e: Tensor
    out: PairOutput

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("L_s", "L_M", "L_reg", "L_e", "total")}


def layer_kernels(out: PairOutput, base: KernelSpec) -> list[KernelSpec]:
    """Bandwidths per task layer from the detached pooled source/target features."""
    return [base.resolve(gs.data, gt.data) for gs, gt in zip(out.G_s, out.G_t_hat)]


def objective(
    model: Model,
    x_s,
    y_s,
    x_t,
    cfg: TrainConfig,
    policy: RoutingPolicy,
    reg_subset,
    step: int = 0,
    kernels: Sequence[KernelSpec] | None = None,
    use_attention: bool = True,
    detach_reg: bool = True,
) -> LossTerms:
    out = model.forward_pair(x_s, x_t, policy, step, use_attention)
    specs = list(kernels) if kernels is not None else layer_kernels(out, KernelSpec())
    L_s = source_ce_loss(out.logits_s, y_s)
    L_M = None
    for gs, gt, sp in zip(out.G_s, out.G_t_hat, specs):
        term = mmd2(gs, gt, sp)
        L_M = term if L_M is None else L_M + term
    # the regularizer constrains the correction blocks only
    G_s_fixed = [g.detach() for g in out.G_s] if detach_reg else out.G_s
    L_reg = regularization_loss(G_s_fixed, y_s, reg_subset, model.blocks, specs, model.num_classes)
    L_e = target_entropy_loss(out.G_t_hat[-1])
    try:
        total = total_loss(L_s, L_M, L_reg, L_e, cfg)
    except DivergenceError as exc:
        raise DivergenceError(step, exc.components) from None
    return LossTerms(total, L_s, L_M, L_reg, L_e, out)


# ----------------------------------------------------------------------------
# training loop
# ----------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: Model
    metrics: list[dict] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)
    decisions: list[RouteDecision] = field(default_factory=list)
    policy: RoutingPolicy | None = None

    def final(self) -> dict:
        return self.metrics[-1]

    def metrics_jsonl(self) -> str:
        return "".join(json.dumps(m, sort_keys=False) + "\n" for m in self.metrics)


def make_policy(cfg: TrainConfig) -> RoutingPolicy:
    return RoutingPolicy(cfg.metric, cfg.lam, cfg.ema_decay, cfg.eval_mode)


def build_model(cfg: TrainConfig, num_classes: int) -> Model:
    return Model(num_classes, cfg.channels, 3, cfg.hidden_dim, cfg.tau, cfg.freeze_norm, seed=cfg.seed)


def _as_float(images: np.ndarray) -> np.ndarray:
    return np.asarray(images, dtype=np.float64)


def train(
    cfg: TrainConfig,
    source: LabeledImageSet,
    target: LabeledImageSet,
    use_attention: bool = True,
    log_every: int = 0,
) -> TrainResult:
    """Train on labelled ``source`` and unlabelled ``target``.

    Target labels are only read to report ``tgt_acc``.
    """
    if source.num_classes != target.num_classes:
        raise ValueError("source and target label spaces differ")
    rng = np.random.default_rng(cfg.seed)
    model = build_model(cfg, source.num_classes)
    policy = make_policy(cfg)
    xs_all, ys_all = _as_float(source.images), np.asarray(source.labels)
    xt_all = _as_float(target.images)

    if cfg.freeze_norm:
        calib = rng.choice(len(xs_all), size=min(cfg.calibration_samples, len(xs_all)), replace=False)
        model.calibrate_norm(xs_all[calib])

    groups = model.param_groups()
    velocities = {g: [np.zeros_like(p.data) for p in ps] for g, ps in groups.items()}
    B = cfg.batch_per_domain
    iters_per_epoch = max(1, min(len(xs_all), len(xt_all)) // B)
    total_steps = max(1, cfg.epochs * iters_per_epoch)
    result = TrainResult(model, policy=policy)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        sums = dict.fromkeys(("L_s", "L_M", "L_reg", "L_e", "total"), 0.0)
        for _ in range(iters_per_epoch):
            q = step / total_steps
            lrs = group_lrs(q, cfg)
            i_s = rng.integers(0, len(xs_all), B)
            i_t = rng.integers(0, len(xt_all), B)
            R = sample_reg_subset(B, cfg.p, model.num_classes, rng)
            terms = objective(model, xs_all[i_s], ys_all[i_s], xt_all[i_t], cfg, policy, R, step, use_attention=use_attention)
            for p in model.parameters():
                p.grad = None
            terms.total.backward()
            for g, ps in groups.items():
                sgd_step(ps, [p.grad for p in ps], velocities[g], lrs[g], cfg.momentum)
            vals = terms.values()
            for k in sums:
                sums[k] += vals[k]
            result.steps.append({"step": step, "epoch": epoch, **vals})
            result.decisions.extend(terms.out.decisions)
            if log_every and step % log_every == 0:
                log.info("step %d %s", step, {k: round(v, 4) for k, v in vals.items()})
            step += 1
        record = {"epoch": epoch}
        record.update({k: v / iters_per_epoch for k, v in sums.items()})
        record["src_acc"] = model.accuracy(source.images, source.labels, "source", policy, use_attention)
        record["tgt_acc"] = model.accuracy(target.images, target.labels, "target", policy, use_attention)
        record["lr"] = lr_at(min(step / total_steps, 1.0), cfg)
        result.metrics.append(record)
        log.info("epoch %d %s", epoch, record)
    return result

"""Adaptive route selection between shared and separate target attention.

The target stream borrows the source reduction layer while the batch-wise
statistic distance stays below the threshold, and switches to its own
layer otherwise. Distances are computed on detached activations.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .attention import AttentionState, attend, channel_descriptor
from .autodiff import Tensor, as_tensor
from .mmd import KernelSpec, median_bandwidth, mmd2

EPS = 1e-5
METRICS = ("tanh_ratio", "mmd", "kl")
EVAL_MODES = ("frozen_ema", "per_batch")
REPORT_HEADER = ("module_id", "step_count", "separation_fraction", "mean_mhat")


@dataclass
class RouteDecision:
    module_id: str
    m_s: float
    m_t: float
    m_hat: float
    lam: float
    separated: bool
    step: int


@dataclass
class RoutingPolicy:
    metric: str = "tanh_ratio"
    lambda_schedule: float | list[float] = 0.2
    ema_decay: float = 0.9
    eval_mode: str = "frozen_ema"
    eps: float = EPS

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if self.eval_mode not in EVAL_MODES:
            raise ValueError(f"eval_mode must be one of {EVAL_MODES}, got {self.eval_mode!r}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        lams = self.lambda_schedule if isinstance(self.lambda_schedule, (list, tuple)) else [self.lambda_schedule]
        if not lams or any(not 0.0 <= float(v) <= 1.0 for v in lams):
            raise ValueError(f"lambda values must lie in [0, 1], got {self.lambda_schedule!r}")

    def lambda_for(self, stage: int) -> float:
        sched = self.lambda_schedule
        if isinstance(sched, (list, tuple)):
            return float(sched[min(stage, len(sched) - 1)])
        return float(sched)


def domain_statistic(X, eps: float = EPS) -> float:
    """Batch-wise ``mean / sqrt(var + eps)`` over every element of ``X``."""
    x = np.asarray(as_tensor(X).data)
    if x.size == 0 or x.shape[0] < 1:
        raise ValueError("domain_statistic needs a non-empty batch")
    if eps <= 0:
        raise ValueError("eps must be positive")
    return float(x.mean() / math.sqrt(x.var() + eps))


# float64 tanh reaches exactly 1.0 near 19; keep m_hat strictly below 1
_BELOW_ONE = math.nextafter(1.0, 0.0)


def squash(x: float) -> float:
    """``tanh`` of a non-negative discrepancy, kept inside [0, 1)."""
    return min(math.tanh(x), _BELOW_ONE)


def statistic_distance(m_s: float, m_t: float, eps: float = EPS) -> float:
    """``tanh(|m_s - m_t| / max(|m_t|, eps))``, always in [0, 1)."""
    return squash(abs(m_s - m_t) / max(abs(m_t), eps))


def route_decide(m_hat: float, lam: float) -> bool:
    """True means separated (target uses its own branch)."""
    return not (m_hat < lam)


def _mmd_distance(X_s: np.ndarray, X_t: np.ndarray) -> float:
    d_s = channel_descriptor(Tensor(X_s)).data
    d_t = channel_descriptor(Tensor(X_t)).data
    pooled = np.concatenate([d_s, d_t])
    spec = KernelSpec((median_bandwidth(pooled),)) if len(pooled) >= 2 else KernelSpec((1.0,))
    return max(mmd2(d_s, d_t, spec).item(), 0.0)


def _kl_distance(X_s: np.ndarray, X_t: np.ndarray, eps: float) -> float:
    mu_s, var_s = X_s.mean(), X_s.var() + eps
    mu_t, var_t = X_t.mean(), X_t.var() + eps
    return float(0.5 * (math.log(var_t / var_s) + (var_s + (mu_s - mu_t) ** 2) / var_t - 1.0))


def measure(X_s, X_t, policy: RoutingPolicy) -> tuple[float, float, float]:
    """Return ``(m_s, m_t, m_hat)`` for the two batches under ``policy.metric``."""
    xs, xt = np.asarray(as_tensor(X_s).data), np.asarray(as_tensor(X_t).data)
    m_s, m_t = domain_statistic(xs, policy.eps), domain_statistic(xt, policy.eps)
    if policy.metric == "tanh_ratio":
        m_hat = statistic_distance(m_s, m_t, policy.eps)
    elif policy.metric == "mmd":
        m_hat = squash(_mmd_distance(xs, xt))
    else:
        m_hat = squash(max(_kl_distance(xs, xt, policy.eps), 0.0))
    return m_s, m_t, m_hat


def _ema(prev: float | None, value: float, decay: float) -> float:
    return value if prev is None else decay * prev + (1.0 - decay) * value


def aam_forward(
    X_s: Tensor,
    X_t: Tensor,
    state: AttentionState,
    policy: RoutingPolicy,
    step: int = 0,
    stage: int = 0,
) -> tuple[Tensor, Tensor, RouteDecision]:
    """Training-time forward of one adaptive attention module."""
    m_s, m_t, m_hat = measure(X_s, X_t, policy)
    lam = policy.lambda_for(stage)
    separated = route_decide(m_hat, lam)
    state.ema_mhat = _ema(state.ema_mhat, m_hat, policy.ema_decay)
    state.ema_ms = _ema(state.ema_ms, m_s, policy.ema_decay)
    state.ema_mt = _ema(state.ema_mt, m_t, policy.ema_decay)
    out_s, _ = attend(X_s, state, "source")
    out_t, _ = attend(X_t, state, "target" if separated else "source")
    return out_s, out_t, RouteDecision(state.module_id, m_s, m_t, m_hat, lam, separated, step)


def eval_route(X_t, state: AttentionState, policy: RoutingPolicy, stage: int = 0) -> bool:
    """Route for a target-only evaluation batch; True means separated."""
    lam = policy.lambda_for(stage)
    if policy.eval_mode == "per_batch" and state.ema_ms is not None:
        if policy.metric != "tanh_ratio":
            raise ValueError("per_batch evaluation routing needs the tanh_ratio metric")
        m_hat = statistic_distance(state.ema_ms, domain_statistic(X_t, policy.eps), policy.eps)
    elif state.ema_mhat is not None:
        m_hat = state.ema_mhat
    else:
        # never trained: nothing to separate on
        return lam <= 0.0
    return route_decide(m_hat, lam)


# ----------------------------------------------------------------------------
# reporting
# ----------------------------------------------------------------------------


@dataclass
class RoutingRow:
    module_id: str
    step_count: int
    separation_fraction: float
    mean_mhat: float


def routing_report(decisions: Sequence[RouteDecision]) -> list[RoutingRow]:
    if not decisions:
        raise ValueError("routing_report needs at least one decision")
    grouped: dict[str, list[RouteDecision]] = {}
    for d in decisions:
        grouped.setdefault(d.module_id, []).append(d)
    rows = []
    for mid, ds in grouped.items():
        sep = sum(d.separated for d in ds)
        rows.append(RoutingRow(mid, len(ds), sep / len(ds), float(np.mean([d.m_hat for d in ds]))))
    return rows


def separation_fraction(decisions: Iterable[RouteDecision]) -> float:
    ds = list(decisions)
    if not ds:
        return 0.0
    return sum(d.separated for d in ds) / len(ds)


def separation_count(m_hats: Iterable[float], lam: float) -> int:
    return sum(route_decide(m, lam) for m in m_hats)


def report_csv(rows: Sequence[RoutingRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_HEADER)
    for r in rows:
        writer.writerow([r.module_id, r.step_count, repr(r.separation_fraction), repr(r.mean_mhat)])
    return buf.getvalue()


def decisions_to_dicts(decisions: Sequence[RouteDecision]) -> list[dict]:
    return [asdict(d) for d in decisions]

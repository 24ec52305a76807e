"""Plot-ready diagnostics: channel attention differences and threshold sweeps."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import TrainConfig
from .data import LabeledImageSet
from .model import Model
from .routing import RoutingPolicy, route_decide, separation_fraction
from .train import train

ATTENTION_HEADER = ("module_id", "channel", "attention_diff", "stage_mean_diff")
SWEEP_HEADER = ("lambda", "separation_count", "separation_fraction", "target_accuracy")


@dataclass
class AttentionDiffRow:
    module_id: str
    channel: int
    attention_diff: float
    stage_mean_diff: float


def attention_differences(
    model: Model, source: LabeledImageSet, target: LabeledImageSet, policy: RoutingPolicy | None = None
) -> list[np.ndarray]:
    """Per stage, ``|mean omega_s - mean omega_t|`` per channel.

    Source images use the source branch; target images take the route the
    model would use at evaluation.
    """
    om_s = model.mean_attention(source.images, "source", policy)
    om_t = model.mean_attention(target.images, "target", policy)
    return [np.abs(a - b) for a, b in zip(om_s, om_t)]


def attention_diff_report(
    model: Model, source: LabeledImageSet, target: LabeledImageSet, policy: RoutingPolicy | None = None
) -> list[AttentionDiffRow]:
    rows = []
    for st, diff in zip(model.stages, attention_differences(model, source, target, policy)):
        stage_mean = float(diff.mean())
        rows += [AttentionDiffRow(st.attention.module_id, i, float(v), stage_mean) for i, v in enumerate(diff)]
    return rows


def stage_means(rows: Sequence[AttentionDiffRow]) -> dict[str, float]:
    return {r.module_id: r.stage_mean_diff for r in rows}


@dataclass
class SweepRow:
    lam: float
    separation_count: int  # modules routed to the target branch at evaluation
    separation_fraction: float  # over every training decision
    target_accuracy: float


def eval_separation_count(model: Model, policy: RoutingPolicy) -> int:
    """Modules whose end-of-training EMA of m_hat selects the target branch."""
    count = 0
    for i, st in enumerate(model.stages):
        m_hat = st.attention.ema_mhat
        count += int(m_hat is not None and route_decide(m_hat, policy.lambda_for(i)))
    return count


def routing_sweep(
    cfg: TrainConfig,
    lambdas: Sequence[float],
    source: LabeledImageSet,
    target: LabeledImageSet,
    on_run: Callable | None = None,
) -> list[SweepRow]:
    """One seeded training run per threshold.

    ``on_run(lam, result)`` is called after each run, e.g. to save artifacts.
    """
    rows = []
    for lam in lambdas:
        run_cfg = replace(cfg, lam=float(lam))
        run_cfg.validate()
        result = train(run_cfg, source, target)
        rows.append(
            SweepRow(
                float(lam),
                eval_separation_count(result.model, result.policy),
                separation_fraction(result.decisions),
                result.final()["tgt_acc"] if result.metrics else float("nan"),
            )
        )
        if on_run is not None:
            on_run(float(lam), result)
    return rows


def _csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def attention_csv(rows: Sequence[AttentionDiffRow]) -> str:
    return _csv(ATTENTION_HEADER, [(r.module_id, r.channel, repr(r.attention_diff), repr(r.stage_mean_diff)) for r in rows])


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    return _csv(SWEEP_HEADER, [(repr(r.lam), r.separation_count, repr(r.separation_fraction), repr(r.target_accuracy)) for r in rows])


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path

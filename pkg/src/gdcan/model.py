"""Desk-scale backbone with adaptive attention and adaptation heads.

Each stage is ``conv3x3(stride 2) -> norm -> relu -> attention``. After the
last stage come global average pooling (task layer 1), a hidden affine layer,
the classifier and softmax (task layer 2). Target features pass through an
adaptation block at both task layers.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adaptation import AdaptationBlock, block_output
from .attention import Affine, AttentionState, attend
from .autodiff import Tensor, as_tensor, conv2d, no_grad, parameter, relu, softmax, sqrt
from .routing import RouteDecision, RoutingPolicy, aam_forward, eval_route

NORM_EPS = 1e-5


@dataclass(eq=False)
class Norm:
    """Per-channel normalization; frozen statistics unless ``trainable``."""

    mean: np.ndarray
    var: np.ndarray
    gamma: Tensor
    beta: Tensor
    trainable: bool = False
    momentum: float = 0.1

    @classmethod
    def identity(cls, channels: int, trainable: bool) -> "Norm":
        return cls(
            np.zeros(channels), np.ones(channels),
            Tensor(np.ones(channels), requires_grad=trainable),
            Tensor(np.zeros(channels), requires_grad=trainable),
            trainable,
        )

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        shape = (1, -1, 1, 1)
        if self.trainable and training:
            mu = x.mean(axis=(0, 2, 3), keepdims=True)
            centred = x - mu
            var = (centred * centred).mean(axis=(0, 2, 3), keepdims=True)
            self.mean = (1 - self.momentum) * self.mean + self.momentum * mu.data.reshape(-1)
            self.var = (1 - self.momentum) * self.var + self.momentum * var.data.reshape(-1)
            xhat = centred / sqrt(var + NORM_EPS)
        else:
            xhat = (x - self.mean.reshape(shape)) * (1.0 / np.sqrt(self.var + NORM_EPS)).reshape(shape)
        return xhat * self.gamma.reshape(shape) + self.beta.reshape(shape)

    def params(self) -> list[Tensor]:
        return [self.gamma, self.beta] if self.trainable else []


@dataclass(eq=False)
class Stage:
    W: Tensor
    b: Tensor
    norm: Norm
    attention: AttentionState

    def features(self, x: Tensor, training: bool) -> Tensor:
        return relu(self.norm(conv2d(x, self.W, self.b, stride=2, pad=1), training))


@dataclass
class PairOutput:
    logits_s: Tensor
    probs_s: Tensor
    G_s: list[Tensor]  # source task-layer features
    G_t: list[Tensor]  # target task-layer features entering each block
    G_t_hat: list[Tensor]  # target features after each block
    decisions: list[RouteDecision] = field(default_factory=list)


class Model:
    def __init__(
        self,
        num_classes: int,
        channels=(16, 32, 64),
        in_channels: int = 3,
        hidden_dim: int = 64,
        tau: int = 16,
        freeze_norm: bool = True,
        seed: int = 0,
    ):
        rng = np.random.default_rng(seed)
        self.num_classes = num_classes
        self.channels = tuple(channels)
        self.in_channels = in_channels
        self.hidden_dim = hidden_dim
        self.tau = tau
        self.freeze_norm = freeze_norm
        self.stages: list[Stage] = []
        c_in = in_channels
        for i, c in enumerate(self.channels):
            W = parameter(rng.normal(0.0, math.sqrt(2.0 / (c_in * 9)), size=(c, c_in, 3, 3)))
            att = AttentionState.init(c, tau, rng, module_id=f"stage{i + 1}")
            self.stages.append(Stage(W, parameter(np.zeros(c)), Norm.identity(c, not freeze_norm), att))
            c_in = c
        self.hidden = Affine.init(c_in, hidden_dim, rng)
        self.classifier = Affine.init(hidden_dim, num_classes, rng, scale=math.sqrt(1.0 / hidden_dim))
        self.blocks = [
            AdaptationBlock.init(c_in, layer_index=1, seed=rng),
            AdaptationBlock.init(num_classes, layer_index=2, post_softmax=True, seed=rng),
        ]

    # -- parameter groups ---------------------------------------------------------
    def backbone_params(self) -> list[Tensor]:
        ps = []
        for st in self.stages:
            ps += [st.W, st.b] + st.norm.params() + st.attention.params()
        return ps + self.hidden.params()

    def classifier_params(self) -> list[Tensor]:
        return self.classifier.params()

    def adapt_params(self) -> list[Tensor]:
        return [p for blk in self.blocks for p in blk.params()]

    def param_groups(self) -> dict[str, list[Tensor]]:
        return {"backbone": self.backbone_params(), "classifier": self.classifier_params(), "adapt": self.adapt_params()}

    def parameters(self) -> list[Tensor]:
        return self.backbone_params() + self.classifier_params() + self.adapt_params()

    def attention_states(self) -> list[AttentionState]:
        return [st.attention for st in self.stages]

    # -- forward passes -------------------------------------------------------------
    def head(self, pooled: Tensor) -> tuple[Tensor, Tensor]:
        logits = self.classifier(relu(self.hidden(pooled)))
        return logits, softmax(logits, axis=1)

    def forward_pair(
        self,
        x_s,
        x_t,
        policy: RoutingPolicy,
        step: int = 0,
        use_attention: bool = True,
    ) -> PairOutput:
        """Joint training forward; routing decisions are recorded per stage."""
        hs, ht = as_tensor(x_s), as_tensor(x_t)
        decisions = []
        for i, st in enumerate(self.stages):
            hs, ht = st.features(hs, True), st.features(ht, True)
            if use_attention:
                hs, ht, dec = aam_forward(hs, ht, st.attention, policy, step, stage=i)
                decisions.append(dec)
        pool_s, pool_t = hs.mean(axis=(2, 3)), ht.mean(axis=(2, 3))
        logits_s, probs_s = self.head(pool_s)
        pool_t_hat = block_output(pool_t, self.blocks[0])
        _, probs_t = self.head(pool_t_hat)
        probs_t_hat = block_output(probs_t, self.blocks[1])
        return PairOutput(logits_s, probs_s, [pool_s, probs_s], [pool_t, probs_t], [pool_t_hat, probs_t_hat], decisions)

    def stage_outputs(self, x, domain: str, policy: RoutingPolicy | None = None, use_attention: bool = True):
        """Evaluation forward of one domain; yields (pooled, omegas, routes)."""
        h = as_tensor(x)
        omegas, routes = [], []
        for i, st in enumerate(self.stages):
            h = st.features(h, False)
            if not use_attention:
                continue
            if domain == "source":
                branch = "source"
            else:
                separated = policy is not None and eval_route(h, st.attention, policy, stage=i)
                branch = "target" if separated else "source"
            routes.append(branch)
            h, omega = attend(h, st.attention, branch)
            omegas.append(omega)
        return h.mean(axis=(2, 3)), omegas, routes

    def predict_proba(self, x, domain: str, policy: RoutingPolicy | None = None, use_attention: bool = True, batch: int = 256) -> np.ndarray:
        out = []
        with no_grad():
            for i in range(0, len(x), batch):
                xb = np.asarray(x[i : i + batch], dtype=np.float64)
                pooled, _, _ = self.stage_outputs(xb, domain, policy, use_attention)
                if domain == "target":
                    pooled = block_output(pooled, self.blocks[0])
                _, probs = self.head(pooled)
                if domain == "target":
                    probs = block_output(probs, self.blocks[1])
                out.append(probs.data)
        return np.concatenate(out) if out else np.zeros((0, self.num_classes))

    def accuracy(self, images, labels, domain: str, policy: RoutingPolicy | None = None, use_attention: bool = True) -> float:
        if len(labels) == 0:
            return float("nan")
        pred = self.predict_proba(images, domain, policy, use_attention).argmax(axis=1)
        return float((pred == np.asarray(labels)).mean())

    def mean_attention(self, images, domain: str, policy: RoutingPolicy | None = None, batch: int = 256) -> list[np.ndarray]:
        """Per-stage mean attention vector over ``images``."""
        sums = [np.zeros(c) for c in self.channels]
        with no_grad():
            for i in range(0, len(images), batch):
                xb = np.asarray(images[i : i + batch], dtype=np.float64)
                _, omegas, _ = self.stage_outputs(xb, domain, policy)
                for s, om in zip(sums, omegas):
                    s += om.data.sum(axis=0)
        return [s / max(len(images), 1) for s in sums]

    # -- normalization calibration -----------------------------------------------------
    def calibrate_norm(self, x) -> None:
        """Set frozen per-channel statistics from a batch (data-driven init)."""
        h = as_tensor(np.asarray(x, dtype=np.float64))
        with no_grad():
            for st in self.stages:
                pre = conv2d(h, st.W, st.b, stride=2, pad=1)
                st.norm.mean = pre.data.mean(axis=(0, 2, 3))
                st.norm.var = pre.data.var(axis=(0, 2, 3))
                h = st.features(h, False)
                h, _ = attend(h, st.attention, "source")

    def norm_state(self) -> list[np.ndarray]:
        out = []
        for st in self.stages:
            out += [st.norm.mean.copy(), st.norm.var.copy(), st.norm.gamma.data.copy(), st.norm.beta.data.copy()]
        return out

    # -- persistence ---------------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        d: dict[str, np.ndarray] = {}
        for i, st in enumerate(self.stages):
            a = st.attention
            d.update({
                f"stage{i}.W": st.W.data, f"stage{i}.b": st.b.data,
                f"stage{i}.norm.mean": st.norm.mean, f"stage{i}.norm.var": st.norm.var,
                f"stage{i}.norm.gamma": st.norm.gamma.data, f"stage{i}.norm.beta": st.norm.beta.data,
                f"stage{i}.fc_s.W": a.fc_s.W.data, f"stage{i}.fc_s.b": a.fc_s.b.data,
                f"stage{i}.fc_t.W": a.fc_t.W.data, f"stage{i}.fc_t.b": a.fc_t.b.data,
                f"stage{i}.fc.W": a.fc_shared.W.data, f"stage{i}.fc.b": a.fc_shared.b.data,
                f"stage{i}.ema": np.array([np.nan if v is None else v for v in (a.ema_mhat, a.ema_ms, a.ema_mt)]),
            })
        d.update({"hidden.W": self.hidden.W.data, "hidden.b": self.hidden.b.data,
                  "classifier.W": self.classifier.W.data, "classifier.b": self.classifier.b.data})
        for j, blk in enumerate(self.blocks):
            d.update({f"block{j}.fc1.W": blk.fc1.W.data, f"block{j}.fc1.b": blk.fc1.b.data,
                      f"block{j}.fc2.W": blk.fc2.W.data, f"block{j}.fc2.b": blk.fc2.b.data})
        return d

    def arch(self) -> dict:
        return {"num_classes": self.num_classes, "channels": list(self.channels), "in_channels": self.in_channels,
                "hidden_dim": self.hidden_dim, "tau": self.tau, "freeze_norm": self.freeze_norm}

    def save(self, path, extra: dict | None = None) -> None:
        meta = {"arch": self.arch(), **(extra or {})}
        arrays = {"__meta__": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
        arrays.update(self.state_dict())
        _write_npz(path, arrays)

    @classmethod
    def load(cls, path) -> tuple["Model", dict]:
        with np.load(Path(path)) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            arrays = {k: z[k] for k in z.files if k != "__meta__"}
        model = cls(**meta["arch"])
        for i, st in enumerate(model.stages):
            a = st.attention
            st.W.data, st.b.data = arrays[f"stage{i}.W"], arrays[f"stage{i}.b"]
            st.norm.mean, st.norm.var = arrays[f"stage{i}.norm.mean"], arrays[f"stage{i}.norm.var"]
            st.norm.gamma.data, st.norm.beta.data = arrays[f"stage{i}.norm.gamma"], arrays[f"stage{i}.norm.beta"]
            a.fc_s.W.data, a.fc_s.b.data = arrays[f"stage{i}.fc_s.W"], arrays[f"stage{i}.fc_s.b"]
            a.fc_t.W.data, a.fc_t.b.data = arrays[f"stage{i}.fc_t.W"], arrays[f"stage{i}.fc_t.b"]
            a.fc_shared.W.data, a.fc_shared.b.data = arrays[f"stage{i}.fc.W"], arrays[f"stage{i}.fc.b"]
            a.ema_mhat, a.ema_ms, a.ema_mt = (None if np.isnan(v) else float(v) for v in arrays[f"stage{i}.ema"])
        model.hidden.W.data, model.hidden.b.data = arrays["hidden.W"], arrays["hidden.b"]
        model.classifier.W.data, model.classifier.b.data = arrays["classifier.W"], arrays["classifier.b"]
        for j, blk in enumerate(model.blocks):
            blk.fc1.W.data, blk.fc1.b.data = arrays[f"block{j}.fc1.W"], arrays[f"block{j}.fc1.b"]
            blk.fc2.W.data, blk.fc2.b.data = arrays[f"block{j}.fc2.W"], arrays[f"block{j}.fc2.b"]
        return model, meta


def _write_npz(path, arrays: dict[str, np.ndarray]) -> None:
    """``np.savez`` layout with fixed entry timestamps, so equal weights give equal bytes."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())

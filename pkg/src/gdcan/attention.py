"""Domain-conditioned channel attention.

Source and target each own a reduction layer; the expansion layer is shared.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, as_tensor, linear, parameter, relu, sigmoid

BRANCHES = ("source", "target")


@dataclass(eq=False)
class Affine:
    W: Tensor
    b: Tensor

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator, scale: float | None = None) -> "Affine":
        scale = math.sqrt(2.0 / d_in) if scale is None else scale
        return cls(parameter(rng.normal(0.0, scale, size=(d_out, d_in))), parameter(np.zeros(d_out)))

    @classmethod
    def zeros(cls, d_in: int, d_out: int) -> "Affine":
        return cls(parameter(np.zeros((d_out, d_in))), parameter(np.zeros(d_out)))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.W, self.b)

    def copy(self) -> "Affine":
        return Affine(parameter(self.W.data.copy()), parameter(self.b.data.copy()))

    def params(self) -> list[Tensor]:
        return [self.W, self.b]

    @property
    def d_in(self) -> int:
        return self.W.shape[1]

    @property
    def d_out(self) -> int:
        return self.W.shape[0]


def reduced_channels(channels: int, tau: int, min_hidden: int = 4) -> int:
    return max(math.ceil(channels / tau), min_hidden)


@dataclass(eq=False)
class AttentionState:
    """Parameters of one attention module plus its routing statistics."""

    fc_s: Affine
    fc_t: Affine
    fc_shared: Affine
    tau: int
    channels: int
    # EMAs of the routing statistics, filled in during training
    ema_mhat: float | None = None
    ema_ms: float | None = None
    ema_mt: float | None = None
    module_id: str = "aam"

    @classmethod
    def init(cls, channels: int, tau: int = 16, seed: int | np.random.Generator = 0, module_id: str = "aam") -> "AttentionState":
        if tau < 1:
            raise ValueError("tau must be a positive integer")
        rng = np.random.default_rng(seed)
        hidden = reduced_channels(channels, tau)
        fc_s = Affine.init(channels, hidden, rng)
        fc_shared = Affine.init(hidden, channels, rng)
        return cls(fc_s, fc_s.copy(), fc_shared, tau, channels, module_id=module_id)

    @property
    def hidden(self) -> int:
        return self.fc_s.d_out

    def branch(self, name: str) -> Affine:
        if name == "source":
            return self.fc_s
        if name == "target":
            return self.fc_t
        raise ValueError(f"branch must be one of {BRANCHES}, got {name!r}")

    def params(self) -> list[Tensor]:
        return self.fc_s.params() + self.fc_t.params() + self.fc_shared.params()

    def synchronized(self) -> bool:
        return bool(
            np.array_equal(self.fc_s.W.data, self.fc_t.W.data)
            and np.array_equal(self.fc_s.b.data, self.fc_t.b.data)
        )


def channel_descriptor(X: Tensor) -> Tensor:
    """Global average pool over the spatial plane: (N, C, H, W) -> (N, C)."""
    X = as_tensor(X)
    if X.ndim != 4 or X.shape[2] < 1 or X.shape[3] < 1:
        raise ShapeError(f"channel_descriptor expects (N, C, H, W), got {X.shape}")
    return X.mean(axis=(2, 3))


def attention_weights(d: Tensor, state: AttentionState, branch: str) -> Tensor:
    fc = state.branch(branch)
    d = as_tensor(d)
    if d.ndim != 2 or d.shape[1] != state.channels:
        raise ShapeError(f"descriptor has shape {d.shape}, module expects {state.channels} channels")
    return sigmoid(state.fc_shared(relu(fc(d))))


def recalibrate(X: Tensor, omega: Tensor) -> Tensor:
    X, omega = as_tensor(X), as_tensor(omega)
    if X.ndim != 4 or omega.shape != X.shape[:2]:
        raise ShapeError(f"cannot scale {X.shape} by weights of shape {omega.shape}")
    return X * omega.reshape(omega.shape[0], omega.shape[1], 1, 1)


def attend(X: Tensor, state: AttentionState, branch: str) -> tuple[Tensor, Tensor]:
    """Recalibrate ``X`` through one branch; returns (output, omega)."""
    X = as_tensor(X)
    if X.ndim != 4 or X.shape[1] != state.channels:
        raise ShapeError(f"input {X.shape} does not match a {state.channels}-channel module")
    omega = attention_weights(channel_descriptor(X), state, branch)
    return recalibrate(X, omega), omega


def dcca_forward(X_s: Tensor, X_t: Tensor, state: AttentionState) -> tuple[Tensor, Tensor]:
    X_s, X_t = as_tensor(X_s), as_tensor(X_t)
    if X_s.shape[1:] != X_t.shape[1:]:
        raise ShapeError(f"source {X_s.shape} and target {X_t.shape} differ beyond the batch axis")
    return attend(X_s, state, "source")[0], attend(X_t, state, "target")[0]

"""Multi-bandwidth Gaussian MMD.

Bandwidths are either fixed or resolved per call from the median heuristic on
the pooled sample; resolved bandwidths are plain floats, so they act as
constants under differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .autodiff import ShapeError, Tensor, as_tensor, exp, tsum

DEFAULT_MULTIPLIERS = (0.25, 0.5, 1.0, 2.0, 4.0)


@dataclass(frozen=True)
class KernelSpec:
    """Gaussian kernel family.

    ``bandwidths`` fixes the sigmas outright. When it is ``None`` the sigmas
    are ``multipliers * median_bandwidth(pooled batch)``. ``weights`` default
    to equal weights summing to one.
    """

    bandwidths: tuple[float, ...] | None = None
    multipliers: tuple[float, ...] = DEFAULT_MULTIPLIERS
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.bandwidths is not None:
            if len(self.bandwidths) == 0 or any(s <= 0 for s in self.bandwidths):
                raise ValueError("bandwidths must be a non-empty list of positive reals")
        if len(self.multipliers) == 0 or any(m <= 0 for m in self.multipliers):
            raise ValueError("multipliers must be a non-empty list of positive reals")
        n = len(self.bandwidths) if self.bandwidths is not None else len(self.multipliers)
        if self.weights is not None and len(self.weights) != n:
            raise ValueError(f"expected {n} kernel weights, got {len(self.weights)}")

    def resolve(self, *samples) -> "KernelSpec":
        """Return a spec with concrete bandwidths for these samples."""
        if self.bandwidths is not None:
            return self
        pooled = np.concatenate([np.asarray(as_tensor(s).data).reshape(len(s), -1) for s in samples])
        sigma = median_bandwidth(pooled)
        return KernelSpec(tuple(m * sigma for m in self.multipliers), self.multipliers, self.weights)

    def kernel_weights(self) -> np.ndarray:
        n = len(self.bandwidths) if self.bandwidths is not None else len(self.multipliers)
        if self.weights is None:
            return np.full(n, 1.0 / n)
        return np.asarray(self.weights, dtype=float)

    def scaled(self, factor: float) -> "KernelSpec":
        """Same kernels with every weight multiplied by ``factor``."""
        return replace(self, weights=tuple(float(w) * factor for w in self.kernel_weights()))


_DEGENERATE_D2 = float(np.sqrt(np.finfo(float).tiny))


def median_bandwidth(pooled) -> float:
    """Median-heuristic sigma: ``sigma**2`` is half the median squared pairwise distance."""
    x = np.asarray(as_tensor(pooled).data, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    x = x.reshape(len(x), -1)
    if len(x) < 2:
        raise ValueError("median_bandwidth needs at least 2 rows")
    iu = np.triu_indices(len(x), k=1)
    d2 = ((x[:, None, :] - x[None, :, :]) ** 2).sum(-1)[iu]
    med = float(np.median(d2))
    # below this the scaled inverse bandwidths overflow to inf and 0 * inf poisons the gram
    if med <= _DEGENERATE_D2:
        return 1.0
    return float(np.sqrt(med / 2.0))


def _sq_dists(a: Tensor, b: Tensor) -> Tensor:
    diff = a.reshape(a.shape[0], 1, a.shape[1]) - b.reshape(1, b.shape[0], b.shape[1])
    return tsum(diff * diff, axis=2)


def gaussian_gram(A, B, spec: KernelSpec) -> Tensor:
    """Weighted sum over bandwidths of ``exp(-|a_i - b_j|^2 / (2 sigma_k^2))``."""
    A, B = as_tensor(A), as_tensor(B)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise ShapeError(f"gaussian_gram: feature dims differ, {A.shape} vs {B.shape}")
    spec = spec.resolve(A, B)
    d2 = _sq_dists(A, B)
    K = None
    for w, s in zip(spec.kernel_weights(), spec.bandwidths):
        term = exp(d2 * (-1.0 / (2.0 * s * s))) * float(w)
        K = term if K is None else K + term
    return K


def _offdiag_mean(K: Tensor) -> Tensor:
    n = K.shape[0]
    diag = np.eye(n, dtype=bool)
    return tsum(K * (~diag).astype(K.data.dtype)) * (1.0 / (n * (n - 1)))


def mmd2(A, B, spec: KernelSpec = KernelSpec(), estimator: str = "biased") -> Tensor:
    """Squared MMD between the row sets ``A`` and ``B`` (differentiable)."""
    A, B = as_tensor(A), as_tensor(B)
    if A.shape[0] < 1 or B.shape[0] < 1:
        raise ValueError("mmd2 needs at least one sample per set")
    if estimator not in ("biased", "unbiased"):
        raise ValueError(f"unknown estimator {estimator!r}")
    spec = spec.resolve(A, B)
    Kab = gaussian_gram(A, B, spec).mean()
    if estimator == "biased":
        Kaa = gaussian_gram(A, A, spec).mean()
        Kbb = gaussian_gram(B, B, spec).mean()
    else:
        if A.shape[0] < 2 or B.shape[0] < 2:
            raise ValueError("unbiased mmd2 needs at least 2 samples per set")
        Kaa = _offdiag_mean(gaussian_gram(A, A, spec))
        Kbb = _offdiag_mean(gaussian_gram(B, B, spec))
    return Kaa + Kbb - Kab * 2.0


def layerwise_mmd(As: Sequence, Bs: Sequence, spec: KernelSpec = KernelSpec()) -> Tensor:
    """Sum of biased ``mmd2`` over paired layers."""
    if len(As) != len(Bs):
        raise ValueError("layer lists differ in length")
    total = None
    for a, b in zip(As, Bs):
        term = mmd2(a, b, spec)
        total = term if total is None else total + term
    return total

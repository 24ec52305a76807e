"""Skip-connected target-side correction blocks and their MMD losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .attention import Affine
from .autodiff import ShapeError, Tensor, as_tensor, clip, relu, tsum
from .mmd import KernelSpec, mmd2


@dataclass(eq=False)
class AdaptationBlock:
    """``G -> G + fc2(relu(fc1(G)))`` with ``fc2`` starting at zero.

    A block placed after the softmax clamps its output to [0, 1] and divides
    by the row sum so the corrected rows stay distributions.
    """

    fc1: Affine
    fc2: Affine
    layer_index: int = 1
    post_softmax: bool = False

    @classmethod
    def init(cls, dim: int, layer_index: int = 1, post_softmax: bool = False, seed: int | np.random.Generator = 0) -> "AdaptationBlock":
        rng = np.random.default_rng(seed)
        return cls(Affine.init(dim, dim, rng), Affine.zeros(dim, dim), layer_index, post_softmax)

    @property
    def dim(self) -> int:
        return self.fc1.d_in

    def params(self) -> list[Tensor]:
        return self.fc1.params() + self.fc2.params()

    def __call__(self, G: Tensor) -> Tensor:
        return block_output(G, self)


def adapt_forward(G: Tensor, block: AdaptationBlock) -> Tensor:
    G = as_tensor(G)
    if G.ndim != 2 or G.shape[1] != block.dim:
        raise ShapeError(f"features {G.shape} do not match a {block.dim}-dim adaptation block")
    return G + block.fc2(relu(block.fc1(G)))


def renormalize(P: Tensor) -> Tensor:
    P = clip(P, 0.0, 1.0)
    s = tsum(P, axis=1, keepdims=True)
    # an all-zero row stays all-zero instead of dividing by zero
    guard = (s.data == 0).astype(s.data.dtype)
    return P / (s + guard)


def block_output(G: Tensor, block: AdaptationBlock) -> Tensor:
    out = adapt_forward(G, block)
    return renormalize(out) if block.post_softmax else out


def _per_layer(spec: KernelSpec | Sequence[KernelSpec], n: int) -> list[KernelSpec]:
    if isinstance(spec, KernelSpec):
        return [spec] * n
    spec = list(spec)
    if len(spec) != n:
        raise ValueError(f"expected {n} kernel specs, got {len(spec)}")
    return spec


def alignment_loss(G_s: Sequence, G_t: Sequence, blocks: Sequence[AdaptationBlock], spec=KernelSpec()) -> Tensor:
    """Sum over layers of ``mmd2(G_s[l], block_l(G_t[l]))``."""
    if not (len(G_s) == len(G_t) == len(blocks)):
        raise ValueError(f"layer counts differ: {len(G_s)} source, {len(G_t)} target, {len(blocks)} blocks")
    specs = _per_layer(spec, len(blocks))
    total = None
    for gs, gt, blk, sp in zip(G_s, G_t, blocks, specs):
        term = mmd2(gs, block_output(gt, blk), sp)
        total = term if total is None else total + term
    return total


@dataclass
class RegularizationSubset:
    indices: np.ndarray
    inclusion_prob: float

    def __len__(self) -> int:
        return len(self.indices)


def sample_reg_subset(batch_size: int, p: float, num_classes: int, rng_seed=None) -> RegularizationSubset:
    """Keep each source index independently with probability ``p / num_classes``."""
    if not 0.0 <= p <= num_classes:
        raise ValueError(f"p must lie in [0, {num_classes}], got {p}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    prob = p / num_classes
    mask = rng.random(batch_size) < prob
    return RegularizationSubset(np.flatnonzero(mask), prob)


def regularization_loss(
    G_s: Sequence,
    labels_s,
    R: RegularizationSubset,
    blocks: Sequence[AdaptationBlock],
    spec=KernelSpec(),
    num_classes: int | None = None,
) -> Tensor:
    """Per-class source embeddings against the corrected embedding of ``R``.

    Sums, over layers and over classes present in the batch, the squared
    RKHS distance between the class mean embedding of ``G_s[l]`` and the
    mean embedding of ``block_l(G_s[l][R])``. An empty ``R`` contributes 0.
    """
    if len(G_s) != len(blocks):
        raise ValueError(f"{len(G_s)} feature layers but {len(blocks)} blocks")
    labels = np.asarray(labels_s)
    if num_classes is not None and labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError("labels outside 0..num_classes-1")
    specs = _per_layer(spec, len(blocks))
    total = Tensor(0.0)
    if len(R) == 0:
        return total
    classes = np.unique(labels)
    for gs, blk, sp in zip(G_s, blocks, specs):
        gs = as_tensor(gs)
        corrected = block_output(gs[R.indices], blk)
        for k in classes:
            total = total + mmd2(gs[np.flatnonzero(labels == k)], corrected, sp)
    return total


def expected_subset_size(batch_size: int, p: float, num_classes: int) -> float:
    return batch_size * p / num_classes


def is_identity(block: AdaptationBlock) -> bool:
    return not np.any(block.fc2.W.data) and not np.any(block.fc2.b.data)


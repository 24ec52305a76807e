"""Seeded two-domain glyph benchmarks and their binary container.

Each class is a parametric shape rendered from a signed distance field with
per-sample scale, rotation, translation and colour jitter. The target domain
is produced by the same sampler followed by a shift transform whose strength
is ``shift_magnitude``; at magnitude 0 both domains are identically
distributed.

File layout (little-endian)::

    b"DCDS" | version u32 | N u32 | C u32 | H u32 | W u32 | C_n u32
    N*C*H*W float32 pixels | N u32 labels | u32 length | UTF-8 JSON manifest
"""

from __future__ import annotations

import colorsys
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

MAGIC = b"DCDS"
VERSION = 1
_HEADER = struct.Struct("<4s6I")
SHIFT_KINDS = ("style", "morphology", "none")


class DatasetFormatError(ValueError):
    """Malformed or truncated dataset file."""


# ----------------------------------------------------------------------------
# glyph families as signed distance fields on [-1, 1]^2
# ----------------------------------------------------------------------------


def _box(u, v, hx, hy):
    qx, qy = np.abs(u) - hx, np.abs(v) - hy
    outside = np.hypot(np.maximum(qx, 0), np.maximum(qy, 0))
    return outside + np.minimum(np.maximum(qx, qy), 0)


def _disc(u, v):
    return np.hypot(u, v) - 0.55


def _square(u, v):
    return _box(u, v, 0.45, 0.45)


def _triangle(u, v):
    # equilateral, apex up; v grows downward in image space
    k = np.sqrt(3.0)
    r = 0.6
    v = -v + 0.15
    u = np.abs(u) - r
    v = v + r / k
    flip = u + k * v > 0
    u2 = np.where(flip, (u - k * v) / 2, u)
    v2 = np.where(flip, (-k * u - v) / 2, v)
    u2 = u2 - np.clip(u2, -2 * r, 0)
    return -np.hypot(u2, v2) * np.sign(v2)


def _plus(u, v):
    return np.minimum(_box(u, v, 0.62, 0.17), _box(u, v, 0.17, 0.62))


def _ring(u, v):
    return np.abs(np.hypot(u, v) - 0.47) - 0.14


def _diamond(u, v):
    return (np.abs(u) + np.abs(v) - 0.68) / np.sqrt(2.0)


def _xcross(u, v):
    c = np.sqrt(0.5)
    return _plus(c * (u - v), c * (u + v))


def _hbar(u, v):
    return _box(u, v, 0.68, 0.2)


def _frame(u, v):
    return np.abs(_box(u, v, 0.42, 0.42)) - 0.12


def _chevron(u, v):
    a = _box(np.sqrt(0.5) * (u + v) + 0.1, np.sqrt(0.5) * (v - u), 0.5, 0.15)
    b = _box(np.sqrt(0.5) * (u - v) - 0.1, np.sqrt(0.5) * (u + v), 0.5, 0.15)
    return np.minimum(a, b)


GLYPHS: dict[str, Callable] = {
    "disc": _disc,
    "square": _square,
    "triangle": _triangle,
    "plus": _plus,
    "ring": _ring,
    "diamond": _diamond,
    "xcross": _xcross,
    "hbar": _hbar,
    "frame": _frame,
    "chevron": _chevron,
}
GLYPH_NAMES = tuple(GLYPHS)


# ----------------------------------------------------------------------------
# specs and sets
# ----------------------------------------------------------------------------


@dataclass
class DomainPairSpec:
    classes: int = 6
    samples_per_class: int = 200
    image_size: tuple[int, int, int] = (3, 32, 32)
    shift_kind: str = "style"
    shift_magnitude: float = 0.8
    seed: int = 7

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        if self.shift_kind not in SHIFT_KINDS:
            raise ValueError(f"shift_kind must be one of {SHIFT_KINDS}, got {self.shift_kind!r}")
        if not 0.0 <= self.shift_magnitude <= 1.0:
            raise ValueError("shift_magnitude must lie in [0, 1]")
        if self.classes < 1 or self.classes > len(GLYPHS):
            raise ValueError(f"classes must be between 1 and {len(GLYPHS)} (available glyph families)")
        if self.samples_per_class < 0:
            raise ValueError("samples_per_class must be non-negative")
        if len(self.image_size) != 3 or self.image_size[0] != 3 or min(self.image_size[1:]) < 4:
            raise ValueError("image_size must be (3, H, W) with H, W >= 4")


@dataclass
class LabeledImageSet:
    images: np.ndarray  # (N, 3, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) integer class ids 0..C_n-1
    num_classes: int
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def equals(self, other: "LabeledImageSet") -> bool:
        return (
            self.images.shape == other.images.shape
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.labels, other.labels)
            and self.num_classes == other.num_classes
            and self.manifest == other.manifest
        )


# ----------------------------------------------------------------------------
# rendering
# ----------------------------------------------------------------------------


def _hsv_to_rgb(h, s, v) -> np.ndarray:
    return np.array([colorsys.hsv_to_rgb(float(a), float(b), float(c)) for a, b, c in zip(h, s, v)]).reshape(-1, 3)


# strengths of the style shift at magnitude 1
STYLE = {"tex_level": 0.25, "tex_amp": 0.25, "hue_turn": 0.3, "fg_dim": 0.0, "noise": 0.05}


def _render(labels: np.ndarray, size: tuple[int, int, int], rng: np.random.Generator, shift: str, mag: float) -> np.ndarray:
    n = len(labels)
    _, H, W = size
    ys, xs = np.meshgrid(np.linspace(-1, 1, H), np.linspace(-1, 1, W), indexing="ij")
    px = 2.0 / min(H, W)

    # every draw happens regardless of shift so the stream is shift-independent
    scale = rng.uniform(0.75, 1.05, n)
    theta = rng.uniform(-0.35, 0.35, n)
    tx, ty = rng.uniform(-0.15, 0.15, (2, n))
    fg_h = rng.uniform(0.0, 0.35, n)  # warm hues
    fg_s = rng.uniform(0.6, 1.0, n)
    fg_v = rng.uniform(0.75, 1.0, n)
    bg_level = rng.uniform(0.05, 0.2, n)
    bg_noise = rng.normal(0.0, 1.0, (n, 1, H // 4 + 1, W // 4 + 1))
    pix_noise = rng.normal(0.0, 1.0, (n, 3, H, W))
    stripe_freq = rng.uniform(3.0, 6.0, n)
    stripe_angle = rng.uniform(0, np.pi, n)
    stripe_phase = rng.uniform(0, 2 * np.pi, n)
    tint_h = rng.uniform(0.45, 0.75, n)

    c, s = np.cos(theta)[:, None, None], np.sin(theta)[:, None, None]
    u0 = (xs[None] - tx[:, None, None]) / scale[:, None, None]
    v0 = (ys[None] - ty[:, None, None]) / scale[:, None, None]
    u, v = c * u0 + s * v0, -s * u0 + c * v0

    sdf = np.empty((n, H, W))
    for k, name in enumerate(GLYPH_NAMES):
        idx = labels == k
        if idx.any():
            sdf[idx] = GLYPHS[name](u[idx], v[idx])

    if shift == "morphology" and mag > 0:
        # fill turns into an outline whose width shrinks with magnitude
        width = (1.0 - mag) * 1.0 + mag * 0.12
        sdf = np.maximum(sdf, -sdf - width)
    alpha = np.clip(0.5 - sdf / (px * scale[:, None, None]), 0.0, 1.0)[:, None]

    # coarse background blotches, upsampled by repetition
    blot = np.repeat(np.repeat(bg_noise, 4, axis=2), 4, axis=3)[:, :, :H, :W]
    bg = bg_level[:, None, None, None] + 0.04 * blot
    bg = np.repeat(bg, 3, axis=1)
    fg_rgb = _hsv_to_rgb(fg_h, fg_s, fg_v)[:, :, None, None]
    noise_sd = 0.03

    if shift == "style" and mag > 0:
        # textured bright background, hue rotation and lower foreground contrast
        proj = np.cos(stripe_angle)[:, None, None] * xs + np.sin(stripe_angle)[:, None, None] * ys
        stripes = 0.5 + 0.5 * np.sin(stripe_freq[:, None, None] * np.pi * proj + stripe_phase[:, None, None])
        tint = _hsv_to_rgb(tint_h, np.full(n, 0.35), np.full(n, 1.0))[:, :, None, None]
        tex = (STYLE["tex_level"] + STYLE["tex_amp"] * stripes[:, None]) * tint
        bg = (1 - mag) * bg + mag * tex
        hue = (fg_h + STYLE["hue_turn"] * mag) % 1.0
        fg_rgb = _hsv_to_rgb(hue, fg_s, fg_v * (1 - STYLE["fg_dim"] * mag))[:, :, None, None]
        noise_sd = 0.03 + STYLE["noise"] * mag

    img = alpha * fg_rgb + (1 - alpha) * bg + noise_sd * pix_noise
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _sample_domain(spec: DomainPairSpec, rng: np.random.Generator, shifted: bool) -> LabeledImageSet:
    labels = np.repeat(np.arange(spec.classes), spec.samples_per_class)
    labels = labels[rng.permutation(len(labels))]
    kind = spec.shift_kind if shifted else "none"
    mag = spec.shift_magnitude if shifted else 0.0
    if len(labels):
        images = _render(labels, spec.image_size, rng, kind, mag)
    else:
        images = np.zeros((0, *spec.image_size), dtype=np.float32)
    manifest = {
        "domain": "target" if shifted else "source",
        "classes": spec.classes,
        "glyphs": list(GLYPH_NAMES[: spec.classes]),
        "samples_per_class": spec.samples_per_class,
        "image_size": list(spec.image_size),
        "shift_kind": kind,
        "shift_magnitude": mag,
        "seed": spec.seed,
        "version": VERSION,
    }
    return LabeledImageSet(images, labels.astype(np.int64), spec.classes, manifest)


def generate(spec: DomainPairSpec) -> tuple[LabeledImageSet, LabeledImageSet]:
    """Render the (source, target) pair for ``spec``; pure in (spec, seed)."""
    src_seq, tgt_seq = np.random.SeedSequence(spec.seed).spawn(2)
    source = _sample_domain(spec, np.random.default_rng(src_seq), shifted=False)
    target = _sample_domain(spec, np.random.default_rng(tgt_seq), shifted=True)
    return source, target


# ----------------------------------------------------------------------------
# persistence
# ----------------------------------------------------------------------------


def to_bytes(ds: LabeledImageSet) -> bytes:
    images = np.ascontiguousarray(ds.images, dtype="<f4")
    n, c, h, w = images.shape
    manifest = json.dumps(ds.manifest, sort_keys=True).encode("utf-8")
    return b"".join(
        [
            _HEADER.pack(MAGIC, VERSION, n, c, h, w, ds.num_classes),
            images.tobytes(),
            np.asarray(ds.labels, dtype="<u4").tobytes(),
            struct.pack("<I", len(manifest)),
            manifest,
        ]
    )


def from_bytes(buf: bytes) -> LabeledImageSet:
    if len(buf) < _HEADER.size:
        raise DatasetFormatError(f"truncated header at offset {len(buf)}: need {_HEADER.size} bytes")
    magic, version, n, c, h, w, num_classes = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version} at offset 4")
    off = _HEADER.size
    npix = n * c * h * w

    def need(nbytes: int, what: str):
        if off + nbytes > len(buf):
            raise DatasetFormatError(f"truncated {what} at offset {off}: need {nbytes} bytes, have {len(buf) - off}")

    need(4 * npix, "pixel payload")
    images = np.frombuffer(buf, dtype="<f4", count=npix, offset=off).reshape(n, c, h, w).astype(np.float32)
    off += 4 * npix
    need(4 * n, "labels")
    labels = np.frombuffer(buf, dtype="<u4", count=n, offset=off).astype(np.int64)
    off += 4 * n
    need(4, "manifest length")
    (mlen,) = struct.unpack_from("<I", buf, off)
    off += 4
    need(mlen, "manifest")
    try:
        manifest = json.loads(buf[off : off + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"manifest at offset {off} is not valid UTF-8 JSON: {exc}") from None
    off += mlen
    if off != len(buf):
        raise DatasetFormatError(f"{len(buf) - off} trailing bytes at offset {off}")
    if n and labels.max() >= num_classes:
        raise DatasetFormatError(f"label {labels.max()} out of range for {num_classes} classes")
    return LabeledImageSet(images, labels, int(num_classes), manifest)


def save(ds: LabeledImageSet, path) -> None:
    Path(path).write_bytes(to_bytes(ds))


def load(path) -> LabeledImageSet:
    return from_bytes(Path(path).read_bytes())


def spec_dict(spec: DomainPairSpec) -> dict:
    d = asdict(spec)
    d["image_size"] = list(spec.image_size)
    return d

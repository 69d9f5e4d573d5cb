"""Turning raw pixels and tabular columns into per-node feature vectors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PROVENANCES = ("raw", "trig", "custom")


@dataclass
class ClampCounter:
    """Counts values pushed back into [0, 1] before embedding."""

    count: int = 0

    def add(self, n: int) -> None:
        self.count += int(n)


CLAMPED = ClampCounter()


@dataclass(frozen=True)
class EmbeddedSample:
    vectors: tuple[np.ndarray, ...]
    provenance: str = "raw"

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"provenance must be one of {PROVENANCES}")
        object.__setattr__(self, "vectors", tuple(np.asarray(v, dtype=float) for v in self.vectors))

    @property
    def input_dims(self) -> tuple[int, ...]:
        return tuple(len(v) for v in self.vectors)


def _clamp01(x: np.ndarray, counter: ClampCounter | None) -> np.ndarray:
    bad = (x < 0) | (x > 1)
    if np.any(bad):
        (counter or CLAMPED).add(np.count_nonzero(bad))
        x = np.clip(x, 0.0, 1.0)
    return x


def trig_embed(x, counter: ClampCounter | None = None) -> np.ndarray:
    """``(1/sqrt(m)) [cos(pi x / 2), sin(pi x / 2)]`` for a length-``m`` vector.

    Values outside [0, 1] are clamped and counted. The result has unit norm.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size == 0:
        raise ValueError("cannot embed an empty vector")
    x = _clamp01(x, counter)
    h = np.pi * x / 2
    return np.concatenate([np.cos(h), np.sin(h)]) / np.sqrt(x.size)


def trig_embed_scalars(values, counter: ClampCounter | None = None) -> np.ndarray:
    """Embed every scalar separately: ``(..., F) -> (..., F, 2)``, each row unit-norm."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("cannot embed an empty array")
    v = _clamp01(v, counter)
    h = np.pi * v / 2
    return np.stack([np.cos(h), np.sin(h)], axis=-1)


def avg_pool_2x2(img) -> np.ndarray:
    """Mean of disjoint 2x2 blocks; accepts one grid ``(H, W)`` or a stack ``(B, H, W)``."""
    a = np.asarray(img, dtype=float)
    h, w = a.shape[-2:]
    if h != w:
        raise ValueError(f"expected a square grid, got {h}x{w}")
    if h % 2:
        raise ValueError(f"side length {h} is odd")
    blocks = a.reshape(a.shape[:-2] + (h // 2, 2, w // 2, 2))
    return blocks.mean(axis=(-3, -1))


def flatten_row_major(img) -> np.ndarray:
    """``(H, W) -> (H*W,)`` or ``(B, H, W) -> (B, H*W)``."""
    a = np.asarray(img)
    if a.ndim < 2:
        return a.reshape(-1)
    return a.reshape(a.shape[:-2] + (-1,))


def normalize_pixels(img, already_unit: bool = False) -> np.ndarray:
    """Byte pixels to [0, 1]. With ``already_unit`` the input is checked and passed through."""
    a = np.asarray(img)
    if already_unit:
        a = a.astype(float)
        if a.size and (a.min() < 0 or a.max() > 1):
            raise ValueError("already_unit input has values outside [0, 1]")
        return a
    if a.size and (a.min() < 0 or a.max() > 255):
        raise ValueError(f"pixel values must lie in 0..255, found range {a.min()}..{a.max()}")
    if a.dtype.kind == "f" and np.any(a != np.round(a)):
        raise ValueError("pixel values must be integers")
    return a.astype(float) / 255.0


def image_features(images, pool: bool = True) -> np.ndarray:
    """Byte images ``(B, H, W)`` -> node inputs ``(B, N, 2)``.

    normalize, optionally 2x2 average-pool, flatten row-major, then embed each
    pixel separately. 28x28 inputs give ``N = 196``.
    """
    x = normalize_pixels(images)
    if x.ndim == 2:
        x = x[None]
    if pool:
        x = avg_pool_2x2(x)
    return trig_embed_scalars(flatten_row_major(x))


@dataclass
class MinMaxScaler:
    """Per-column [0, 1] scaling fitted on the training split; out-of-range values are clamped."""

    low: np.ndarray = field(default_factory=lambda: np.zeros(0))
    high: np.ndarray = field(default_factory=lambda: np.zeros(0))
    clamped: ClampCounter = field(default_factory=ClampCounter)

    def fit(self, x) -> "MinMaxScaler":
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[0] == 0:
            raise ValueError("fit needs a non-empty (rows, columns) array")
        self.low, self.high = x.min(axis=0), x.max(axis=0)
        return self

    def transform(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != len(self.low):
            raise ValueError(f"expected {len(self.low)} columns")
        span = np.where(self.high > self.low, self.high - self.low, 1.0)
        return _clamp01((x - self.low) / span, self.clamped)


def tabular_features(x, scaler: MinMaxScaler, embedding: str = "trig") -> np.ndarray:
    """Rows ``(B, F)`` -> node inputs ``(B, F, I)``: one node per column.

    ``trig`` gives ``I = 2`` unit-norm vectors; ``raw`` keeps the scaled value
    as a length-1 vector.
    """
    scaled = scaler.transform(x)
    if embedding == "trig":
        return trig_embed_scalars(scaled)
    if embedding == "raw":
        return scaled[..., None]
    raise ValueError(f"unknown embedding {embedding!r}; expected 'trig' or 'raw'")


def to_samples(nodes: np.ndarray, provenance: str) -> list[EmbeddedSample]:
    return [EmbeddedSample(tuple(row), provenance) for row in np.asarray(nodes)]

"""Dense tensors and pairwise index contraction.

Everything downstream works on plain numpy arrays; :class:`DenseTensor` is the
immutable value type used at API boundaries and in the contraction helpers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class ContractionError(ValueError):
    """Raised for incompatible or out-of-range contraction axes."""


@dataclass(frozen=True)
class DenseTensor:
    """N-order real array stored flat in row-major order."""

    shape: tuple[int, ...]
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        if any(s < 1 for s in shape):
            raise ValueError(f"shape entries must be >= 1, got {shape}")
        data = np.array(self.data, dtype=np.float64, copy=True).reshape(-1)
        expected = int(np.prod(shape)) if shape else 1
        if data.size != expected:
            raise ValueError(
                f"data length {data.size} does not match shape {shape} (expected {expected})"
            )
        data.setflags(write=False)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, array) -> "DenseTensor":
        arr = np.asarray(array, dtype=np.float64)
        return cls(arr.shape, arr.reshape(-1))

    @classmethod
    def scalar(cls, value: float) -> "DenseTensor":
        return cls((), np.array([value]))

    @property
    def order(self) -> int:
        return len(self.shape)

    def to_array(self) -> np.ndarray:
        """Read-only ndarray view with the tensor's shape."""
        return self.data.reshape(self.shape)

    def __getitem__(self, index):
        return self.to_array()[index]


@dataclass(frozen=True)
class ContractionSpec:
    """Which axes of ``a`` and ``b`` are summed, and how survivors are ordered.

    ``pairs`` holds ``(axis_of_a, axis_of_b)`` tuples. Surviving axes are
    numbered a-first then b, each in original order; ``output_order`` is a
    permutation of those numbers (``None`` keeps the natural order).
    """

    pairs: tuple[tuple[int, int], ...] = ()
    output_order: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple((int(i), int(j)) for i, j in self.pairs))
        if self.output_order is not None:
            object.__setattr__(self, "output_order", tuple(int(i) for i in self.output_order))


def _check_spec(a_shape, b_shape, spec: ContractionSpec) -> tuple[list[int], list[int]]:
    a_axes, b_axes = [], []
    for ia, ib in spec.pairs:
        if not 0 <= ia < len(a_shape):
            raise ContractionError(f"axis {ia} out of range for tensor a of order {len(a_shape)}")
        if not 0 <= ib < len(b_shape):
            raise ContractionError(f"axis {ib} out of range for tensor b of order {len(b_shape)}")
        if a_shape[ia] != b_shape[ib]:
            raise ContractionError(
                f"dimension mismatch: a axis {ia} has size {a_shape[ia]}, "
                f"b axis {ib} has size {b_shape[ib]}"
            )
        a_axes.append(ia)
        b_axes.append(ib)
    if len(set(a_axes)) != len(a_axes) or len(set(b_axes)) != len(b_axes):
        raise ContractionError("an axis may appear in at most one pair")
    n_out = len(a_shape) + len(b_shape) - 2 * len(spec.pairs)
    if spec.output_order is not None and sorted(spec.output_order) != list(range(n_out)):
        raise ContractionError(
            f"output_order {spec.output_order} is not a permutation of {n_out} surviving axes"
        )
    return a_axes, b_axes


def contract(a: DenseTensor, b: DenseTensor, spec: ContractionSpec) -> DenseTensor:
    """Sum products of ``a`` and ``b`` over the paired axes.

    Uses permute + matrix multiply (``np.tensordot``); the nested-loop
    definition lives in the test suite as the reference.
    """
    a_axes, b_axes = _check_spec(a.shape, b.shape, spec)
    out = np.tensordot(a.to_array(), b.to_array(), axes=(a_axes, b_axes))
    if spec.output_order is not None:
        out = np.transpose(out, spec.output_order)
    return DenseTensor.from_array(out)


def outer(a: DenseTensor, b: DenseTensor) -> DenseTensor:
    return DenseTensor(a.shape + b.shape, np.outer(a.data, b.data).reshape(-1))


def batched_contract(
    batch: Sequence[DenseTensor], b: DenseTensor, spec: ContractionSpec
) -> list[DenseTensor]:
    """Apply :func:`contract` to every batch member against the same ``b``."""
    batch = list(batch)
    if not batch:
        return []
    shape = batch[0].shape
    for k, item in enumerate(batch):
        if item.shape != shape:
            raise ContractionError(
                f"heterogeneous batch: item {k} has shape {item.shape}, item 0 has {shape}"
            )
    a_axes, b_axes = _check_spec(shape, b.shape, spec)
    # one tensordot over the stacked batch; axis 0 is the batch axis
    stacked = np.stack([item.to_array() for item in batch])
    out = np.tensordot(stacked, b.to_array(), axes=([ax + 1 for ax in a_axes], b_axes))
    if spec.output_order is not None:
        out = np.transpose(out, (0,) + tuple(i + 1 for i in spec.output_order))
    return [DenseTensor.from_array(o) for o in out]

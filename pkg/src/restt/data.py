"""Datasets: synthetic multilinear targets, IDX image files, CSV tables, splits."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class Dataset:
    """Inputs and targets of equal length.

    ``x`` holds node inputs ``(n, N, I)`` for synthetic data, byte images
    ``(n, H, W)`` for IDX data or raw columns ``(n, F)`` for tables. ``y`` holds
    integer class labels or real targets ``(n,)``.
    """

    x: np.ndarray
    y: np.ndarray
    split: str = "all"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise DataError(f"{len(self.x)} samples but {len(self.y)} targets")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def is_classification(self) -> bool:
        return self.y.dtype.kind in "iu"

    def one_hot(self, n_classes: int | None = None) -> np.ndarray:
        if not self.is_classification:
            raise DataError("one-hot targets need integer class labels")
        k = n_classes or int(self.y.max()) + 1
        out = np.zeros((len(self), k))
        out[np.arange(len(self)), self.y] = 1.0
        return out

    def take(self, idx, split: str | None = None, **meta) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, x=self.x[idx], y=self.y[idx], split=split or self.split, meta={**self.meta, **meta})


# -- synthetic -----------------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    d: int = 10
    n_train: int = 10_000
    n_test: int = 10_000
    weight_var: float = 0.1
    input_var: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.d < 1 or self.n_train < 1 or self.n_test < 1:
            raise ValueError("d, n_train and n_test must be >= 1")
        if self.weight_var <= 0 or self.input_var <= 0:
            raise ValueError("variances must be positive")


@dataclass(frozen=True)
class SynthWeights:
    w1: np.ndarray
    w2: np.ndarray
    w3: np.ndarray


def synth_target(weights: SynthWeights, x) -> np.ndarray:
    """First-, second- and third-order sums over three node inputs ``(n, 3, d)``."""
    x = np.asarray(x, dtype=float)
    x1, x2, x3 = x[:, 0], x[:, 1], x[:, 2]
    return (x1 @ weights.w1
            + np.einsum("ni,ij,nj->n", x1, weights.w2, x2)
            + np.einsum("ni,ijk,nj,nk->n", x1, weights.w3, x2, x3, optimize=True))


def synth_variance(spec: SynthSpec) -> float:
    """Target variance for independent zero-mean Gaussian weights and inputs."""
    w, v, d = spec.weight_var, spec.input_var, spec.d
    return w * v * d + w * v ** 2 * d ** 2 + w * v ** 3 * d ** 3


def synth_generate(spec: SynthSpec) -> tuple[Dataset, Dataset, SynthWeights]:
    """Draw one set of ground-truth weights and noiseless train/test samples."""
    rng = np.random.default_rng(spec.seed)
    sw = math.sqrt(spec.weight_var)
    d = spec.d
    weights = SynthWeights(rng.standard_normal(d) * sw, rng.standard_normal((d, d)) * sw,
                           rng.standard_normal((d, d, d)) * sw)
    sx = math.sqrt(spec.input_var)
    meta = {"source": "synthetic", "seed": spec.seed, "d": d}
    out = []
    for split, n in (("train", spec.n_train), ("test", spec.n_test)):
        x = rng.standard_normal((n, 3, d)) * sx
        out.append(Dataset(x, synth_target(weights, x), split, dict(meta)))
    return out[0], out[1], weights


# -- IDX -----------------------------------------------------------------------------


def _read_idx(path, magic: int, what: str) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataError(f"{path}: truncated file ({len(raw)} bytes)")
    found = int.from_bytes(raw[:4], "big")
    if found != magic:
        raise DataError(f"{path}: magic 0x{found:08x} is not the {what} magic 0x{magic:08x}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated header")
    dims = tuple(int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim))
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise DataError(f"{path}: truncated file, header promises {size} bytes of data, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Byte images ``(n, 28, 28)`` and labels from an IDX file pair."""
    images = _read_idx(images_path, IMAGES_MAGIC, "image")
    labels = _read_idx(labels_path, LABELS_MAGIC, "label")
    if len(images) != len(labels):
        raise DataError(f"{len(images)} images but {len(labels)} labels")
    meta = {"source": str(images_path)}
    return Dataset(images.copy(), labels.astype(np.int64), "all", meta)


IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_idx_dir(directory, split: str) -> Dataset:
    """Load ``split`` ("train" or "test") from a directory with the standard file names."""
    directory = Path(directory)
    img, lab = IDX_FILES[split]
    for name in (img, lab):
        if not (directory / name).exists():
            raise DataError(f"missing {directory / name}")
    return replace(load_idx(directory / img, directory / lab), split=split)


# -- CSV -----------------------------------------------------------------------------


def load_csv(path, target_column: str, delimiter: str = ",") -> Dataset:
    """Numeric table with a header row; every other column becomes a feature."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter=delimiter))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if target_column not in header:
        raise DataError(f"{path}: target column {target_column!r} not in header {header}")
    values = np.empty((len(rows) - 1, len(header)))
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataError(f"{path}: row {r} has {len(row)} cells, header has {len(header)}")
        for c, cell in enumerate(row):
            try:
                values[r - 2, c] = float(cell)
            except ValueError:
                raise DataError(f"{path}: non-numeric cell {cell!r} at row {r}, column {header[c]!r}") from None
    t = header.index(target_column)
    features = [h for h in header if h != target_column]
    meta = {"source": str(path), "columns": features, "target": target_column}
    return Dataset(np.delete(values, t, axis=1), values[:, t], "all", meta)


def write_csv(dataset: Dataset, path, target_column: str = "y") -> Path:
    """Flattened inputs plus the target, full float precision."""
    path = Path(path)
    x = dataset.x.reshape(len(dataset), -1)
    names = [f"x{j}" for j in range(x.shape[1])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names + [target_column])
        for row, t in zip(x, dataset.y):
            w.writerow([repr(float(v)) for v in row] + [repr(float(t))])
    return path


def write_sidecar(path, values: dict) -> Path:
    """``key=value`` lines, one per entry."""
    path = Path(path)
    path.write_text("".join(f"{k}={v}\n" for k, v in values.items()))
    return path


def read_sidecar(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


# -- splitting -----------------------------------------------------------------------


def split(dataset: Dataset, train_fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Shuffle, then take the first ``floor(fraction * n)`` rows for training.

    Flooring gives the usual 70/30 sizes 354/152 for 506 rows and 74/33 for 107.
    """
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    n = len(dataset)
    n_train = math.floor(train_fraction * n + 1e-9)
    if n_train == 0 or n_train == n:
        raise DataError(f"split of {n} rows at {train_fraction} leaves an empty side")
    perm = np.random.default_rng(seed).permutation(n)
    return (dataset.take(perm[:n_train], "train", split_seed=seed),
            dataset.take(perm[n_train:], "test", split_seed=seed))


def subsample_fraction(dataset: Dataset, fraction: float, seed: int = 0) -> Dataset:
    """Uniform sample of ``round(fraction * n)`` rows without replacement."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    n = len(dataset)
    k = int(round(fraction * n))
    if k == 0:
        raise DataError(f"fraction {fraction} of {n} rows is empty")
    idx = np.random.default_rng(seed).choice(n, size=k, replace=False)
    return dataset.take(idx, fraction=fraction, subsample_seed=seed)

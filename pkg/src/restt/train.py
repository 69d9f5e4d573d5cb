"""Mini-batch Adam training and evaluation metrics."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .grad import LOSSES, backward, loss_and_grad
from .model import ResTTParams, Topology, check_params, forward_batch, predict

TASKS = ("classification", "regression")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainSpec:
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 512
    weight_decay: float = 1e-6
    loss: str = "softmax_cross_entropy"
    seed: int = 0
    shuffle_seed: int | None = None
    eval_every: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dtype: str = "float64"

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("epochs, batch_size and eval_every must be >= 1")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("invalid Adam constants")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")

    @property
    def effective_shuffle_seed(self) -> int:
        return self.seed if self.shuffle_seed is None else self.shuffle_seed

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ResTTParams) -> "AdamState":
        named = params.named()
        return cls({k: np.zeros_like(a) for k, a in named.items()}, {k: np.zeros_like(a) for k, a in named.items()})


def adam_step(params: ResTTParams, grads: ResTTParams, state: AdamState, spec: TrainSpec):
    """One bias-corrected Adam update with L2 decay added to the gradient.

    Returns ``(new_params, new_state)``; inputs are not modified.
    """
    p, g = params.named(), grads.named()
    if set(p) != set(g) or set(p) != set(state.m):
        raise ValueError(f"parameter/gradient/state keys differ: {sorted(p)} vs {sorted(g)}")
    step = state.step + 1
    c1 = 1 - spec.beta1 ** step
    c2 = 1 - spec.beta2 ** step
    new_p, new_m, new_v = {}, {}, {}
    for k, w in p.items():
        if g[k].shape != w.shape or state.m[k].shape != w.shape:
            raise ValueError(f"{k}: gradient shape {g[k].shape} does not match parameter {w.shape}")
        gk = g[k] + spec.weight_decay * w
        m = spec.beta1 * state.m[k] + (1 - spec.beta1) * gk
        v = spec.beta2 * state.v[k] + (1 - spec.beta2) * gk * gk
        new_p[k] = w - spec.learning_rate * (m / c1) / (np.sqrt(v / c2) + spec.eps)
        new_m[k], new_v[k] = m, v
    return ResTTParams.from_named(new_p), AdamState(new_m, new_v, step)


# -- metrics -------------------------------------------------------------------------


def task_of(dataset: Dataset) -> str:
    return "classification" if dataset.is_classification else "regression"


def metrics_from_outputs(outputs, targets, task: str) -> dict[str, float]:
    out = np.asarray(outputs, dtype=float)
    t = np.asarray(targets)
    if len(t) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if task == "classification":
        return {"accuracy": float(np.mean(out.reshape(len(t), -1).argmax(axis=1) == t))}
    if task == "regression":
        pred = out.reshape(len(t))
        t = t.astype(float)
        res = float(np.sum((t - pred) ** 2))
        tot = float(np.sum((t - t.mean()) ** 2))
        r2 = 1.0 - res / tot if tot > 0 else (1.0 if res == 0 else 0.0)
        return {"rmse": math.sqrt(res / len(t)), "r2": r2}
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


def evaluate(params: ResTTParams, topology: Topology, data: Dataset, task: str | None = None) -> dict[str, float]:
    """Accuracy for classification; RMSE and R2 for regression."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    task = task or task_of(data)
    return metrics_from_outputs(predict(params, topology, data.x), data.y, task)


def headline(metrics: dict[str, float]) -> float:
    return metrics["accuracy"] if "accuracy" in metrics else metrics["rmse"]


# -- fitting -------------------------------------------------------------------------


@dataclass
class RunLog:
    rows: list[dict] = field(default_factory=list)
    metric_name: str = ""
    checkpoint: str | None = None
    params: ResTTParams | None = None

    def final(self) -> dict:
        return self.rows[-1] if self.rows else {}

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "eval_metric", "seconds"])
            for row in self.rows:
                w.writerow([row["epoch"], repr(row["train_loss"]), repr(row["eval_metric"]), f"{row['seconds']:.3f}"])
        return path


def _targets_for(loss: str, y: np.ndarray, output_dim: int) -> np.ndarray:
    if loss == "mse" and y.dtype.kind in "iu":
        onehot = np.zeros((len(y), output_dim))
        onehot[np.arange(len(y)), y] = 1.0
        return onehot
    if loss == "mse":
        return y.reshape(len(y), -1)
    return y


def fit(params: ResTTParams, topology: Topology, train: Dataset, eval: Dataset | None, spec: TrainSpec,
        progress=None) -> RunLog:
    """Train with shuffled mini-batches; evaluates every ``spec.eval_every`` epochs.

    The shuffle order uses its own generator, so changing ``spec.seed`` for
    initialisation does not change the data order when ``shuffle_seed`` is set.
    Raises :class:`DivergenceError` on a non-finite batch loss or gradient.
    """
    check_params(params, topology)
    dtype = np.dtype(spec.dtype)
    params = params.map(lambda a: np.array(a, dtype=dtype))
    state = AdamState.zeros_like(params)
    x = np.asarray(train.x, dtype=dtype)
    targets = _targets_for(spec.loss, train.y, topology.output_dim)
    n = len(train)
    if n == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(np.random.SeedSequence([spec.effective_shuffle_seed, 0x5EED]))
    task = task_of(eval if eval is not None else train)
    log = RunLog(metric_name="accuracy" if task == "classification" else "rmse")
    start = time.perf_counter()
    for epoch in range(1, spec.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for b0 in range(0, n, spec.batch_size):
            idx = order[b0:b0 + spec.batch_size]
            with np.errstate(over="ignore", invalid="ignore"):  # reported by the guard below
                out, trace = forward_batch(params, topology, x[idx])
                loss, up = loss_and_grad(out, targets[idx], spec.loss)
            if not math.isfinite(loss):
                finite = np.abs(out[np.isfinite(out)])
                biggest = f"{finite.max():.3g}" if finite.size else "none finite"
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, batch starting {b0} "
                    f"(max finite |output| = {biggest}); the initialization may be in an exploding regime"
                )
            with np.errstate(over="ignore", invalid="ignore"):
                grads = backward(params, topology, trace, up.astype(dtype, copy=False))
            if not all(np.all(np.isfinite(g)) for g in grads.named().values()):
                raise DivergenceError(f"non-finite gradient at epoch {epoch}, batch starting {b0} (loss {loss:.3g}); "
                                      "the initialization may be in an exploding regime")
            params, state = adam_step(params, grads, state, spec)
            total += loss * len(idx)
        row = {"epoch": epoch, "train_loss": total / n, "eval_metric": float("nan"),
               "seconds": time.perf_counter() - start}
        if eval is not None and (epoch % spec.eval_every == 0 or epoch == spec.epochs):
            row["eval_metric"] = headline(evaluate(params, topology, eval, task))
        log.rows.append(row)
        if progress is not None:
            progress(row)
    log.params = params
    return log

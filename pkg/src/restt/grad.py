"""Explicit backpropagation through TT / ResTT networks.

Gradients are returned as ``+dc/dW`` (the optimizer applies the sign) and are
averaged over the batch axis of the trace.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import ForwardTrace, ResTTParams, Topology, TopologyError, check_params, forward_batch

LOSSES = ("mse", "softmax_cross_entropy")


@dataclass
class GradientSet(ResTTParams):
    """Per-tensor gradients mirroring :class:`ResTTParams`, plus the upstream signal."""

    upstream: np.ndarray | None = None

    @classmethod
    def from_named(cls, named, upstream=None) -> "GradientSet":
        base = ResTTParams.from_named(named)
        return cls(base.w_first, base.w_chain, base.w_linear, base.w_final, upstream)


class StaleTraceError(ValueError):
    """The trace was not produced by these parameters/topology."""


def _check_trace(params: ResTTParams, topology: Topology, trace: ForwardTrace) -> None:
    try:
        check_params(params, topology)
    except TopologyError as exc:
        raise StaleTraceError(str(exc)) from exc
    N = topology.n_nodes
    if trace.n_nodes != N or len(trace.feed) != N - 1:
        raise StaleTraceError(f"trace covers {trace.n_nodes} nodes, topology has {N}")
    if trace.output.shape[1] != topology.output_dim:
        raise StaleTraceError("trace output width does not match the topology")
    for n, x in enumerate(trace.inputs, start=1):
        if x.shape[1] != topology.input_dims[n - 1]:
            raise StaleTraceError(f"trace input {n} has length {x.shape[1]}, expected {topology.input_dims[n - 1]}")
    for f in trace.feed:
        if f.shape[1] != topology.bond_dim:
            raise StaleTraceError("trace bond width does not match the topology")
    for n, a in trace.intermediates.items():
        w = params.w_chain.get(n)
        if w is None or a.shape[1:] != (w.shape[0], w.shape[2]):
            raise StaleTraceError(f"cached intermediate matrix of layer {n} does not match the parameters")


def backward(params: ResTTParams, topology: Topology, trace: ForwardTrace, upstream) -> GradientSet:
    """Batch-mean gradient of the cost given ``dc/dY(N)`` for every batch item.

    Walks the layers from ``N`` down to 1 carrying the gradient with respect to
    the chain-visible part of ``Y(n-1)`` and the bypassed part separately; for
    the standard topologies the bypass is always zero and the recursion is the
    familiar product of ``(I + A(k))`` (``A(k)`` without skips) factors.
    """
    _check_trace(params, topology, trace)
    g = np.asarray(upstream, dtype=trace.output.dtype)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != trace.output.shape:
        raise ValueError(f"upstream shape {g.shape} does not match outputs {trace.output.shape}")
    N, B = topology.n_nodes, trace.batch_size
    x = trace.inputs
    grads: dict[str, np.ndarray] = {}

    if N == 1:
        grads["w_first"] = x[0].T @ g / B
        return GradientSet.from_named(grads, upstream=g)

    # the last layer sees Y(N-1) through its chain (feed part only), final map and skip
    feed = trace.feed[N - 2]
    byp = trace.bypass[N - 2]
    total = feed if byp is None else feed + byp
    g_feed = np.zeros_like(feed)
    g_byp = np.zeros_like(feed)
    _layer_grads(params, topology, trace, N, g, feed, g_feed, grads)
    if topology.final_linear:
        grads["w_final"] = total.T @ g / B
        back = g @ params.w_final.T
        g_feed += back
        g_byp += back
    if topology.has_skip(N):
        g_feed += g
        g_byp += g

    for n in range(N - 1, 1, -1):
        feed = trace.feed[n - 2]
        g_feed_prev = np.zeros_like(feed)
        g_byp_prev = np.zeros_like(feed)
        _layer_grads(params, topology, trace, n, g_feed, feed, g_feed_prev, grads)
        if topology.has_skip(n):
            g_byp_prev += g_byp
            if topology.skip_feeds_chain(n):
                g_feed_prev += g_feed
            else:
                g_feed_prev += g_byp
        g_feed, g_byp = g_feed_prev, g_byp_prev

    grads["w_first"] = x[0].T @ g_feed / B
    ordered = {k: grads[k] for k in _param_order(params) if k in grads}
    return GradientSet.from_named(ordered, upstream=g)


def _param_order(params):
    return list(params.named())


def _layer_grads(params, topology, trace, n, g_out, feed_prev, g_feed_prev, grads):
    """Chain and linear-branch gradients of layer ``n``; adds ``dc/dfeed(n-1)`` in place."""
    x = trace.inputs[n - 1]
    B = x.shape[0]
    if topology.has_chain(n):
        w = params.w_chain[n]
        joint_in = (feed_prev[:, :, None] * x[:, None, :]).reshape(B, -1)
        grads[f"w_chain.{n}"] = (joint_in.T @ g_out).reshape(w.shape) / B
        a = trace.intermediates.get(n)
        if a is not None:
            g_feed_prev += (a @ g_out[:, :, None])[:, :, 0]
        else:
            joint = (x[:, :, None] * g_out[:, None, :]).reshape(B, -1)
            g_feed_prev += joint @ w.reshape(w.shape[0], -1).T
    if topology.has_linear(n):
        grads[f"w_linear.{n}"] = x.T @ g_out / B


def loss_and_grad(output, target, loss: str = "mse") -> tuple[float, np.ndarray]:
    """Batch-mean cost and per-item ``dc_item/dY(N)``.

    ``output`` is ``(O,)`` or ``(B, O)``. For ``mse`` the target has the same
    shape; for ``softmax_cross_entropy`` it holds class indices ``(B,)`` or
    one-hot rows.
    """
    out = np.asarray(output, dtype=float)
    single = out.ndim == 1
    if single:
        out = out[None, :]
    B, O = out.shape
    if loss == "mse":
        tgt = np.asarray(target, dtype=float).reshape(out.shape) if np.size(target) == out.size else None
        if tgt is None:
            raise ValueError(f"mse target has {np.size(target)} entries, output has {out.size}")
        diff = out - tgt
        c = float(np.mean(np.sum(diff * diff, axis=1) / O))
        up = 2.0 * diff / O
    elif loss == "softmax_cross_entropy":
        labels = _class_labels(target, B, O)
        shifted = out - out.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1))
        logp = shifted[np.arange(B), labels] - logz
        c = float(-np.mean(logp))
        up = np.exp(shifted - logz[:, None])
        up[np.arange(B), labels] -= 1.0
    else:
        raise ValueError(f"unknown loss {loss!r}; expected one of {LOSSES}")
    return c, (up[0] if single else up)


def _class_labels(target, B, O) -> np.ndarray:
    t = np.asarray(target)
    if t.size == B:
        labels = t.reshape(B)
        if not np.all(np.equal(np.mod(labels, 1), 0)):
            raise ValueError("class labels must be integers")
        labels = labels.astype(int)
        if labels.min() < 0 or labels.max() >= O:
            raise ValueError(f"class label out of range 0..{O - 1}")
        return labels
    if t.size == B * O:
        t = t.reshape(B, O)
        if not (np.all((t == 0) | (t == 1)) and np.all(t.sum(axis=1) == 1)):
            raise ValueError("cross-entropy targets must be one-hot rows")
        return t.argmax(axis=1)
    raise ValueError(f"expected {B} class labels or {B}x{O} one-hot rows, got shape {t.shape}")


def finite_diff_grad(params: ResTTParams, topology: Topology, x, loss_fn: Callable[[np.ndarray], float],
                     step: float = 1e-5) -> GradientSet:
    """Central differences of ``loss_fn(outputs)`` over every stored scalar.

    ``loss_fn`` receives the ``(B, O)`` outputs of :func:`forward_batch` on
    ``x``. Test oracle only: costs two forward passes per parameter.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    named = {k: np.array(v, dtype=np.float64) for k, v in params.named().items()}
    probe = ResTTParams.from_named(named)
    out = {}
    for key, arr in named.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            c_plus = loss_fn(forward_batch(probe, topology, x, cache_intermediates=False)[0])
            flat[j] = orig - step
            c_minus = loss_fn(forward_batch(probe, topology, x, cache_intermediates=False)[0])
            flat[j] = orig
            gflat[j] = (c_plus - c_minus) / (2.0 * step)
        out[key] = g
    return GradientSet.from_named(out)


def batch_loss_fn(target, loss: str = "mse") -> Callable[[np.ndarray], float]:
    """``outputs -> batch-mean cost`` closure matching :func:`loss_and_grad`."""
    return lambda outputs: loss_and_grad(outputs, target, loss)[0]

"""Signal-propagation statistics at initialization.

With weights drawn from N(0, sigma_w2 / r) every chain node multiplies the
per-component forward variance by the slope factor ``s = E|x|^2 * sigma_w2``
and an identity skip adds 1 to that multiplier. The same multiplier governs
the mean square of the input-output Jacobian on the way back.

Monte Carlo measurement draws fresh weights for every trial. Per-layer
ratios are estimated as the trial average of ``|Y(k)|^2 / |Y(k-1)|^2``
(per component). This is an unbiased estimate of the same multiplier as the
ratio of variances, but the naive ratio of sample variances is dominated by a
handful of trials in deep plain TTs (the squared norm is a product of
independent chi-square factors), so it is reported but not used for checks.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .model import ResTTParams, Topology, expected_shapes

VERDICTS = ("stable", "vanishing", "exploding")

DEFAULT_SMALLNESS = 0.01
DEFAULT_TT_TOLERANCE = 0.05
EXPLODE_LIMIT = 1e6


def model_kind(topology: Topology) -> str:
    return "restt" if any(topology.identity_skip) else "tt"


def _check_supported(topology: Topology) -> None:
    if not all(topology.skip_to_chain):
        raise ValueError("mean-field recursions are only defined for sequential skips")


def _stats_per_layer(topology: Topology, input_stats) -> np.ndarray:
    e = np.broadcast_to(np.asarray(input_stats, dtype=float), (topology.n_nodes,)).copy()
    if np.any(e <= 0):
        raise ValueError("input statistics E(sum x^2) must be positive")
    return e


@dataclass
class SignalStats:
    """Predicted per-layer quantities, indexed by layer ``k`` (1-based).

    ``q[k-1]`` is the per-component variance of ``Y(k)``. ``gain[k-1]`` is the
    homogeneous forward multiplier of layer ``k`` (``s`` for a chain node, plus
    one for an identity skip) and ``additive[k-1]`` the variance injected by its
    linear branch. ``chi[k-1]`` is the per-component mean square of
    ``dY(N)/dY(k-1)`` for ``k = 2..N`` (``nan`` at ``k = 1``), seeded with a
    unit-variance upstream signal.
    """

    kind: str
    sigma_w2: float
    slope: np.ndarray
    q: np.ndarray
    chi: np.ndarray
    gain: np.ndarray
    additive: np.ndarray
    chi_gain: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.slope)


def predict(topology: Topology, sigma_w2: float, input_stats) -> SignalStats:
    """Apply the forward variance and backward Jacobian recursions.

    ``input_stats`` is ``E(sum_i x_i^2)`` per layer (scalar broadcasts). The
    recursion starts from ``Var Y(1) = s(1) / r``, the variance produced by the
    first node's weights from a fixed input. Deep exploding chains overflow
    to ``inf``, which is kept as the prediction.
    """
    with np.errstate(over="ignore"):
        return _predict(topology, sigma_w2, input_stats)


def _predict(topology: Topology, sigma_w2: float, input_stats) -> SignalStats:
    _check_supported(topology)
    e = _stats_per_layer(topology, input_stats)
    N, r, O = topology.n_nodes, topology.bond_dim, topology.output_dim
    s = sigma_w2 * e
    q = np.zeros(N)
    gain = np.full(N, np.nan)
    additive = np.zeros(N)
    q[0] = s[0] / r
    additive[0] = s[0] / r
    for k in range(2, N + 1):
        g = 0.0
        if topology.has_chain(k):
            g += s[k - 1]
        if topology.has_skip(k):
            g += 1.0
        if k == N and topology.final_linear:
            g += sigma_w2
        b = s[k - 1] / r if topology.has_linear(k) else 0.0
        gain[k - 1] = g
        additive[k - 1] = b
        q[k - 1] = g * q[k - 2] + b

    chi = np.full(N, np.nan)
    chi_gain = np.full(N, np.nan)
    upstream = 1.0
    for k in range(N, 1, -1):
        factor = gain[k - 1] * (O / r if k == N else 1.0)
        chi_gain[k - 1] = factor
        upstream = factor * upstream
        chi[k - 1] = upstream
    return SignalStats(model_kind(topology), float(sigma_w2), s, q, chi, gain, additive, chi_gain)


def stability_verdict(topology: Topology, stats: SignalStats, tolerance: float = DEFAULT_TT_TOLERANCE,
                      smallness: float = DEFAULT_SMALLNESS) -> str:
    """Classify the initialization regime from the predicted slopes.

    Plain TT is stable only when every chain slope is within ``tolerance`` of 1.
    ResTT never vanishes; it counts as stable when every chain slope is at most
    ``smallness`` (with the same relative tolerance) and the accumulated growth
    ``prod(1 + s)`` stays below ``EXPLODE_LIMIT``.
    """
    chain_layers = [k for k in range(2, topology.n_nodes + 1) if topology.has_chain(k)]
    if not chain_layers:
        return "stable"
    s = np.array([stats.slope[k - 1] for k in chain_layers])
    if stats.kind == "tt":
        if np.all(np.abs(s - 1.0) <= tolerance):
            return "stable"
        return "exploding" if np.sum(np.log(s)) > 0 else "vanishing"
    if np.prod(1.0 + s) > EXPLODE_LIMIT:
        return "exploding"
    return "stable" if np.max(s) <= smallness * (1.0 + tolerance) else "exploding"


def recommend_sigma(topology: Topology, input_stats, kind: str | None = None,
                    smallness_target: float = DEFAULT_SMALLNESS) -> float:
    """Weight variance scale for a stable start.

    TT: ``1 / E|x|^2`` so that the slope factor is 1 (the mean over layers when
    the statistics differ). ResTT: ``smallness_target / max E|x|^2``.
    """
    e = np.broadcast_to(np.asarray(input_stats, dtype=float), (topology.n_nodes,))
    if np.any(e <= 0) or not np.all(np.isfinite(e)):
        raise ValueError("input statistics must be positive and finite")
    kind = kind or model_kind(topology)
    if kind == "tt":
        return float(1.0 / np.mean(e))
    if kind == "restt":
        return float(smallness_target / np.max(e))
    raise ValueError(f"unknown model kind {kind!r}")


# -- Monte Carlo ---------------------------------------------------------------------


InputSampler = Callable[[np.random.Generator, int], list]


def trig_pixel_sampler(topology: Topology) -> InputSampler:
    """Uniform pixels in [0, 1] through the cos/sin map (unit-norm, I = 2)."""
    if any(d != 2 for d in topology.input_dims):
        raise ValueError("the trigonometric sampler needs I_n = 2 at every node")

    def sample(rng, n):
        out = []
        for _ in range(topology.n_nodes):
            u = rng.random(n)
            out.append(np.stack([np.cos(np.pi * u / 2), np.sin(np.pi * u / 2)], axis=1))
        return out

    return sample


def gaussian_sampler(topology: Topology, variance: float = 1.0) -> InputSampler:
    def sample(rng, n):
        return [rng.standard_normal((n, d)) * math.sqrt(variance) for d in topology.input_dims]

    return sample


def draw_stacked_params(topology: Topology, sigma_w2: float, rng: np.random.Generator, trials: int) -> dict:
    """Independent weights for ``trials`` networks; every array gains a leading trial axis."""
    std = math.sqrt(sigma_w2 / topology.bond_dim)
    return {name: rng.standard_normal((trials,) + shape) * std
            for name, shape in expected_shapes(topology).items()}


def trial_params(stacked: dict, t: int) -> ResTTParams:
    return ResTTParams.from_named({k: v[t] for k, v in stacked.items()})


def simulate(topology: Topology, stacked: dict, xs: list, upstream: np.ndarray):
    """Forward and backward passes for many independent networks at once.

    Returns ``(ys, homog, js)``: ``ys[k-1]`` is ``Y(k)`` per trial,
    ``homog[k-1]`` the part of ``Y(k)`` excluding the linear branch, and
    ``js[k-1]`` is ``dY(N)/dY(k-1)`` applied to ``upstream`` (``k = 2..N``;
    ``js[0]`` is ``None``).
    """
    N = topology.n_nodes
    y = np.einsum("ti,tiv->tv", xs[0], stacked["w_first"])
    ys, homog, amats = [y], [y], {}
    for k in range(2, N + 1):
        x = xs[k - 1]
        h = 0.0
        if topology.has_chain(k):
            a = np.einsum("ti,tviu->tvu", x, stacked[f"w_chain.{k}"])
            amats[k] = a
            h = h + np.einsum("tv,tvu->tu", y, a)
        if k == N and topology.final_linear:
            h = h + np.einsum("tv,tvo->to", y, stacked["w_final"])
        if topology.has_skip(k):
            h = h + y
        lin = np.einsum("ti,tiu->tu", x, stacked[f"w_linear.{k}"]) if topology.has_linear(k) else 0.0
        y = h + lin
        homog.append(h)
        ys.append(y)

    js = [None] * N
    j = upstream
    for k in range(N, 1, -1):
        nxt = 0.0
        if topology.has_chain(k):
            nxt = nxt + np.einsum("tvu,tu->tv", amats[k], j)
        if k == N and topology.final_linear:
            nxt = nxt + np.einsum("tvo,to->tv", stacked["w_final"], j)
        if topology.has_skip(k):
            nxt = nxt + j
        j = nxt
        js[k - 1] = j
    return ys, homog, js


@dataclass
class MeanFieldReport:
    """Predicted vs measured statistics; arrays indexed by layer ``k - 1``."""

    predicted: SignalStats
    trials: int
    q_meas: np.ndarray
    ratio_meas: np.ndarray
    ratio_se: np.ndarray
    raw_ratio_meas: np.ndarray
    raw_ratio_se: np.ndarray
    chi_meas: np.ndarray
    chi_ratio_meas: np.ndarray
    chi_ratio_se: np.ndarray
    verdict: str
    input_stats: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n_nodes(self) -> int:
        return len(self.q_meas)

    def ratio_rel_err(self) -> np.ndarray:
        return np.abs(self.ratio_meas - self.predicted.gain) / self.predicted.gain

    def chi_ratio_rel_err(self) -> np.ndarray:
        return np.abs(self.chi_ratio_meas - self.predicted.chi_gain) / self.predicted.chi_gain

    def measured_total_gain(self, first: int = 2, last: int | None = None) -> float:
        """Product of measured per-layer ratios from ``first`` to ``last``: q(last)/q(first-1)."""
        last = last or self.n_nodes
        return float(np.prod(self.ratio_meas[first - 1:last]))

    def rows(self) -> list[dict]:
        p = self.predicted
        rel = self.ratio_rel_err()
        rows = []
        for k in range(1, self.n_nodes + 1):
            i = k - 1
            rows.append({
                "k": k, "s": p.slope[i], "q_pred": p.q[i], "q_meas": self.q_meas[i],
                "chi_pred": p.chi[i], "chi_meas": self.chi_meas[i],
                "ratio_pred": p.gain[i], "ratio_meas": self.ratio_meas[i], "ratio_se": self.ratio_se[i],
                "chi_ratio_pred": p.chi_gain[i], "chi_ratio_meas": self.chi_ratio_meas[i],
                "rel_err": rel[i],
            })
        return rows

    def write_csv(self, path) -> Path:
        path = Path(path)
        rows = self.rows()
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            for row in rows:
                writer.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})
        return path

    def summary(self) -> str:
        return (f"verdict={self.verdict} kind={self.predicted.kind} sigma_w2={self.predicted.sigma_w2:g} "
                f"trials={self.trials} max_ratio_rel_err={np.nanmax(self.ratio_rel_err()):.4f}")


def measure(topology: Topology, sigma_w2: float, input_sampler: InputSampler | None = None,
            trials: int = 10_000, seed: int = 0, chunk: int = 2000) -> MeanFieldReport:
    """Monte Carlo check of :func:`predict` with fresh weights per trial.

    Trials are processed in chunks; chunk ``c`` uses its own generator spawned
    from ``seed``, so results do not depend on how the work is scheduled.
    """
    _check_supported(topology)
    if trials < 2:
        raise ValueError("need at least two trials")
    sampler = input_sampler or trig_pixel_sampler(topology)
    N, O = topology.n_nodes, topology.output_dim
    widths = np.array([topology.layer_width(k) for k in range(1, N + 1)], dtype=float)

    sums = {name: np.zeros(N) for name in ("q", "ratio", "ratio2", "raw", "raw2", "chi", "cr", "cr2", "e")}
    n_chunks = math.ceil(trials / chunk)
    seeds = np.random.SeedSequence(seed).spawn(n_chunks)
    done = 0
    for c in range(n_chunks):
        T = min(chunk, trials - done)
        rng = np.random.default_rng(seeds[c])
        xs = sampler(rng, T)
        stacked = draw_stacked_params(topology, sigma_w2, rng, T)
        upstream = rng.standard_normal((T, O))
        ys, homog, js = simulate(topology, stacked, xs, upstream)
        sq = [np.sum(y * y, axis=1) / widths[k] for k, y in enumerate(ys)]
        for k in range(N):
            sums["e"][k] += np.sum(xs[k] * xs[k])
            sums["q"][k] += np.sum(sq[k])
            if k == 0:
                continue
            ratio = np.sum(homog[k] ** 2, axis=1) / widths[k] / sq[k - 1]
            raw = sq[k] / sq[k - 1]
            sums["ratio"][k] += ratio.sum()
            sums["ratio2"][k] += (ratio ** 2).sum()
            sums["raw"][k] += raw.sum()
            sums["raw2"][k] += (raw ** 2).sum()
            j_k = np.sum(js[k] ** 2, axis=1) / topology.bond_dim
            j_next = np.sum(upstream ** 2, axis=1) / O if k == N - 1 else np.sum(js[k + 1] ** 2, axis=1) / topology.bond_dim
            sums["chi"][k] += j_k.sum()
            cr = j_k / j_next
            sums["cr"][k] += cr.sum()
            sums["cr2"][k] += (cr ** 2).sum()
        done += T

    def mean_se(s1, s2):
        m = s1 / trials
        var = np.maximum(s2 / trials - m * m, 0.0) * trials / (trials - 1)
        return m, np.sqrt(var / trials)

    nan_first = lambda a: np.concatenate([[np.nan], a[1:]])
    ratio, ratio_se = mean_se(sums["ratio"], sums["ratio2"])
    raw, raw_se = mean_se(sums["raw"], sums["raw2"])
    cr, cr_se = mean_se(sums["cr"], sums["cr2"])
    e = sums["e"] / trials
    stats = predict(topology, sigma_w2, e)
    return MeanFieldReport(
        predicted=stats, trials=trials, q_meas=sums["q"] / trials,
        ratio_meas=nan_first(ratio), ratio_se=nan_first(ratio_se),
        raw_ratio_meas=nan_first(raw), raw_ratio_se=nan_first(raw_se),
        chi_meas=nan_first(sums["chi"] / trials),
        chi_ratio_meas=nan_first(cr), chi_ratio_se=nan_first(cr_se),
        verdict=stability_verdict(topology, stats), input_stats=e,
    )


def input_second_moments(xs: Sequence[np.ndarray]) -> np.ndarray:
    """``E(sum_i x_i^2)`` per node from a batch of node inputs ``(batch, I_n)``."""
    return np.array([float(np.mean(np.sum(np.asarray(x) ** 2, axis=1))) for x in xs])

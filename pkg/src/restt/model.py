"""Tensor Train and Residual Tensor Train networks.

A network has ``N`` nodes. Node 1 maps ``x1`` to the bond space with
``w_first``. Every later node ``n`` combines up to three addends into its
output ``Y(n)``:

* chain term: ``Y(n-1)`` contracted with ``w_chain[n]`` and ``x_n``
* identity skip: ``Y(n-1)`` itself
* linear branch: ``x_n`` contracted with ``w_linear[n]``

The last node replaces the identity skip by the ``w_final`` map (unless the
bond and output dimensions agree and an identity skip is requested, which is
how the small scalar examples and the fully-connected preset are built).

Skips can also be routed around the next chain node (``skip_to_chain=False``):
the skipped signal still reaches the output but is not multiplied by later
inputs. That is the only non-sequential routing supported.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

MODES = ("plain_tt", "restt", "fully_connected", "volterra", "custom")
PRESETS = ("general_restt", "restt", "fully_connected", "volterra", "plain_tt")

CHECKPOINT_FORMAT_VERSION = 1


class TopologyError(ValueError):
    pass


class InputShapeError(ValueError):
    pass


def _flags(value, n_layers: int, name: str) -> tuple[bool, ...]:
    if isinstance(value, bool):
        return (value,) * n_layers
    flags = tuple(bool(v) for v in value)
    if len(flags) != n_layers:
        raise TopologyError(f"{name} needs {n_layers} entries (layers 2..N), got {len(flags)}")
    return flags


@dataclass(frozen=True)
class Topology:
    """Node dimensions plus which connections exist at layers ``2..N``.

    Flag tuples are indexed by ``layer - 2``; use the ``has_*`` accessors with
    1-based layer numbers instead of indexing them directly.
    """

    input_dims: tuple[int, ...]
    bond_dim: int
    output_dim: int
    chain: tuple[bool, ...]
    identity_skip: tuple[bool, ...]
    linear_branch: tuple[bool, ...]
    final_linear: bool
    skip_to_chain: tuple[bool, ...] = ()
    mode: str = "custom"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.input_dims)
        object.__setattr__(self, "input_dims", dims)
        n = len(dims)
        if n < 1:
            raise TopologyError("a network needs at least one node")
        if any(d < 1 for d in dims) or self.bond_dim < 1 or self.output_dim < 1:
            raise TopologyError("all dimensions must be >= 1")
        if self.mode not in MODES:
            raise TopologyError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        layers = n - 1
        object.__setattr__(self, "chain", _flags(self.chain, layers, "chain"))
        object.__setattr__(self, "identity_skip", _flags(self.identity_skip, layers, "identity_skip"))
        object.__setattr__(self, "linear_branch", _flags(self.linear_branch, layers, "linear_branch"))
        stc = self.skip_to_chain if self.skip_to_chain != () else True
        object.__setattr__(self, "skip_to_chain", _flags(stc, layers, "skip_to_chain"))
        object.__setattr__(self, "final_linear", bool(self.final_linear) and n > 1)

        r, o = self.bond_dim, self.output_dim
        if n == 1 and r != o:
            raise TopologyError("a single-node network outputs Y(1) directly, so bond_dim must equal output_dim")
        if n > 1 and self.identity_skip[-1] and r != o:
            raise TopologyError(
                f"an identity skip into the last layer needs bond_dim == output_dim (got {r} vs {o})"
            )
        if n > 1 and not (self.chain[-1] or self.linear_branch[-1] or self.final_linear or self.identity_skip[-1]):
            raise TopologyError("the last layer has no connection at all")
        self._check_mode()

    def _check_mode(self):
        n = self.n_nodes
        if n == 1 or self.mode == "custom":
            return
        L = n - 1
        expected = {
            "plain_tt": ((True,) * L, (False,) * L, (False,) * L, False),
            "restt": ((True,) * L, (True,) * (L - 1) + (False,), (True,) * L, True),
            "fully_connected": ((False,) * L, (True,) * L, (True,) * L, False),
            "volterra": ((True,) * L, (False,) * L, (True,) * L, False),
        }[self.mode]
        got = (self.chain, self.identity_skip, self.linear_branch, self.final_linear)
        if got != expected or not all(self.skip_to_chain):
            raise TopologyError(f"flags do not match mode {self.mode!r}; use mode='custom' for edited topologies")
        if self.mode == "volterra" and self.output_dim != 1:
            raise TopologyError("the volterra preset needs a scalar output (output_dim == 1)")

    @property
    def n_nodes(self) -> int:
        return len(self.input_dims)

    def _flag(self, flags, layer: int) -> bool:
        if not 2 <= layer <= self.n_nodes:
            raise IndexError(f"layer {layer} has no connection flags (valid: 2..{self.n_nodes})")
        return flags[layer - 2]

    def has_chain(self, layer: int) -> bool:
        return self._flag(self.chain, layer)

    def has_skip(self, layer: int) -> bool:
        return self._flag(self.identity_skip, layer)

    def has_linear(self, layer: int) -> bool:
        return self._flag(self.linear_branch, layer)

    def skip_feeds_chain(self, layer: int) -> bool:
        return self._flag(self.skip_to_chain, layer)

    def layer_width(self, layer: int) -> int:
        """Length of ``Y(layer)``."""
        return self.output_dim if layer == self.n_nodes else self.bond_dim

    # -- constructors ---------------------------------------------------------------

    @classmethod
    def plain_tt(cls, input_dims, bond_dim: int, output_dim: int = 1) -> "Topology":
        L = len(input_dims) - 1
        return cls(tuple(input_dims), bond_dim, output_dim, (True,) * L, (False,) * L, (False,) * L, False, mode="plain_tt")

    @classmethod
    def restt(cls, input_dims, bond_dim: int, output_dim: int = 1) -> "Topology":
        L = len(input_dims) - 1
        skips = (True,) * (L - 1) + (False,) if L else ()
        return cls(tuple(input_dims), bond_dim, output_dim, (True,) * L, skips, (True,) * L, True, mode="restt")

    @classmethod
    def fully_connected(cls, input_dims, output_dim: int = 1) -> "Topology":
        # the accumulator is the output itself, so the bond dimension is O
        L = len(input_dims) - 1
        return cls(tuple(input_dims), output_dim, output_dim, (False,) * L, (True,) * L, (True,) * L, False,
                   mode="fully_connected")

    @classmethod
    def volterra(cls, input_dims, bond_dim: int) -> "Topology":
        L = len(input_dims) - 1
        return cls(tuple(input_dims), bond_dim, 1, (True,) * L, (False,) * L, (True,) * L, False, mode="volterra")

    def edited(self, **changes) -> "Topology":
        """Copy with some per-layer flags changed; the result is always ``custom``.

        Flag changes may be given as ``{layer: bool}`` mappings.
        """
        fields = dict(
            input_dims=self.input_dims, bond_dim=self.bond_dim, output_dim=self.output_dim,
            chain=self.chain, identity_skip=self.identity_skip, linear_branch=self.linear_branch,
            final_linear=self.final_linear, skip_to_chain=self.skip_to_chain,
        )
        for key, value in changes.items():
            if key not in fields:
                raise TypeError(f"unknown topology field {key!r}")
            if isinstance(value, Mapping):
                flags = list(fields[key])
                for layer, flag in value.items():
                    flags[layer - 2] = bool(flag)
                value = tuple(flags)
            fields[key] = value
        return Topology(**fields, mode="custom")

    def to_dict(self) -> dict:
        return {
            "input_dims": list(self.input_dims), "bond_dim": self.bond_dim,
            "output_dim": self.output_dim, "chain": list(self.chain),
            "identity_skip": list(self.identity_skip), "linear_branch": list(self.linear_branch),
            "final_linear": self.final_linear, "skip_to_chain": list(self.skip_to_chain),
            "mode": self.mode,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Topology":
        return cls(
            tuple(d["input_dims"]), int(d["bond_dim"]), int(d["output_dim"]), tuple(d["chain"]),
            tuple(d["identity_skip"]), tuple(d["linear_branch"]), bool(d["final_linear"]),
            tuple(d.get("skip_to_chain", ())), d.get("mode", "custom"),
        )


def set_topology_preset(preset: str, input_dims: Sequence[int], bond_dim: int = 1,
                        output_dim: int = 1) -> Topology:
    if preset in ("general_restt", "restt"):
        return Topology.restt(input_dims, bond_dim, output_dim)
    if preset == "plain_tt":
        return Topology.plain_tt(input_dims, bond_dim, output_dim)
    if preset == "fully_connected":
        return Topology.fully_connected(input_dims, output_dim)
    if preset == "volterra":
        if output_dim != 1:
            raise TopologyError("the volterra preset needs output_dim == 1")
        return Topology.volterra(input_dims, bond_dim)
    raise TopologyError(f"unknown preset {preset!r}; expected one of {PRESETS}")


@dataclass
class ResTTParams:
    """Weight tensors keyed by 1-based layer number.

    Shapes: ``w_first`` is ``I1 x r``; ``w_chain[n]`` is ``r x In x r`` (``r x IN x O``
    at the last layer); ``w_linear[n]`` is ``In x r`` (``IN x O`` last);
    ``w_final`` is ``r x O``. Absent connections are simply missing.
    """

    w_first: np.ndarray
    w_chain: dict[int, np.ndarray] = field(default_factory=dict)
    w_linear: dict[int, np.ndarray] = field(default_factory=dict)
    w_final: np.ndarray | None = None

    def named(self) -> dict[str, np.ndarray]:
        out = {"w_first": self.w_first}
        for n in sorted(set(self.w_chain) | set(self.w_linear)):
            if n in self.w_chain:
                out[f"w_chain.{n}"] = self.w_chain[n]
            if n in self.w_linear:
                out[f"w_linear.{n}"] = self.w_linear[n]
        if self.w_final is not None:
            out["w_final"] = self.w_final
        return out

    @classmethod
    def from_named(cls, named: Mapping[str, np.ndarray]) -> "ResTTParams":
        chain, linear = {}, {}
        for key, arr in named.items():
            if key.startswith("w_chain."):
                chain[int(key.split(".")[1])] = arr
            elif key.startswith("w_linear."):
                linear[int(key.split(".")[1])] = arr
        return cls(named["w_first"], chain, linear, named.get("w_final"))

    def map(self, fn) -> "ResTTParams":
        return type(self).from_named({k: fn(v) for k, v in self.named().items()})

    def copy(self) -> "ResTTParams":
        return self.map(np.copy)

    def n_scalars(self) -> int:
        return sum(a.size for a in self.named().values())

    @property
    def dtype(self):
        return self.w_first.dtype


def expected_shapes(topology: Topology) -> dict[str, tuple[int, ...]]:
    r, o, N = topology.bond_dim, topology.output_dim, topology.n_nodes
    shapes = {"w_first": (topology.input_dims[0], r)}
    for n in range(2, N + 1):
        width = topology.layer_width(n)
        if topology.has_chain(n):
            shapes[f"w_chain.{n}"] = (r, topology.input_dims[n - 1], width)
        if topology.has_linear(n):
            shapes[f"w_linear.{n}"] = (topology.input_dims[n - 1], width)
    if topology.final_linear:
        shapes["w_final"] = (r, o)
    return shapes


def check_params(params: ResTTParams, topology: Topology) -> None:
    expected = expected_shapes(topology)
    got = {k: tuple(v.shape) for k, v in params.named().items()}
    if got != expected:
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        wrong = sorted(k for k in set(got) & set(expected) if got[k] != expected[k])
        raise TopologyError(
            f"parameters do not match topology (missing={missing}, unexpected={extra}, wrong shape={wrong})"
        )


def init_params(topology: Topology, sigma_w2: float, rng_seed: int = 0, dtype=np.float64) -> ResTTParams:
    """Draw every stored weight i.i.d. from N(0, sigma_w2 / r)."""
    if not sigma_w2 > 0:
        raise ValueError(f"sigma_w2 must be positive, got {sigma_w2}")
    rng = np.random.default_rng(rng_seed)
    std = math.sqrt(sigma_w2 / topology.bond_dim)
    named = {
        name: (rng.standard_normal(shape) * std).astype(dtype, copy=False)
        for name, shape in expected_shapes(topology).items()
    }
    return ResTTParams.from_named(named)


def param_count(topology: Topology) -> tuple[int, int]:
    """Return ``(chain_convention_count, full_count)``.

    ``full_count`` is the number of stored scalars. The chain convention is the
    one behind the commonly reported TT/ResTT parameter tables: end nodes count
    ``I * r``, middle chain nodes ``r * I * r``, each linear branch ``I * r``, and
    the output dimension and ``w_final`` are ignored.
    """
    full = sum(math.prod(s) for s in expected_shapes(topology).values())
    r, N, dims = topology.bond_dim, topology.n_nodes, topology.input_dims
    conv = dims[0] * r
    for n in range(2, N + 1):
        i_n = dims[n - 1]
        if topology.has_chain(n):
            conv += i_n * r if n == N else r * i_n * r
        if topology.has_linear(n):
            conv += i_n * r
    return conv, full


# -- forward -----------------------------------------------------------------------


def as_node_batch(xs, topology: Topology, dtype=None) -> list[np.ndarray]:
    """Normalise inputs to a list of ``N`` arrays shaped ``(batch, I_n)``.

    Accepts an array ``(batch, N, I)`` (uniform ``I``) or a sequence of ``N``
    per-node arrays ``(batch, I_n)``.
    """
    N = topology.n_nodes
    if isinstance(xs, np.ndarray) and xs.ndim == 3:
        nodes = [xs[:, n, :] for n in range(xs.shape[1])]
    else:
        nodes = [np.asarray(x) for x in xs]
    if len(nodes) != N:
        raise InputShapeError(f"expected inputs for {N} nodes, got {len(nodes)}")
    batch = nodes[0].shape[0] if nodes[0].ndim == 2 else None
    out = []
    for n, x in enumerate(nodes, start=1):
        if x.ndim != 2 or x.shape[0] != batch:
            raise InputShapeError(f"layer {n}: expected a (batch, {topology.input_dims[n - 1]}) array, got {x.shape}")
        if x.shape[1] != topology.input_dims[n - 1]:
            raise InputShapeError(
                f"layer {n}: input length {x.shape[1]} does not match I_{n} = {topology.input_dims[n - 1]}"
            )
        out.append(x if dtype is None else x.astype(dtype, copy=False))
    return out


@dataclass
class ForwardTrace:
    """Everything backward needs, with a leading batch axis on every array.

    ``feed[n-1]`` is the part of ``Y(n)`` that the next chain node consumes and
    ``bypass[n-1]`` the part routed around it (``None`` when zero), for
    ``n = 1..N-1``. ``intermediates[n]`` caches ``A(n)[b, v_in, v_out]``.
    """

    inputs: list[np.ndarray]
    feed: list[np.ndarray]
    bypass: list[np.ndarray | None]
    output: np.ndarray
    intermediates: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def batch_size(self) -> int:
        return self.output.shape[0]

    @property
    def n_nodes(self) -> int:
        return len(self.inputs)

    def layer_output(self, layer: int) -> np.ndarray:
        """``Y(layer)`` for every batch item."""
        if layer == self.n_nodes:
            return self.output
        f, b = self.feed[layer - 1], self.bypass[layer - 1]
        return f if b is None else f + b

    def outputs(self) -> list[np.ndarray]:
        return [self.layer_output(n) for n in range(1, self.n_nodes + 1)]

    def item(self, index: int) -> "ForwardTrace":
        sl = slice(index, index + 1)
        return ForwardTrace(
            [x[sl] for x in self.inputs], [f[sl] for f in self.feed],
            [None if b is None else b[sl] for b in self.bypass], self.output[sl],
            {n: a[sl] for n, a in self.intermediates.items()},
        )


def intermediate_matrix(x, w):
    """``A[b, v, u] = sum_i x[b, i] w[v, i, u]``."""
    r, i, u = w.shape
    return (x @ w.transpose(1, 0, 2).reshape(i, r * u)).reshape(len(x), r, u)


def _chain_apply(y_in, x, w, a_cache):
    """``sum_{v,i} y_in[b,v] x[b,i] w[v,i,u]`` for each batch item."""
    if a_cache is not None:
        return (y_in[:, None, :] @ a_cache)[:, 0, :]
    B, r = y_in.shape
    joint = (y_in[:, :, None] * x[:, None, :]).reshape(B, -1)
    return joint @ w.reshape(-1, w.shape[2])


def forward_batch(params: ResTTParams, topology: Topology, xs, cache_intermediates: bool = False):
    """Evaluate the network on a batch; returns ``(outputs (B, O), trace)``.

    With ``cache_intermediates`` the per-item matrices ``A(n)`` are stored in
    the trace and reused by backward. Without it both passes contract the
    outer product ``Y(n-1) x x_n`` against the reshaped weights, which costs
    the same per item and is faster in practice for large ``r``.
    """
    N = topology.n_nodes
    nodes = as_node_batch(xs, topology, dtype=params.dtype)
    B, r = nodes[0].shape[0], topology.bond_dim
    feed_prev = nodes[0] @ params.w_first
    byp_prev = None
    feed, bypass, cache = [], [], {}
    if N == 1:
        return feed_prev, ForwardTrace(nodes, [], [], feed_prev, {})
    feed.append(feed_prev)
    bypass.append(None)
    for n in range(2, N + 1):
        x = nodes[n - 1]
        total_prev = feed_prev if byp_prev is None else feed_prev + byp_prev
        terms = []
        if topology.has_chain(n):
            w = params.w_chain[n]
            a = intermediate_matrix(x, w) if cache_intermediates else None
            if a is not None:
                cache[n] = a
            terms.append(_chain_apply(feed_prev, x, w, a))
        if topology.has_linear(n):
            terms.append(x @ params.w_linear[n])
        if n == N:
            if topology.final_linear:
                terms.append(total_prev @ params.w_final)
            if topology.has_skip(n):
                terms.append(total_prev)
            out = _sum(terms, B, topology.output_dim, params.dtype)
            return out, ForwardTrace(nodes, feed, bypass, out, cache)
        new_bypass = None
        if topology.has_skip(n):
            if topology.skip_feeds_chain(n):
                terms.append(feed_prev)
                new_bypass = byp_prev
            else:
                new_bypass = total_prev
        feed_prev = _sum(terms, B, r, params.dtype)
        byp_prev = new_bypass
        feed.append(feed_prev)
        bypass.append(byp_prev)
    raise AssertionError("unreachable")


def _sum(terms, B, width, dtype):
    if not terms:
        return np.zeros((B, width), dtype=dtype)
    out = terms[0].copy()
    for t in terms[1:]:
        out += t
    return out


def forward(params: ResTTParams, topology: Topology, x: Sequence) -> tuple[np.ndarray, ForwardTrace]:
    """Single-sample forward: ``x`` holds ``N`` vectors; returns ``(y, trace)``."""
    if len(x) != topology.n_nodes:
        raise InputShapeError(f"expected inputs for {topology.n_nodes} nodes, got {len(x)}")
    batch = []
    for n, xn in enumerate(x, start=1):
        v = np.asarray(xn, dtype=float)
        if v.ndim != 1:
            raise InputShapeError(f"layer {n}: expected a vector, got shape {v.shape}")
        batch.append(v[None, :])
    out, trace = forward_batch(params, topology, batch)
    return out[0], trace


def predict(params: ResTTParams, topology: Topology, xs, batch_size: int = 2048) -> np.ndarray:
    """Outputs only, evaluated in chunks without keeping traces."""
    nodes = as_node_batch(xs, topology)
    total = nodes[0].shape[0]
    outs = []
    for start in range(0, total, batch_size):
        chunk = [x[start:start + batch_size] for x in nodes]
        outs.append(forward_batch(params, topology, chunk, cache_intermediates=False)[0])
    if not outs:
        return np.zeros((0, topology.output_dim))
    return np.concatenate(outs)


# -- checkpoints --------------------------------------------------------------------


def save_checkpoint(path, params: ResTTParams, topology: Topology, metadata: Mapping | None = None) -> Path:
    """Write an ``.npz`` container: little-endian f64 weights plus JSON topology."""
    path = Path(path)
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "topology": topology.to_dict(),
        "tensors": {k: list(v.shape) for k, v in params.named().items()},
        "metadata": dict(metadata or {}),
    }
    arrays = {k: np.ascontiguousarray(v, dtype="<f8") for k, v in params.named().items()}
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> tuple[ResTTParams, Topology, dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        if "__header__" not in data.files:
            raise ValueError(f"{path}: not a model checkpoint (no header)")
        header = json.loads(bytes(data["__header__"]).decode())
        version = header.get("format_version")
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format version {version}")
        named = {k: np.array(data[k], dtype=np.float64) for k in header["tensors"]}
    topology = Topology.from_dict(header["topology"])
    params = ResTTParams.from_named(named)
    check_params(params, topology)
    return params, topology, header.get("metadata", {})



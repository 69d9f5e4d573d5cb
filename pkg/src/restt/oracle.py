"""Brute-force reference computations used to check the network code.

None of these functions share code with :mod:`restt.model`'s forward pass.
They enumerate every route a signal can take from an input node to the
output, which is exponential in ``N``, so sizes are guarded.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .model import ResTTParams, Topology, check_params

MAX_NODES = 6
MAX_INPUT_DIM = 4
MAX_BOND_DIM = 5


class SizeGuardError(ValueError):
    pass


def _guard(topology: Topology) -> None:
    if (topology.n_nodes > MAX_NODES or max(topology.input_dims) > MAX_INPUT_DIM
            or topology.bond_dim > MAX_BOND_DIM):
        raise SizeGuardError(
            f"oracle limited to N <= {MAX_NODES}, I_n <= {MAX_INPUT_DIM}, r <= {MAX_BOND_DIM}; got "
            f"N={topology.n_nodes}, max I={max(topology.input_dims)}, r={topology.bond_dim}. "
            "Use a smaller model."
        )


@dataclass
class MonomialExpansion:
    """Output written as a sum of multilinear terms.

    ``terms[(n1, n2, ...)]`` is the coefficient array for the product
    ``x_n1 x_n2 ...`` (layers ascending, 1-based) with shape
    ``(I_n1, I_n2, ..., O)``; the last axis is the output component.
    """

    input_dims: tuple[int, ...]
    output_dim: int
    terms: dict[tuple[int, ...], np.ndarray] = field(default_factory=dict)

    def families(self) -> list[tuple[int, ...]]:
        return sorted(self.terms, key=lambda s: (-len(s), s))

    def orders(self) -> set[int]:
        return {len(s) for s in self.terms}

    def evaluate(self, x) -> np.ndarray:
        """Sum of all terms for one sample (``N`` vectors) -> ``(O,)``."""
        y = np.zeros(self.output_dim)
        for subset, coef in self.terms.items():
            t = coef
            # contract leading feature axes one at a time
            for n in subset:
                t = np.tensordot(np.asarray(x[n - 1], dtype=float), t, axes=([0], [0]))
            y += t
        return y

    def component(self, o: int) -> dict[tuple[tuple[int, int], ...], float]:
        """Coefficient per ``((layer, index), ...)`` tuple for output ``o``."""
        out = {}
        for subset, coef in self.terms.items():
            for idx in np.ndindex(coef.shape[:-1]):
                out[tuple(zip(subset, idx))] = float(coef[idx + (o,)])
        return out

    def iter_rows(self) -> Iterator[tuple[int, tuple[int, ...], tuple[int, ...], int, float]]:
        for subset in self.families():
            coef = self.terms[subset]
            for idx in np.ndindex(coef.shape):
                yield len(subset), subset, idx[:-1], idx[-1], float(coef[idx])

    def dump(self) -> str:
        """Tab-separated listing: order, subset, indices, output, coefficient."""
        buf = io.StringIO()
        buf.write(f"# output_dim={self.output_dim} families={len(self.terms)}\n")
        buf.write("order\tsubset\tindices\toutput\tcoefficient\n")
        for order, subset, idx, o, c in self.iter_rows():
            buf.write(f"{order}\t{','.join(map(str, subset))}\t{','.join(map(str, idx))}\t{o}\t{c:.17g}\n")
        return buf.getvalue()


def _routes(topology: Topology, start: int):
    """Yield step lists from layer ``start`` to the output.

    Each step is ``(layer, kind)`` with kind in ``chain``, ``skip``, ``final``.
    A signal that took a skip routed around the next chain node can no longer
    enter a chain.
    """
    N = topology.n_nodes

    def walk(n, visible, steps):
        if n > N:
            yield steps
            return
        if n == N:
            if topology.has_chain(N) and visible:
                yield steps + [(N, "chain")]
            if topology.final_linear:
                yield steps + [(N, "final")]
            if topology.has_skip(N):
                yield steps + [(N, "skip")]
            return
        if topology.has_chain(n) and visible:
            yield from walk(n + 1, True, steps + [(n, "chain")])
        if topology.has_skip(n):
            yield from walk(n + 1, visible and topology.skip_feeds_chain(n), steps + [(n, "skip")])

    yield from walk(start + 1, True, [])


def expand(params: ResTTParams, topology: Topology) -> MonomialExpansion:
    """Enumerate every input-to-output route and collect coefficient tensors."""
    _guard(topology)
    check_params(params, topology)
    N = topology.n_nodes
    exp = MonomialExpansion(topology.input_dims, topology.output_dim)
    starts = [1] + [m for m in range(2, N + 1) if topology.has_linear(m)]
    for m in starts:
        origin = params.w_first if m == 1 else params.w_linear[m]
        for steps in _routes(topology, m):
            coef = np.array(origin, dtype=float)
            subset = [m]
            for n, kind in steps:
                if kind == "chain":
                    coef = np.tensordot(coef, params.w_chain[n], axes=([-1], [0]))
                    subset.append(n)
                elif kind == "final":
                    coef = np.tensordot(coef, params.w_final, axes=([-1], [0]))
            key = tuple(subset)
            exp.terms[key] = exp.terms[key] + coef if key in exp.terms else coef
    return exp


def dense_weight_tensor(params: ResTTParams, topology: Topology) -> np.ndarray:
    """Contract a plain TT over all bond indices -> ``(I_1, ..., I_N, O)``."""
    _guard(topology)
    N = topology.n_nodes
    plain = N == 1 or (all(topology.chain) and not any(topology.identity_skip)
                       and not any(topology.linear_branch) and not topology.final_linear)
    if not plain:
        raise ValueError("dense_weight_tensor needs a plain_tt topology")
    check_params(params, topology)
    w = np.array(params.w_first, dtype=float)
    for n in range(2, N + 1):
        w = np.tensordot(w, params.w_chain[n], axes=([-1], [0]))
    return w


def contract_dense(weight: np.ndarray, x) -> np.ndarray:
    """Contract every input index of a dense weight tensor with its input vector."""
    t = weight
    for xn in x:
        t = np.tensordot(np.asarray(xn, dtype=float), t, axes=([0], [0]))
    return t


def volterra_kernels(params: ResTTParams, topology: Topology) -> list[np.ndarray]:
    """Kernels ``[H(N), H(N-1), ..., H(1)]``; ``H(k)`` has axes ``(i_k, ..., i_N)``."""
    _guard(topology)
    if topology.output_dim != 1:
        raise ValueError("volterra kernels need a scalar output")
    N = topology.n_nodes
    if N > 1 and (any(topology.identity_skip) or topology.final_linear
                  or not all(topology.chain) or not all(topology.linear_branch)):
        raise ValueError("volterra_kernels needs the volterra preset")
    check_params(params, topology)
    kernels = []
    for k in range(N, 0, -1):
        h = np.array(params.w_first if k == 1 else params.w_linear[k], dtype=float)
        for n in range(k + 1, N + 1):
            h = np.tensordot(h, params.w_chain[n], axes=([-1], [0]))
        kernels.append(h[..., 0])
    return kernels


def evaluate_volterra(kernels: list[np.ndarray], x) -> float:
    """``sum_k <H(k), x_k (x) ... (x) x_N>`` for kernels from :func:`volterra_kernels`."""
    N = len(kernels)
    total = 0.0
    for h in kernels:
        first = N - h.ndim  # 0-based index of the kernel's first feature
        total += float(contract_dense(h, x[first:]))
    return total

import numpy as np

from restt.model import ResTTParams, Topology, expected_shapes, init_params


def three_input_topology() -> Topology:
    """Scalar three-node ResTT with identity skips at every layer and no final map."""
    return Topology((1, 1, 1), 1, 1, chain=True, identity_skip=True, linear_branch=True, final_linear=False)


def constant_params(topology: Topology, value: float = 1.0) -> ResTTParams:
    return ResTTParams.from_named({k: np.full(s, value) for k, s in expected_shapes(topology).items()})


def random_topology(rng, max_nodes=6, max_input=4, max_bond=5, preset=None):
    """Random small topology; ``preset`` picks a preset, otherwise flags are random."""
    N = int(rng.integers(1, max_nodes + 1))
    dims = tuple(int(d) for d in rng.integers(1, max_input + 1, size=N))
    r = int(rng.integers(1, max_bond + 1))
    o = int(rng.integers(1, 4))
    preset = preset or rng.choice(["plain_tt", "restt", "fully_connected", "volterra", "custom"])
    if N == 1:
        return Topology(dims, o, o, (), (), (), False)
    if preset == "plain_tt":
        return Topology.plain_tt(dims, r, o)
    if preset == "restt":
        return Topology.restt(dims, r, o)
    if preset == "fully_connected":
        return Topology.fully_connected(dims, o)
    if preset == "volterra":
        return Topology.volterra(dims, r)
    L = N - 1
    while True:
        chain = tuple(bool(b) for b in rng.integers(0, 2, L))
        skip = tuple(bool(b) for b in rng.integers(0, 2, L))
        lin = tuple(bool(b) for b in rng.integers(0, 2, L))
        stc = tuple(bool(b) for b in rng.integers(0, 2, L))
        final = bool(rng.integers(0, 2))
        out = r if skip[-1] else o
        try:
            return Topology(dims, r, out, chain, skip, lin, final, stc)
        except ValueError:
            continue


def random_instance(rng, batch=3, **kw):
    top = random_topology(rng, **kw)
    params = init_params(top, float(rng.uniform(0.5, 2.0)), int(rng.integers(1 << 30)))
    xs = [rng.standard_normal((batch, d)) for d in top.input_dims]
    return top, params, xs

import numpy as np
import pytest

from restt.grad import (GradientSet, StaleTraceError, backward, batch_loss_fn, finite_diff_grad, loss_and_grad)
from restt.model import ResTTParams, Topology, forward_batch, init_params

from helpers import random_instance


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8)


def grads_vs_fd(top, params, xs, target, loss):
    out, trace = forward_batch(params, top, xs)
    _, up = loss_and_grad(out, target, loss)
    g = backward(params, top, trace, up)
    fd = finite_diff_grad(params, top, xs, batch_loss_fn(target, loss))
    assert set(g.named()) == set(fd.named())
    return max(rel_err(g.named()[k], fd.named()[k]) for k in fd.named())


def test_two_node_closed_form_gradients():
    a, b, c, d, x1, x2 = 2.0, 3.0, 5.0, 7.0, 1.5, -0.5
    top = Topology.restt((1, 1), 1, 1)
    p = ResTTParams.from_named({"w_first": np.array([[a]]), "w_chain.2": np.array([[[b]]]),
                                "w_linear.2": np.array([[c]]), "w_final": np.array([[d]])})
    xs = [np.array([[x1]]), np.array([[x2]])]
    _, trace = forward_batch(p, top, xs)
    g = backward(p, top, trace, np.array([[1.0]]))
    assert g.w_first[0, 0] == pytest.approx(b * x1 * x2 + d * x1)
    assert g.w_linear[2][0, 0] == pytest.approx(x2)
    assert g.w_final[0, 0] == pytest.approx(a * x1)
    assert g.w_chain[2][0, 0, 0] == pytest.approx(a * x1 * x2)


def test_zero_upstream_gives_zero_gradients(rng):
    top, p, xs = random_instance(rng, preset="restt")
    out, trace = forward_batch(p, top, xs)
    g = backward(p, top, trace, np.zeros_like(out))
    assert all(np.all(v == 0) for v in g.named().values())
    assert isinstance(g, GradientSet) and g.upstream is not None


def test_random_instance_n5(rng):
    top = Topology.restt((3,) * 5, 4, 2)
    p = init_params(top, 1.0, 9)
    xs = [rng.standard_normal((4, 3)) for _ in range(5)]
    assert grads_vs_fd(top, p, xs, rng.standard_normal((4, 2)), "mse") <= 1e-6
    assert grads_vs_fd(top, p, xs, rng.integers(0, 2, 4), "softmax_cross_entropy") <= 1e-6


@pytest.mark.parametrize("preset", ["plain_tt", "restt", "fully_connected", "volterra", "custom"])
def test_presets_match_finite_differences(preset):
    g = np.random.default_rng(hash(preset) % 2**32)
    for _ in range(4):
        top, p, xs = random_instance(g, preset=preset)
        target = g.standard_normal((3, top.output_dim))
        assert grads_vs_fd(top, p, xs, target, "mse") <= 1e-6


def test_linear_only_quadratic_is_exact(rng):
    top = Topology.fully_connected((2, 3), 2)
    p = init_params(top, 1.0, 4)
    xs = [rng.standard_normal((5, 2)), rng.standard_normal((5, 3))]
    assert grads_vs_fd(top, p, xs, rng.standard_normal((5, 2)), "mse") <= 1e-9


def test_finite_difference_second_order(rng):
    top = Topology.restt((2, 2, 2), 2, 1)
    p = init_params(top, 1.0, 2)
    xs = [rng.standard_normal((2, 2)) for _ in range(3)]
    fn = lambda out: float(np.sum(np.exp(out)))
    out, trace = forward_batch(p, top, xs)
    # backward averages over the batch of two, fn sums over it
    exact = {k: 2 * v for k, v in backward(p, top, trace, np.exp(out)).named().items()}
    errs = []
    for h in (1e-2, 5e-3):
        fd = finite_diff_grad(p, top, xs, fn, step=h).named()
        errs.append(max(np.max(np.abs(fd[k] - exact[k])) for k in fd))
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.15)


def test_absent_branches_absent_in_gradients(rng):
    top = Topology.plain_tt((2, 2, 2), 2, 1)
    p = init_params(top, 1.0)
    fd = finite_diff_grad(p, top, [rng.standard_normal((1, 2)) for _ in range(3)], lambda o: float(o.sum()))
    assert set(fd.named()) == {"w_first", "w_chain.2", "w_chain.3"}
    with pytest.raises(ValueError):
        finite_diff_grad(p, top, [np.ones((1, 2))] * 3, lambda o: 0.0, step=0.0)


def test_plain_tt_jacobian_is_product_of_a_matrices(rng):
    top = Topology.plain_tt((2,) * 4, 3, 2)
    p = init_params(top, 1.0, 5)
    xs = [rng.standard_normal((1, 2)) for _ in range(4)]
    _, trace = forward_batch(p, top, xs, cache_intermediates=True)
    k = 2
    # Jacobian of Y(N) w.r.t. Y(k): A(k+1) ... A(N)
    jac = np.eye(3)
    for n in range(k + 1, 5):
        jac = jac @ trace.intermediates[n][0]
    y_k = trace.layer_output(k)[0]

    def tail(y):
        for n in range(k + 1, 5):
            y = y @ trace.intermediates[n][0]
        return y

    h = 1e-6
    fd = np.stack([(tail(y_k + h * e) - tail(y_k - h * e)) / (2 * h) for e in np.eye(3)])
    np.testing.assert_allclose(fd, jac, atol=1e-8)


def test_sum_of_paths_decoupling(rng):
    dims = (2, 3, 2)
    res = Topology.restt(dims, 2, 1)
    tt = Topology.plain_tt(dims, 2, 1)
    p = init_params(res, 1.0, 3)
    xs = [rng.standard_normal((4, d)) for d in dims]
    # with residual and linear weights zeroed, restt gradients on chain weights equal plain-TT gradients
    zeroed = p.copy()
    zeroed.w_linear = {n: np.zeros_like(w) for n, w in p.w_linear.items()}
    zeroed.w_final = np.zeros_like(p.w_final)
    up = rng.standard_normal((4, 1))
    g_res = backward(zeroed, res, forward_batch(zeroed, res, xs)[1], up)
    tt_params = ResTTParams(p.w_first, dict(p.w_chain))
    g_tt = backward(tt_params, tt, forward_batch(tt_params, tt, xs)[1], up)
    # identity skip at layer 2 adds the residual path w_first -> skip -> chain 3
    extra = forward_batch(zeroed, res, xs)[0] - forward_batch(tt_params, tt, xs)[0]
    assert np.abs(extra).max() > 0
    tt_skip = res.edited(identity_skip={2: False})
    g_noskip = backward(zeroed, tt_skip, forward_batch(zeroed, tt_skip, xs)[1], up)
    for k in ("w_first", "w_chain.2", "w_chain.3"):
        np.testing.assert_allclose(g_noskip.named()[k], g_tt.named()[k], atol=1e-12)
    # the remaining difference is the gradient of the skip-only route w_first -> chain 3
    diff = g_res.w_first - g_tt.w_first
    a3 = np.einsum("bi,viu->bvu", xs[2], p.w_chain[3])
    expect = np.einsum("bi,bvu,bu->iv", xs[0], a3, up) / 4
    np.testing.assert_allclose(diff, expect, atol=1e-12)


def test_stale_trace_rejected(rng):
    top, p, xs = random_instance(np.random.default_rng(1), preset="restt")
    out, trace = forward_batch(p, top, xs)
    other = Topology.restt(top.input_dims, top.bond_dim + 1, top.output_dim)
    with pytest.raises(StaleTraceError):
        backward(init_params(other, 1.0), other, trace, np.zeros_like(out))
    with pytest.raises(ValueError):
        backward(p, top, trace, np.zeros((out.shape[0], out.shape[1] + 1)))


def test_loss_examples():
    c, up = loss_and_grad([1.0, 1.0], [1.0, 1.0], "mse")
    assert c == 0 and np.all(up == 0)
    c, up = loss_and_grad([2.0], [0.0], "mse")
    assert c == 4 and up[0] == 4
    c, up = loss_and_grad([0.0, 0.0], [0], "softmax_cross_entropy")
    assert c == pytest.approx(np.log(2))
    np.testing.assert_allclose(up, [-0.5, 0.5])


def test_loss_target_errors():
    with pytest.raises(ValueError, match="out of range"):
        loss_and_grad([[0.0, 1.0]], [2], "softmax_cross_entropy")
    with pytest.raises(ValueError, match="one-hot"):
        loss_and_grad([[0.0, 1.0]], [[0.5, 0.5]], "softmax_cross_entropy")
    with pytest.raises(ValueError):
        loss_and_grad([1.0, 2.0], [1.0], "mse")
    with pytest.raises(ValueError, match="unknown loss"):
        loss_and_grad([1.0], [1.0], "hinge")
    c1, _ = loss_and_grad([[3.0, 1.0]], [[1, 0]], "softmax_cross_entropy")
    c2, _ = loss_and_grad([[3.0, 1.0]], [0], "softmax_cross_entropy")
    assert c1 == c2


def test_batch_mean_equals_mean_of_per_sample_gradients(rng):
    top, p, xs = random_instance(np.random.default_rng(8), batch=6, preset="restt")
    target = rng.standard_normal((6, top.output_dim))
    out, trace = forward_batch(p, top, xs)
    _, up = loss_and_grad(out, target, "mse")
    full = backward(p, top, trace, up).named()
    per = []
    for b in range(6):
        o, t = forward_batch(p, top, [x[b:b + 1] for x in xs])
        _, u = loss_and_grad(o, target[b:b + 1], "mse")
        per.append(backward(p, top, t, u).named())
    for k in full:
        np.testing.assert_allclose(full[k], np.mean([g[k] for g in per], axis=0), atol=1e-12)

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neurotse import functional as F
from neurotse.errors import ContractError
from neurotse.gradcheck import check_parameters, finite_diff_check
from neurotse.ssm import (MambaBlock, causal_depthwise_conv, combine, discretize, scan_parallel,
                          scan_sequential, selective_scan, selective_scan_discrete,
                          selective_scan_parallel, selective_scan_sequential)
from neurotse.tensor import Tensor


def test_discretize_examples():
    delta = Tensor([[1.0]])
    abar, bbar = discretize(delta, Tensor([[-1.0]]), Tensor([[1.0]]))
    assert abs(abar.data.item() - 0.36787944117144233) < 1e-15
    assert bbar.data.item() == 1.0
    abar, bbar = discretize(Tensor([[0.3, 0.7]]), Tensor(np.zeros((2, 1))), Tensor([[2.0]]))
    assert np.all(abar.data == 1.0)
    np.testing.assert_allclose(bbar.data.reshape(-1), [0.6, 1.4], rtol=1e-15)
    abar, bbar = discretize(Tensor([[1e-12]]), Tensor([[-3.0]]), Tensor([[5.0]]))
    assert abs(abar.data.item() - 1) < 1e-10 and abs(bbar.data.item()) < 1e-10
    with pytest.raises(ContractError):
        discretize(Tensor([[0.0]]), Tensor([[-1.0]]), Tensor([[1.0]]))


def _discrete(T, d=1, N=1, a=1.0, b=1.0, c=1.0):
    return (np.full((1, T, d, N), a), np.full((1, T, d, N), b), np.full((1, T, N), c))


@pytest.mark.parametrize("scan", [selective_scan_sequential, selective_scan_parallel])
def test_running_sum_and_degenerate_cases(scan):
    abar, bbar, C = _discrete(3)
    y = scan(np.ones((1, 3, 1)), abar, bbar, C, np.zeros(1)).data
    assert y.reshape(-1).tolist() == [1.0, 2.0, 3.0]
    # single step
    y = scan(np.array([[[2.0]]]), *_discrete(1, a=0.4, b=0.5, c=3.0), np.array([0.25])).data
    assert y.item() == 3.0 * 0.5 * 2.0 + 0.25 * 2.0
    # no state memory
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 6, 2))
    bb = rng.standard_normal((1, 6, 2, 3))
    C = rng.standard_normal((1, 6, 3))
    D = rng.standard_normal(2)
    y = scan(x, np.zeros((1, 6, 2, 3)), bb, C, D).data
    expect = np.einsum("btdn,btn->btd", bb, C) * x + D * x
    np.testing.assert_allclose(y, expect, rtol=1e-13, atol=1e-14)


def test_length_mismatch_is_contract_error():
    abar, bbar, C = _discrete(4)
    with pytest.raises(ContractError):
        selective_scan_sequential(np.ones((1, 3, 1)), abar, bbar, C, np.zeros(1))


def _random_problem(rng, T, batch=2, d=3, N=4):
    x = rng.standard_normal((batch, T, d))
    delta = rng.uniform(0.001, 0.5, (batch, T, d))
    A = -np.exp(rng.standard_normal((d, N)))
    B = rng.standard_normal((batch, T, N))
    C = rng.standard_normal((batch, T, N))
    D = rng.standard_normal(d)
    return x, delta, A, B, C, D


@pytest.mark.parametrize("T", [1, 2, 3, 127, 128, 1024])
def test_parallel_matches_sequential(T):
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x, delta, A, B, C, D = _random_problem(rng, T)
        abar, bbar = discretize(delta, A, B)
        ys = selective_scan_sequential(x, abar, bbar, C, D).data
        yp = selective_scan_parallel(x, abar, bbar, C, D).data
        assert np.max(np.abs(ys - yp)) < 1e-10
        assert np.max(np.abs(selective_scan(x, delta, A, B, C, D, "sequential").data - ys)) < 1e-10


def test_length_one_parallel_is_exact():
    rng = np.random.default_rng(3)
    a, b = rng.uniform(0, 1, (4, 1, 3)), rng.standard_normal((4, 1, 3))
    assert np.array_equal(scan_parallel(a, b), scan_sequential(a, b))


def test_scan_operator_associative():
    rng = np.random.default_rng(0)
    for _ in range(100):
        p, q, r = [(rng.uniform(-1, 1, 5), rng.standard_normal(5)) for _ in range(3)]
        left = combine(combine(p, q), r)
        right = combine(p, combine(q, r))
        assert np.max(np.abs(left[0] - right[0])) < 1e-12
        assert np.max(np.abs(left[1] - right[1])) < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 300), st.integers(0, 2**31 - 1))
def test_parallel_scan_property(T, seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.0, 1.0, (2, T, 3))
    b = rng.standard_normal((2, T, 3))
    assert np.max(np.abs(scan_parallel(a, b) - scan_sequential(a, b))) < 1e-10


def test_state_decays_after_input_stops():
    rng = np.random.default_rng(1)
    T, t0 = 60, 20
    x = rng.standard_normal((1, T, 2))
    x[:, t0:] = 0.0
    delta = np.full((1, T, 2), 0.2)
    A = -np.exp(rng.standard_normal((2, 3)))
    abar, bbar = discretize(delta, A, rng.standard_normal((1, T, 3)))
    h = scan_sequential(abar.data, bbar.data * x[..., None])
    norms = np.linalg.norm(h[0].reshape(T, -1), axis=1)
    assert np.all(np.diff(norms[t0:]) < 0)


@pytest.mark.parametrize("impl", ["sequential", "parallel"])
def test_causality(impl):
    rng = np.random.default_rng(2)
    x, delta, A, B, C, D = _random_problem(rng, 40, batch=1)
    y0 = selective_scan(x, delta, A, B, C, D, impl).data
    x2 = x.copy()
    x2[0, 25] += 1.0
    y1 = selective_scan(x2, delta, A, B, C, D, impl).data
    assert np.array_equal(y0[:, :25], y1[:, :25])
    assert not np.allclose(y0[:, 25:], y1[:, 25:])


@pytest.mark.parametrize("impl", ["sequential", "parallel"])
@pytest.mark.parametrize("seed", range(5))
def test_scan_gradients(impl, seed):
    rng = np.random.default_rng(seed)
    args = list(_random_problem(rng, 7, batch=2, d=2, N=3))
    w = rng.standard_normal((2, 7, 2))
    f = lambda ts: F.sum(F.mul(selective_scan(*ts, impl=impl), w))
    assert finite_diff_check(f, args) < 1e-6

    def g(ts):
        abar, bbar = discretize(ts[1], ts[2], ts[3])
        return F.sum(F.mul(selective_scan_discrete(ts[0], abar, bbar, ts[4], ts[5], impl), w))
    assert finite_diff_check(g, args) < 1e-6


def test_causal_conv_gradient_and_causality():
    rng = np.random.default_rng(0)
    x, w, b = rng.standard_normal((2, 9, 3)), rng.standard_normal((3, 4)), rng.standard_normal(3)
    wt = rng.standard_normal((2, 9, 3))
    assert finite_diff_check(lambda ts: F.sum(F.mul(causal_depthwise_conv(*ts), wt)), [x, w, b]) < 1e-6
    y0 = causal_depthwise_conv(x, w, b).data
    x[:, 5] += 1
    y1 = causal_depthwise_conv(x, w, b).data
    assert np.array_equal(y0[:, :5], y1[:, :5])


def test_mamba_block_shape_and_residual():
    rng = np.random.default_rng(0)
    blk = MambaBlock(16, rng, d_state=4)
    assert blk(Tensor(rng.standard_normal((2, 37, 16)))).shape == (2, 37, 16)
    for name in ("in_proj", "out_proj"):
        lin = getattr(blk, name)
        lin.weight.data = np.zeros(lin.weight.shape)
        lin.bias.data = np.zeros(lin.bias.shape)
    x = np.zeros((2, 5, 16))
    assert np.array_equal(blk(Tensor(x)).data, x)


@pytest.mark.parametrize("impl", ["sequential", "parallel"])
def test_mamba_block_gradient(impl):
    rng = np.random.default_rng(4)
    blk = MambaBlock(4, rng, d_state=3, scan_impl=impl)
    x = rng.standard_normal((2, 6, 4))
    w = rng.standard_normal((2, 6, 4))
    assert finite_diff_check(lambda t: F.sum(F.mul(blk(t), w)), x) < 1e-4
    checks = check_parameters(lambda: F.sum(F.mul(blk(Tensor(x)), w)), blk.named_parameters(), rng)
    assert max(c.max_error for c in checks) < 1e-4


def test_two_layer_stack_gradient():
    rng = np.random.default_rng(5)
    blocks = [MambaBlock(4, rng, d_state=2), MambaBlock(4, rng, d_state=2)]
    x = rng.standard_normal((1, 8, 4))
    w = rng.standard_normal((1, 8, 4))

    def f(t):
        for b in blocks:
            t = b(t)
        return F.sum(F.mul(t, w))
    assert finite_diff_check(f, x) < 1e-4

"""Selective scan, discretization, causal conv and the gated block."""

import math

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from longssm.ssm import (
    SCAN_IDENTITY,
    BlockConfig,
    ConfigError,
    MambaBlock,
    NonFiniteInputError,
    ScanElement,
    SsmParams,
    causal_conv1d,
    discretize,
    mamba_block_forward,
    prefix_scan,
    scan_combine,
    scan_parallel,
    scan_sequential,
    selective_scan_parallel,
    selective_scan_sequential,
    softplus,
)

DT = torch.float64


def random_params(d_inner, d_state, rank=2, seed=0, spread=1.0, dtype=DT):
    g = torch.Generator().manual_seed(seed)
    p = SsmParams.init(d_inner, d_state, rank, generator=g, dtype=dtype)
    p.a_log = p.a_log + 0.3 * torch.randn(d_inner, d_state, generator=g, dtype=dtype)
    p.d_skip = torch.randn(d_inner, generator=g, dtype=dtype)
    p.proj_bcdelta = spread * p.proj_bcdelta
    return p


def loop_oracle(u: np.ndarray, p: SsmParams) -> np.ndarray:
    """Straight per-timestep recurrence in numpy, independent of the library scans."""
    a_log = p.a_log.detach().numpy()
    W = p.proj_bcdelta.detach().numpy()
    up = p.delta_up.detach().numpy()
    bias = p.delta_bias.detach().numpy()
    D = p.d_skip.detach().numpy()
    L, d = u.shape
    n, r = a_log.shape[1], up.shape[1]
    h = np.zeros((d, n))
    y = np.zeros((L, d))
    for t in range(L):
        proj = W @ u[t]
        low, B, C = proj[:r], proj[r:r + n], proj[r + n:]
        pre = up @ low + bias
        delta = np.log1p(np.exp(-np.abs(pre))) + np.maximum(pre, 0)
        for c in range(d):
            for k in range(n):
                abar = math.exp(-math.exp(a_log[c, k]) * delta[c])
                h[c, k] = abar * h[c, k] + delta[c] * B[k] * u[t, c]
            y[t, c] = sum(C[k] * h[c, k] for k in range(n)) + D[c] * u[t, c]
    return y


class TestSoftplus:
    def test_zero(self):
        assert softplus(0.0) == pytest.approx(math.log(2), abs=1e-15)

    def test_large(self):
        assert abs(softplus(100.0) - 100.0) <= 1e-12

    def test_negative_tail_against_mpmath(self):
        mpmath.mp.dps = 50
        exact = float(mpmath.log1p(mpmath.exp(-100)))
        assert softplus(-100.0) == pytest.approx(exact, rel=1e-6)

    def test_tensor_and_array_agree(self):
        x = np.linspace(-50, 50, 101)
        np.testing.assert_allclose(softplus(torch.from_numpy(x)).numpy(), softplus(x), rtol=1e-9)


class TestDiscretize:
    def test_small_step_limit(self):
        a_bar, b_bar = discretize(1e-12, -1.0, 1.0)
        assert a_bar == pytest.approx(1.0, abs=1e-11)
        assert b_bar == pytest.approx(0.0, abs=1e-11)

    def test_half_life(self):
        a_bar, b_bar = discretize(math.log(2), -1.0, 1.0)
        assert a_bar == pytest.approx(0.5, abs=1e-15)
        assert b_bar == pytest.approx(math.log(2), abs=1e-15)

    def test_against_mpmath(self):
        mpmath.mp.dps = 40
        a_bar, b_bar = discretize(0.1, -2.5, 3.0)
        assert a_bar == pytest.approx(float(mpmath.exp(mpmath.mpf("-0.25"))), rel=1e-15)
        assert b_bar == pytest.approx(0.3, rel=1e-15)

    @pytest.mark.parametrize("delta", [0.0, -1e-3, float("nan")])
    def test_non_positive_step_rejected(self, delta):
        with pytest.raises(ValueError):
            discretize(delta, -1.0, 1.0)

    @given(st.floats(1e-6, 10.0), st.floats(-10.0, -1e-3))
    def test_decay_in_unit_interval(self, delta, a):
        a_bar, _ = discretize(delta, a, 1.0)
        assert 0.0 < a_bar < 1.0


class TestScanCombine:
    def test_identities(self):
        x = ScanElement(0.3, -1.7)
        assert scan_combine(x, SCAN_IDENTITY) == x
        assert scan_combine(SCAN_IDENTITY, x) == x

    def test_hand_case(self):
        assert scan_combine(ScanElement(0.5, 1.0), ScanElement(0.25, 2.0)) == ScanElement(0.125, 2.25)

    @settings(max_examples=300)
    @given(*[st.floats(-2, 2) for _ in range(6)])
    def test_associative(self, a1, b1, a2, b2, a3, b3):
        x, y, z = ScanElement(a1, b1), ScanElement(a2, b2), ScanElement(a3, b3)
        left = scan_combine(scan_combine(x, y), z)
        right = scan_combine(x, scan_combine(y, z))
        assert left.decay == pytest.approx(right.decay, abs=1e-12)
        assert left.shift == pytest.approx(right.shift, abs=1e-12)

    def test_prefix_scan_matches_fold(self):
        g = torch.Generator().manual_seed(3)
        for L in (1, 2, 3, 7, 64, 257):
            a = torch.rand(2, L, 3, generator=g, dtype=DT)
            b = torch.randn(2, L, 3, generator=g, dtype=DT)
            _, h = prefix_scan(a, b, dim=1)
            acc = torch.zeros(2, 3, dtype=DT)
            for t in range(L):
                acc = a[:, t] * acc + b[:, t]
                torch.testing.assert_close(h[:, t], acc, rtol=1e-12, atol=1e-12)


class TestSelectiveScan:
    def test_single_step_closed_form(self):
        p = random_params(3, 4, seed=1)
        u = torch.randn(1, 3, dtype=DT)
        delta, B, C = p.project(u)
        expect = (C[0] * B[0]).sum() * delta[0] * u[0] + p.d_skip * u[0]
        torch.testing.assert_close(selective_scan_sequential(u, p)[0], expect, rtol=1e-12, atol=1e-12)

    def test_zero_input_zero_output(self):
        p = random_params(3, 4, seed=2)
        y = selective_scan_sequential(torch.zeros(5, 3, dtype=DT), p)
        assert torch.count_nonzero(y) == 0

    def test_loop_oracle(self):
        p = random_params(2, 3, seed=4)
        u = torch.randn(8, 2, generator=torch.Generator().manual_seed(5), dtype=DT)
        np.testing.assert_allclose(selective_scan_sequential(u, p).numpy(), loop_oracle(u.numpy(), p),
                                   rtol=1e-10, atol=1e-10)

    def test_parallel_single_step_exact(self):
        p = random_params(4, 2, seed=6)
        u = torch.randn(1, 4, dtype=DT)
        assert torch.equal(selective_scan_parallel(u, p), selective_scan_sequential(u, p))

    @pytest.mark.parametrize("L", [257, 1024])
    def test_parallel_matches_sequential(self, L):
        p = random_params(4, 3, seed=L)
        u = torch.randn(L, 4, generator=torch.Generator().manual_seed(L), dtype=DT)
        seq, par = selective_scan_sequential(u, p), selective_scan_parallel(u, p)
        assert float(((par - seq).abs() / seq.abs().clamp_min(1e-12)).max()) < 1e-6

    def test_monotone_decay_long(self):
        # slowly varying positive inputs give monotone step sizes
        p = random_params(3, 4, seed=9)
        u = torch.linspace(0.01, 2.0, 1024, dtype=DT).unsqueeze(1).repeat(1, 3)
        diff = (selective_scan_parallel(u, p) - selective_scan_sequential(u, p)).abs().max()
        assert float(diff) < 1e-6

    def test_float32_tolerance(self):
        p = random_params(4, 3, seed=11, dtype=torch.float32)
        u = torch.randn(257, 4, generator=torch.Generator().manual_seed(1))
        seq, par = selective_scan_sequential(u, p), selective_scan_parallel(u, p)
        assert float(((par - seq).abs() / seq.abs().clamp_min(1e-3)).max()) < 1e-3

    @pytest.mark.parametrize("block", [1, 5, 64])
    def test_blocked_parallel(self, block):
        p = random_params(3, 2, seed=12)
        u = torch.randn(2, 100, 3, generator=torch.Generator().manual_seed(2), dtype=DT)
        torch.testing.assert_close(selective_scan_parallel(u, p, block_size=block),
                                   selective_scan_sequential(u, p), rtol=1e-10, atol=1e-12)

    def test_initial_state_and_resets(self):
        g = torch.Generator().manual_seed(13)
        B, L, d, n = 2, 40, 3, 4
        u = torch.randn(B, L, d, generator=g, dtype=DT)
        delta = torch.rand(B, L, d, generator=g, dtype=DT) + 0.05
        A = -torch.rand(d, n, generator=g, dtype=DT) - 0.1
        Bm, Cm = torch.randn(B, L, n, generator=g, dtype=DT), torch.randn(B, L, n, generator=g, dtype=DT)
        D = torch.randn(d, generator=g, dtype=DT)
        h0 = torch.randn(B, d, n, generator=g, dtype=DT)
        reset = torch.zeros(B, L, dtype=torch.bool)
        reset[0, 10] = reset[1, 0] = reset[1, 33] = True
        ys, hs = scan_sequential(u, delta, A, Bm, Cm, D, h0, reset)
        yp, hp = scan_parallel(u, delta, A, Bm, Cm, D, h0, reset)
        torch.testing.assert_close(ys, yp, rtol=1e-10, atol=1e-12)
        torch.testing.assert_close(hs, hp, rtol=1e-10, atol=1e-12)
        # after a reset the output ignores everything before it
        y2, _ = scan_sequential(u[:, 10:], delta[:, 10:], A, Bm[:, 10:], Cm[:, 10:], D)
        torch.testing.assert_close(ys[0, 10:], y2[0], rtol=1e-12, atol=1e-12)

    def test_gradcheck_sequential(self):
        g = torch.Generator().manual_seed(14)
        B, L, d, n = 1, 6, 2, 3
        args = [torch.randn(B, L, d, generator=g, dtype=DT),
                torch.rand(B, L, d, generator=g, dtype=DT) + 0.1,
                -torch.rand(d, n, generator=g, dtype=DT) - 0.1,
                torch.randn(B, L, n, generator=g, dtype=DT),
                torch.randn(B, L, n, generator=g, dtype=DT),
                torch.randn(d, generator=g, dtype=DT),
                torch.randn(B, d, n, generator=g, dtype=DT)]
        for a in args:
            a.requires_grad_(True)
        reset = torch.zeros(B, L, dtype=torch.bool)
        reset[0, 3] = True
        assert torch.autograd.gradcheck(lambda *a: scan_sequential(*a, reset=reset), args, eps=1e-6,
                                        atol=1e-8, rtol=1e-6)

    def test_non_finite_input_names_index(self):
        p = random_params(2, 2)
        u = torch.zeros(4, 2, dtype=DT)
        u[2, 1] = float("nan")
        with pytest.raises(NonFiniteInputError, match=r"\(2, 1\)"):
            selective_scan_sequential(u, p)
        with pytest.raises(NonFiniteInputError):
            selective_scan_parallel(u, p)

    def test_empty_sequence_rejected(self):
        p = random_params(2, 2)
        with pytest.raises(ValueError):
            selective_scan_sequential(torch.zeros(0, 2, dtype=DT), p)
        with pytest.raises(ValueError):
            selective_scan_parallel(torch.zeros(0, 2, dtype=DT), p)

    def test_stability_bound(self):
        # constant parameters: |h| <= max|bbar u| / (1 - max abar)
        L, d, n = 500, 2, 3
        u = torch.ones(1, L, d, dtype=DT)
        delta = torch.full((1, L, d), 0.05, dtype=DT)
        A = -torch.tensor([[1.0, 2.0, 3.0], [0.5, 1.5, 4.0]], dtype=DT)
        Bm = torch.ones(1, L, n, dtype=DT)
        Cm = torch.zeros(1, L, n, dtype=DT)
        _, h = scan_sequential(u, delta, A, Bm, Cm, torch.zeros(d, dtype=DT))
        bound = 0.05 / (1 - math.exp(-0.05 * 0.5))
        assert float(h.abs().max()) <= bound + 1e-12

    def test_inference_chunking_exact(self, monkeypatch):
        import longssm.ssm as ssm

        g = torch.Generator().manual_seed(3)
        B, L, d, n = 2, 50, 3, 4
        u = torch.randn(B, L, d, generator=g, dtype=DT)
        delta = torch.rand(B, L, d, generator=g, dtype=DT) * 0.2
        A = -torch.rand(d, n, generator=g, dtype=DT) * 3
        Bm, Cm = torch.randn(B, L, n, generator=g, dtype=DT), torch.randn(B, L, n, generator=g, dtype=DT)
        D = torch.randn(d, generator=g, dtype=DT)
        reset = torch.rand(B, L, generator=g) < 0.1
        with torch.no_grad():
            whole = scan_sequential(u, delta, A, Bm, Cm, D, reset=reset)
            monkeypatch.setattr(ssm, "INFERENCE_CHUNK", 7)
            chunked = scan_sequential(u, delta, A, Bm, Cm, D, reset=reset)
        assert torch.equal(whole[0], chunked[0]) and torch.equal(whole[1], chunked[1])


class TestParamsInit:
    def test_state_matrix_and_step_range(self):
        p = SsmParams.init(16, 5, 2, generator=torch.Generator().manual_seed(0), dtype=DT)
        torch.testing.assert_close(-p.state_matrix(), torch.arange(1, 6, dtype=DT).repeat(16, 1))
        dt = softplus(p.delta_bias)
        assert float(dt.min()) >= 1e-3 - 1e-12 and float(dt.max()) <= 1e-1 + 1e-12
        assert bool((p.state_matrix() < 0).all())

    def test_shape_check(self):
        p = SsmParams.init(4, 3, 2)
        p.delta_up = torch.zeros(4, 3)
        with pytest.raises(ConfigError):
            p.check()

    def test_config_defaults(self):
        cfg = BlockConfig.from_width(40)
        assert cfg.d_inner == 80 and cfg.delta_rank == 3
        with pytest.raises(ConfigError):
            BlockConfig(d_model=4, d_inner=0)


def conv_oracle(u, kernel, bias):
    L, d = u.shape
    K = kernel.shape[0]
    out = np.zeros((L, d))
    for t in range(L):
        for c in range(d):
            acc = bias[c]
            for j in range(K):
                s = t - (K - 1) + j
                if s >= 0:
                    acc += kernel[j, c] * u[s, c]
            out[t, c] = acc
    return out


class TestCausalConv:
    def test_identity_kernel(self):
        u = torch.randn(9, 3, dtype=DT)
        assert torch.equal(causal_conv1d(u, torch.ones(1, 3, dtype=DT)), u)

    def test_impulse_response_is_reversed_kernel(self):
        kernel = torch.tensor([[1.0], [2.0], [3.0], [4.0]], dtype=DT)
        u = torch.zeros(6, 1, dtype=DT)
        u[0] = 1.0
        out = causal_conv1d(u, kernel)[:, 0].tolist()
        assert out == [4.0, 3.0, 2.0, 1.0, 0.0, 0.0]

    def test_double_loop_oracle(self):
        g = torch.Generator().manual_seed(0)
        u = torch.randn(17, 5, generator=g, dtype=DT)
        kernel = torch.randn(4, 5, generator=g, dtype=DT)
        bias = torch.randn(5, generator=g, dtype=DT)
        np.testing.assert_allclose(causal_conv1d(u, kernel, bias).numpy(),
                                   conv_oracle(u.numpy(), kernel.numpy(), bias.numpy()), atol=1e-10)

    def test_reset_masks_history(self):
        g = torch.Generator().manual_seed(1)
        u = torch.randn(12, 2, generator=g, dtype=DT)
        kernel = torch.randn(4, 2, generator=g, dtype=DT)
        reset = torch.zeros(12, dtype=torch.bool)
        reset[5] = True
        out = causal_conv1d(u, kernel, reset=reset)
        torch.testing.assert_close(out[5:], causal_conv1d(u[5:], kernel))


def small_block(seed=0, d_model=4, d_inner=8, d_state=3, scan="sequential"):
    cfg = BlockConfig(d_model=d_model, d_inner=d_inner, d_state=d_state, scan=scan)
    return MambaBlock(cfg, generator=torch.Generator().manual_seed(seed)).double()


class TestBlock:
    def test_causality_bitwise(self):
        blk = small_block()
        x = torch.randn(1, 20, 4, dtype=DT)
        y = mamba_block_forward(x, blk)
        x2 = x.clone()
        x2[0, -1] += 3.0
        assert torch.equal(mamba_block_forward(x2, blk)[0, :-1], y[0, :-1])

    def test_zero_weights_zero_output(self):
        blk = small_block()
        with torch.no_grad():
            for p in blk.parameters():
                p.zero_()
        assert torch.count_nonzero(mamba_block_forward(torch.randn(7, 4, dtype=DT), blk)) == 0

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            mamba_block_forward(torch.randn(5, 3, dtype=DT), small_block())

    def test_parallel_route_matches(self):
        blk = small_block()
        x = torch.randn(2, 33, 4, dtype=DT)
        a, _ = blk(x, scan="sequential")
        b, _ = blk(x, scan="parallel")
        torch.testing.assert_close(a, b, rtol=1e-10, atol=1e-12)

    def test_step_matches_forward(self):
        blk = small_block(seed=3)
        x = torch.randn(2, 15, 4, dtype=DT)
        full, final = blk(x)
        state = blk.empty_state(2, DT)
        for t in range(15):
            out, state = blk.step(x[:, t], state)
            torch.testing.assert_close(out, full[:, t], rtol=1e-10, atol=1e-12)
        torch.testing.assert_close(state.ssm, final.ssm)
        torch.testing.assert_close(state.conv, final.conv)

    def test_chunked_forward_carries_state(self):
        blk = small_block(seed=4)
        x = torch.randn(1, 30, 4, dtype=DT)
        reset = torch.zeros(1, 30, dtype=torch.bool)
        reset[0, 12] = True
        full, _ = blk(x, reset=reset)
        a, st = blk(x[:, :13], reset=reset[:, :13])
        b, _ = blk(x[:, 13:], st, reset=reset[:, 13:])
        torch.testing.assert_close(torch.cat([a, b], 1), full, rtol=1e-10, atol=1e-12)

    def test_finite_difference_jacobian(self):
        blk = small_block(seed=5, d_model=2, d_inner=4, d_state=2)
        x = torch.randn(1, 4, 2, dtype=DT, requires_grad=True)
        out = mamba_block_forward(x, blk)
        w = torch.randn_like(out)
        (out * w).sum().backward()
        analytic = x.grad.clone()
        fd = torch.zeros_like(x)
        h = 1e-4
        with torch.no_grad():
            for idx in np.ndindex(*x.shape):
                xp, xm = x.clone(), x.clone()
                xp[idx] += h
                xm[idx] -= h
                fd[idx] = ((mamba_block_forward(xp, blk) * w).sum()
                           - (mamba_block_forward(xm, blk) * w).sum()) / (2 * h)
        assert float((analytic - fd).norm() / fd.norm()) < 1e-4

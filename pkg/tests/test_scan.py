import math

import numpy as np
import pytest
import torch

from vmrnn.errors import ConfigError, NumericError
from vmrnn.scan import (
    S6Params,
    discretize,
    make_selective_params,
    scan_chunked,
    scan_sequential,
    selective_scan_chunked,
    selective_scan_sequential,
)

import oracles


def make_params(channels=8, state_dim=4, seed=0, **kw):
    torch.manual_seed(seed)
    return S6Params(channels, state_dim, **kw)


def fixed_scan_inputs(bsz=2, L=12, ch=3, n=4, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    u = torch.randn(bsz, L, ch, generator=g, dtype=dtype)
    delta = torch.rand(bsz, L, ch, generator=g, dtype=dtype) * 0.5 + 0.05
    A = -torch.rand(ch, n, generator=g, dtype=dtype) * 2 - 0.1
    B = torch.randn(bsz, L, n, generator=g, dtype=dtype)
    C = torch.randn(bsz, L, n, generator=g, dtype=dtype)
    D = torch.randn(ch, generator=g, dtype=dtype)
    return u, delta, A, B, C, D


class TestMakeSelectiveParams:
    def test_zero_input_delta_is_softplus_of_bias(self):
        p = make_params()
        with torch.no_grad():
            p.delta_bias.zero_()
        x = torch.zeros(2, 5, 8)
        delta, _, _ = make_selective_params(x, p)
        assert torch.allclose(delta, torch.full_like(delta, math.log(2.0)), atol=1e-6)

    def test_zero_bc_proj_gives_zero_B_C(self):
        p = make_params()
        with torch.no_grad():
            p.bc_proj.weight.zero_()
            p.bc_proj.bias.zero_()
        x = torch.zeros(1, 4, 8)
        _, b, c = make_selective_params(x, p)
        assert b.abs().max() == 0 and c.abs().max() == 0
        assert b.shape == (1, 4, 4) and c.shape == (1, 4, 4)

    def test_delta_matches_scalar_loop_oracle(self):
        torch.manual_seed(7)
        p = make_params(channels=6, state_dim=4, seed=7, dt_rank=3)
        x = torch.randn(2, 16, 6)
        delta, _, _ = make_selective_params(x, p)
        ref = oracles.delta_ref(
            x.numpy(),
            p.delta_down.weight.detach().numpy(),
            p.delta_up.weight.detach().numpy(),
            p.delta_bias.detach().numpy(),
        )
        np.testing.assert_allclose(delta.detach().numpy(), ref, atol=1e-6)

    def test_delta_strictly_positive(self):
        p = make_params(seed=3)
        x = torch.randn(4, 32, 8) * 3
        delta, b, c = make_selective_params(x, p)
        assert (delta > 0).all()
        assert torch.isfinite(b).all() and torch.isfinite(c).all()

    def test_dimension_mismatch_raises_config_error(self):
        p = make_params(channels=8)
        with pytest.raises(ConfigError):
            make_selective_params(torch.zeros(1, 4, 5), p)

    def test_nonfinite_input_raises_with_index(self):
        p = make_params()
        x = torch.zeros(2, 3, 8)
        x[1, 2, 5] = float("nan")
        with pytest.raises(NumericError, match=r"\(1, 2, 5\)"):
            make_selective_params(x, p)


class TestDiscretize:
    def test_zero_A_unit_delta(self):
        delta = torch.ones(1, 3, 2)
        A = torch.zeros(2, 4)
        B = torch.randn(1, 3, 4)
        a_bar, b_bar = discretize(delta, A, B)
        assert torch.allclose(a_bar, torch.ones_like(a_bar))
        assert torch.allclose(b_bar, B.unsqueeze(-2).expand_as(b_bar))

    def test_small_delta_limit(self):
        delta = torch.full((1, 2, 1), 1e-12)
        A = torch.full((1, 3), -1.0)
        B = torch.ones(1, 2, 3)
        a_bar, b_bar = discretize(delta, A, B)
        assert torch.allclose(a_bar, torch.ones_like(a_bar), atol=1e-9)
        assert b_bar.abs().max() < 1e-9

    def test_log_two_halving(self):
        delta = torch.full((1, 1, 1), math.log(2.0))
        A = torch.full((1, 1), -1.0)
        B = torch.zeros(1, 1, 1)
        a_bar, _ = discretize(delta, A, B)
        assert torch.allclose(a_bar, torch.full_like(a_bar, 0.5))

    def test_range_for_stable_A(self):
        delta = torch.rand(2, 8, 3) + 1e-3
        A = -torch.rand(3, 5) - 1e-3
        B = torch.randn(2, 8, 5)
        a_bar, _ = discretize(delta, A, B)
        assert (a_bar > 0).all() and (a_bar < 1).all()

    def test_nonpositive_delta_rejected(self):
        with pytest.raises(NumericError):
            discretize(torch.zeros(1, 1, 1), torch.zeros(1, 1), torch.zeros(1, 1, 1))


class TestSequentialScan:
    def test_prefix_sum_degenerate_case(self):
        # A=0, B=C=1, delta=1, D=0 collapses the recurrence to a cumulative sum.
        bsz, L, ch = 2, 9, 3
        u = torch.randn(bsz, L, ch)
        delta = torch.ones(bsz, L, ch)
        A = torch.zeros(ch, 1)
        B = torch.ones(bsz, L, 1)
        C = torch.ones(bsz, L, 1)
        y = scan_sequential(u, delta, A, B, C)
        assert torch.allclose(y, u.cumsum(dim=1), atol=1e-5)

    def test_single_step_closed_form(self):
        u, delta, A, B, C, D = fixed_scan_inputs(L=1)
        y = scan_sequential(u, delta, A, B, C, D)
        a_bar, b_bar = discretize(delta, A, B)
        expected = torch.einsum("bcn,bn->bc", b_bar[:, 0] * u[:, 0].unsqueeze(-1), C[:, 0])
        expected = expected + D * u[:, 0]
        assert torch.allclose(y[:, 0], expected, atol=1e-12)

    def test_matches_scalar_loop_oracle(self):
        torch.manual_seed(11)
        p = make_params(channels=8, state_dim=4, seed=11).double()
        u = torch.randn(2, 64, 8, dtype=torch.float64)
        y = selective_scan_sequential(u, p)
        delta, b, c = make_selective_params(u, p)
        ref = oracles.scan_ref(u, delta.detach(), p.A.detach(), b.detach(), c.detach(), p.D.detach())
        np.testing.assert_allclose(y.detach().numpy(), ref, atol=1e-6)

    def test_functional_core_matches_oracle(self):
        u, delta, A, B, C, D = fixed_scan_inputs(seed=5)
        y = scan_sequential(u, delta, A, B, C, D)
        ref = oracles.scan_ref(u, delta, A, B, C, D)
        np.testing.assert_allclose(y.numpy(), ref, atol=1e-10)

    def test_linearity_with_frozen_selection(self):
        u, delta, A, B, C, _ = fixed_scan_inputs(seed=9)
        alpha = 2.75
        y1 = scan_sequential(u, delta, A, B, C)
        y2 = scan_sequential(alpha * u, delta, A, B, C)
        assert torch.allclose(y2, alpha * y1, atol=1e-9)


class TestChunkedScan:
    @pytest.mark.parametrize("chunk_len", [1, 2, 5, 12, 64])
    def test_matches_sequential(self, chunk_len):
        u, delta, A, B, C, D = fixed_scan_inputs(bsz=3, L=12, ch=4, n=3, seed=13)
        y_seq = scan_sequential(u, delta, A, B, C, D)
        y_chunk = scan_chunked(u, delta, A, B, C, D, chunk_len=chunk_len)
        assert (y_seq - y_chunk).abs().max() < 1e-12

    def test_spec_case_L257(self):
        torch.manual_seed(13)
        p = make_params(channels=8, state_dim=4, seed=13)
        u = torch.randn(2, 257, 8)
        y_seq = selective_scan_sequential(u, p)
        y_chunk = selective_scan_chunked(u, p, chunk_len=32)
        assert (y_seq - y_chunk).abs().max() < 1e-5

    def test_batch_of_directions_broadcast(self):
        # Extra leading dims plus broadcast A/D, as used by the 2D scan.
        g = torch.Generator().manual_seed(4)
        u = torch.randn(2, 4, 10, 3, generator=g, dtype=torch.float64)
        delta = torch.rand(2, 4, 10, 3, generator=g, dtype=torch.float64) + 0.05
        A = -torch.rand(4, 1, 3, 5, generator=g, dtype=torch.float64) - 0.1
        B = torch.randn(2, 4, 10, 5, generator=g, dtype=torch.float64)
        C = torch.randn(2, 4, 10, 5, generator=g, dtype=torch.float64)
        D = torch.randn(4, 1, 3, generator=g, dtype=torch.float64)
        y = scan_chunked(u, delta, A, B, C, D, chunk_len=4)
        for b in range(2):
            for v in range(4):
                ref = oracles.scan_ref(
                    u[b, v][None], delta[b, v][None], A[v, 0], B[b, v][None], C[b, v][None], D[v, 0]
                )
                np.testing.assert_allclose(y[b, v].numpy(), ref[0], atol=1e-10)

    def test_initial_state_carried(self):
        u, delta, A, B, C, D = fixed_scan_inputs(seed=21)
        h0 = torch.randn(2, 3, 4, dtype=torch.float64)
        y_seq = scan_sequential(u, delta, A, B, C, D, h0=h0)
        y_chunk = scan_chunked(u, delta, A, B, C, D, chunk_len=5, h0=h0)
        assert (y_seq - y_chunk).abs().max() < 1e-12

    def test_invalid_chunk_len(self):
        u, delta, A, B, C, D = fixed_scan_inputs()
        with pytest.raises(ConfigError):
            scan_chunked(u, delta, A, B, C, D, chunk_len=0)


class TestGradients:
    def _loss_weights(self, shape, seed=0):
        g = torch.Generator().manual_seed(seed)
        return torch.randn(*shape, generator=g, dtype=torch.float64)

    def test_sequential_gradients_match_finite_differences(self):
        torch.manual_seed(2)
        p = make_params(channels=3, state_dim=2, seed=2, dt_rank=2).double()
        u = torch.randn(1, 6, 3, dtype=torch.float64, requires_grad=True)
        w = self._loss_weights((1, 6, 3))

        def loss_fn():
            return (selective_scan_sequential(u, p) * w).sum()

        loss = loss_fn()
        params = [u] + [q for q in p.parameters()]
        grads = torch.autograd.grad(loss, params)
        fd = oracles.fd_gradient(loss_fn, params, h=1e-5)
        assert oracles.grad_rel_error(grads, fd) < 1e-4

    def test_chunked_gradients_match_finite_differences(self):
        torch.manual_seed(6)
        p = make_params(channels=3, state_dim=2, seed=6, dt_rank=2).double()
        u = torch.randn(2, 7, 3, dtype=torch.float64, requires_grad=True)
        w = self._loss_weights((2, 7, 3), seed=1)

        def loss_fn():
            return (selective_scan_chunked(u, p, chunk_len=3) * w).sum()

        loss = loss_fn()
        params = [u] + [q for q in p.parameters()]
        grads = torch.autograd.grad(loss, params)
        fd = oracles.fd_gradient(loss_fn, params, h=1e-5)
        assert oracles.grad_rel_error(grads, fd) < 1e-4

    def test_chunked_and_sequential_gradients_agree(self):
        u, delta, A, B, C, D = fixed_scan_inputs(bsz=2, L=11, ch=3, n=4, seed=17)
        w = self._loss_weights((2, 11, 3), seed=3)
        inputs = []
        for t in (u, delta, A, B, C, D):
            t = t.clone().requires_grad_(True)
            inputs.append(t)
        y1 = scan_sequential(*inputs)
        g1 = torch.autograd.grad((y1 * w).sum(), inputs)
        y2 = scan_chunked(*inputs, chunk_len=4)
        g2 = torch.autograd.grad((y2 * w).sum(), inputs)
        for a, b in zip(g1, g2):
            assert (a - b).abs().max() < 1e-10

    def test_h0_gradient(self):
        u, delta, A, B, C, D = fixed_scan_inputs(seed=23)
        h0 = torch.randn(2, 3, 4, dtype=torch.float64, requires_grad=True)
        w = self._loss_weights((2, 12, 3), seed=5)
        y = scan_chunked(u, delta, A, B, C, D, chunk_len=5, h0=h0)
        (g_chunk,) = torch.autograd.grad((y * w).sum(), (h0,))
        y2 = scan_sequential(u, delta, A, B, C, D, h0=h0)
        (g_seq,) = torch.autograd.grad((y2 * w).sum(), (h0,))
        assert (g_chunk - g_seq).abs().max() < 1e-10


class TestStability:
    def test_no_nan_over_long_random_run(self):
        # 10k steps with bounded inputs and stable A must stay finite.
        torch.manual_seed(0)
        p = make_params(channels=4, state_dim=4, seed=0)
        u = (torch.rand(1, 10_000, 4) - 0.5) * 4
        y = selective_scan_chunked(u, p, chunk_len=128)
        assert torch.isfinite(y).all()

    def test_state_bound(self):
        # |h_t| <= max|B_bar u| / (1 - max A_bar) for contractive A_bar.
        u, delta, A, B, C, D = fixed_scan_inputs(bsz=1, L=200, ch=2, n=2, seed=31)
        a_bar, b_bar = discretize(delta, A, B)
        drive = (b_bar * u.unsqueeze(-1)).abs().max()
        bound = drive / (1 - a_bar.max())
        h = torch.zeros(1, 2, 2, dtype=torch.float64)
        worst = 0.0
        for t in range(200):
            h = a_bar[:, t] * h + b_bar[:, t] * u[:, t].unsqueeze(-1)
            worst = max(worst, h.abs().max().item())
        assert worst <= bound.item() + 1e-9

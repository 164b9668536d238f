import math

import numpy as np
import pytest
from scipy import integrate, stats

from deepsith.filterbank import FilterSpec, build_kernels, geometric_taus
from deepsith.laplace import (
    MAX_K,
    UnsupportedKError,
    init_state,
    laplace_run,
    laplace_step,
    make_s_grid,
    post_invert,
)
from deepsith.sith import sith_forward

GRID = geometric_taus(2, 100, 6)


class TestSGrid:
    @pytest.mark.parametrize("k", [1, 4, 8, 12])
    def test_log_even_and_targets(self, k):
        sg = make_s_grid(GRID, k)
        logs = np.log(sg.s_values)
        np.testing.assert_allclose(np.diff(logs), -sg.log_step, rtol=1e-9)
        assert np.all(np.diff(sg.s_values) < 0)
        np.testing.assert_allclose(sg.s_values[sg.targets], k / GRID.values, rtol=1e-9)
        assert sg.targets[0] >= k and sg.targets[-1] <= len(sg) - 1 - k

    def test_explicit_oversample(self):
        sg = make_s_grid(GRID, 4, oversample=4)
        assert sg.oversample == 4
        assert sg.log_step == pytest.approx(math.log1p(GRID.c) / 4)

    @pytest.mark.parametrize("k", [0, MAX_K + 1, 50])
    def test_unsupported_k(self, k):
        with pytest.raises(UnsupportedKError):
            make_s_grid(GRID, k)


class TestStep:
    def test_zero_input(self):
        sg = make_s_grid(GRID, 4)
        st = laplace_run(np.zeros((50, 2)), sg)
        assert not np.any(st.F)
        assert st.t == 50

    def test_impulse_decay(self):
        sg = make_s_grid(GRID, 2)
        dt = 0.05
        st = init_state(sg)
        st = laplace_step(st, 1.0 / dt, dt)
        t0 = st.t
        for _ in range(40):
            st = laplace_step(st, 0.0, dt)
        small = sg.s_values * dt < 0.1
        expected = np.exp(-sg.s_values * (st.t - t0))
        np.testing.assert_allclose(st.F[0, small], expected[small], atol=1e-6)

    def test_constant_fixed_point(self):
        sg = make_s_grid(GRID, 2)
        dt = 0.01
        s = sg.s_values
        steps = int(math.ceil(10 / s.min() / dt)) + 1
        st = laplace_run(np.ones(steps), sg, dt)
        np.testing.assert_allclose(st.F[0] * s, 1.0, rtol=0.01)

    def test_bad_dt_and_shape(self):
        st = init_state(make_s_grid(GRID, 2), 2)
        with pytest.raises(ValueError):
            laplace_step(st, [1.0, 2.0], dt=0.0)
        with pytest.raises(ValueError):
            laplace_step(st, [1.0, 2.0, 3.0])

    def test_memory_independent_of_length(self):
        sg = make_s_grid(GRID, 4)
        a = laplace_run(np.ones((10, 3)), sg)
        b = laplace_run(np.ones((1000, 3)), sg)
        assert a.F.shape == b.F.shape == (3, len(sg))

    def test_resume(self):
        sg = make_s_grid(GRID, 4)
        x = np.random.default_rng(0).random((60, 1))
        whole = laplace_run(x, sg)
        part = laplace_run(x[30:], sg, state=laplace_run(x[:30], sg))
        np.testing.assert_allclose(part.F, whole.F, rtol=1e-12)


class TestInversion:
    def test_zero_state(self):
        sg = make_s_grid(GRID, 4)
        assert not np.any(post_invert(init_state(sg, 2), 4, GRID))

    def test_impulse_matches_kernels(self):
        k = 4
        bank = build_kernels(FilterSpec(GRID, k))
        sg = make_s_grid(GRID, k)
        for i, tau in enumerate(GRID.values):
            t = int(round(tau))
            x = np.zeros(t + 1)
            x[0] = 1.0
            approx = post_invert(laplace_run(x, sg), k, GRID)[0, i]
            assert approx == pytest.approx(bank.kernels[i, t], rel=0.05)

    def test_exponential_input_against_quadrature(self):
        k, dt = 4, 0.01
        sg = make_s_grid(GRID, k)
        t = np.arange(3000) * dt
        st = laplace_run(np.exp(-t), sg, dt)
        got = post_invert(st, k, GRID)[0]
        ref = np.array([
            integrate.quad(lambda u: stats.gamma.pdf(u, k + 1, scale=tau / k) * math.exp(-(st.t - u)), 0, st.t, limit=200)[0]
            for tau in GRID.values
        ])
        keep = ref > 1e-3 * ref.max()
        assert keep.sum() >= 3
        np.testing.assert_allclose(got[keep], ref[keep], rtol=0.05)

    @pytest.mark.parametrize("k", [1, 2, 4])
    def test_linearity(self, k):
        # the k-th difference amplifies round-off roughly like eps / h**k, so the
        # 1e-10 bound is only meaningful for small k; the state itself is exact
        sg = make_s_grid(GRID, k)
        r = np.random.default_rng(3)
        x, y = r.random((2, 80, 2))
        run = lambda z: laplace_run(z, sg)
        np.testing.assert_allclose(run(2 * x - 3 * y).F, 2 * run(x).F - 3 * run(y).F, rtol=1e-12)
        a = post_invert(run(2 * x - 3 * y), k, GRID)
        b = 2 * post_invert(run(x), k, GRID) - 3 * post_invert(run(y), k, GRID)
        assert np.max(np.abs(a - b)) <= 1e-10 * np.abs(b).max()

    @pytest.mark.parametrize("k", [2, 4, 8])
    def test_streaming_equivalence(self, k):
        x = np.random.default_rng(k).random((200, 1))
        bank = build_kernels(FilterSpec(GRID, k))
        ref = sith_forward(x, bank)[-1, 0]
        got = post_invert(laplace_run(x, make_s_grid(GRID, k)), k, GRID)[0]
        np.testing.assert_allclose(got, ref, rtol=0.10)

    def test_mismatched_grid(self):
        sg = make_s_grid(GRID, 4)
        st = init_state(sg)
        with pytest.raises(ValueError):
            post_invert(st, 3, GRID)
        with pytest.raises(ValueError):
            post_invert(st, 4, geometric_taus(1, 100, 6))

    def test_unsupported_k(self):
        with pytest.raises(UnsupportedKError):
            post_invert(init_state(make_s_grid(GRID, 4)), MAX_K + 1, GRID)

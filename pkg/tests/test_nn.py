import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _gradcheck import REL_TOL, check_gradients, random_instance
from deepsith.filterbank import FilterSpec, build_kernels, geometric_taus
from deepsith.nn import (
    AdamState,
    BatchNorm,
    DeepSITHLayer,
    DenseLayer,
    DivergenceError,
    LayerConfig,
    StaleTraceError,
    accuracy,
    adam_step,
    apply_update,
    build_network,
    count_parameters,
    layer_forward,
    load_checkpoint,
    loss_cross_entropy,
    loss_mse,
    metric_nrmse,
    net_backward,
    net_forward,
    save_checkpoint,
)

TABLE_CONFIGS = {
    # name: (n_in, n_out, tau_maxes, n_taus, hidden, batch_norm, total)
    "psmnist": (1, 10, [30, 150, 750], 20, 60, True, 146_350),
    "adding": (2, 1, [20, 120, 720, 4320], 13, 25, False, 25_151),
    "mackey_glass": (1, 1, [25, 50, 150], 8, 25, False, 10_301),
    "hateful8": (1, 8, [25, 100, 400, 1200], 10, 35, True, 37_808),
}


def small_net(**kw):
    cfgs = [LayerConfig(8, 4, 3, k=8), LayerConfig(16, 4, 3, k=6)]
    return build_network(2, 2, cfgs, seed=0, **kw)


class TestDense:
    def test_init(self):
        d = DenseLayer.init(40, 7, np.random.default_rng(0))
        assert d.weights.shape == (7, 40) and d.n_params == 7 * 41
        assert np.abs(d.weights).max() <= 1 / math.sqrt(40)
        assert not np.any(d.bias)

    def test_backward_matches_matrix_calculus(self):
        r = np.random.default_rng(1)
        d = DenseLayer(r.normal(size=(3, 5)), r.normal(size=3))
        x, g = r.normal(size=(4, 6, 5)), r.normal(size=(4, 6, 3))
        gx, gw, gb = d.backward(x, g)
        np.testing.assert_allclose(gx, g @ d.weights)
        np.testing.assert_allclose(gw, np.einsum("bto,bti->oi", g, x))
        np.testing.assert_allclose(gb, g.sum(axis=(0, 1)))


class TestLayer:
    def _layer(self, k=8, taus=(1, 8, 4), n_in=1, hidden=3, **kw):
        bank = build_kernels(FilterSpec(geometric_taus(*taus), k))
        dense = DenseLayer.init(n_in * bank.n_taus, hidden, np.random.default_rng(0))
        return DeepSITHLayer(bank, dense, **kw)

    def test_zero_weights_zero_output(self):
        layer = self._layer()
        layer.dense.weights[...] = 0
        out, _ = layer_forward(layer, np.random.default_rng(0).normal(size=(2, 20, 1)))
        assert not np.any(out)

    def test_delayed_identity(self):
        # a very sharp tau* = 1 filter picks out the previous sample
        layer = self._layer(k=400, taus=(1, 2, 2), hidden=1)
        layer.dense.weights[...] = [[1.0, 0.0]]
        x = np.random.default_rng(2).normal(size=(1, 30, 1))
        out, _ = layer_forward(layer, x)
        np.testing.assert_allclose(out[0, 1:, 0], np.maximum(x[0, :-1, 0], 0), atol=0.02)

    def test_dropout_eval_equals_rate_zero(self):
        x = np.random.default_rng(3).normal(size=(2, 20, 1))
        a = self._layer(dropout_rate=0.5)
        b = self._layer(dropout_rate=0.0)
        out_eval, _ = layer_forward(a, x, "eval", None)
        out_train0, _ = layer_forward(b, x, "train", np.random.default_rng(9))
        np.testing.assert_array_equal(out_eval, out_train0)

    def test_dropout_train_scaling(self):
        layer = self._layer(dropout_rate=0.2, hidden=50)
        x = np.abs(np.random.default_rng(4).normal(size=(8, 40, 1)))
        base, _ = layer_forward(layer, x, "eval")
        out, cache = layer_forward(layer, x, "train", np.random.default_rng(0))
        kept = cache.mask > 0
        np.testing.assert_allclose(out[kept], base[kept] / 0.8)
        assert abs(kept.mean() - 0.8) < 0.02

    def test_train_dropout_needs_rng(self):
        with pytest.raises(ValueError):
            layer_forward(self._layer(dropout_rate=0.2), np.ones((1, 5, 1)), "train", None)

    def test_relu_nonnegative(self):
        out, _ = layer_forward(self._layer(hidden=20), np.random.default_rng(5).normal(size=(3, 30, 1)))
        assert out.min() >= 0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            layer_forward(self._layer(), np.ones((1, 5, 2)))

    def test_bad_dropout(self):
        with pytest.raises(ValueError):
            self._layer(dropout_rate=1.0)

    def test_batch_norm_statistics(self):
        layer = self._layer(hidden=4, batch_norm=BatchNorm.init(4))
        x = np.random.default_rng(6).normal(size=(5, 30, 1)) + 1.0
        out, cache = layer_forward(layer, x, "train", np.random.default_rng(0))
        np.testing.assert_allclose(out.mean(axis=(0, 1)), 0, atol=1e-12)
        v = np.maximum(cache.pre, 0).var(axis=(0, 1))
        np.testing.assert_allclose(out.var(axis=(0, 1)), v / (v + 1e-5), rtol=1e-10)
        assert np.any(layer.batch_norm.running_mean != 0)

    @pytest.mark.parametrize("T", [8, 40])
    def test_strategies_agree(self, T):
        r = np.random.default_rng(T)
        x = r.normal(size=(3, T, 2))
        outs = []
        for conv in ("materialize", "spectral"):
            layer = self._layer(n_in=2, hidden=5, conv=conv, taus=(1, 30, 6))
            outs.append(layer_forward(layer, x)[0])
        np.testing.assert_allclose(outs[0], outs[1], atol=1e-12)


class TestNetwork:
    @pytest.mark.parametrize("name", list(TABLE_CONFIGS))
    def test_table_parameter_counts(self, name):
        n_in, n_out, taus, n, hidden, bn, total = TABLE_CONFIGS[name]
        cfgs = [LayerConfig(t, n, hidden, k=4, batch_norm=bn) for t in taus]
        assert count_parameters(build_network(n_in, n_out, cfgs)) == total

    def test_layer_chain_mismatch(self):
        net = small_net()
        with pytest.raises(ValueError):
            type(net)(net.layers[::-1][:1] + net.layers[:1], net.readout)

    def test_identical_signals_identical_outputs(self):
        net = small_net()
        x = np.repeat(np.random.default_rng(0).normal(size=(1, 20, 2)), 4, axis=0)
        out, _ = net_forward(net, x, "eval")
        # BLAS can treat the last row of a block differently, hence an ulp of slack
        np.testing.assert_allclose(out, np.broadcast_to(out[0], out.shape), rtol=0, atol=1e-15)

    def test_batch_permutation(self):
        net = small_net()
        x = np.random.default_rng(1).normal(size=(5, 20, 2))
        perm = np.array([3, 0, 4, 1, 2])
        a, _ = net_forward(net, x, "eval")
        b, _ = net_forward(net, x[perm], "eval")
        np.testing.assert_allclose(b, a[perm], rtol=0, atol=1e-15)

    def test_hand_computed_forward(self):
        # one layer, F=1, two tau*, one hidden unit, readout 1x1, T=3
        bank = build_kernels(FilterSpec(geometric_taus(1, 2, 2), 2))
        net = build_network(1, 1, [LayerConfig(2, 2, 1, k=2)], dropout_rate=0.0)
        layer = net.layers[0]
        layer.dense.weights[...] = [[0.5, -0.25]]
        layer.dense.bias[...] = [0.1]
        net.readout.weights[...] = [[2.0]]
        net.readout.bias[...] = [-1.0]
        x = np.array([1.0, -2.0, 3.0])
        k0, k1 = bank.row(0), bank.row(1)
        expected = []
        for t in range(3):
            m0 = sum(k0[l] * x[t - l] for l in range(min(t, len(k0) - 1) + 1))
            m1 = sum(k1[l] * x[t - l] for l in range(min(t, len(k1) - 1) + 1))
            expected.append(max(0.5 * m0 - 0.25 * m1 + 0.1, 0.0))
        out, _ = net_forward(net, x[None, :, None], "eval")
        assert out[0, 0] == pytest.approx(2.0 * expected[-1] - 1.0, rel=1e-12)

    def test_every_step_readout_shape(self):
        net = small_net(readout_mode="every")
        out, _ = net_forward(net, np.zeros((2, 11, 2)), "eval")
        assert out.shape == (2, 11, 2)

    def test_eval_is_pure(self):
        cfgs = [LayerConfig(8, 4, 3, k=8, batch_norm=True)]
        net = build_network(2, 2, cfgs, seed=0)
        x = np.random.default_rng(0).normal(size=(2, 10, 2))
        before = {k: v.copy() for k, v in net.buffers().items()}
        a, _ = net_forward(net, x, "eval")
        b, _ = net_forward(net, x, "eval")
        np.testing.assert_array_equal(a, b)
        for k, v in net.buffers().items():
            np.testing.assert_array_equal(v, before[k])

    def test_bad_input_shape(self):
        with pytest.raises(ValueError):
            net_forward(small_net(), np.zeros((2, 10, 3)))
        with pytest.raises(ValueError):
            net_forward(small_net(), np.zeros((2, 10, 2)), "test")

    def test_float32(self):
        net = small_net(dtype=np.float32)
        out, tr = net_forward(net, np.ones((2, 10, 2)), "train", np.random.default_rng(0))
        assert out.dtype == np.float32
        grads = net_backward(net, tr, np.ones_like(out))
        assert all(g.dtype == np.float32 for g in grads.values())


class TestBackward:
    def test_zero_loss_grad(self):
        net = small_net()
        out, tr = net_forward(net, np.random.default_rng(0).normal(size=(2, 10, 2)), "train", np.random.default_rng(1))
        grads = net_backward(net, tr, np.zeros_like(out))
        assert all(not np.any(g) for g in grads.values())
        assert list(grads) == list(net.parameters())

    def test_readout_bias_closed_form(self):
        net = small_net()
        out, tr = net_forward(net, np.random.default_rng(0).normal(size=(3, 10, 2)), "train", np.random.default_rng(1))
        g = np.random.default_rng(2).normal(size=out.shape)
        grads = net_backward(net, tr, g)
        np.testing.assert_allclose(grads["readout.bias"], g.sum(axis=0))

    def test_stale_and_reused_traces(self):
        net = small_net()
        x = np.ones((2, 10, 2))
        out, tr = net_forward(net, x, "train", np.random.default_rng(0))
        net_backward(net, tr, np.ones_like(out))
        with pytest.raises(StaleTraceError):
            net_backward(net, tr, np.ones_like(out))
        out, tr = net_forward(net, x, "train", np.random.default_rng(0))
        grads = net_backward(net, tr, np.ones_like(out))
        out2, tr2 = net_forward(net, x, "train", np.random.default_rng(0))
        apply_update(net, grads, AdamState())
        with pytest.raises(StaleTraceError):
            net_backward(net, tr2, np.ones_like(out2))
        with pytest.raises(StaleTraceError):
            net_backward(net, None, np.ones_like(out2))

    @pytest.mark.parametrize("seed", range(10))
    def test_gradient_check(self, seed):
        net, x, proj = random_instance(seed)
        worst = check_gradients(net, x, proj)
        assert max(worst.values()) < REL_TOL, worst


class TestAdam:
    def test_first_step_scalar(self):
        p = {"w": np.array([1.0])}
        adam_step(p, {"w": np.array([0.5])}, AdamState(lr=1e-3))
        # hand computation: m_hat = 0.5, v_hat = 0.25 -> -lr * 0.5 / (0.5 + 1e-8)
        assert p["w"][0] - 1.0 == pytest.approx(-0.000999999980000000420816, rel=1e-12)

    def test_constant_gradient_limit(self):
        p = {"w": np.array([0.0, 0.0])}
        state = AdamState(lr=0.01)
        prev = p["w"].copy()
        for _ in range(3000):
            adam_step(p, {"w": np.array([3.0, -0.002])}, state)
            step = p["w"] - prev
            prev = p["w"].copy()
        np.testing.assert_allclose(step, [-0.01, 0.01], rtol=1e-4)

    def test_zero_gradient(self):
        p = {"w": np.array([1.0, 2.0])}
        state = AdamState()
        adam_step(p, {"w": np.zeros(2)}, state)
        np.testing.assert_array_equal(p["w"], [1.0, 2.0])
        assert state.step == 1

    def test_divergence(self):
        p = {"w": np.array([1.0])}
        state = AdamState()
        with pytest.raises(DivergenceError):
            adam_step(p, {"w": np.array([np.nan])}, state)
        assert state.step == 0 and p["w"][0] == 1.0

    def test_mismatched(self):
        with pytest.raises(ValueError):
            adam_step({"w": np.zeros(2)}, {"v": np.zeros(2)}, AdamState())
        with pytest.raises(ValueError):
            adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())


class TestLosses:
    def test_uniform_logits(self):
        loss, _ = loss_cross_entropy(np.zeros((4, 10)), np.array([0, 3, 9, 5]))
        # mpmath: ln 10
        assert loss == pytest.approx(2.302585092994045684, rel=1e-14)

    def test_cross_entropy_gradient(self):
        r = np.random.default_rng(0)
        logits, labels = r.normal(size=(3, 5)), np.array([1, 4, 0])
        _, g = loss_cross_entropy(logits, labels)
        h = 1e-6
        for idx in np.ndindex(logits.shape):
            e = np.zeros_like(logits)
            e[idx] = h
            fd = (loss_cross_entropy(logits + e, labels)[0] - loss_cross_entropy(logits - e, labels)[0]) / (2 * h)
            assert g[idx] == pytest.approx(fd, abs=1e-8)

    def test_cross_entropy_stable(self):
        loss, g = loss_cross_entropy(np.array([[1000.0, -1000.0]]), np.array([1]))
        assert loss == pytest.approx(2000.0) and np.all(np.isfinite(g))

    @pytest.mark.parametrize("labels", [np.array([0, 10]), np.array([-1, 0])])
    def test_label_range(self, labels):
        with pytest.raises(ValueError):
            loss_cross_entropy(np.zeros((2, 10)), labels)

    def test_mse(self):
        y = np.array([1.0, 2.0, 3.0])
        assert loss_mse(y, y)[0] == 0.0
        loss, g = loss_mse(np.array([1.0, 1.0]), np.array([0.0, 3.0]))
        assert loss == 2.5
        np.testing.assert_allclose(g, [1.0, -2.0])

    def test_nrmse(self):
        y = np.sin(np.linspace(0, 10, 200))
        assert metric_nrmse(y, y) == 0.0
        assert metric_nrmse(np.full_like(y, y.mean()), y) == pytest.approx(1.0, rel=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 50), st.floats(0.1, 10), st.floats(-5, 5))
    def test_nrmse_affine_invariant(self, n, scale, shift):
        r = np.random.default_rng(n)
        y, p = r.normal(size=(2, n))
        assert metric_nrmse(scale * p + shift, scale * y + shift) == pytest.approx(metric_nrmse(p, y), rel=1e-9)

    def test_accuracy(self):
        assert accuracy(np.array([[0, 1], [1, 0], [0, 1]]), np.array([1, 0, 0])) == pytest.approx(2 / 3)


class TestCheckpoint:
    @pytest.mark.parametrize("bn,readout", [(False, "final"), (True, "every")])
    def test_round_trip(self, tmp_path, bn, readout):
        cfgs = [LayerConfig(8, 4, 3, k=8, batch_norm=bn), LayerConfig(16, 5, 4, k=6, batch_norm=bn)]
        net = build_network(2, 3, cfgs, readout, seed=4)
        x = np.random.default_rng(0).normal(size=(2, 12, 2))
        net_forward(net, x, "train", np.random.default_rng(0))  # move running stats
        save_checkpoint(net, tmp_path / "c.npz", {"task": "demo"})
        loaded, config = load_checkpoint(tmp_path / "c.npz")
        assert config == {"task": "demo"}
        np.testing.assert_array_equal(net_forward(loaded, x)[0], net_forward(net, x)[0])
        assert count_parameters(loaded) == count_parameters(net)
        for name, v in net.buffers().items():
            np.testing.assert_array_equal(loaded.buffers()[name], v)

    def test_rejects_foreign_file(self, tmp_path):
        np.savez(tmp_path / "x.npz", a=np.zeros(2))
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "x.npz")

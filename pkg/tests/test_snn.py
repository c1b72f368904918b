import math

import numpy as np
import pytest

from ndsnn.errors import ConfigError, DataError, DimensionError, StateError
from ndsnn.snn import (
    BpttBuffers,
    LifLayerState,
    LifParams,
    SpikingNetwork,
    _layer_input,
    bptt_backward,
    cross_entropy_with_grad,
    forward_pass,
    lif_step,
    surrogate_grad,
)
from ndsnn.sparse import MaskedLayer, conv_layer, linear_layer


def scalar_lif(inputs, alpha, theta):
    """Reference trace with plain Python floats."""
    v, o, vs, os_ = 0.0, 0.0, [], []
    for x in inputs:
        v = alpha * v + x - theta * o
        o = 1.0 if v >= theta else 0.0
        vs.append(v)
        os_.append(o)
    return vs, os_


def two_layer(w1, w2, params=LifParams()):
    l1 = MaskedLayer(np.array(w1, dtype=np.float32), np.ones(np.shape(w1)))
    l2 = MaskedLayer(np.array(w2, dtype=np.float32), np.ones(np.shape(w2)))
    return SpikingNetwork([l1, l2], params)


class TestLifStep:
    p = LifParams(alpha=0.5, theta=1.0)

    def test_trace(self):
        vs, os_ = scalar_lif([0.6] * 5, 0.5, 1.0)
        assert vs[0] == pytest.approx(0.6) and os_[0] == 0
        assert vs[2] == pytest.approx(0.5 * 0.9 + 0.6) and os_[2] == 1
        assert vs[3] == pytest.approx(0.5 * 1.05 + 0.6 - 1.0) and os_[3] == 0
        state = LifLayerState.zeros(1, 1)
        x = np.full((1, 1), 0.6, dtype=np.float32)
        for t in range(5):
            state, s = lif_step(state, x, self.p)
            assert state.v[0, 0] == pytest.approx(vs[t], abs=1e-6)
            assert s[0, 0] == os_[t]

    def test_fires_at_threshold(self):
        state, s = lif_step(LifLayerState.zeros(1, 1), np.ones((1, 1), np.float32), self.p)
        assert s[0, 0] == 1.0

    def test_state_carries_spikes(self):
        state, s = lif_step(LifLayerState.zeros(2, 3), np.full((2, 3), 2.0, np.float32), self.p)
        np.testing.assert_array_equal(state.o_prev, s)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            lif_step(LifLayerState.zeros(1, 2), np.zeros((1, 3), np.float32), self.p)

    @pytest.mark.parametrize("kw", [{"alpha": 0.0}, {"alpha": 1.5}, {"theta": 0.0}, {"timesteps": 0}])
    def test_param_validation(self, kw):
        with pytest.raises(ConfigError):
            LifParams(**kw)


class TestSurrogate:
    def test_values(self):
        assert surrogate_grad(0.0) == 1.0
        assert surrogate_grad(1 / math.pi) == pytest.approx(0.5, abs=1e-15)
        assert surrogate_grad(10.0) == pytest.approx(1 / (1 + 100 * math.pi**2))
        assert surrogate_grad(10.0) == pytest.approx(0.001012, abs=5e-7)

    def test_range(self):
        x = np.linspace(-50, 50, 1001)
        phi = surrogate_grad(x)
        assert np.all((phi > 0) & (phi <= 1))


class TestForward:
    def test_zero_input(self):
        net = two_layer(np.eye(3), np.eye(3))
        records, readout = forward_pass(net, np.zeros((4, 2, 3)))
        assert not readout.any()
        assert not records[0].spikes.any()

    def test_single_neuron_fires_at_t2(self):
        net = two_layer([[0.6]], [[1.0]])
        records, _ = forward_pass(net, np.ones((5, 1, 1)))
        _, expected = scalar_lif([0.6] * 5, 0.5, 1.0)
        assert expected == [0, 0, 1, 0, 0]
        np.testing.assert_array_equal(records[0].spikes[:, 0, 0], expected)
        assert records[0].potentials[3, 0, 0] == pytest.approx(0.125, abs=1e-6)

    def test_all_masked(self):
        rng = np.random.default_rng(0)
        net = SpikingNetwork([linear_layer(6, 5, rng), linear_layer(5, 3, rng)])
        for layer in net.layers:
            layer.mask[...] = 0
        _, readout = forward_pass(net, rng.random((5, 4, 6)))
        assert not readout.any()

    def test_readout_is_mean_leaky_potential(self):
        net = two_layer([[5.0]], [[1.0]])
        records, readout = forward_pass(net, np.ones((3, 1, 1)))
        o = records[0].spikes[:, 0, 0]
        v, acc = 0.0, 0.0
        for t in range(3):
            v = 0.5 * v + o[t]
            acc += v
        assert readout[0, 0] == pytest.approx(acc / 3)

    def test_chain_mismatch_names_layer(self):
        with pytest.raises(ConfigError, match="layer 1"):
            SpikingNetwork([linear_layer(3, 4), linear_layer(5, 2)])

    def test_input_width_mismatch(self):
        net = two_layer(np.eye(3), np.eye(3))
        with pytest.raises(ConfigError, match="layer 0"):
            forward_pass(net, np.zeros((2, 1, 4)))


class TestForwardInvariants:
    @pytest.fixture
    def setup(self):
        rng = np.random.default_rng(11)
        layers = [conv_layer((1, 4, 4), 2, 3, 1, 1, rng), linear_layer(32, 10, rng), linear_layer(10, 3, rng)]
        for layer in layers:
            layer.weights *= 2
        net = SpikingNetwork(layers)
        x = (rng.random((5, 3, 16)) < 0.5).astype(np.float32)
        return net, x, rng

    def test_spikes_binary(self, setup):
        net, x, _ = setup
        records, _ = forward_pass(net, x)
        for r in records[:-1]:
            assert set(np.unique(r.spikes)) <= {0.0, 1.0}
            np.testing.assert_array_equal(r.spikes, (r.potentials >= net.params.theta).astype(np.float32))

    def test_membrane_recursion_exact(self, setup):
        net, x, _ = setup
        p = net.params
        records, _ = forward_pass(net, x)
        for layer, r in zip(net.layers[:-1], records[:-1]):
            current = _layer_input(layer, r.inputs)
            v_prev = np.zeros_like(r.potentials[0])
            o_prev = np.zeros_like(v_prev)
            for t in range(x.shape[0]):
                resid = r.potentials[t] - (p.alpha * v_prev + current[t] - p.theta * o_prev)
                assert not resid.any()
                v_prev, o_prev = r.potentials[t], r.spikes[t]

    def test_masked_weight_value_is_irrelevant(self, setup):
        net, x, rng = setup
        net.layers[1].mask[:, ::2] = 0
        net.layers[1].apply_mask()
        _, before = forward_pass(net, x)
        net.layers[1].weights[:, ::2] = rng.normal(size=net.layers[1].weights[:, ::2].shape)
        _, after = forward_pass(net, x)
        np.testing.assert_array_equal(before, after)

    def test_temporal_locality(self, setup):
        net, x, rng = setup
        full, _ = forward_pass(net, x)
        cut = x.copy()
        cut[3:] = rng.random(cut[3:].shape) < 0.5
        part, _ = forward_pass(net, cut)
        for a, b in zip(full, part):
            np.testing.assert_array_equal(a.potentials[:3], b.potentials[:3])


class TestBackward:
    def test_zero_readout_grad(self):
        rng = np.random.default_rng(2)
        net = SpikingNetwork([linear_layer(4, 6, rng), linear_layer(6, 3, rng)])
        records, readout = forward_pass(net, rng.random((5, 2, 4)))
        for g in bptt_backward(records, np.zeros_like(readout), net):
            assert not g.any()

    def test_one_step_unroll(self):
        # hidden neuron -> output neuron with unit weight, T = 1
        w1, s = 0.8, 1.0
        net = two_layer([[w1]], [[1.0]], LifParams(timesteps=1))
        records, _ = forward_pass(net, np.full((1, 1, 1), s))
        g = np.array([[0.37]], dtype=np.float32)
        grads = bptt_backward(records, g, net)
        phi = 1.0 / (1.0 + math.pi**2 * (w1 * s - 1.0) ** 2)
        assert grads[0][0, 0] == pytest.approx(0.37 * phi * s, rel=1e-6)
        assert grads[1][0, 0] == pytest.approx(0.37 * records[0].spikes[0, 0, 0])

    def test_gradient_is_dense(self):
        rng = np.random.default_rng(4)
        net = SpikingNetwork([linear_layer(5, 4, rng), linear_layer(4, 3, rng)])
        net.layers[1].mask[:] = 0
        net.layers[1].mask[0, 0] = 1
        net.layers[1].apply_mask()
        net.layers[0].weights *= 4
        records, readout = forward_pass(net, np.ones((4, 2, 5), np.float32))
        _, g = cross_entropy_with_grad(readout, [0, 1])
        grads = bptt_backward(records, g, net)
        # inactive positions still receive gradient (used for regrowth)
        assert np.count_nonzero(grads[1] * (1 - net.layers[1].mask)) > 0

    def test_buffers(self):
        rng = np.random.default_rng(5)
        net = SpikingNetwork([linear_layer(4, 6, rng), linear_layer(6, 2, rng)])
        records, readout = forward_pass(net, rng.random((3, 2, 4)))
        buffers = []
        bptt_backward(records, np.ones_like(readout), net, buffers=buffers)
        assert len(buffers) == 2 and isinstance(buffers[0], BpttBuffers)
        phi = buffers[0].phi
        assert np.all((phi > 0) & (phi <= 1))
        b = buffers[0]
        # eps[t] = delta[t] * phi[t] + alpha * eps[t + 1], eps[T] = 0
        np.testing.assert_allclose(b.eps[-1], b.delta[-1] * phi[-1], rtol=1e-6)
        np.testing.assert_allclose(b.eps[0], b.delta[0] * phi[0] + 0.5 * b.eps[1], rtol=1e-5, atol=1e-7)

    def test_record_mismatch(self):
        rng = np.random.default_rng(6)
        net = SpikingNetwork([linear_layer(4, 6, rng), linear_layer(6, 2, rng)])
        records, readout = forward_pass(net, rng.random((3, 2, 4)))
        with pytest.raises(StateError):
            bptt_backward(records[:1], readout, net)


class TestCrossEntropy:
    def test_uniform(self):
        loss, _ = cross_entropy_with_grad(np.zeros((3, 2)), [0, 1, 1])
        assert loss == pytest.approx(math.log(2))

    def test_saturated(self):
        loss, _ = cross_entropy_with_grad(np.array([[20.0, 0.0]]), [0])
        assert loss < 1e-8

    def test_hand_value(self):
        loss, _ = cross_entropy_with_grad(np.array([[1.0, 0.0]]), [0])
        assert loss == pytest.approx(math.log(1 + math.exp(-1)))
        assert loss == pytest.approx(0.3133, abs=5e-5)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        z = rng.normal(size=(3, 4))
        labels = [0, 3, 1]
        _, g = cross_entropy_with_grad(z, labels)
        h = 1e-6
        for idx in np.ndindex(z.shape):
            zp, zm = z.copy(), z.copy()
            zp[idx] += h
            zm[idx] -= h
            fd = (cross_entropy_with_grad(zp, labels)[0] - cross_entropy_with_grad(zm, labels)[0]) / (2 * h)
            assert g[idx] == pytest.approx(fd, abs=1e-8)

    def test_bad_label(self):
        with pytest.raises(DataError):
            cross_entropy_with_grad(np.zeros((1, 2)), [2])

import numpy as np
import pytest

import ckdsnn.tensor as T
from ckdsnn.spiking import (
    IFLayer,
    MembraneState,
    NeuronParams,
    SpikeTrain,
    heaviside_spike,
    if_backward_surrogate,
    if_step,
    initial_state,
    spiking_forward,
    surrogate_derivative,
)
from ckdsnn.tensor import Tensor


def scalar_reference_train(inputs, v_th, v_reset):
    """Independent step-by-step scalar simulator of the IF recurrence (float32)."""
    t_steps = inputs.shape[0]
    flat = inputs.reshape(t_steps, -1).astype(np.float32)
    out = np.zeros_like(flat)
    for j in range(flat.shape[1]):
        v = np.float32(v_reset)
        for t in range(t_steps):
            h = np.float32(v + flat[t, j])
            if h >= v_th:
                out[t, j] = 1.0
                v = np.float32(v_reset)
            else:
                out[t, j] = 0.0
                v = h
    return out.reshape(inputs.shape)


class TestParams:
    def test_defaults(self):
        p = NeuronParams()
        assert p.v_threshold == 1.0 and p.v_reset == 0.0 and p.surrogate_steepness == 4.0

    def test_invalid_threshold(self):
        with pytest.raises(ValueError):
            NeuronParams(v_threshold=0.0, v_reset=0.0)

    def test_invalid_steepness(self):
        with pytest.raises(ValueError):
            NeuronParams(surrogate_steepness=-1.0)


class TestIfStep:
    def test_below_threshold(self):
        p = NeuronParams()
        state = MembraneState(Tensor([0.0]))
        s, new = if_step(state, Tensor([0.5]), p)
        assert s.data[0] == 0.0 and new.v.data[0] == pytest.approx(0.5)

    def test_crossing_resets(self):
        p = NeuronParams()
        state = MembraneState(Tensor([0.6]))
        s, new = if_step(state, Tensor([0.5]), p)
        assert s.data[0] == 1.0 and new.v.data[0] == 0.0

    def test_constant_current_pattern(self):
        p = NeuronParams(v_threshold=1.0, v_reset=0.0)
        state = initial_state((1,), p)
        pattern = []
        for _ in range(5):
            s, state = if_step(state, Tensor([0.4]), p)
            pattern.append(int(s.data[0]))
        assert pattern == [0, 0, 1, 0, 0]

    def test_nonfinite_input_rejected(self):
        p = NeuronParams()
        state = MembraneState(Tensor([0.0]))
        with pytest.raises(FloatingPointError):
            if_step(state, Tensor(np.array([np.inf], dtype=np.float32)), p)

    def test_shape_mismatch_rejected(self):
        p = NeuronParams()
        with pytest.raises(ValueError):
            if_step(MembraneState(Tensor([0.0, 0.0])), Tensor([1.0]), p)


class TestSurrogate:
    def test_peak_at_threshold(self):
        p = NeuronParams(surrogate_steepness=4.0)
        d = surrogate_derivative(np.array([p.v_threshold]), p)
        assert d[0] == pytest.approx(1.0)  # k * 0.25

    def test_saturation(self):
        p = NeuronParams(surrogate_steepness=4.0)
        d = surrogate_derivative(np.array([p.v_threshold + 20.0, p.v_threshold - 20.0]), p)
        assert np.all(d < 1e-10)

    def test_strictly_positive_and_maximal_at_threshold(self):
        p = NeuronParams()
        h = np.linspace(-5, 5, 201)
        d = surrogate_derivative(h, p)
        assert np.all(d > 0)
        assert h[np.argmax(d)] == pytest.approx(p.v_threshold)

    def test_matches_finite_difference_of_sigmoid(self):
        p = NeuronParams(surrogate_steepness=4.0)
        k = p.surrogate_steepness
        rng = np.random.default_rng(5)
        x = rng.uniform(-2, 2, size=20)
        sig = lambda v: 1.0 / (1.0 + np.exp(-k * v))
        step = 1e-5
        fd = (sig(x + step) - sig(x - step)) / (2 * step)
        got = surrogate_derivative(x + p.v_threshold, p)
        assert np.allclose(got, fd, rtol=1e-3)

    def test_if_backward_surrogate_applies_chain(self):
        p = NeuronParams()
        g = np.array([2.0, 3.0])
        h = np.array([p.v_threshold, p.v_threshold])
        out = if_backward_surrogate(g, h, p)
        assert np.allclose(out, g * 1.0)
        with pytest.raises(ValueError):
            if_backward_surrogate(np.ones(3), h, p)


class TestSpikingForward:
    def test_all_zero_input(self):
        p = NeuronParams()
        train = spiking_forward(Tensor(np.zeros((4, 2, 2))), p)
        assert np.all(train.spikes.data == 0)

    def test_every_step_spikes_at_threshold_input(self):
        p = NeuronParams()
        train = spiking_forward(Tensor(np.ones((5, 3))), p)
        assert np.all(train.spikes.data == 1)

    def test_zero_steps_rejected(self):
        p = NeuronParams()
        with pytest.raises(ValueError):
            spiking_forward(Tensor(np.zeros((0, 2))), p)

    @pytest.mark.parametrize("case", range(100))
    def test_matches_scalar_oracle_bitwise(self, case):
        rng = np.random.default_rng(1000 + case)
        t_steps = int(rng.integers(1, 9))
        dims = tuple(rng.integers(1, 5, size=3))
        x = rng.normal(scale=0.8, size=(t_steps,) + dims).astype(np.float32)
        v_th = float(rng.uniform(0.5, 1.5))
        v_reset = float(rng.uniform(-0.3, 0.3))
        p = NeuronParams(v_threshold=v_th, v_reset=v_reset)
        got = spiking_forward(Tensor(x), p).spikes.data
        want = scalar_reference_train(x, v_th, v_reset)
        assert np.array_equal(got, want)

    def test_binary_output_and_reset_correctness(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(6, 4)).astype(np.float32)
        p = NeuronParams()
        state = initial_state((4,), p)
        for t in range(6):
            s, state = if_step(state, Tensor(x[t]), p)
            assert set(np.unique(s.data)).issubset({0.0, 1.0})
            spiked = s.data == 1.0
            assert np.all(state.v.data[spiked] == p.v_reset)

    def test_spike_train_type_validates_binary(self):
        with pytest.raises(ValueError):
            SpikeTrain(Tensor([[0.5]]), 1)

    def test_gradient_flows_near_threshold(self):
        p = NeuronParams()
        rng = np.random.default_rng(7)
        w = Tensor(rng.normal(scale=0.5, size=(3, 3)).astype(np.float32), requires_grad=True)
        x = Tensor(rng.uniform(0.2, 0.5, size=(2, 3)).astype(np.float32))
        drive = T.matmul(x, w)  # some H values land within +-1 of threshold
        stacked = T.concat([drive.reshape((1, 2, 3)), drive.reshape((1, 2, 3))], axis=0)
        train = spiking_forward(stacked, p)
        T.tsum(train.spikes).backward()
        assert w.grad is not None and np.any(w.grad != 0)


class TestIFLayer:
    def test_matches_spiking_forward(self):
        rng = np.random.default_rng(8)
        p = NeuronParams()
        t_steps, n = 3, 4
        x = rng.normal(size=(t_steps, n, 2)).astype(np.float32)
        layer = IFLayer(p)
        got = layer(Tensor(x.reshape(t_steps * n, 2)), t_steps)
        want = spiking_forward(Tensor(x), p).spikes.data.reshape(t_steps * n, 2)
        assert np.array_equal(got.data, want)

    def test_indivisible_batch_rejected(self):
        layer = IFLayer(NeuronParams())
        with pytest.raises(ValueError):
            layer(Tensor(np.zeros((5, 2))), 2)

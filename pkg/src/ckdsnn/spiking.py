"""Integrate-and-fire dynamics with a sigmoid surrogate gradient.

The forward pass is the exact hard-threshold recurrence

    H[t] = V[t-1] + I[t]
    S[t] = 1 if H[t] >= v_threshold else 0
    V[t] = H[t] * (1 - S[t]) + v_reset * S[t]

and only the backward pass replaces the Heaviside derivative with
k * sigmoid(k * (H - v_threshold)) * (1 - sigmoid(...)).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, _make, add, concat, mul, narrow, sub


@dataclass(frozen=True)
class NeuronParams:
    v_threshold: float = 1.0
    v_reset: float = 0.0
    surrogate_steepness: float = 4.0

    def __post_init__(self):
        if not self.v_threshold > self.v_reset:
            raise ValueError(f"v_threshold ({self.v_threshold}) must exceed v_reset ({self.v_reset})")
        if not self.surrogate_steepness > 0:
            raise ValueError(f"surrogate_steepness must be positive, got {self.surrogate_steepness}")


@dataclass
class MembraneState:
    v: Tensor


@dataclass
class SpikeTrain:
    """Binary record of spikes with the time axis leading."""

    spikes: Tensor
    time_steps: int

    def __post_init__(self):
        values = self.spikes.data
        if not np.all((values == 0) | (values == 1)):
            raise ValueError("spike train contains values other than 0 and 1")
        if self.spikes.shape[0] != self.time_steps:
            raise ValueError(
                f"leading axis {self.spikes.shape[0]} does not match time_steps {self.time_steps}"
            )


def surrogate_derivative(h: np.ndarray, params: NeuronParams) -> np.ndarray:
    """d(spike)/d(potential) under the sigmoid surrogate, evaluated at H."""
    k = params.surrogate_steepness
    sig = 1.0 / (1.0 + np.exp(-k * (h - params.v_threshold)))
    return k * sig * (1.0 - sig)


def heaviside_spike(h: Tensor, params: NeuronParams) -> Tensor:
    """Exact threshold forward; surrogate-sigmoid backward."""
    h_data = h.data

    def grad_fn(g):
        return (g * surrogate_derivative(h_data, params).astype(h_data.dtype),)

    spikes = (h_data >= params.v_threshold).astype(h_data.dtype)
    return _make(spikes, (h,), grad_fn, "heaviside_spike")


def if_backward_surrogate(grad_out: np.ndarray, h: np.ndarray, params: NeuronParams) -> np.ndarray:
    """Map an output gradient through the surrogate at recorded potentials H."""
    if grad_out.shape != h.shape:
        raise ValueError(f"shape mismatch {grad_out.shape} vs {h.shape}")
    return grad_out * surrogate_derivative(h, params)


def if_step(state: MembraneState, input_current: Tensor, params: NeuronParams):
    """One integrate-fire-reset update. Returns (spikes, new_state)."""
    if state.v.shape != input_current.shape:
        raise ValueError(f"state shape {state.v.shape} does not match input {input_current.shape}")
    h = add(state.v, input_current)
    s = heaviside_spike(h, params)
    v_new = add(mul(h, sub(1.0, s)), mul(s, params.v_reset))
    return s, MembraneState(v_new)


def initial_state(shape, params: NeuronParams, dtype=np.float32) -> MembraneState:
    return MembraneState(Tensor(np.full(shape, params.v_reset, dtype=dtype)))


def spiking_forward(block_input: Tensor, params: NeuronParams) -> SpikeTrain:
    """Run the IF recurrence over the leading time axis of [T, ...] input."""
    t_steps = block_input.shape[0]
    if t_steps < 1:
        raise ValueError("spiking_forward requires at least one time step")
    state = initial_state(block_input.shape[1:], params, dtype=block_input.dtype)
    outputs = []
    for t in range(t_steps):
        current = narrow(block_input, t, t + 1).reshape(block_input.shape[1:])
        s, state = if_step(state, current, params)
        outputs.append(s.reshape((1,) + s.shape))
    return SpikeTrain(concat(outputs, axis=0), t_steps)


class IFLayer:
    """Spiking activation over a time-stacked batch [T*N, ...].

    Membrane state is created fresh per call (no cross-sample carry) and
    evolves across the T slices of the leading axis.
    """

    def __init__(self, params: NeuronParams):
        self.params = params

    def __call__(self, x: Tensor, time_steps: int) -> Tensor:
        total = x.shape[0]
        if time_steps < 1 or total % time_steps:
            raise ValueError(f"batch axis {total} is not divisible by time_steps {time_steps}")
        n = total // time_steps
        state = initial_state((n,) + x.shape[1:], self.params, dtype=x.dtype)
        outputs = []
        for t in range(time_steps):
            s, state = if_step(state, narrow(x, t * n, (t + 1) * n), self.params)
            outputs.append(s)
        return concat(outputs, axis=0)

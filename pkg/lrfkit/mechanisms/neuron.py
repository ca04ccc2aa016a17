"""Leaky Integrate-and-Fire neuron dynamics and surrogate gradients."""
import dataclasses
import enum
from typing import Sequence, Tuple

import numpy as np

from lrfkit.data import tensor


@dataclasses.dataclass(frozen=True)
class LifParams:
    """Threshold, reset potential and decay factor of a LIF neuron."""
    v_th: float = 1.0
    v_reset: float = 0.0
    tau: float = 0.5

    def __post_init__(self):
        if not self.v_th > self.v_reset:
            raise ValueError(f'v_th ({self.v_th}) must be above v_reset ({self.v_reset}).')
        if not 0. < self.tau <= 1.:
            raise ValueError(f'tau must be in (0, 1], got {self.tau}.')


@dataclasses.dataclass(frozen=True)
class LifState:
    """Pre-synaptic membrane potential H, one value per element."""
    h: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.h, dtype=tensor.DTYPE)
        if not np.all(np.isfinite(h)):
            raise ValueError('membrane potential must be finite.')
        object.__setattr__(self, 'h', h)

    @classmethod
    def zeros(cls, shape) -> 'LifState':
        return cls(np.zeros(shape, dtype=tensor.DTYPE))


class SurrogateKind(enum.Enum):
    RECTANGULAR = 'rectangular'
    SIGMOID_DERIVATIVE = 'sigmoid-derivative'


@dataclasses.dataclass(frozen=True)
class SurrogateSpec:
    kind: SurrogateKind = SurrogateKind.SIGMOID_DERIVATIVE
    width: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, 'kind', SurrogateKind(self.kind))
        if not self.width > 0:
            raise ValueError(f'surrogate width must be positive, got {self.width}.')


def lif_step(state: LifState, inputs, params: LifParams) -> Tuple[np.ndarray, LifState]:
    """Advances the neuron by one timestep.

    U = H + input, S = Θ(U - v_th) with Θ(0) = 1, H' = v_reset·S + τ·U·(1 - S).
    """
    inputs = np.asarray(inputs, dtype=tensor.DTYPE)
    if inputs.shape != state.h.shape:
        raise ValueError(
            f'input shape {inputs.shape} does not match state shape {state.h.shape}.')
    u = state.h + inputs
    spikes = (u >= params.v_th).astype(tensor.DTYPE)
    h = params.v_reset * spikes + params.tau * u * (1. - spikes)
    return spikes, LifState(h)


def sn_layer(x, params: LifParams) -> tensor.SpikeTensor:
    """Runs LIF dynamics over the time axis of a (t, b, n, d) tensor from a zero state."""
    x = np.asarray(x, dtype=tensor.DTYPE)
    tensor.Shape4.of(x)
    state = LifState.zeros(x.shape[1:])
    spikes = np.empty_like(x)
    for t in range(x.shape[0]):
        spikes[t], state = lif_step(state, x[t], params)
    return tensor.SpikeTensor(spikes)


def lif_trace(inputs: Sequence[float], params: LifParams,
              h0: float = 0.) -> Tuple[np.ndarray, np.ndarray]:
    """Scalar reference simulation, returns (spikes, stored potential after every step)."""
    h = h0
    spikes, trace = [], []
    for value in inputs:
        u = h + value
        spike = 1. if u >= params.v_th else 0.
        h = params.v_reset * spike + params.tau * u * (1. - spike)
        spikes.append(spike)
        trace.append(h)
    return np.array(spikes), np.array(trace)


def surrogate_grad(u, params: LifParams, spec: SurrogateSpec):
    """Smooth stand-in for dΘ(u - v_th)/du. Works elementwise on arrays."""
    x = np.asarray(u, dtype=tensor.DTYPE) - params.v_th
    if spec.kind is SurrogateKind.RECTANGULAR:
        grad = np.where(np.abs(x) <= spec.width / 2, 1. / spec.width, 0.)
    else:
        sig = .5 * (1. + np.tanh(x / (2. * spec.width)))  # σ(x / width), overflow free
        grad = sig * (1. - sig) / spec.width
    return grad if np.ndim(grad) else float(grad)

"""LRF-Dyn: dendritic state-space recurrence, its impulse-response kernel and the FFT dual.

The dendritic machinery (transition, read-out and fan-in) is shared by all channels, only the
output gain Γ is per channel. This keeps the streaming state at k x d values.
"""
import dataclasses
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from lrfkit.data import tensor
from lrfkit.mechanisms import attention
from lrfkit.mechanisms import neuron


DEFAULT_DENDRITES = 8


def _vector(values, name: str, errors: list) -> np.ndarray:
    vec = np.asarray(values, dtype=tensor.DTYPE)
    if vec.ndim != 1:
        errors.append(f'{name} must be a vector, got shape {vec.shape}')
    elif not np.all(np.isfinite(vec)):
        errors.append(f'{name} has non-finite entries')
    return vec


@dataclasses.dataclass(frozen=True)
class DendriticParams:
    """Discrete dendritic dynamics s_n = M·s_{n-1} + γ ⊗ token_n, y_n = Γ ⊙ (Cᵀ s_n).

    `alpha_k` are the score-aggregation weights of the convolutional form, None means `c_read`.
    """
    m_trans: np.ndarray
    c_read: np.ndarray
    gamma_in: np.ndarray
    big_gamma: np.ndarray
    alpha_k: Optional[np.ndarray] = None

    def __post_init__(self):
        errors = []
        m_trans = np.asarray(self.m_trans, dtype=tensor.DTYPE)
        vectors = {name: _vector(getattr(self, name), name, errors)
                   for name in ('c_read', 'gamma_in', 'big_gamma')}
        if self.alpha_k is not None:
            vectors['alpha_k'] = _vector(self.alpha_k, 'alpha_k', errors)
        if m_trans.ndim != 2 or m_trans.shape[0] != m_trans.shape[1] or m_trans.shape[0] < 1:
            errors.append(f'm_trans must be a non-empty square matrix, got {m_trans.shape}')
        elif not np.all(np.isfinite(m_trans)):
            errors.append('m_trans has non-finite entries')
        else:
            k = m_trans.shape[0]
            for name in ('c_read', 'gamma_in', 'alpha_k'):
                if name in vectors and vectors[name].shape != (k,):
                    errors.append(f'{name} must have length {k}, got {vectors[name].shape}')
        if errors:
            raise ValueError(', '.join(errors))

        rho = float(np.max(np.abs(np.linalg.eigvals(m_trans))))
        if rho >= 1.:
            raise ValueError(f'm_trans must be stable, spectral radius is {rho:.6f}.')
        object.__setattr__(self, 'm_trans', m_trans)
        for name, vec in vectors.items():
            object.__setattr__(self, name, vec)

    @classmethod
    def tridiagonal(cls, taus: Sequence[float], upper: Sequence[float],
                    lower: Optional[Sequence[float]] = None,
                    c_read: Optional[Sequence[float]] = None,
                    gamma_in: Optional[Sequence[float]] = None,
                    big_gamma: Sequence[float] = (1.,),
                    alpha_k: Optional[Sequence[float]] = None) -> 'DendriticParams':
        """Explicit-Euler transition: diagonal 1 - 1/τ_i, β couplings on the off-diagonals.

        `lower` defaults to `upper`, read-out and fan-in default to all ones.
        """
        taus = np.asarray(taus, dtype=tensor.DTYPE)
        if np.any(taus <= 1.):
            raise ValueError(f'membrane constants must exceed 1, got {taus.tolist()}.')
        k = len(taus)
        upper = np.asarray(upper, dtype=tensor.DTYPE)
        lower = upper if lower is None else np.asarray(lower, dtype=tensor.DTYPE)
        if upper.shape != (k - 1,) or lower.shape != (k - 1,):
            raise ValueError(f'{k} dendrites need {k - 1} couplings per off-diagonal.')
        m_trans = np.diag(1. - 1. / taus) + np.diag(upper, 1) + np.diag(lower, -1)
        return cls(m_trans=m_trans,
                   c_read=np.ones(k) if c_read is None else c_read,
                   gamma_in=np.ones(k) if gamma_in is None else gamma_in,
                   big_gamma=big_gamma,
                   alpha_k=alpha_k)

    @classmethod
    def random(cls, d: int, rng: np.random.Generator,
               k: int = DEFAULT_DENDRITES) -> 'DendriticParams':
        # |diagonal| <= 0.875 and |couplings| <= 0.05, stable by Gershgorin.
        taus = rng.uniform(1.5, 8., size=k)
        couplings = rng.uniform(-.05, .05, size=(2, k - 1))
        return cls.tridiagonal(taus, couplings[0], couplings[1],
                               c_read=rng.normal(0., 1. / np.sqrt(k), size=k),
                               gamma_in=rng.uniform(.5, 1.5, size=k),
                               big_gamma=rng.uniform(.5, 1.5, size=d))

    @property
    def k(self) -> int:
        return self.m_trans.shape[0]

    @property
    def channels(self) -> int:
        return self.big_gamma.shape[0]

    @property
    def score_weights(self) -> np.ndarray:
        return self.c_read if self.alpha_k is None else self.alpha_k

    @property
    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.m_trans))))


@dataclasses.dataclass(frozen=True)
class DynState:
    """Dendritic membrane potentials, one column per channel."""
    s: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.s, dtype=tensor.DTYPE)
        if s.ndim < 2:
            raise ValueError(f'dendritic state must be (..., k, d), got {s.shape}.')
        if not np.all(np.isfinite(s)):
            raise ValueError('dendritic state must be finite.')
        object.__setattr__(self, 's', s)

    @classmethod
    def zeros(cls, params: DendriticParams, lead=()) -> 'DynState':
        return cls(np.zeros((*lead, params.k, params.channels), dtype=tensor.DTYPE))


@dataclasses.dataclass(frozen=True)
class DynKernel:
    """Impulse response κ_c[m], shaped (length, d)."""
    taps: np.ndarray

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=tensor.DTYPE)
        if taps.ndim != 2 or taps.shape[0] < 1:
            raise ValueError(f'kernel taps must be (length, d), got {taps.shape}.')
        object.__setattr__(self, 'taps', taps)

    @property
    def length(self) -> int:
        return self.taps.shape[0]

    def within_envelope(self, rho: float, slack: float = 1e-2) -> bool:
        """Whether the late taps stay under the C·(ρ + slack)^m envelope set by the early ones."""
        if self.length < 2:
            return True
        base = min(rho + slack, 1.)
        peak = np.abs(self.taps).max(axis=-1)
        with np.errstate(divide='ignore'):
            log_ratio = np.log(peak) - np.arange(self.length) * np.log(base)
        half = self.length // 2
        return bool(log_ratio[half:].max() <= log_ratio[:half].max() + 1e-9)


def _check_tokens(tokens, params: DendriticParams) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=tensor.DTYPE)
    if tokens.ndim < 2:
        raise ValueError(f'tokens must be shaped (..., n, d), got {tokens.shape}.')
    if tokens.shape[-1] != params.channels:
        raise ValueError(
            f'tokens have {tokens.shape[-1]} channels, Γ has {params.channels}.')
    return tokens


def dyn_step(state: DynState, token, params: DendriticParams):
    """One recurrence step, returns (y_n, new state)."""
    token = np.asarray(token, dtype=tensor.DTYPE)
    s = params.m_trans @ state.s + params.gamma_in[:, None] * token[..., None, :]
    y = params.big_gamma * np.einsum('k,...kd->...d', params.c_read, s)
    return y, DynState(s)


def dyn_scan(tokens, params: DendriticParams) -> np.ndarray:
    """Sequential causal scan over the token axis of a (..., n, d) array."""
    tokens = _check_tokens(tokens, params)
    state = DynState.zeros(params, tokens.shape[:-2])
    out = np.empty_like(tokens)
    for n in range(tokens.shape[-2]):
        out[..., n, :], state = dyn_step(state, tokens[..., n, :], params)
    return out


def _impulse_response(params: DendriticParams, length: int, readout: np.ndarray) -> np.ndarray:
    if length < 1:
        raise ValueError(f'kernel length must be positive, got {length}.')
    row = readout.copy()
    scalar_taps = np.empty(length, dtype=tensor.DTYPE)
    for m in range(length):
        scalar_taps[m] = row @ params.gamma_in
        row = row @ params.m_trans
    return np.outer(scalar_taps, params.big_gamma)


def dyn_kernel(params: DendriticParams, length: int) -> DynKernel:
    """κ_c[m] = Γ[c]·Cᵀ M^m γ for m in [0, length), by iterated vector-matrix products."""
    return DynKernel(_impulse_response(params, length, params.c_read))


def _fft_size(n: int) -> int:
    return 1 << (2 * n - 1).bit_length()


def _causal_convolve(tokens: np.ndarray, taps: np.ndarray) -> np.ndarray:
    n = tokens.shape[-2]
    size = _fft_size(n)
    spectrum = np.fft.rfft(tokens, n=size, axis=-2) * np.fft.rfft(taps[:n], n=size, axis=0)
    return np.fft.irfft(spectrum, n=size, axis=-2)[..., :n, :]


def dyn_fft(tokens, params: DendriticParams) -> np.ndarray:
    """Per-channel causal convolution with the dyn kernel, zero padded to nextpow2(2n)."""
    tokens = _check_tokens(tokens, params)
    kernel = dyn_kernel(params, tokens.shape[-2])
    return _causal_convolve(tokens, kernel.taps)


def dyn_score(tokens, params: DendriticParams) -> np.ndarray:
    """Convolutional form aggregated with α_k instead of the read-out weights."""
    tokens = _check_tokens(tokens, params)
    taps = _impulse_response(params, tokens.shape[-2], params.score_weights)
    return _causal_convolve(tokens, taps)


def lrf_dyn(tokens, grid: tensor.TokenGrid, params: DendriticParams, cfg: attention.LrfConfig,
            lif: neuron.LifParams = neuron.LifParams(),
            use_fft: bool = False) -> attention.AttentionOutput:
    """SN{h + local term of h} where h is the dendritic scan of the raster-ordered tokens."""
    tokens = np.asarray(tokens, dtype=tensor.DTYPE)
    tensor.Shape4.of(tokens).check_grid(grid)
    h = dyn_fft(tokens, params) if use_fft else dyn_scan(tokens, params)
    return attention.AttentionOutput.from_pre_sn(h + attention.lrf_local_term(h, grid, cfg), lif)


def export_kernel_frame(params: DendriticParams, length: int) -> pd.DataFrame:
    """Long-format (m, channel, tap_value) table of the kernel taps."""
    taps = dyn_kernel(params, length).taps
    m, channel = np.meshgrid(np.arange(length), np.arange(params.channels), indexing='ij')
    return pd.DataFrame({
        'm': m.ravel(),
        'channel': channel.ravel(),
        'tap_value': taps.ravel(),
    })

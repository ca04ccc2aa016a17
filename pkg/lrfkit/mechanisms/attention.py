"""Spiking attention mechanisms: VSA reference, SSA and SSA with local receptive fields.

All functions work on arrays shaped (..., n, d); leading axes (typically time and batch) are
independent slices. Global terms use the scale `s`, local terms use the depth-wise kernels `r`.
"""
import dataclasses
from typing import List, Optional, Sequence, Tuple

import numpy as np

from lrfkit.data import tensor
from lrfkit.mechanisms import neuron


DEFAULT_DILATIONS = (3, 5)
# Dilation sets matching the kernel-count ablation (no LRF, Ω <= 1, Ω <= 3, Ω <= 5).
ABLATION_DILATIONS = {
    'none': (),
    'omega1': (1,),
    'omega3': (1, 3),
    'omega5': (1, 3, 5),
}
_KERNEL_TAPS = tuple((i, j) for i in (-1, 0, 1) for j in (-1, 0, 1))


@dataclasses.dataclass(frozen=True)
class QkvProjection:
    """Per-token linear projections (1x1 convolutions) followed by SN."""
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    lif: neuron.LifParams = neuron.LifParams()

    def __post_init__(self):
        shapes = {np.shape(self.w_q), np.shape(self.w_k), np.shape(self.w_v)}
        if len(shapes) != 1 or len(next(iter(shapes))) != 2:
            raise ValueError(f'projection matrices must share a 2-D shape, got {shapes}.')

    @classmethod
    def random(cls, d_in: int, d: int, rng: np.random.Generator,
               lif: neuron.LifParams = neuron.LifParams()) -> 'QkvProjection':
        scale = 2. / np.sqrt(d_in)
        w_q, w_k, w_v = (rng.normal(0., scale, size=(d_in, d)) for _ in range(3))
        return cls(w_q=w_q, w_k=w_k, w_v=w_v, lif=lif)

    @property
    def d_in(self) -> int:
        return np.shape(self.w_q)[0]


@dataclasses.dataclass(frozen=True)
class LrfConfig:
    """Depth-wise dilated 3x3 kernels of the local receptive field term.

    `weights[m, i, j, c]` is r^d_ij for dilation `dilations[m]`, kernel offset
    ((i - 1)·d, (j - 1)·d) and channel c. The center tap is part of every kernel.
    `scale` is the global-term factor s, None means 1/sqrt(d).
    """
    dilations: Tuple[int, ...]
    weights: np.ndarray
    scale: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, 'dilations', tuple(int(d) for d in self.dilations))
        weights = np.asarray(self.weights, dtype=tensor.DTYPE)
        object.__setattr__(self, 'weights', weights)
        errors = []
        if len(set(self.dilations)) != len(self.dilations):
            errors.append(f'dilations must be unique, got {self.dilations}')
        if any(d < 1 for d in self.dilations):
            errors.append(f'dilations must be positive, got {self.dilations}')
        if weights.ndim != 4 or weights.shape[:3] != (len(self.dilations), 3, 3):
            errors.append(f'weights must be shaped ({len(self.dilations)}, 3, 3, d), '
                          f'got {weights.shape}')
        if self.scale is not None and not self.scale > 0:
            errors.append(f'scale must be positive, got {self.scale}')
        if errors:
            raise ValueError(', '.join(errors))

    @classmethod
    def zeros(cls, d: int, dilations: Sequence[int] = DEFAULT_DILATIONS,
              scale: Optional[float] = None) -> 'LrfConfig':
        return cls(tuple(dilations), np.zeros((len(dilations), 3, 3, d)), scale)

    @classmethod
    def constant(cls, d: int, value: float, dilations: Sequence[int] = DEFAULT_DILATIONS,
                 scale: Optional[float] = None) -> 'LrfConfig':
        return cls(tuple(dilations), np.full((len(dilations), 3, 3, d), value), scale)

    @classmethod
    def random(cls, d: int, rng: np.random.Generator,
               dilations: Sequence[int] = DEFAULT_DILATIONS,
               low: float = 0., high: float = 1.,
               scale: Optional[float] = None) -> 'LrfConfig':
        return cls(tuple(dilations), rng.uniform(low, high, size=(len(dilations), 3, 3, d)),
                   scale)

    @property
    def channels(self) -> int:
        return self.weights.shape[-1]

    @property
    def max_dilation(self) -> int:
        return max(self.dilations, default=0)

    def scale_for(self, d: int) -> float:
        return self.scale if self.scale is not None else 1. / np.sqrt(d)

    def offsets(self) -> List[tensor.Offset]:
        """Grid offsets of every tap, ordered as `flat_weights()` rows."""
        return [(i * d, j * d) for d in self.dilations for i, j in _KERNEL_TAPS]

    def flat_weights(self) -> np.ndarray:
        return self.weights.reshape(len(self.dilations) * 9, -1)

    def with_weights(self, weights) -> 'LrfConfig':
        return dataclasses.replace(self, weights=weights)


@dataclasses.dataclass(frozen=True)
class AttentionOutput:
    pre_sn: tensor.DenseTensor
    spikes: tensor.SpikeTensor

    @classmethod
    def from_pre_sn(cls, pre_sn, lif: neuron.LifParams) -> 'AttentionOutput':
        pre_sn = tensor.DenseTensor(pre_sn)
        return cls(pre_sn=pre_sn, spikes=neuron.sn_layer(pre_sn, lif))


def _as_slices(*arrays):
    arrays = [np.asarray(a, dtype=tensor.DTYPE) for a in arrays]
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1 or arrays[0].ndim < 2:
        raise ValueError(f'Q, K and V must share a (..., n, d) shape, got {shapes}.')
    return arrays


def project_qkv(x, proj: QkvProjection
                ) -> Tuple[tensor.SpikeTensor, tensor.SpikeTensor, tensor.SpikeTensor]:
    """Q, K, V = SN(x · W) for the three projection matrices."""
    x = np.asarray(x, dtype=tensor.DTYPE)
    tensor.Shape4.of(x)
    if x.shape[-1] != proj.d_in:
        raise ValueError(f'input has {x.shape[-1]} channels, projection expects {proj.d_in}.')
    return tuple(neuron.sn_layer(x @ w, proj.lif) for w in (proj.w_q, proj.w_k, proj.w_v))


def vsa_scores(q, k, scale: Optional[float] = None) -> np.ndarray:
    """Row-stochastic softmax(scale · QKᵀ), scale defaults to 1/sqrt(d)."""
    q, k = _as_slices(q, k)
    scale = 1. / np.sqrt(q.shape[-1]) if scale is None else scale
    logits = scale * np.einsum('...nc,...mc->...nm', q, k)
    logits -= logits.max(axis=-1, keepdims=True)
    weights = np.exp(logits)
    return weights / weights.sum(axis=-1, keepdims=True)


def vsa(q, k, v, scale: Optional[float] = None) -> np.ndarray:
    q, k, v = _as_slices(q, k, v)
    return vsa_scores(q, k, scale) @ v


def ssa_scores(q, k, s: float) -> np.ndarray:
    q, k = _as_slices(q, k)
    return s * np.einsum('...nc,...mc->...nm', q, k)


def ssa_quadratic(q, k, v, s: float) -> np.ndarray:
    """s · (QKᵀ)V through the explicit N x N score matrix."""
    q, k, v = _as_slices(q, k, v)
    return ssa_scores(q, k, s) @ v


def ssa_linear(q, k, v, s: float) -> np.ndarray:
    """s · Q(KᵀV) through the d x d aggregate Σ_j k_jᵀ v_j."""
    q, k, v = _as_slices(q, k, v)
    kv = np.einsum('...nc,...ne->...ce', k, v)
    return s * (q @ kv)


def ssa_causal(q, k, v, s: float) -> np.ndarray:
    """Token-by-token causal SSA: y_n = s · q_n (Σ_{j<=n} k_jᵀ v_j).

    The accumulator is updated with k_nᵀ v_n before it is read by q_n.
    """
    q, k, v = _as_slices(q, k, v)
    *lead, n_tokens, d = q.shape
    acc = np.zeros((*lead, d, d), dtype=tensor.DTYPE)
    out = np.empty_like(q)
    for n in range(n_tokens):
        acc += k[..., n, :, None] * v[..., n, None, :]
        out[..., n, :] = s * np.einsum('...c,...ce->...e', q[..., n, :], acc)
    return out


def lrf_local_term(v, grid: tensor.TokenGrid, cfg: LrfConfig) -> np.ndarray:
    """Σ_d Σ_{(i,j) in Ω_d} r^d_ij[c] · V[ρ(n, i, j), c] with zero padding outside the grid."""
    v = np.asarray(v, dtype=tensor.DTYPE)
    if v.shape[-2] != grid.num_tokens:
        raise ValueError(
            f'grid {grid.rows}x{grid.cols} does not match {v.shape[-2]} tokens.')
    if not cfg.dilations:
        return np.zeros_like(v)
    if cfg.channels != v.shape[-1]:
        raise ValueError(f'kernels have {cfg.channels} channels, values have {v.shape[-1]}.')
    table = grid.neighbor_table(cfg.offsets())
    # Index -1 picks the appended zero row.
    padded = np.concatenate([v, np.zeros_like(v[..., :1, :])], axis=-2)
    gathered = padded[..., table, :]
    return np.einsum('...ntc,tc->...nc', gathered, cfg.flat_weights())


def lrf_ssa(q, k, v, grid: tensor.TokenGrid, cfg: LrfConfig,
            lif: neuron.LifParams = neuron.LifParams()) -> AttentionOutput:
    """SN{s · Q(KᵀV) + local term of V}."""
    q, k, v = _as_slices(q, k, v)
    pre_sn = ssa_linear(q, k, v, cfg.scale_for(q.shape[-1])) + lrf_local_term(v, grid, cfg)
    return AttentionOutput.from_pre_sn(pre_sn, lif)


def lrf_ssa_causal(q, k, v, grid: tensor.TokenGrid, cfg: LrfConfig) -> np.ndarray:
    """Raster-order streaming form: causal global part plus the (non-causal) local term."""
    q, k, v = _as_slices(q, k, v)
    return ssa_causal(q, k, v, cfg.scale_for(q.shape[-1])) + lrf_local_term(v, grid, cfg)


def local_pair_weights(grid: tensor.TokenGrid, cfg: LrfConfig) -> np.ndarray:
    """(N, N, d) local kernel mapped on token pairs: L[n, j, c] = Σ of r over taps n -> j."""
    pairs = np.zeros((grid.num_tokens, grid.num_tokens, cfg.channels), dtype=tensor.DTYPE)
    if not cfg.dilations:
        return pairs
    table = grid.neighbor_table(cfg.offsets())
    rows, taps = np.nonzero(table >= 0)
    np.add.at(pairs, (rows, table[rows, taps]), cfg.flat_weights()[taps])
    return pairs


def effective_scores(q, k, v, grid: tensor.TokenGrid, cfg: LrfConfig) -> np.ndarray:
    """Absolute contribution of every source token to every output token of one (n, d) slice.

    C[n, j] = Σ_c |(s · q_n·k_j + L[n, j, c]) · v_j[c]|. With zero kernels this is the plain
    SSA contribution matrix.
    """
    q, k, v = _as_slices(q, k, v)
    if q.ndim != 2:
        raise ValueError(f'effective scores work on a single (n, d) slice, got {q.shape}.')
    global_scores = ssa_scores(q, k, cfg.scale_for(q.shape[-1]))
    per_channel = global_scores[:, :, None] + local_pair_weights(grid, cfg)
    return np.abs(per_channel * v[None, :, :]).sum(axis=-1)

"""Receptive radius and entropy analysis of attention distributions.

Model-based functions follow the 1-D convention (one position per distance Δ = 0..N-1).
`measure_attention` works on real score matrices and uses the true grid multiplicities.
"""
import dataclasses
import enum
import itertools as it
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from lrfkit.data import tensor
from lrfkit.mechanisms import attention


DEFAULT_VSA_BETA = float(np.log(3.))  # μ∞ = 0.5

THEOREM_BETAS = (0.005, 0.01, 0.05, 0.1)
THEOREM_NS = (32, 100, 256)
THEOREM_LAMBDAS = (0.1, 0.5, 0.9)
THEOREM_RADII = (1, 2, 4)

_IDENTITY_TOLERANCE = 1e-12


class ModelKind(enum.Enum):
    VSA = 'vsa'
    SSA = 'ssa'


class LimitKind(enum.Enum):
    VSA_INF = 'vsa_inf'
    SSA_INF = 'ssa_inf'


@dataclasses.dataclass(frozen=True)
class DistanceModel:
    """Linear-decay similarity q_iᵀk_j ≈ α - βΔ over a sequence of length n.

    `vsa_beta` is the per-unit-distance decay of the softmax logits. None means `beta` for
    `model_weights` and `DEFAULT_VSA_BETA` for `check_theorem1`.
    """
    alpha: float
    beta: float
    n: int
    vsa_beta: Optional[float] = None

    def __post_init__(self):
        errors = []
        if not self.alpha > 0:
            errors.append(f'alpha must be positive, got {self.alpha}')
        if not self.beta >= 0:
            errors.append(f'beta must be non-negative, got {self.beta}')
        if self.vsa_beta is not None and not self.vsa_beta >= 0:
            errors.append(f'vsa_beta must be non-negative, got {self.vsa_beta}')
        if self.n < 1:
            errors.append(f'n must be positive, got {self.n}')
        if errors:
            raise ValueError(', '.join(errors))

    @property
    def softmax_beta(self) -> float:
        return self.beta if self.vsa_beta is None else self.vsa_beta

    @property
    def ssa_non_negative(self) -> bool:
        """Whether α - βΔ >= 0 on the whole support."""
        return self.n == 1 or self.beta <= self.alpha / (self.n - 1)

    @property
    def distances(self) -> np.ndarray:
        return np.arange(self.n, dtype=tensor.DTYPE)


@dataclasses.dataclass(frozen=True)
class AttentionStats:
    """Distance histogram (mass per Manhattan distance), expected radius and entropy in nats."""
    histogram: np.ndarray
    mu: float
    entropy: float

    def __post_init__(self):
        histogram = np.asarray(self.histogram, dtype=tensor.DTYPE)
        errors = []
        if histogram.ndim != 1 or np.any(histogram < 0):
            errors.append('histogram must be a non-negative vector')
        elif abs(histogram.sum() - 1.) > 1e-9:
            errors.append(f'histogram must sum to 1, got {histogram.sum()}')
        if self.mu < 0 or self.entropy < -1e-12:
            errors.append(f'mu and entropy must be non-negative, got {self.mu}, {self.entropy}')
        if errors:
            raise ValueError(', '.join(errors))
        object.__setattr__(self, 'histogram', histogram)

    def mass_within(self, radius: int) -> float:
        return float(self.histogram[:radius + 1].sum())

    def histogram_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'distance': np.arange(len(self.histogram)),
                             'mean_weight': self.histogram})


def normalize(weights) -> np.ndarray:
    weights = np.asarray(weights, dtype=tensor.DTYPE)
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ValueError('weights must be finite and non-negative.')
    total = weights.sum()
    if not total > 0:
        raise ValueError('weights sum to zero, the distribution is undefined.')
    return weights / total


def receptive_radius(weights, distances) -> float:
    """Expected distance under the normalized weights."""
    weights = np.asarray(weights, dtype=tensor.DTYPE)
    distances = np.asarray(distances, dtype=tensor.DTYPE)
    if weights.shape != distances.shape:
        raise ValueError(f'weights {weights.shape} and distances {distances.shape} differ.')
    return float(normalize(weights) @ distances)


def entropy(weights) -> float:
    """Shannon entropy in nats, with 0·log 0 = 0."""
    p = normalize(weights)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def binary_entropy(p: float) -> float:
    if not 0. <= p <= 1.:
        raise ValueError(f'probability must be in [0, 1], got {p}.')
    if p in (0., 1.):
        return 0.
    return float(-p * np.log(p) - (1. - p) * np.log1p(-p))


def model_weights(model: DistanceModel, kind) -> np.ndarray:
    """Unnormalized weight per distance: exp(-βΔ) for VSA, (α - βΔ)_+ for SSA."""
    kind = ModelKind(kind)
    if kind is ModelKind.VSA:
        return np.exp(-model.softmax_beta * model.distances)
    return np.maximum(model.alpha - model.beta * model.distances, 0.)


def local_uniform_weights(n: int, radius: int) -> np.ndarray:
    """Uniform distribution over Δ = 0..radius (clipped to the support of length n)."""
    if radius < 0 or n < 1:
        raise ValueError(f'need n >= 1 and radius >= 0, got n={n}, radius={radius}.')
    weights = np.zeros(n, dtype=tensor.DTYPE)
    weights[:radius + 1] = 1.
    return weights / weights.sum()


def _check_distribution(p: np.ndarray, name: str):
    if np.any(p < 0) or abs(p.sum() - 1.) > 1e-9:
        raise ValueError(f'{name} must be a normalized distribution.')


def lrf_mix(ssa_weights, local_weights, lam: float) -> np.ndarray:
    """(1 - λ)·p_ssa + λ·r."""
    if not 0. <= lam <= 1.:
        raise ValueError(f'lambda must be in [0, 1], got {lam}.')
    p = np.asarray(ssa_weights, dtype=tensor.DTYPE)
    r = np.asarray(local_weights, dtype=tensor.DTYPE)
    if p.shape != r.shape:
        raise ValueError(f'supports differ: {p.shape} vs {r.shape}.')
    _check_distribution(p, 'ssa_weights')
    _check_distribution(r, 'local_weights')
    return (1. - lam) * p + lam * r


def closed_form_mu(model: DistanceModel, kind) -> float:
    kind = LimitKind(kind)
    if kind is LimitKind.VSA_INF:
        beta = model.softmax_beta
        if not beta > 0:
            raise ValueError('the VSA radius diverges for beta = 0.')
        r = np.exp(-beta)
        return float(r / (1. - r))
    if not model.ssa_non_negative:
        raise ValueError(
            f'beta={model.beta} exceeds alpha/(n-1), the SSA weights are clipped.')
    n, a, b = model.n, model.alpha, model.beta
    return float((n - 1) * (3. * a - b * (2. * n - 1.)) / (3. * (2. * a - b * (n - 1.))))


def closed_form_entropy_vsa(model: DistanceModel, infinite: bool = False) -> float:
    r = float(np.exp(-model.softmax_beta))
    if not 0. < r < 1.:
        raise ValueError(f'decay ratio must be in (0, 1), got {r}.')
    if infinite:
        return float(-np.log1p(-r) - r / (1. - r) * np.log(r))
    n = model.n
    r_n = r ** n
    tail = (1. - n * r ** (n - 1) + (n - 1) * r_n) / (1. - r_n)
    return float(np.log((1. - r_n) / (1. - r)) - r / (1. - r) * tail * np.log(r))


def closed_form_entropy_ssa(model: DistanceModel) -> float:
    """Entropy of the (α - βΔ) distribution through its normaliser S_0 = αN - βN(N-1)/2."""
    if not model.ssa_non_negative:
        raise ValueError(
            f'beta={model.beta} exceeds alpha/(n-1), the SSA weights are clipped.')
    n, a, b = model.n, model.alpha, model.beta
    s0 = a * n - b * n * (n - 1) / 2.
    w = a - b * model.distances
    w = w[w > 0]
    return float(-((w / s0) * (np.log(w) - np.log(s0))).sum())


def series_mu_vsa(beta: float, truncation: int = 10**6) -> float:
    """Σ Δ·r^Δ·(1 - r) truncated at Δ = truncation."""
    delta = np.arange(truncation + 1, dtype=tensor.DTYPE)
    r = np.exp(-beta)
    return float((delta * np.exp(-beta * delta) * (1. - r)).sum())


def series_entropy_vsa(beta: float, truncation: int = 10**6) -> float:
    """Entropy of the geometric distribution r^Δ·(1 - r) truncated at Δ = truncation."""
    delta = np.arange(truncation + 1, dtype=tensor.DTYPE)
    log_p = -beta * delta + np.log1p(-np.exp(-beta))
    p = np.exp(log_p)
    return float(-(p * log_p).sum())


@dataclasses.dataclass(frozen=True)
class Theorem1Report:
    """Radius ordering μ_vsa <= μ_lrf <= μ_ssa for one (model, λ, local radius) point."""
    mu_vsa: float
    mu_ssa: float
    mu_local: float
    mu_lrf: float
    identity_residual: float
    assumption_holds: bool
    vsa_below_lrf: bool
    lrf_below_ssa: bool

    @property
    def status(self) -> str:
        if not self.assumption_holds:
            return 'assumption violated'
        ordered = self.vsa_below_lrf and self.lrf_below_ssa
        return 'pass' if ordered and self.identity_residual <= _IDENTITY_TOLERANCE else 'fail'


def check_theorem1(model: DistanceModel, lam: float, local_radius: int) -> Theorem1Report:
    """Radius ordering of one grid point.

    A model without `vsa_beta` is compared against softmax logits decaying by
    `DEFAULT_VSA_BETA` per unit distance.
    """
    distances = model.distances
    if model.vsa_beta is None:
        model = dataclasses.replace(model, vsa_beta=DEFAULT_VSA_BETA)
    p_vsa = normalize(model_weights(model, ModelKind.VSA))
    p_ssa = normalize(model_weights(model, ModelKind.SSA))
    local = local_uniform_weights(model.n, local_radius)

    mu_vsa = receptive_radius(p_vsa, distances)
    mu_ssa = receptive_radius(p_ssa, distances)
    mu_local = receptive_radius(local, distances)
    mu_lrf = (1. - lam) * mu_ssa + lam * mu_local
    mixed = receptive_radius(lrf_mix(p_ssa, local, lam), distances)
    return Theorem1Report(
        mu_vsa=mu_vsa,
        mu_ssa=mu_ssa,
        mu_local=mu_local,
        mu_lrf=mu_lrf,
        identity_residual=abs(mixed - mu_lrf),
        assumption_holds=mu_local <= mu_ssa,
        vsa_below_lrf=mu_vsa <= mu_lrf,
        lrf_below_ssa=mu_lrf <= mu_ssa,
    )


@dataclasses.dataclass(frozen=True)
class Theorem2Report:
    """Entropy of the mixed distribution against its chain-rule bound and against SSA.

    `ordering_holds` is None when the premise H(R) <= H(ssa) - h(λ)/λ does not hold, in which
    case only the bound is asserted.
    """
    entropy_lrf: float
    entropy_ssa: float
    entropy_local: float
    bound: float
    bound_holds: bool
    premise_holds: bool
    ordering_holds: Optional[bool]

    @property
    def status(self) -> str:
        if not self.bound_holds or self.ordering_holds is False:
            return 'fail'
        return 'pass' if self.premise_holds else 'bound only'


def check_theorem2(model: DistanceModel, lam: float, local_weights) -> Theorem2Report:
    p_ssa = normalize(model_weights(model, ModelKind.SSA))
    local = np.asarray(local_weights, dtype=tensor.DTYPE)
    mixed = lrf_mix(p_ssa, local, lam)

    h_lrf, h_ssa, h_local = entropy(mixed), entropy(p_ssa), entropy(local)
    h_lam = binary_entropy(lam)
    bound = h_lam + (1. - lam) * h_ssa + lam * h_local
    premise = lam == 0. or h_local <= h_ssa - h_lam / lam
    return Theorem2Report(
        entropy_lrf=h_lrf,
        entropy_ssa=h_ssa,
        entropy_local=h_local,
        bound=bound,
        bound_holds=h_lrf <= bound + _IDENTITY_TOLERANCE,
        premise_holds=premise,
        ordering_holds=(h_lrf <= h_ssa + _IDENTITY_TOLERANCE) if premise else None,
    )


def theorem1_grid(alpha: float = 1., betas: Sequence[float] = THEOREM_BETAS,
                  ns: Sequence[int] = THEOREM_NS, lambdas: Sequence[float] = THEOREM_LAMBDAS,
                  radii: Sequence[int] = THEOREM_RADII,
                  vsa_beta: Optional[float] = None) -> pd.DataFrame:
    rows = []
    for beta, n, lam, radius in it.product(betas, ns, lambdas, radii):
        report = check_theorem1(DistanceModel(alpha, beta, n, vsa_beta), lam, radius)
        rows.append({'beta': beta, 'n': n, 'lambda': lam, 'radius': radius,
                     **dataclasses.asdict(report), 'status': report.status})
    return pd.DataFrame(rows)


def theorem2_grid(alpha: float = 1., betas: Sequence[float] = THEOREM_BETAS,
                  ns: Sequence[int] = THEOREM_NS, lambdas: Sequence[float] = THEOREM_LAMBDAS,
                  radii: Sequence[int] = THEOREM_RADII) -> pd.DataFrame:
    rows = []
    for beta, n, lam, radius in it.product(betas, ns, lambdas, radii):
        report = check_theorem2(DistanceModel(alpha, beta, n), lam,
                                local_uniform_weights(n, radius))
        rows.append({'beta': beta, 'n': n, 'lambda': lam, 'radius': radius,
                     **dataclasses.asdict(report), 'status': report.status})
    return pd.DataFrame(rows)


def vsa_entropy_residuals(ns: Sequence[int] = tuple(range(2, 201)),
                          ratios: Sequence[float] = (.1, .3, .5, .7, .9)) -> pd.DataFrame:
    """|closed form - numeric entropy of the model weights| for finite VSA distributions."""
    rows = []
    for n, r in it.product(ns, ratios):
        model = DistanceModel(alpha=1., beta=-np.log(r), n=n)
        numeric = entropy(model_weights(model, ModelKind.VSA))
        rows.append({'n': n, 'r': r,
                     'residual': abs(closed_form_entropy_vsa(model) - numeric)})
    return pd.DataFrame(rows)


def distribution_stats(weights) -> AttentionStats:
    """Stats of a 1-D distribution over Δ = 0..len(weights)-1."""
    p = normalize(weights)
    return AttentionStats(histogram=p, mu=receptive_radius(p, np.arange(len(p))),
                          entropy=entropy(p))


def measure_attention(scores, grid: tensor.TokenGrid) -> AttentionStats:
    """Row-normalized distance histogram, μ and mean row entropy of an (n, n) score matrix.

    All-zero rows are left out of the averages.
    """
    scores = np.asarray(scores, dtype=tensor.DTYPE)
    n = grid.num_tokens
    if scores.shape != (n, n):
        raise ValueError(f'scores must be ({n}, {n}) for the grid, got {scores.shape}.')
    if np.any(scores < 0) or not np.all(np.isfinite(scores)):
        raise ValueError('scores must be finite and non-negative.')
    totals = scores.sum(axis=-1)
    live = totals > 0
    if not np.any(live):
        raise ValueError('every score row is zero.')
    p = scores[live] / totals[live, None]
    distances = grid.distance_matrix()[live]

    histogram = np.zeros(grid.rows + grid.cols - 1, dtype=tensor.DTYPE)
    np.add.at(histogram, distances.ravel(), p.ravel())
    histogram /= p.shape[0]
    with np.errstate(divide='ignore', invalid='ignore'):
        row_entropy = -np.where(p > 0, p * np.log(p), 0.).sum(axis=-1)
    return AttentionStats(histogram=histogram,
                          mu=float((p * distances).sum(axis=-1).mean()),
                          entropy=float(row_entropy.mean()))


def mass_within(scores, grid: tensor.TokenGrid, radius: int) -> float:
    """Average fraction of row-normalized mass at Manhattan distance <= radius."""
    return measure_attention(scores, grid).mass_within(radius)


def _random_spikes(rng: np.random.Generator, shape, rate: float = .5) -> np.ndarray:
    return (rng.random(shape) < rate).astype(tensor.DTYPE)


def sample_mechanism_scores(mechanism: str, grid: tensor.TokenGrid, d: int,
                            rng: np.random.Generator) -> np.ndarray:
    """Score matrix of one mechanism on random binary Q, K, V (non-negative kernels for LRF)."""
    q, k, v = (_random_spikes(rng, (grid.num_tokens, d)) for _ in range(3))
    if mechanism == 'vsa':
        return attention.vsa_scores(q, k)
    if mechanism == 'ssa':
        return attention.effective_scores(q, k, v, grid, attention.LrfConfig.zeros(d))
    if mechanism == 'lrf-ssa':
        return attention.effective_scores(q, k, v, grid, attention.LrfConfig.random(d, rng))
    raise ValueError(f'Unknown mechanism `{mechanism}`. Options: vsa, ssa, lrf-ssa.')


def sampled_stats(mechanism: str, grid: tensor.TokenGrid, d: int, samples: int,
                  seed: int) -> AttentionStats:
    """Mechanism statistics averaged over `samples` random inputs."""
    if samples < 1:
        raise ValueError(f'samples must be positive, got {samples}.')
    rng = np.random.default_rng(seed)
    stats = [measure_attention(sample_mechanism_scores(mechanism, grid, d, rng), grid)
             for _ in range(samples)]
    return AttentionStats(histogram=np.mean([s.histogram for s in stats], axis=0),
                          mu=float(np.mean([s.mu for s in stats])),
                          entropy=float(np.mean([s.entropy for s in stats])))

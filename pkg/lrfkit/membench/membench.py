"""Streaming executors with exact accounting of the auxiliary state they keep between tokens.

Only aggregation state (score matrix, KV accumulator, dendritic potentials) counts as `state`.
Per-token inputs and outputs are streamed and never counted. Rows of values held back for the
local term's look-ahead are counted separately as `buffer`.
"""
import collections
import dataclasses
import enum
import itertools as it
from typing import Dict, Optional, Sequence, Tuple

from absl import logging
import numpy as np
import pandas as pd
import tqdm

from lrfkit.data import tensor
from lrfkit.mechanisms import attention
from lrfkit.mechanisms import dyn


STATE = 'state'
BUFFER = 'buffer'


class Mode(enum.Enum):
    SSA_V1 = 'ssa_v1'
    SSA_V2 = 'ssa_v2'
    LRF_SSA_CAUSAL = 'lrf_ssa_causal'
    LRF_DYN = 'lrf_dyn'


_LOCAL_MODES = (Mode.LRF_SSA_CAUSAL, Mode.LRF_DYN)


def get_mode(mode_name) -> Mode:
    try:
        return Mode(mode_name)
    except ValueError as e:
        raise ValueError(f'Unknown mode `{mode_name}`. '
                         f'Options: {", ".join(m.value for m in Mode)}.') from e


class StateCounter:
    """Counts live auxiliary values per category and remembers the peaks."""

    def __init__(self):
        self._live = collections.Counter()
        self._peak = collections.Counter()

    def alloc(self, category: str, shape) -> np.ndarray:
        array = np.zeros(shape, dtype=tensor.DTYPE)
        self._live[category] += array.size
        self._peak[category] = max(self._peak[category], self._live[category])
        return array

    def free(self, category: str, array: np.ndarray):
        if array.size > self._live[category]:
            raise ValueError(f'freeing {array.size} values but only {self._live[category]} '
                             f'are live in `{category}`.')
        self._live[category] -= array.size

    def live(self, category: str) -> int:
        return self._live[category]

    def peak(self, category: str) -> int:
        return self._peak[category]


@dataclasses.dataclass(frozen=True)
class MemProfile:
    mode: str
    n: int
    d: int
    k: int
    peak_state_values: int
    local_buffer_values: int

    @property
    def total(self) -> int:
        return self.peak_state_values + self.local_buffer_values

    def to_dict(self) -> Dict[str, object]:
        return {**dataclasses.asdict(self), 'total': self.total}


@dataclasses.dataclass(frozen=True)
class StreamInputs:
    """One (n, d) slice of inputs for every mode: binary Q, K, V and real tokens."""
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    tokens: np.ndarray
    grid: tensor.TokenGrid
    cfg: attention.LrfConfig
    params: dyn.DendriticParams

    @classmethod
    def random(cls, n: int, d: int, k: int = dyn.DEFAULT_DENDRITES,
               grid: Optional[tensor.TokenGrid] = None,
               dilations: Sequence[int] = attention.DEFAULT_DILATIONS,
               seed: int = 0) -> 'StreamInputs':
        if min(n, d, k) < 1:
            raise ValueError(f'dimensions must be positive, got n={n}, d={d}, k={k}.')
        grid = grid or tensor.TokenGrid.for_tokens(n)
        if grid.num_tokens != n:
            raise ValueError(f'grid {grid.rows}x{grid.cols} does not hold {n} tokens.')
        rng = np.random.default_rng(seed)
        q, k_, v = ((rng.random((n, d)) < .5).astype(tensor.DTYPE) for _ in range(3))
        return cls(q=q, k=k_, v=v,
                   tokens=rng.normal(size=(n, d)),
                   grid=grid,
                   cfg=attention.LrfConfig.random(d, rng, dilations=dilations),
                   params=dyn.DendriticParams.random(d, rng, k=k))

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def d(self) -> int:
        return self.q.shape[1]


class _LineBuffer:
    """Ring buffer of the last grid rows of per-token vectors, enough to finish a row's local
    term once `max_dilation` further rows have arrived."""

    def __init__(self, grid: tensor.TokenGrid, cfg: attention.LrfConfig, d: int,
                 counter: StateCounter):
        self._grid = grid
        self._reach = cfg.max_dilation
        self._window = min(2 * self._reach + 1, grid.rows)
        self._weights = cfg.flat_weights()
        self._table = grid.neighbor_table(cfg.offsets())
        self._rows = counter.alloc(BUFFER, (self._window, grid.cols, d))
        self._finished_rows = 0

    def push(self, n: int, vec: np.ndarray, out: np.ndarray):
        row, col = divmod(n, self._grid.cols)
        self._rows[row % self._window, col] = vec
        if col == self._grid.cols - 1 and row - self._reach >= 0:
            self._finish_row(row - self._reach, out)

    def flush(self, out: np.ndarray):
        while self._finished_rows < self._grid.rows:
            self._finish_row(self._finished_rows, out)

    def _finish_row(self, row: int, out: np.ndarray):
        cols = self._grid.cols
        for n in range(row * cols, (row + 1) * cols):
            neighbors = self._table[n]
            valid = neighbors >= 0
            neighbor_rows, neighbor_cols = np.divmod(neighbors[valid], cols)
            values = self._rows[neighbor_rows % self._window, neighbor_cols]
            out[n] += (self._weights[valid] * values).sum(axis=0)
        self._finished_rows = row + 1


def _stream_ssa_v1(inputs: StreamInputs, counter: StateCounter) -> np.ndarray:
    s = inputs.cfg.scale_for(inputs.d)
    scores = counter.alloc(STATE, (inputs.n, inputs.n))
    for n in range(inputs.n):
        scores[n] = s * (inputs.k @ inputs.q[n])
    out = np.empty((inputs.n, inputs.d), dtype=tensor.DTYPE)
    for n in range(inputs.n):
        out[n] = scores[n] @ inputs.v
    counter.free(STATE, scores)
    return out


def _stream_ssa_v2(inputs: StreamInputs, counter: StateCounter) -> np.ndarray:
    s = inputs.cfg.scale_for(inputs.d)
    acc = counter.alloc(STATE, (inputs.d, inputs.d))
    for n in range(inputs.n):
        acc += np.outer(inputs.k[n], inputs.v[n])
    out = np.empty((inputs.n, inputs.d), dtype=tensor.DTYPE)
    for n in range(inputs.n):
        out[n] = s * (inputs.q[n] @ acc)
    counter.free(STATE, acc)
    return out


def _stream_lrf_ssa_causal(inputs: StreamInputs, counter: StateCounter) -> np.ndarray:
    s = inputs.cfg.scale_for(inputs.d)
    acc = counter.alloc(STATE, (inputs.d, inputs.d))
    lines = (_LineBuffer(inputs.grid, inputs.cfg, inputs.d, counter)
             if inputs.cfg.dilations else None)
    out = np.empty((inputs.n, inputs.d), dtype=tensor.DTYPE)
    for n in range(inputs.n):
        acc += np.outer(inputs.k[n], inputs.v[n])
        out[n] = s * (inputs.q[n] @ acc)
        if lines is not None:
            lines.push(n, inputs.v[n], out)
    if lines is not None:
        lines.flush(out)
    counter.free(STATE, acc)
    return out


def _stream_lrf_dyn(inputs: StreamInputs, counter: StateCounter) -> np.ndarray:
    params = inputs.params
    state = counter.alloc(STATE, (params.k, inputs.d))
    lines = (_LineBuffer(inputs.grid, inputs.cfg, inputs.d, counter)
             if inputs.cfg.dilations else None)
    out = np.empty((inputs.n, inputs.d), dtype=tensor.DTYPE)
    for n in range(inputs.n):
        state[:] = params.m_trans @ state + np.outer(params.gamma_in, inputs.tokens[n])
        out[n] = params.big_gamma * (params.c_read @ state)
        if lines is not None:
            lines.push(n, out[n].copy(), out)
    if lines is not None:
        lines.flush(out)
    counter.free(STATE, state)
    return out


_EXECUTORS = {
    Mode.SSA_V1: _stream_ssa_v1,
    Mode.SSA_V2: _stream_ssa_v2,
    Mode.LRF_SSA_CAUSAL: _stream_lrf_ssa_causal,
    Mode.LRF_DYN: _stream_lrf_dyn,
}


def stream(mode, inputs: StreamInputs) -> Tuple[np.ndarray, StateCounter]:
    """Runs the token-by-token executor of `mode`, returns its outputs and its counter."""
    counter = StateCounter()
    out = _EXECUTORS[get_mode(mode)](inputs, counter)
    return out, counter


def batch_reference(mode, inputs: StreamInputs) -> np.ndarray:
    """The same mechanism computed by the batch implementations."""
    mode = get_mode(mode)
    q, k, v, cfg = inputs.q, inputs.k, inputs.v, inputs.cfg
    if mode is Mode.SSA_V1:
        return attention.ssa_quadratic(q, k, v, cfg.scale_for(inputs.d))
    if mode is Mode.SSA_V2:
        return attention.ssa_linear(q, k, v, cfg.scale_for(inputs.d))
    if mode is Mode.LRF_SSA_CAUSAL:
        return attention.lrf_ssa_causal(q, k, v, inputs.grid, cfg)
    output = dyn.lrf_dyn(inputs.tokens[None, None], inputs.grid, inputs.params, cfg)
    return np.asarray(output.pre_sn)[0, 0]


def expected_peak(mode, n: int, d: int, k: int) -> int:
    mode = get_mode(mode)
    if mode is Mode.SSA_V1:
        return n * n
    if mode is Mode.LRF_DYN:
        return k * d
    return d * d


def expected_local_buffer(mode, grid: tensor.TokenGrid, dilations: Sequence[int],
                          d: int) -> int:
    """min(2·max dilation + 1, rows) grid rows of d values, 0 without a local term."""
    if get_mode(mode) not in _LOCAL_MODES or not dilations:
        return 0
    return min(2 * max(dilations) + 1, grid.rows) * grid.cols * d


def profile(mode, n: int, d: int, k: int = dyn.DEFAULT_DENDRITES,
            grid: Optional[tensor.TokenGrid] = None,
            dilations: Sequence[int] = attention.DEFAULT_DILATIONS,
            seed: int = 0) -> MemProfile:
    """Streams seeded random inputs through `mode` and records the counted peaks."""
    mode = get_mode(mode)
    inputs = StreamInputs.random(n, d, k, grid, dilations, seed)
    _, counter = stream(mode, inputs)
    return MemProfile(mode=mode.value, n=n, d=d, k=k,
                      peak_state_values=counter.peak(STATE),
                      local_buffer_values=counter.peak(BUFFER))


def compare(modes: Sequence[str], ns: Sequence[int], ds: Sequence[int],
            k: int = dyn.DEFAULT_DENDRITES,
            dilations: Sequence[int] = attention.DEFAULT_DILATIONS,
            seed: int = 0) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Profiles every (mode, n, d) of the sweep.

    Returns the profiles table and, for every ordered pair of modes, the ratio of their
    peak state per (n, d).
    """
    if not modes or not ns or not ds:
        raise ValueError('modes and the n/d sweep must be non-empty.')
    modes = [get_mode(m).value for m in modes]
    configs = list(it.product(modes, ns, ds))
    profiles = [profile(mode, n, d, k, dilations=dilations, seed=seed)
                for mode, n, d in tqdm.tqdm(configs, desc='profiling')]
    frame = pd.DataFrame([p.to_dict() for p in profiles])

    ratio_rows = []
    peaks = frame.set_index(['mode', 'n', 'd']).peak_state_values
    for (first, second), n, d in it.product(it.combinations(modes, 2), ns, ds):
        ratio_rows.append({'numerator': first, 'denominator': second, 'n': n, 'd': d,
                           'ratio': peaks[(first, n, d)] / peaks[(second, n, d)]})
    ratios = pd.DataFrame(ratio_rows, columns=['numerator', 'denominator', 'n', 'd', 'ratio'])
    logging.info(f'Profiled {len(frame)} configurations over modes {modes}.')
    return frame, ratios


def fit_growth_exponent(frame: pd.DataFrame, mode: str, dim: str = 'n') -> float:
    """Least-squares slope of log(peak state) against log(dim), other dims at their minimum."""
    rows = frame[frame['mode'] == get_mode(mode).value]
    for other in {'n', 'd', 'k'} - {dim}:
        rows = rows[rows[other] == rows[other].min()]
    if rows[dim].nunique() < 2:
        raise ValueError(f'need at least two distinct `{dim}` values to fit an exponent.')
    slope, _ = np.polyfit(np.log(rows[dim]), np.log(rows.peak_state_values), 1)
    return float(slope)

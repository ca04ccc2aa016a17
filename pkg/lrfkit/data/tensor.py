"""Tensor and token-grid data classes shared by all mechanisms."""
import abc
import dataclasses
import functools as ft
from typing import Optional, Sequence, Tuple

import numpy as np


DTYPE = np.float64

Offset = Tuple[int, int]


@dataclasses.dataclass(frozen=True)
class Shape4:
    """A (timesteps, batch, tokens, channels) shape."""
    t: int
    b: int
    n: int
    d: int

    def __post_init__(self):
        non_positive = {name: value for name, value in dataclasses.asdict(self).items()
                        if value < 1}
        if non_positive:
            raise ValueError(f'shape components must be positive, got {non_positive}.')

    @classmethod
    def of(cls, array) -> 'Shape4':
        shape = np.shape(array)
        if len(shape) != 4:
            raise ValueError(f'expected a (t, b, n, d) array, got shape {shape}.')
        return cls(*shape)

    def as_tuple(self) -> Tuple[int, int, int, int]:
        return (self.t, self.b, self.n, self.d)

    def check_grid(self, grid: 'TokenGrid'):
        if grid.num_tokens != self.n:
            raise ValueError(
                f'grid {grid.rows}x{grid.cols} has {grid.num_tokens} tokens but shape has '
                f'n={self.n}.')


@dataclasses.dataclass(frozen=True)
class TypeAwareArray(abc.ABC):
    """Wraps a float64 np.ndarray and validates its content on construction.

    Child implementations override `_validate_values()` with the value-level checks. Instances
    convert transparently with `np.asarray()`.
    """
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=DTYPE)
        if data.ndim < 1:
            raise ValueError('tensors must have at least one dimension.')
        data.setflags(write=False)
        object.__setattr__(self, 'data', data)
        errors = self._validate_values(data)
        if errors:
            raise ValueError(', '.join(errors))

    @abc.abstractmethod
    def _validate_values(self, data: np.ndarray) -> Sequence[str]:
        ...

    def __array__(self, dtype=None, copy=None):  # pylint: disable=unused-argument
        return self.data if dtype is None else self.data.astype(dtype)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def shape4(self) -> Shape4:
        return Shape4.of(self.data)


class DenseTensor(TypeAwareArray):
    """Real-valued activations. Every element must be finite."""

    def _validate_values(self, data):
        if not np.all(np.isfinite(data)):
            return [f'dense tensor has {np.count_nonzero(~np.isfinite(data))} non-finite values']
        return []


class SpikeTensor(TypeAwareArray):
    """Binary spike activations, every element is 0 or 1."""

    def _validate_values(self, data):
        non_binary = np.count_nonzero((data != 0.) & (data != 1.))
        if non_binary:
            return [f'spike tensor has {non_binary} values outside {{0, 1}}']
        return []

    @property
    def firing_rate(self) -> float:
        return float(self.data.mean())


def spikes_from_dense(x, threshold: float = 0.5) -> SpikeTensor:
    """Thresholds a dense tensor into spikes (1 where x >= threshold)."""
    return SpikeTensor((np.asarray(x, dtype=DTYPE) >= threshold).astype(DTYPE))


@dataclasses.dataclass(frozen=True)
class TokenGrid:
    """A rows x cols grid of tokens, enumerated in raster order (n = row * cols + col)."""
    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f'grid must be at least 1x1, got {self.rows}x{self.cols}.')

    @classmethod
    def for_tokens(cls, n: int) -> 'TokenGrid':
        """The most square grid holding exactly n tokens."""
        if n < 1:
            raise ValueError(f'token count must be positive, got {n}.')
        rows = int(np.floor(np.sqrt(n)))
        while n % rows:
            rows -= 1
        return cls(rows=rows, cols=n // rows)

    @property
    def num_tokens(self) -> int:
        return self.rows * self.cols

    def _check_token(self, n: int):
        if not 0 <= n < self.num_tokens:
            raise ValueError(f'token index {n} is out of range [0, {self.num_tokens}).')

    def token_to_grid(self, n: int) -> Tuple[int, int]:
        self._check_token(n)
        return divmod(n, self.cols)

    def grid_to_token(self, row: int, col: int) -> int:
        if not (0 <= row < self.rows and 0 <= col < self.cols):
            raise ValueError(f'cell ({row}, {col}) is outside the {self.rows}x{self.cols} grid.')
        return row * self.cols + col

    def manhattan_distance(self, i: int, j: int) -> int:
        row_i, col_i = self.token_to_grid(i)
        row_j, col_j = self.token_to_grid(j)
        return abs(row_i - row_j) + abs(col_i - col_j)

    def neighbor_index(self, n: int, offset: Offset) -> Optional[int]:
        """Token at (row + di, col + dj), or None when it falls outside the grid."""
        row, col = self.token_to_grid(n)
        row, col = row + offset[0], col + offset[1]
        if 0 <= row < self.rows and 0 <= col < self.cols:
            return row * self.cols + col
        return None

    @ft.lru_cache(maxsize=None)
    def distance_matrix(self) -> np.ndarray:
        """(N, N) Manhattan distances between all token pairs."""
        rows, cols = np.divmod(np.arange(self.num_tokens), self.cols)
        distances = (np.abs(rows[:, None] - rows[None, :])
                     + np.abs(cols[:, None] - cols[None, :]))
        distances.setflags(write=False)
        return distances

    def neighbor_table(self, offsets: Sequence[Offset]) -> np.ndarray:
        """(N, len(offsets)) neighbor indices, -1 marks an absent (zero padded) neighbor."""
        rows, cols = np.divmod(np.arange(self.num_tokens), self.cols)
        offsets = np.asarray(offsets, dtype=int).reshape(-1, 2)
        target_rows = rows[:, None] + offsets[None, :, 0]
        target_cols = cols[:, None] + offsets[None, :, 1]
        inside = ((target_rows >= 0) & (target_rows < self.rows)
                  & (target_cols >= 0) & (target_cols < self.cols))
        return np.where(inside, target_rows * self.cols + target_cols, -1)

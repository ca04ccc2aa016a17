"""Synthetic token-grid task, surrogate-gradient training loop and gradient verification."""
import dataclasses
import pathlib
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple

from absl import logging
import numpy as np
import pandas as pd
import tabulate
import torch
from torch import nn
import tqdm

from lrfkit.data import tensor
from lrfkit.data import writers
from lrfkit.mechanisms import attention
from lrfkit.mechanisms import dyn
from lrfkit.mechanisms import neuron
from lrfkit.pipelines.training import spiking


PATCH_SIZE = 9
_TEST_INDEX_OFFSET = 10**6

# 3x3 class motifs (plus, cross, T, L), five active pixels each.
MOTIFS = np.array([
    [[0, 1, 0], [1, 1, 1], [0, 1, 0]],
    [[1, 0, 1], [0, 1, 0], [1, 0, 1]],
    [[1, 1, 1], [0, 1, 0], [0, 1, 0]],
    [[1, 0, 0], [1, 0, 0], [1, 1, 1]],
], dtype=float)


@dataclasses.dataclass(frozen=True)
class ToyTask:
    """Binary images with one class motif at a random location over Bernoulli noise.

    Every token is the zero-padded 3x3 patch around its pixel. Sample `index` has label
    `index % classes` and is reproducible from (seed, index).
    """
    grid: tensor.TokenGrid = tensor.TokenGrid(8, 8)
    d_embed: int = 16
    classes: int = 4
    noise: float = .1
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.classes <= len(MOTIFS):
            raise ValueError(f'classes must be in [1, {len(MOTIFS)}], got {self.classes}.')
        if self.grid.rows < 3 or self.grid.cols < 3:
            raise ValueError(f'grid must be at least 3x3 to hold a motif, got '
                             f'{self.grid.rows}x{self.grid.cols}.')
        if not 0. <= self.noise < 1.:
            raise ValueError(f'noise must be in [0, 1), got {self.noise}.')
        if self.d_embed < 1:
            raise ValueError(f'd_embed must be positive, got {self.d_embed}.')

    def image(self, index: int) -> Tuple[np.ndarray, int]:
        rng = np.random.default_rng([self.seed, index])
        label = index % self.classes
        image = (rng.random((self.grid.rows, self.grid.cols)) < self.noise).astype(float)
        row = rng.integers(0, self.grid.rows - 2)
        col = rng.integers(0, self.grid.cols - 2)
        image[row:row + 3, col:col + 3] = MOTIFS[label]
        return image, label

    def sample(self, index: int) -> Tuple[np.ndarray, int]:
        """(n, 9) patches and the label of sample `index`."""
        image, label = self.image(index)
        padded = np.pad(image, 1)
        windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3))
        return windows.reshape(self.grid.num_tokens, PATCH_SIZE), label

    def batch(self, indices: Sequence[int]) -> Tuple[torch.Tensor, torch.Tensor]:
        patches, labels = zip(*(self.sample(i) for i in indices))
        return (torch.as_tensor(np.stack(patches), dtype=spiking.DTYPE),
                torch.as_tensor(labels, dtype=torch.long))

    def split(self, train_size: int, test_size: int):
        train = self.batch(range(train_size))
        test = self.batch(range(_TEST_INDEX_OFFSET, _TEST_INDEX_OFFSET + test_size))
        return train, test


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    learning_rate: float = .25
    momentum: float = .9
    seed: int = 0
    surrogate: neuron.SurrogateSpec = neuron.SurrogateSpec()
    timesteps: int = 2
    train_size: int = 2048
    test_size: int = 512
    dilations: Tuple[int, ...] = attention.DEFAULT_DILATIONS
    k: int = dyn.DEFAULT_DENDRITES

    def __post_init__(self):
        object.__setattr__(self, 'dilations', tuple(self.dilations))
        errors = []
        if not self.learning_rate > 0:
            errors.append(f'learning_rate must be positive, got {self.learning_rate}')
        # 0 epochs only evaluates the untrained model.
        if self.epochs < 0:
            errors.append(f'epochs must be non-negative, got {self.epochs}')
        for name in ('batch_size', 'timesteps', 'train_size', 'test_size', 'k'):
            if getattr(self, name) < 1:
                errors.append(f'{name} must be positive, got {getattr(self, name)}')
        if not 0. <= self.momentum < 1.:
            errors.append(f'momentum must be in [0, 1), got {self.momentum}')
        if errors:
            raise ValueError(', '.join(errors))


def build_model(task: ToyTask, kind: str, cfg: TrainConfig) -> spiking.ToyModel:
    return spiking.ToyModel(kind, task.grid, PATCH_SIZE, task.d_embed, task.classes,
                            timesteps=cfg.timesteps, spec=cfg.surrogate,
                            dilations=cfg.dilations, k=cfg.k, seed=cfg.seed)


def loss_fn(model: spiking.ToyModel, patches: torch.Tensor, labels: torch.Tensor,
            smooth: bool = False) -> torch.Tensor:
    return nn.functional.cross_entropy(model(patches, smooth), labels)


@torch.no_grad()
def evaluate(model: spiking.ToyModel, data: Tuple[torch.Tensor, torch.Tensor]) -> float:
    patches, labels = data
    return float((model(patches).argmax(dim=-1) == labels).to(spiking.DTYPE).mean())


@dataclasses.dataclass(frozen=True)
class TrainResult:
    model: spiking.ToyModel
    log: pd.DataFrame


def train_toy(task: ToyTask, kind: str, cfg: TrainConfig,
              checkpoint_path: Optional[pathlib.Path] = None) -> TrainResult:
    """Minibatch SGD with momentum on the toy task.

    The log has one row per epoch (epoch, train_loss, train_acc, test_acc). With 0 epochs it
    holds a single row for the untrained model.
    """
    train, test = task.split(cfg.train_size, cfg.test_size)
    model = build_model(task, kind, cfg)
    optimizer = torch.optim.SGD(model.parameters(), lr=cfg.learning_rate,
                                momentum=cfg.momentum)
    rng = np.random.default_rng(cfg.seed)

    rows = []
    if cfg.epochs == 0:
        with torch.no_grad():
            rows.append({'epoch': 0, 'train_loss': float(loss_fn(model, *train)),
                         'train_acc': evaluate(model, train), 'test_acc': evaluate(model, test)})

    last_finite = None
    for epoch in tqdm.tqdm(range(1, cfg.epochs + 1), desc=f'training {kind}'):
        order = rng.permutation(cfg.train_size)
        losses = []
        for batch_index, start in enumerate(range(0, cfg.train_size, cfg.batch_size)):
            idx = torch.as_tensor(order[start:start + cfg.batch_size])
            loss = loss_fn(model, train[0][idx], train[1][idx])
            if not torch.isfinite(loss):
                raise FloatingPointError(
                    f'training diverged at epoch {epoch}, batch {batch_index}: loss is '
                    f'{loss.item()}, last finite loss was {last_finite}.')
            last_finite = loss.item()
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(last_finite)
        rows.append({'epoch': epoch, 'train_loss': float(np.mean(losses)),
                     'train_acc': evaluate(model, train), 'test_acc': evaluate(model, test)})
        logging.info(f'[{kind}] epoch {epoch}: loss={rows[-1]["train_loss"]:.4f} '
                     f'train_acc={rows[-1]["train_acc"]:.3f} test_acc={rows[-1]["test_acc"]:.3f}')

    log = pd.DataFrame(rows, columns=['epoch', 'train_loss', 'train_acc', 'test_acc'])
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    return TrainResult(model=model, log=log)


def smoothed_monotone(losses: Sequence[float], window: int = 5, tail: float = .8,
                      tolerance: float = 0.) -> bool:
    """Whether the moving average of `losses` never increases over the final `tail` share."""
    losses = np.asarray(losses, dtype=float)
    if len(losses) < window:
        return True
    smoothed = np.convolve(losses, np.ones(window) / window, mode='valid')
    first_epoch = int(np.floor(len(losses) * (1. - tail)))
    # smoothed[i] covers epochs i .. i + window - 1.
    smoothed = smoothed[max(first_epoch - window + 1, 0):]
    return bool(np.all(np.diff(smoothed) <= tolerance))


def model_state(model: nn.Module) -> Dict[str, np.ndarray]:
    return {name: value.detach().cpu().numpy() for name, value in model.state_dict().items()
            if value.is_floating_point()}


def save_checkpoint(model: nn.Module, path: pathlib.Path):
    writers.save_checkpoint(model_state(model), path)


def load_checkpoint(model: nn.Module, path: pathlib.Path):
    """Loads parameters saved by `save_checkpoint`; names and shapes must match exactly."""
    loaded = writers.load_checkpoint(path)
    expected = model_state(model)
    if set(loaded) != set(expected):
        raise ValueError(f'checkpoint parameters {sorted(loaded)} do not match the model '
                         f'parameters {sorted(expected)}.')
    for name, array in loaded.items():
        if array.shape != expected[name].shape:
            raise ValueError(f'`{name}` has shape {array.shape}, expected '
                             f'{expected[name].shape}.')
    state = model.state_dict()
    state.update({name: torch.as_tensor(array, dtype=state[name].dtype)
                  for name, array in loaded.items()})
    model.load_state_dict(state)


@dataclasses.dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    checked: int
    finite: bool

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.finite and self.max_rel_error <= tolerance


def grad_check_fn(loss: Callable[[], torch.Tensor], params: Sequence[torch.Tensor],
                  epsilon: float = 1e-5, samples: int = 100,
                  seed: int = 0) -> GradCheckReport:
    """Analytic gradients of `loss()` against central differences on sampled coordinates.

    Relative error is |a - n| / max(|a| + |n|, 1e-6).
    """
    if not 1e-6 <= epsilon <= 1e-4:
        raise ValueError(f'epsilon must be in [1e-6, 1e-4], got {epsilon}.')
    params = list(params)
    analytic = torch.autograd.grad(loss(), params, allow_unused=True)
    analytic = [torch.zeros_like(p) if g is None else g for p, g in zip(params, analytic)]
    if not all(torch.isfinite(g).all() for g in analytic):
        return GradCheckReport(max_rel_error=float('inf'), checked=0, finite=False)

    sizes = np.array([p.numel() for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat_indices = (np.arange(total) if total <= samples
                    else rng.choice(total, size=samples, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    max_error = 0.
    with torch.no_grad():
        for flat in flat_indices:
            which = int(np.searchsorted(offsets, flat, side='right') - 1)
            param, index = params[which].view(-1), int(flat - offsets[which])
            original = param[index].item()
            param[index] = original + epsilon
            plus = loss().item()
            param[index] = original - epsilon
            minus = loss().item()
            param[index] = original
            numeric = (plus - minus) / (2. * epsilon)
            value = analytic[which].reshape(-1)[index].item()
            error = abs(value - numeric) / max(abs(value) + abs(numeric), 1e-6)
            max_error = max(max_error, error)
    return GradCheckReport(max_rel_error=max_error, checked=len(flat_indices), finite=True)


def grad_check(model: spiking.ToyModel, patches: torch.Tensor, labels: torch.Tensor,
               epsilon: float = 1e-5, samples: int = 100, seed: int = 0) -> GradCheckReport:
    """Gradient check of the cross-entropy loss on the smooth path (every SN is the identity)."""
    return grad_check_fn(lambda: loss_fn(model, patches, labels, smooth=True),
                         list(model.parameters()), epsilon, samples, seed)


def ablate(task: ToyTask, kind: str, cfg: TrainConfig,
           presets: Mapping[str, Sequence[int]] = attention.ABLATION_DILATIONS
           ) -> pd.DataFrame:
    """Trains one model per dilation preset and reports its final test accuracy."""
    if kind not in ('lrf_ssa', 'lrf_dyn'):
        raise ValueError(f'ablation needs a model with local kernels, got `{kind}`.')
    rows = []
    for name, dilations in presets.items():
        result = train_toy(task, kind, dataclasses.replace(cfg, dilations=tuple(dilations)))
        final = result.log.iloc[-1]
        rows.append({'preset': name, 'dilations': ' '.join(map(str, dilations)),
                     'final_train_loss': final.train_loss, 'final_test_acc': final.test_acc})
    frame = pd.DataFrame(rows)
    logging.info('Dilation ablation:\n' + tabulate.tabulate(
        frame, headers='keys', tablefmt='grid', showindex=False))
    return frame

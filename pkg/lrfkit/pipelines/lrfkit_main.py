"""Command-line front end: `lrfkit <command> [flags]`.

Commands:
  verify         runs the invariant suites, exit 1 when a check fails
  analyze        distance histogram and (μ, H) summary of an attention mechanism
  bench_mem      counted streaming memory per mode over an (n, d) sweep
  train          trains the toy model and writes the per-epoch log
  export_kernel  writes the dyn kernel taps as (m, channel, tap_value)
  ablate         trains one model per dilation preset

Every setting comes from, in order of precedence, an explicitly passed flag, the command's section
of --config_file, and the defaults of the command's config class. Usage and I/O errors exit with 2.
"""
import dataclasses
import pathlib
import sys
import typing
from typing import Callable, Dict, Mapping, Optional, Tuple

from absl import app
from absl import flags
from absl import logging
import numpy as np
import tabulate
import yaml

from lrfkit.analysis import analysis
from lrfkit.data import tensor
from lrfkit.data import writers
from lrfkit.mechanisms import attention
from lrfkit.mechanisms import dyn
from lrfkit.mechanisms import neuron
from lrfkit.membench import membench
from lrfkit.pipelines.training import spiking
from lrfkit.pipelines.training import training
from lrfkit.pipelines.verification import verification


_DEFAULT_CONFIG_FILE = 'config/lrfkit_config.yaml'

FLAGS = flags.FLAGS

_FLAG_CONFIG_FILE = flags.DEFINE_string(
    'config_file', None, f'YAML/JSON config with one section per command, e.g. '
    f'{_DEFAULT_CONFIG_FILE}')

# Settings flags default to None; only flags passed explicitly override the config.
flags.DEFINE_string('output', None, 'Output file')
flags.DEFINE_enum('format', None, ['csv', 'json'], 'Report format')
flags.DEFINE_integer('seed', None, 'Random seed, required by every randomized command')
flags.DEFINE_enum('scope', None, ['all', *verification.SCOPES], 'Verification scope')
flags.DEFINE_enum('mechanism', None, ['vsa', 'ssa', 'lrf-ssa'], 'Mechanism to analyze')
flags.DEFINE_enum('source', None, ['model', 'sampled'],
                  'Analyze the distance model or scores sampled from random spikes')
flags.DEFINE_float('alpha', None, 'Similarity at distance 0')
flags.DEFINE_float('beta', None, 'Similarity decay per unit distance')
flags.DEFINE_float('vsa_beta', None, 'Softmax logit decay per unit distance (default: beta)')
flags.DEFINE_float('lam', None, 'Local mixing weight λ of lrf-ssa')
flags.DEFINE_integer('radius', None, 'Radius of the uniform local distribution')
flags.DEFINE_list('n', None, 'Sequence length (bench_mem: comma separated sweep)')
flags.DEFINE_list('d', None, 'Channels (bench_mem: comma separated sweep)')
flags.DEFINE_integer('grid_rows', None, 'Token grid rows')
flags.DEFINE_integer('grid_cols', None, 'Token grid columns')
flags.DEFINE_integer('samples', None, 'Random inputs averaged by the sampled analysis')
flags.DEFINE_list('modes', None, 'Streaming modes to benchmark')
flags.DEFINE_integer('k', None, 'Dendrites per channel')
flags.DEFINE_list('dilations', None, 'Dilations of the local kernels')
flags.DEFINE_enum('model', None, list(spiking.MODEL_KINDS), 'Toy model kind')
flags.DEFINE_integer('epochs', None, 'Training epochs (0 evaluates the untrained model)')
flags.DEFINE_integer('batch_size', None, 'Minibatch size')
flags.DEFINE_float('learning_rate', None, 'SGD learning rate')
flags.DEFINE_float('momentum', None, 'SGD momentum')
flags.DEFINE_integer('timesteps', None, 'Spiking timesteps T')
flags.DEFINE_integer('train_size', None, 'Training samples')
flags.DEFINE_integer('test_size', None, 'Test samples')
flags.DEFINE_enum('surrogate', None, [kind.value for kind in neuron.SurrogateKind],
                  'Surrogate gradient')
flags.DEFINE_float('surrogate_width', None, 'Surrogate gradient width')
flags.DEFINE_string('checkpoint', None, 'Checkpoint path')
flags.DEFINE_integer('length', None, 'Number of kernel taps to export')
flags.DEFINE_list('presets', None,
                  f'Dilation presets to ablate: {", ".join(attention.ABLATION_DILATIONS)}')

_SETTING_FLAGS = ('output', 'format', 'seed', 'scope', 'mechanism', 'source', 'alpha', 'beta',
                  'vsa_beta', 'lam', 'radius', 'n', 'd', 'grid_rows', 'grid_cols', 'samples',
                  'modes', 'k', 'dilations', 'model', 'epochs', 'batch_size', 'learning_rate',
                  'momentum', 'timesteps', 'train_size', 'test_size', 'surrogate',
                  'surrogate_width', 'checkpoint', 'length', 'presets')

_FORMATS = ('csv', 'json')


def _require(condition: bool, message: str, errors: list):
    if not condition:
        errors.append(message)


def _require_folder(path: Optional[str], flag: str, errors: list):
    """Output files are only written after all work is done, so their folders must exist now."""
    if path is not None and not pathlib.Path(path).parent.is_dir():
        errors.append(f'the folder of --{flag} `{path}` does not exist')


def _raise_if(errors: list):
    if errors:
        raise ValueError(', '.join(errors))


@dataclasses.dataclass(frozen=True)
class VerifyConfig:
    scope: str = 'all'
    # The suites are fixed fixtures, their seed is part of the build and defaults to 0.
    seed: int = 0
    output: Optional[str] = None

    def validate(self):
        errors = []
        _require(self.scope in ('all', *verification.SCOPES), f'Unknown scope `{self.scope}`',
                 errors)
        _require_folder(self.output, 'output', errors)
        _raise_if(errors)


@dataclasses.dataclass(frozen=True)
class AnalyzeConfig:
    mechanism: str = 'vsa'
    source: str = 'model'
    alpha: float = 1.
    beta: float = .1
    vsa_beta: Optional[float] = None
    n: int = 64
    lam: float = .5
    radius: int = 2
    grid_rows: int = 8
    grid_cols: int = 8
    d: int = 16
    samples: int = 100
    seed: Optional[int] = None
    output: Optional[str] = None
    format: str = 'csv'

    def distance_model(self) -> analysis.DistanceModel:
        return analysis.DistanceModel(self.alpha, self.beta, self.n, self.vsa_beta)

    def validate(self):
        errors = []
        _require(self.mechanism in ('vsa', 'ssa', 'lrf-ssa'),
                 f'Unknown mechanism `{self.mechanism}`', errors)
        _require(self.source in ('model', 'sampled'), f'Unknown source `{self.source}`', errors)
        _require(self.output is not None, 'analyze needs --output', errors)
        _require_folder(self.output, 'output', errors)
        _require(self.format in _FORMATS, f'Unknown format `{self.format}`', errors)
        _require(0. <= self.lam <= 1., f'lam must be in [0, 1], got {self.lam}', errors)
        _require(self.radius >= 0, f'radius must be non-negative, got {self.radius}', errors)
        if self.source == 'sampled':
            _require(self.seed is not None, 'sampled analysis needs an explicit --seed', errors)
            _require(self.samples >= 1 and self.d >= 1,
                     f'samples and d must be positive, got {self.samples}, {self.d}', errors)
        _raise_if(errors)
        if self.source == 'model':
            self.distance_model()
        else:
            tensor.TokenGrid(self.grid_rows, self.grid_cols)


@dataclasses.dataclass(frozen=True)
class BenchMemConfig:
    modes: Tuple[str, ...] = tuple(mode.value for mode in membench.Mode)
    n: Tuple[int, ...] = (16, 64, 256)
    d: Tuple[int, ...] = (64, 256, 512)
    k: int = dyn.DEFAULT_DENDRITES
    dilations: Tuple[int, ...] = attention.DEFAULT_DILATIONS
    seed: Optional[int] = None
    output: Optional[str] = None
    format: str = 'csv'

    def validate(self):
        errors = []
        _require(self.seed is not None, 'bench_mem needs an explicit --seed', errors)
        _require(self.output is not None, 'bench_mem needs --output', errors)
        _require_folder(self.output, 'output', errors)
        _require(self.format in _FORMATS, f'Unknown format `{self.format}`', errors)
        _require(bool(self.modes and self.n and self.d), 'modes, n and d must be non-empty',
                 errors)
        _require(min(self.n + self.d + (self.k,), default=1) >= 1,
                 'n, d and k must be positive', errors)
        _raise_if(errors)
        for mode in self.modes:
            membench.get_mode(mode)


@dataclasses.dataclass(frozen=True)
class TrainCommandConfig:
    model: str = 'lrf_dyn'
    epochs: int = 50
    batch_size: int = 128
    learning_rate: float = .25
    momentum: float = .9
    timesteps: int = 2
    train_size: int = 2048
    test_size: int = 512
    surrogate: str = neuron.SurrogateKind.SIGMOID_DERIVATIVE.value
    surrogate_width: float = 1.
    dilations: Tuple[int, ...] = attention.DEFAULT_DILATIONS
    k: int = dyn.DEFAULT_DENDRITES
    grid_rows: int = 8
    grid_cols: int = 8
    d: int = 16
    seed: Optional[int] = None
    output: Optional[str] = None
    checkpoint: Optional[str] = None

    def task(self) -> training.ToyTask:
        return training.ToyTask(grid=tensor.TokenGrid(self.grid_rows, self.grid_cols),
                                d_embed=self.d, seed=self.seed)

    def train_config(self) -> training.TrainConfig:
        return training.TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
            momentum=self.momentum, seed=self.seed,
            surrogate=neuron.SurrogateSpec(self.surrogate, self.surrogate_width),
            timesteps=self.timesteps, train_size=self.train_size, test_size=self.test_size,
            dilations=self.dilations, k=self.k)

    def validate(self):
        errors = []
        _require(self.model in spiking.MODEL_KINDS, f'Unknown model kind `{self.model}`', errors)
        _require(self.seed is not None, 'training needs an explicit --seed', errors)
        _require(self.output is not None, 'training needs --output', errors)
        _require_folder(self.output, 'output', errors)
        _require_folder(self.checkpoint, 'checkpoint', errors)
        _raise_if(errors)
        self.task()
        self.train_config()


@dataclasses.dataclass(frozen=True)
class AblateConfig(TrainCommandConfig):
    model: str = 'lrf_ssa'
    presets: Tuple[str, ...] = tuple(attention.ABLATION_DILATIONS)

    def validate(self):
        super().validate()
        unknown = [p for p in self.presets if p not in attention.ABLATION_DILATIONS]
        if unknown or not self.presets:
            raise ValueError(f'Unknown or missing presets {unknown}. '
                             f'Options: {", ".join(attention.ABLATION_DILATIONS)}.')
        if self.model not in ('lrf_ssa', 'lrf_dyn'):
            raise ValueError(f'ablation needs lrf_ssa or lrf_dyn, got `{self.model}`.')


@dataclasses.dataclass(frozen=True)
class ExportKernelConfig:
    length: int = 64
    d: int = 16
    k: int = dyn.DEFAULT_DENDRITES
    seed: Optional[int] = None
    checkpoint: Optional[str] = None
    grid_rows: int = 8
    grid_cols: int = 8
    dilations: Tuple[int, ...] = attention.DEFAULT_DILATIONS
    output: Optional[str] = None

    def validate(self):
        errors = []
        _require(self.output is not None, 'export_kernel needs --output', errors)
        _require_folder(self.output, 'output', errors)
        _require(self.checkpoint is None or pathlib.Path(self.checkpoint).is_file(),
                 f'--checkpoint `{self.checkpoint}` is not a file', errors)
        _require(self.length >= 1, f'length must be positive, got {self.length}', errors)
        _require(self.seed is not None or self.checkpoint is not None,
                 'export_kernel needs an explicit --seed or a --checkpoint', errors)
        _require(self.d >= 1 and self.k >= 1, 'd and k must be positive', errors)
        _raise_if(errors)


def _coerce(hint, value, name: str):
    """Converts a flag or config value to the type annotated on the config field."""
    if typing.get_origin(hint) is typing.Union:
        if value is None:
            return None
        hint = next(arg for arg in typing.get_args(hint) if arg is not type(None))
    if typing.get_origin(hint) is tuple:
        item_type = typing.get_args(hint)[0]
        items = value.split(',') if isinstance(value, str) else value
        if not isinstance(items, (list, tuple)):
            items = [items]
        return tuple(item_type(item) for item in items if item != '')
    if isinstance(value, (list, tuple)):
        if len(value) != 1:
            raise ValueError(f'`{name}` takes a single value, got {list(value)}.')
        value = value[0]
    return hint(value)


def _build(cls, values: Mapping[str, object], origin: str):
    hints = typing.get_type_hints(cls)
    unknown = sorted(set(values) - set(hints))
    if unknown:
        raise ValueError(f'{origin} sets {", ".join(unknown)}, which `{cls.__name__}` '
                         f'does not have.')
    try:
        return {name: _coerce(hints[name], value, name) for name, value in values.items()}
    except (TypeError, ValueError) as e:
        raise ValueError(f'bad value in {origin}: {e}') from e


@dataclasses.dataclass(frozen=True)
class CliConfig:
    """Per-command settings loaded from a config file, one section per command."""
    sections: Mapping[str, Mapping[str, object]] = dataclasses.field(default_factory=dict)

    @classmethod
    def from_yaml(cls, yaml_path: pathlib.Path) -> 'CliConfig':
        """Loads a YAML (or JSON) config file."""
        with open(yaml_path, encoding='utf8') as f:
            try:
                obj = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ValueError(f'cannot parse {yaml_path}: {e}') from e
        if not isinstance(obj, dict):
            raise ValueError(f'{yaml_path} must hold a mapping of command sections.')
        unknown = sorted(set(obj) - set(_COMMANDS))
        if unknown:
            raise ValueError(f'{yaml_path} has unknown sections {unknown}.')
        for command, section in obj.items():
            if not isinstance(section, dict):
                raise ValueError(f'section `{command}` of {yaml_path} must be a mapping.')
        return cls(sections=obj)

    def resolve(self, command: str, overrides: Mapping[str, object]):
        """Config of `command`: dataclass defaults < file section < `overrides`."""
        cls = _COMMANDS[command][0]
        values = _build(cls, self.sections.get(command, {}), f'config section `{command}`')
        values.update(_build(cls, overrides, 'the command line'))
        return cls(**values)


def run_verify(cfg: VerifyConfig) -> int:
    report = verification.run(cfg.scope, cfg.seed)
    payload = {'scope': cfg.scope, 'seed': cfg.seed, **report.to_dict()}
    writer = writers.get_report_writer('json')
    if cfg.output:
        writer.write(payload, pathlib.Path(cfg.output))
    else:
        sys.stdout.write(writer.dumps(payload))
    if not report.passed:
        logging.error(f'Verification failed: {", ".join(report.failed)}')
        return 1
    return 0


def _summary_path(output: pathlib.Path) -> pathlib.Path:
    return output.with_name(f'{output.stem}_summary{output.suffix}')


def analyze(cfg: AnalyzeConfig) -> analysis.AttentionStats:
    if cfg.source == 'sampled':
        grid = tensor.TokenGrid(cfg.grid_rows, cfg.grid_cols)
        return analysis.sampled_stats(cfg.mechanism, grid, cfg.d, cfg.samples, cfg.seed)
    model = cfg.distance_model()
    if cfg.mechanism == 'vsa':
        return analysis.distribution_stats(analysis.model_weights(model, analysis.ModelKind.VSA))
    p_ssa = analysis.normalize(analysis.model_weights(model, analysis.ModelKind.SSA))
    if cfg.mechanism == 'ssa':
        return analysis.distribution_stats(p_ssa)
    local = analysis.local_uniform_weights(cfg.n, cfg.radius)
    return analysis.distribution_stats(analysis.lrf_mix(p_ssa, local, cfg.lam))


def run_analyze(cfg: AnalyzeConfig) -> int:
    """Writes the histogram to --output and the (mechanism, μ, H) row next to it."""
    stats = analyze(cfg)
    output = pathlib.Path(cfg.output)
    writer = writers.get_report_writer(cfg.format)
    # The histogram carries no mechanism name, identical distributions give identical files.
    writer.write(stats.histogram_frame(), output)
    summary = {'mechanism': cfg.mechanism, 'source': cfg.source, 'mu': stats.mu,
               'entropy': stats.entropy}
    writer.write(summary, _summary_path(output))
    logging.info(f'{cfg.mechanism}: mu={stats.mu:.6f}, entropy={stats.entropy:.6f} nats.')
    return 0


def run_bench_mem(cfg: BenchMemConfig) -> int:
    profiles, ratios = membench.compare(cfg.modes, cfg.n, cfg.d, cfg.k, cfg.dilations, cfg.seed)
    output = pathlib.Path(cfg.output)
    if cfg.format == 'json':
        writers.get_report_writer('json').write(
            {'profiles': profiles.to_dict('records'), 'ratios': ratios.to_dict('records')},
            output)
    else:
        writer = writers.get_report_writer('csv')
        writer.write(profiles, output)
        writer.write(ratios, output.with_name(f'{output.stem}_ratios{output.suffix}'))
    logging.info('Peak auxiliary state (values):\n' + tabulate.tabulate(
        profiles.pivot_table(index=['n', 'd'], columns='mode', values='peak_state_values'),
        headers='keys', tablefmt='grid'))
    return 0


def run_train(cfg: TrainCommandConfig) -> int:
    checkpoint = pathlib.Path(cfg.checkpoint) if cfg.checkpoint else None
    result = training.train_toy(cfg.task(), cfg.model, cfg.train_config(), checkpoint)
    writers.get_report_writer('csv').write(result.log, pathlib.Path(cfg.output))
    final = result.log.iloc[-1]
    logging.info(f'Finished {cfg.model}: test_acc={final.test_acc:.3f}, '
                 f'smoothed loss monotone: {training.smoothed_monotone(result.log.train_loss)}.')
    return 0


def run_ablate(cfg: AblateConfig) -> int:
    presets = {name: attention.ABLATION_DILATIONS[name] for name in cfg.presets}
    frame = training.ablate(cfg.task(), cfg.model, cfg.train_config(), presets)
    writers.get_report_writer('csv').write(frame, pathlib.Path(cfg.output))
    return 0


def kernel_params(cfg: ExportKernelConfig) -> dyn.DendriticParams:
    if cfg.checkpoint is None:
        return dyn.DendriticParams.random(cfg.d, np.random.default_rng(cfg.seed), k=cfg.k)
    task = training.ToyTask(grid=tensor.TokenGrid(cfg.grid_rows, cfg.grid_cols), d_embed=cfg.d)
    model = training.build_model(
        task, 'lrf_dyn', training.TrainConfig(dilations=cfg.dilations, k=cfg.k))
    training.load_checkpoint(model, pathlib.Path(cfg.checkpoint))
    return model.block.scan.as_params()


def run_export_kernel(cfg: ExportKernelConfig) -> int:
    params = kernel_params(cfg)
    frame = dyn.export_kernel_frame(params, cfg.length)
    writers.get_report_writer('csv').write(frame, pathlib.Path(cfg.output))
    logging.info(f'Exported {cfg.length} taps of {params.channels} channels, spectral radius '
                 f'{params.spectral_radius:.4f}.')
    return 0


_COMMANDS: Dict[str, Tuple[type, Callable[..., int]]] = {
    'verify': (VerifyConfig, run_verify),
    'analyze': (AnalyzeConfig, run_analyze),
    'bench_mem': (BenchMemConfig, run_bench_mem),
    'train': (TrainCommandConfig, run_train),
    'export_kernel': (ExportKernelConfig, run_export_kernel),
    'ablate': (AblateConfig, run_ablate),
}


def execute(command: str, overrides: Mapping[str, object],
            config_file: Optional[str] = None) -> int:
    """Resolves and validates the config of `command`, then runs it. Returns the exit code."""
    if command not in _COMMANDS:
        raise app.UsageError(f'Unknown command `{command}`. Options: {", ".join(_COMMANDS)}.',
                             exitcode=2)
    try:
        cli_config = (CliConfig.from_yaml(pathlib.Path(config_file)) if config_file
                      else CliConfig())
        cfg = cli_config.resolve(command, overrides)
        cfg.validate()
        logging.info(f'Running {command} with {cfg}.')
        return _COMMANDS[command][1](cfg)
    except (ValueError, OSError) as e:
        raise app.UsageError(str(e), exitcode=2) from e


def main(argv):
    if len(argv) != 2:
        raise app.UsageError(f'Usage: lrfkit <command> [flags]. Commands: '
                             f'{", ".join(_COMMANDS)}.', exitcode=2)
    overrides = {name: FLAGS[name].value for name in _SETTING_FLAGS if FLAGS[name].present}
    return execute(argv[1], overrides, _FLAG_CONFIG_FILE.value)


def cli():
    app.run(main)


if __name__ == '__main__':
    print('Should run with `poetry run lrfkit ...`')

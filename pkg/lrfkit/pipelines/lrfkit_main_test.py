"""Tests for the lrfkit command-line front end."""
import io
import json
import pathlib
import tempfile
import unittest
from unittest import mock

from absl import app
import numpy as np
import pandas as pd
from parameterized import parameterized

from lrfkit.analysis import analysis
from lrfkit.mechanisms import dyn
from lrfkit.pipelines import lrfkit_main
from lrfkit.pipelines.training import training


class CliConfigTest(unittest.TestCase):

    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.dir = pathlib.Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def test_defaults(self):
        cfg = lrfkit_main.CliConfig().resolve('bench_mem', {})
        self.assertEqual(cfg.n, (16, 64, 256))
        self.assertIsNone(cfg.seed)

    def test_flags_override_file(self):
        cli_config = lrfkit_main.CliConfig({'analyze': {'beta': .2, 'n': 32}})
        cfg = cli_config.resolve('analyze', {'n': ['16']})
        self.assertEqual((cfg.beta, cfg.n), (.2, 16))

    def test_list_values(self):
        cfg = lrfkit_main.CliConfig({'bench_mem': {'d': [64, 128]}}).resolve(
            'bench_mem', {'modes': ['ssa_v2', 'lrf_dyn'], 'dilations': []})
        self.assertEqual(cfg.d, (64, 128))
        self.assertEqual(cfg.modes, ('ssa_v2', 'lrf_dyn'))
        self.assertEqual(cfg.dilations, ())

    def test_unknown_setting(self):
        with self.assertRaisesRegex(ValueError, 'scope'):
            lrfkit_main.CliConfig().resolve('train', {'scope': 'dyn'})

    def test_single_value_setting(self):
        with self.assertRaises(ValueError):
            lrfkit_main.CliConfig().resolve('analyze', {'n': ['16', '32']})

    def test_from_yaml(self):
        path = self.dir / 'config.yaml'
        path.write_text('train:\n  epochs: 3\n  dilations: [1, 3]\n', encoding='utf8')
        cfg = lrfkit_main.CliConfig.from_yaml(path).resolve('train', {})
        self.assertEqual((cfg.epochs, cfg.dilations), (3, (1, 3)))

    def test_from_json(self):
        path = self.dir / 'config.json'
        path.write_text(json.dumps({'verify': {'scope': 'dyn'}}), encoding='utf8')
        self.assertEqual(lrfkit_main.CliConfig.from_yaml(path).resolve('verify', {}).scope, 'dyn')

    def test_unknown_section(self):
        path = self.dir / 'config.yaml'
        path.write_text('plot:\n  x: 1\n', encoding='utf8')
        with self.assertRaisesRegex(ValueError, 'unknown sections'):
            lrfkit_main.CliConfig.from_yaml(path)

    def test_shipped_config_resolves(self):
        cli_config = lrfkit_main.CliConfig.from_yaml(
            pathlib.Path(__file__).parents[2] / 'config' / 'lrfkit_config.yaml')
        for command in ('verify', 'analyze', 'bench_mem', 'train', 'export_kernel', 'ablate'):
            with self.subTest(command=command):
                cli_config.resolve(command, {'seed': 0, 'output': 'out.csv'}).validate()


class ExecuteTest(unittest.TestCase):

    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.dir = pathlib.Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def _usage_error(self, command, overrides):
        with self.assertRaises(app.UsageError) as context:
            lrfkit_main.execute(command, overrides)
        return context.exception

    def test_unknown_command(self):
        self.assertEqual(self._usage_error('plot', {}).exitcode, 2)

    @parameterized.expand((
        ('bench_mem', {'n': ['16'], 'd': ['8']}),
        ('train', {'epochs': 0}),
        ('ablate', {'epochs': 0}),
        ('export_kernel', {'length': 4}),
        ('analyze', {'source': 'sampled', 'samples': 1}),
    ))
    def test_randomized_commands_need_a_seed(self, command, overrides):
        output = self.dir / 'out.csv'
        error = self._usage_error(command, {**overrides, 'output': str(output)})
        self.assertEqual(error.exitcode, 2)
        self.assertIn('seed', str(error))
        self.assertEqual(list(self.dir.iterdir()), [])

    def test_invalid_value_writes_nothing(self):
        output = self.dir / 'out.csv'
        error = self._usage_error('analyze', {'lam': 1.5, 'output': str(output)})
        self.assertEqual(error.exitcode, 2)
        self.assertFalse(output.exists())

    def test_unwritable_output(self):
        error = self._usage_error('analyze', {'output': str(self.dir / 'missing' / 'out.csv')})
        self.assertEqual(error.exitcode, 2)

    @parameterized.expand((
        ('verify', {}),
        ('bench_mem', {'seed': 0, 'n': ['16'], 'd': ['8']}),
        ('ablate', {'seed': 0, 'epochs': 0}),
        ('export_kernel', {'seed': 0, 'length': 4}),
    ))
    def test_missing_output_folder(self, command, overrides):
        output = self.dir / 'missing' / 'out.csv'
        error = self._usage_error(command, {**overrides, 'output': str(output)})
        self.assertEqual(error.exitcode, 2)
        self.assertIn('does not exist', str(error))

    def test_train_checks_every_output_before_training(self):
        overrides = {'seed': 0, 'epochs': 1, 'output': str(self.dir / 'missing' / 'log.csv'),
                     'checkpoint': str(self.dir / 'model.ckpt')}
        with mock.patch.object(training, 'train_toy') as train_toy:
            error = self._usage_error('train', overrides)
        self.assertEqual(error.exitcode, 2)
        train_toy.assert_not_called()
        self.assertEqual(list(self.dir.iterdir()), [])

    def test_train_checkpoint_folder_must_exist(self):
        overrides = {'seed': 0, 'epochs': 0, 'output': str(self.dir / 'log.csv'),
                     'checkpoint': str(self.dir / 'missing' / 'model.ckpt')}
        self.assertEqual(self._usage_error('train', overrides).exitcode, 2)
        self.assertEqual(list(self.dir.iterdir()), [])

    def test_export_needs_an_existing_checkpoint(self):
        overrides = {'checkpoint': str(self.dir / 'model.ckpt'),
                     'output': str(self.dir / 'kernel.csv')}
        self.assertEqual(self._usage_error('export_kernel', overrides).exitcode, 2)
        self.assertEqual(list(self.dir.iterdir()), [])


class AnalyzeCommandTest(unittest.TestCase):

    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.dir = pathlib.Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def _analyze(self, name, **overrides):
        output = self.dir / f'{name}.csv'
        exit_code = lrfkit_main.execute('analyze', {**overrides, 'output': str(output)})
        self.assertEqual(exit_code, 0)
        return output, pd.read_csv(output), pd.read_csv(self.dir / f'{name}_summary.csv')

    def test_vsa_ln2(self):
        _, histogram, summary = self._analyze('vsa', mechanism='vsa', beta=float(np.log(2.)), n=64)
        model = analysis.DistanceModel(1., np.log(2.), 64)
        np.testing.assert_allclose(
            histogram.mean_weight,
            analysis.normalize(analysis.model_weights(model, analysis.ModelKind.VSA)),
            atol=1e-15)
        self.assertAlmostEqual(summary.mu.iloc[0], 1., delta=1e-6)
        self.assertEqual(summary.mechanism.iloc[0], 'vsa')

    def test_flat_ssa(self):
        _, histogram, summary = self._analyze('ssa', mechanism='ssa', beta=0., n=64)
        np.testing.assert_allclose(histogram.mean_weight, np.full(64, 1. / 64), atol=1e-15)
        self.assertAlmostEqual(summary.entropy.iloc[0], np.log(64), delta=1e-12)

    def test_lrf_without_local_weight_matches_ssa(self):
        ssa, _, _ = self._analyze('ssa', mechanism='ssa', beta=.01, n=32)
        lrf, _, _ = self._analyze('lrf', mechanism='lrf-ssa', beta=.01, n=32, lam=0., radius=2)
        self.assertEqual(ssa.read_bytes(), lrf.read_bytes())

    def test_sampled_source(self):
        _, histogram, summary = self._analyze(
            'sampled', mechanism='lrf-ssa', source='sampled', samples=3, seed=0,
            grid_rows=4, grid_cols=4, d=8)
        self.assertEqual(len(histogram), 7)
        self.assertAlmostEqual(histogram.mean_weight.sum(), 1., delta=1e-9)
        self.assertGreater(summary.entropy.iloc[0], 0.)


class BenchMemCommandTest(unittest.TestCase):

    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.dir = pathlib.Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def test_dyn_ratio(self):
        output = self.dir / 'mem.csv'
        self.assertEqual(lrfkit_main.execute('bench_mem', {
            'modes': ['ssa_v2', 'lrf_dyn'], 'n': ['16'], 'd': ['512'], 'k': 8, 'seed': 0,
            'output': str(output)}), 0)
        ratios = pd.read_csv(self.dir / 'mem_ratios.csv')
        self.assertEqual(ratios.ratio.tolist(), [64.])
        profiles = pd.read_csv(output)
        self.assertEqual(profiles.peak_state_values.tolist(), [512 * 512, 8 * 512])

    def test_quadratic_scores(self):
        output = self.dir / 'mem.json'
        self.assertEqual(lrfkit_main.execute('bench_mem', {
            'modes': ['ssa_v1'], 'n': ['16'], 'd': ['8'], 'seed': 0, 'format': 'json',
            'output': str(output)}), 0)
        payload = json.loads(output.read_text(encoding='utf8'))
        self.assertEqual(payload['schema_version'], 1)
        self.assertEqual(payload['profiles'][0]['peak_state_values'], 256)


class VerifyCommandTest(unittest.TestCase):

    def test_analysis_scope_reports_counts(self):
        with tempfile.TemporaryDirectory() as tmp:
            output = pathlib.Path(tmp) / 'verify.json'
            self.assertEqual(
                lrfkit_main.execute('verify', {'scope': 'analysis', 'output': str(output)}), 0)
            payload = json.loads(output.read_text(encoding='utf8'))
        self.assertTrue(payload['passed'])
        self.assertEqual(payload['schema_version'], 1)
        self.assertEqual(payload['counts']['theorem1_points'], 108)
        self.assertIn('theorem2_pass', payload['counts'])

    def test_report_goes_to_stdout_without_output(self):
        with mock.patch('sys.stdout', new_callable=io.StringIO) as stdout:
            self.assertEqual(lrfkit_main.execute('verify', {'scope': 'analysis'}), 0)
        payload = json.loads(stdout.getvalue())
        self.assertTrue(payload['passed'])
        self.assertEqual(payload['scope'], 'analysis')

    def test_perturbed_kernel_exits_with_one(self):
        original = dyn.dyn_kernel

        def perturbed(params, length):
            taps = original(params, length).taps.copy()
            taps[0] *= 1.01
            return dyn.DynKernel(taps)

        with tempfile.TemporaryDirectory() as tmp:
            output = pathlib.Path(tmp) / 'verify.json'
            with mock.patch.object(dyn, 'dyn_kernel', side_effect=perturbed):
                exit_code = lrfkit_main.execute('verify', {'scope': 'dyn', 'output': str(output)})
            payload = json.loads(output.read_text(encoding='utf8'))
        self.assertEqual(exit_code, 1)
        self.assertIn('scan_fft_duality', payload['failed'])


class TrainingCommandsTest(unittest.TestCase):

    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.dir = pathlib.Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def _small(self, **overrides):
        return {'seed': 0, 'train_size': 64, 'test_size': 32, 'batch_size': 32, 'k': 4,
                'grid_rows': 4, 'grid_cols': 4, 'd': 8, 'dilations': ['1', '2'], **overrides}

    def test_zero_epochs_writes_single_row(self):
        output = self.dir / 'log.csv'
        lrfkit_main.execute('train', self._small(epochs=0, output=str(output)))
        log = pd.read_csv(output)
        self.assertEqual(log.epoch.tolist(), [0])
        self.assertEqual(list(log.columns), ['epoch', 'train_loss', 'train_acc', 'test_acc'])

    def test_rerun_gives_identical_bytes(self):
        first, second = self.dir / 'first.csv', self.dir / 'second.csv'
        for output in (first, second):
            lrfkit_main.execute('train', self._small(epochs=1, output=str(output)))
        self.assertEqual(first.read_bytes(), second.read_bytes())

    def test_export_trained_kernel(self):
        checkpoint = self.dir / 'model.ckpt'
        lrfkit_main.execute('train', self._small(
            epochs=1, output=str(self.dir / 'log.csv'), checkpoint=str(checkpoint)))
        output = self.dir / 'kernel.csv'
        lrfkit_main.execute('export_kernel', {
            'checkpoint': str(checkpoint), 'length': 5, 'k': 4, 'd': ['8'], 'grid_rows': 4,
            'grid_cols': 4, 'dilations': ['1', '2'], 'output': str(output)})
        kernel = pd.read_csv(output)
        self.assertEqual(list(kernel.columns), ['m', 'channel', 'tap_value'])
        self.assertEqual(len(kernel), 5 * 8)

    def test_export_random_kernel(self):
        output = self.dir / 'kernel.csv'
        lrfkit_main.execute('export_kernel', {'seed': 3, 'length': 6, 'd': ['2'], 'k': 3,
                                              'output': str(output)})
        kernel = pd.read_csv(output)
        params = dyn.DendriticParams.random(2, np.random.default_rng(3), k=3)
        np.testing.assert_allclose(kernel.tap_value,
                                   dyn.dyn_kernel(params, 6).taps.ravel(), rtol=1e-14, atol=1e-15)

    def test_ablate(self):
        output = self.dir / 'ablation.csv'
        lrfkit_main.execute('ablate', self._small(
            epochs=1, presets=['none', 'omega1'], output=str(output)))
        self.assertEqual(pd.read_csv(output).preset.tolist(), ['none', 'omega1'])


if __name__ == '__main__':
    unittest.main()

"""Tests for the training module."""
import dataclasses
import os
import pathlib
import tempfile
import unittest

import numpy as np
from parameterized import parameterized
import torch

from lrfkit.data import tensor
from lrfkit.pipelines.training import spiking
from lrfkit.pipelines.training import training


_RUN_SLOW_TESTS = os.environ.get('LRFKIT_RUN_SLOW_TESTS') == '1'


class ToyTaskTest(unittest.TestCase):

    def setUp(self):
        self.task = training.ToyTask(seed=3)

    def test_sample_layout(self):
        patches, label = self.task.sample(6)
        self.assertEqual(patches.shape, (64, training.PATCH_SIZE))
        self.assertEqual(label, 2)
        image, _ = self.task.image(6)
        # The center of each patch is the token's own pixel.
        np.testing.assert_array_equal(patches[:, 4], image.ravel())

    def test_border_patches_are_zero_padded(self):
        patches, _ = self.task.sample(0)
        np.testing.assert_array_equal(patches[0, [0, 1, 2, 3, 6]], np.zeros(5))

    def test_motif_is_present(self):
        image, label = self.task.image(5)
        windows = np.lib.stride_tricks.sliding_window_view(image, (3, 3))
        self.assertTrue(np.any(np.all(windows == training.MOTIFS[label], axis=(-1, -2))))

    def test_reproducible(self):
        np.testing.assert_array_equal(self.task.sample(11)[0],
                                      training.ToyTask(seed=3).sample(11)[0])
        self.assertFalse(np.array_equal(self.task.sample(11)[0],
                                        training.ToyTask(seed=4).sample(11)[0]))

    def test_split_is_balanced_and_disjoint(self):
        (train_x, train_y), (test_x, test_y) = self.task.split(32, 16)
        self.assertEqual(tuple(train_x.shape), (32, 64, 9))
        self.assertEqual(train_x.dtype, spiking.DTYPE)
        self.assertEqual(np.bincount(test_y.numpy()).tolist(), [4, 4, 4, 4])
        self.assertFalse(torch.equal(train_x[:16], test_x))

    @parameterized.expand((
        ('too_many_classes', dict(classes=5)),
        ('tiny_grid', dict(grid=tensor.TokenGrid(2, 8))),
        ('noise', dict(noise=1.)),
    ))
    def test_rejects_invalid(self, _, kwargs):
        with self.assertRaises(ValueError):
            training.ToyTask(**kwargs)


class TrainConfigTest(unittest.TestCase):

    @parameterized.expand((
        ('learning_rate', dict(learning_rate=0.)),
        ('epochs', dict(epochs=-1)),
        ('batch_size', dict(batch_size=0)),
        ('momentum', dict(momentum=1.)),
    ))
    def test_rejects_invalid(self, _, kwargs):
        with self.assertRaises(ValueError):
            training.TrainConfig(**kwargs)

    def test_collects_every_error(self):
        with self.assertRaisesRegex(ValueError, 'learning_rate.*timesteps'):
            training.TrainConfig(learning_rate=-1., timesteps=0)


class SmoothedMonotoneTest(unittest.TestCase):

    def test_decreasing(self):
        self.assertTrue(training.smoothed_monotone(np.linspace(2., .1, 50)))

    def test_late_increase(self):
        losses = np.concatenate([np.linspace(2., .1, 40), np.linspace(.1, 1., 10)])
        self.assertFalse(training.smoothed_monotone(losses))

    def test_early_bump_is_ignored(self):
        losses = np.concatenate([[1., 3., 5., 7., 9.], np.linspace(2., .1, 45)])
        self.assertTrue(training.smoothed_monotone(losses))

    def test_short_history(self):
        self.assertTrue(training.smoothed_monotone([1., 2.]))


class GradCheckTest(unittest.TestCase):

    def test_quadratic_function(self):
        rng = np.random.default_rng(0)
        weights = torch.as_tensor(rng.normal(size=20), dtype=spiking.DTYPE).requires_grad_()
        scales = torch.as_tensor(rng.uniform(.5, 2., size=20), dtype=spiking.DTYPE)
        report = training.grad_check_fn(lambda: (scales * weights**2).sum(), [weights])
        self.assertEqual(report.checked, 20)
        self.assertLessEqual(report.max_rel_error, 1e-8)

    def test_rejects_epsilon_out_of_range(self):
        weights = torch.zeros(2, dtype=spiking.DTYPE, requires_grad=True)
        with self.assertRaises(ValueError):
            training.grad_check_fn(lambda: weights.sum(), [weights], epsilon=1e-3)

    @parameterized.expand([(seed,) for seed in range(5)])
    def test_lrf_dyn_smooth_path(self, seed):
        task = training.ToyTask(grid=tensor.TokenGrid(4, 4), d_embed=8, seed=seed)
        cfg = training.TrainConfig(seed=seed, k=4, dilations=(1, 2))
        model = training.build_model(task, 'lrf_dyn', cfg)
        patches, labels = task.batch(range(4))
        report = training.grad_check(model, patches, labels, samples=100, seed=seed)
        self.assertTrue(report.finite)
        self.assertGreaterEqual(report.checked, 100)
        self.assertLessEqual(report.max_rel_error, 1e-4)

    def test_zero_input_has_finite_gradients(self):
        task = training.ToyTask(grid=tensor.TokenGrid(4, 4), d_embed=8)
        model = training.build_model(task, 'lrf_dyn', training.TrainConfig(k=4))
        patches = torch.zeros(2, 16, training.PATCH_SIZE, dtype=spiking.DTYPE)
        report = training.grad_check(model, patches, torch.tensor([0, 1]), samples=20)
        self.assertTrue(report.finite)
        self.assertTrue(report.passed())


class TrainToyTest(unittest.TestCase):

    def _small_config(self, **kwargs):
        return training.TrainConfig(**{'epochs': 1, 'train_size': 64, 'test_size': 32,
                                       'batch_size': 32, 'k': 4, **kwargs})

    def test_zero_epochs_is_chance_level(self):
        result = training.train_toy(training.ToyTask(), 'lrf_dyn',
                                    self._small_config(epochs=0, test_size=512))
        self.assertEqual(result.log.epoch.tolist(), [0])
        self.assertAlmostEqual(result.log.test_acc.iloc[0], .25, delta=.05)

    def test_log_columns(self):
        result = training.train_toy(training.ToyTask(), 'ssa', self._small_config(epochs=2))
        self.assertEqual(list(result.log.columns),
                         ['epoch', 'train_loss', 'train_acc', 'test_acc'])
        self.assertEqual(result.log.epoch.tolist(), [1, 2])
        self.assertTrue(np.all(np.isfinite(result.log.train_loss)))

    def test_deterministic(self):
        cfg = self._small_config()
        first = training.train_toy(training.ToyTask(), 'lrf_ssa', cfg)
        second = training.train_toy(training.ToyTask(), 'lrf_ssa', cfg)
        self.assertTrue(first.log.equals(second.log))

    def test_divergence_raises(self):
        with self.assertRaises(FloatingPointError):
            training.train_toy(training.ToyTask(), 'ssa',
                               self._small_config(learning_rate=float('inf')))

    def test_checkpoint_round_trip(self):
        task = training.ToyTask()
        result = training.train_toy(task, 'lrf_dyn', self._small_config())
        with tempfile.TemporaryDirectory() as tmp:
            path = pathlib.Path(tmp) / 'model.ckpt'
            training.save_checkpoint(result.model, path)
            restored = training.build_model(task, 'lrf_dyn', self._small_config(seed=1))
            training.load_checkpoint(restored, path)
        for (name, a), (_, b) in zip(result.model.state_dict().items(),
                                     restored.state_dict().items()):
            with self.subTest(name=name):
                torch.testing.assert_close(a, b, rtol=0., atol=0.)

    def test_checkpoint_mismatch(self):
        task = training.ToyTask()
        with tempfile.TemporaryDirectory() as tmp:
            path = pathlib.Path(tmp) / 'model.ckpt'
            training.save_checkpoint(training.build_model(task, 'ssa', self._small_config()),
                                     path)
            with self.assertRaises(ValueError):
                training.load_checkpoint(
                    training.build_model(task, 'lrf_ssa', self._small_config()), path)

    def test_ablation_needs_local_kernels(self):
        with self.assertRaises(ValueError):
            training.ablate(training.ToyTask(), 'ssa', self._small_config())

    def test_ablation_rows(self):
        frame = training.ablate(training.ToyTask(), 'lrf_ssa', self._small_config(),
                                presets={'none': (), 'omega1': (1,)})
        self.assertEqual(frame.preset.tolist(), ['none', 'omega1'])
        self.assertEqual(frame.dilations.tolist(), ['', '1'])


@unittest.skipUnless(_RUN_SLOW_TESTS, 'set LRFKIT_RUN_SLOW_TESTS=1 to run')
class ConvergenceTest(unittest.TestCase):

    @parameterized.expand([(kind, seed) for kind in ('lrf_dyn', 'lrf_ssa') for seed in range(3)])
    def test_reaches_high_accuracy(self, kind, seed):
        cfg = dataclasses.replace(training.TrainConfig(), seed=seed)
        result = training.train_toy(training.ToyTask(seed=seed), kind, cfg)
        self.assertGreaterEqual(result.log.test_acc.iloc[-1], .9)
        self.assertTrue(training.smoothed_monotone(result.log.train_loss),
                        msg=result.log.train_loss.tolist())

    def test_ssa_baseline_close_to_local_variants(self):
        task, cfg = training.ToyTask(), training.TrainConfig()
        final = {kind: training.train_toy(task, kind, cfg).log.test_acc.iloc[-1]
                 for kind in ('ssa', 'lrf_ssa', 'lrf_dyn')}
        for kind in ('lrf_ssa', 'lrf_dyn'):
            with self.subTest(kind=kind):
                self.assertLessEqual(abs(final['ssa'] - final[kind]), .05)


if __name__ == '__main__':
    unittest.main()

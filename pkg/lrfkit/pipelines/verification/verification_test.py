"""Tests for the verification suites."""
import unittest
from unittest import mock

from lrfkit.mechanisms import dyn
from lrfkit.pipelines.verification import verification


_ORIGINAL_KERNEL = dyn.dyn_kernel


def _perturbed_kernel(params, length):
    taps = _ORIGINAL_KERNEL(params, length).taps.copy()
    taps[min(3, length - 1)] += 1e-2
    return dyn.DynKernel(taps)


class CheckResultTest(unittest.TestCase):

    def test_passed(self):
        self.assertTrue(verification.CheckResult('dyn', 'x', 1e-7, 1e-6).passed)
        self.assertFalse(verification.CheckResult('dyn', 'x', 1e-5, 1e-6).passed)
        self.assertFalse(verification.CheckResult('dyn', 'x', float('nan'), 1e-6).passed)

    def test_report_lists_failures(self):
        report = verification.VerificationReport([
            verification.CheckResult('dyn', 'good', 0., 0.),
            verification.CheckResult('dyn', 'bad', 1., 0.),
        ])
        self.assertFalse(report.passed)
        self.assertEqual(report.failed, ['bad'])
        self.assertEqual(list(report.frame().columns),
                         ['suite', 'name', 'residual', 'tolerance', 'passed'])


class SuitesTest(unittest.TestCase):

    def test_attention_suite_passes(self):
        checks = verification.attention_suite(seed=0)
        self.assertEqual([c.name for c in checks if not c.passed], [])

    def test_dyn_suite_passes(self):
        checks = verification.dyn_suite(seed=0, lengths=(8, 64, 256), params_per_length=3)
        self.assertEqual([c.name for c in checks if not c.passed], [])

    def test_perturbed_kernel_fails_duality(self):
        with mock.patch.object(dyn, 'dyn_kernel', side_effect=_perturbed_kernel):
            report = verification.run_suites(
                {'dyn': lambda: verification.dyn_suite(lengths=(8, 64), params_per_length=2)})
        self.assertFalse(report.passed)
        self.assertIn('scan_fft_duality', report.failed)

    def test_analysis_suite_counts(self):
        result = verification.analysis_suite()
        self.assertEqual([c.name for c in result['checks'] if not c.passed], [])
        counts = result['counts']
        self.assertEqual(counts['theorem1_points'], 108)
        self.assertEqual(counts['theorem2_points'], 108)
        self.assertEqual(counts['theorem1_pass'] + counts['theorem1_assumption_violated'], 108)
        self.assertEqual(counts['theorem2_pass'] + counts['theorem2_bound_only'], 108)

    def test_membench_suite_passes(self):
        checks = verification.membench_suite(seed=0, ns=(16, 64), ds=(16, 64))
        self.assertEqual([c.name for c in checks if not c.passed], [])

    def test_unknown_scope(self):
        with self.assertRaisesRegex(ValueError, 'Unknown scope'):
            verification.run('everything')


if __name__ == '__main__':
    unittest.main()

"""Invariant suites run by `lrfkit verify`.

Every check measures a residual and compares it to a tolerance. Counting checks (grid failures,
mismatched peaks) use the number of failures as the residual with tolerance 0.
"""
import dataclasses
import itertools as it
from typing import Callable, Dict, List, Mapping, Sequence

from absl import logging
import numpy as np
import pandas as pd
import tabulate
import tqdm

from lrfkit.analysis import analysis
from lrfkit.data import tensor
from lrfkit.mechanisms import attention
from lrfkit.mechanisms import dyn
from lrfkit.membench import membench


SCOPES = ('attention', 'dyn', 'analysis', 'membench')


@dataclasses.dataclass(frozen=True)
class CheckResult:
    suite: str
    name: str
    residual: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.residual) and self.residual <= self.tolerance)

    def to_dict(self) -> Dict[str, object]:
        return {**dataclasses.asdict(self), 'passed': self.passed}


@dataclasses.dataclass(frozen=True)
class VerificationReport:
    checks: List[CheckResult]
    counts: Mapping[str, int] = dataclasses.field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    @property
    def failed(self) -> List[str]:
        return [check.name for check in self.checks if not check.passed]

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame([check.to_dict() for check in self.checks],
                            columns=['suite', 'name', 'residual', 'tolerance', 'passed'])

    def to_dict(self) -> Dict[str, object]:
        return {'passed': self.passed,
                'failed': self.failed,
                'counts': dict(self.counts),
                'checks': [check.to_dict() for check in self.checks]}


def _max_abs(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)), initial=0.))


def _random_spikes(rng: np.random.Generator, shape) -> np.ndarray:
    return (rng.random(shape) < .5).astype(tensor.DTYPE)


def _brute_force_causal(q, k, v, grid: tensor.TokenGrid, cfg: attention.LrfConfig):
    """Causal global part and full local part, one token pair and one tap at a time."""
    s = cfg.scale_for(q.shape[-1])
    out = np.zeros_like(v)
    for n in range(grid.num_tokens):
        for j in range(n + 1):
            out[n] += s * (q[n] @ k[j]) * v[j]
        for m, d in enumerate(cfg.dilations):
            for i, j in it.product(range(3), repeat=2):
                neighbor = grid.neighbor_index(n, ((i - 1) * d, (j - 1) * d))
                if neighbor is not None:
                    out[n] += cfg.weights[m, i, j] * v[neighbor]
    return out


def attention_suite(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)

    associativity = 0.
    for _ in range(100):
        t, n, d = rng.integers(1, 5), rng.integers(1, 65), rng.integers(1, 33)
        q, k, v = (_random_spikes(rng, (t, 1, n, d)) for _ in range(3))
        s = 1. / np.sqrt(d)
        associativity = max(associativity, _max_abs(attention.ssa_quadratic(q, k, v, s),
                                                    attention.ssa_linear(q, k, v, s)))

    grid = tensor.TokenGrid(4, 4)
    causal = 0.
    for _ in range(50):
        q, k, v = (_random_spikes(rng, (grid.num_tokens, 8)) for _ in range(3))
        cfg = attention.LrfConfig.random(8, rng, dilations=(1, 2))
        causal = max(causal, _max_abs(attention.lrf_ssa_causal(q, k, v, grid, cfg),
                                      _brute_force_causal(q, k, v, grid, cfg)))

    zero_kernels = 0.
    for _ in range(20):
        q, k, v = (_random_spikes(rng, (grid.num_tokens, 8)) for _ in range(3))
        zero_kernels = max(zero_kernels, _max_abs(
            attention.lrf_ssa_causal(q, k, v, grid, attention.LrfConfig.zeros(8)),
            attention.ssa_causal(q, k, v, 1. / np.sqrt(8))))

    q, k = (_random_spikes(rng, (3, 16, 8)) for _ in range(2))
    row_sums = attention.vsa_scores(q, k).sum(axis=-1)

    locality_grid = tensor.TokenGrid(8, 8)
    losses = 0
    for _ in tqdm.tqdm(range(100), desc='locality'):
        q, k, v = (_random_spikes(rng, (locality_grid.num_tokens, 16)) for _ in range(3))
        lrf = attention.effective_scores(q, k, v, locality_grid,
                                         attention.LrfConfig.random(16, rng))
        ssa = attention.effective_scores(q, k, v, locality_grid, attention.LrfConfig.zeros(16))
        if not (analysis.mass_within(lrf, locality_grid, 4)
                > analysis.mass_within(ssa, locality_grid, 4)):
            losses += 1

    return [
        CheckResult('attention', 'ssa_associativity', associativity, 1e-9),
        CheckResult('attention', 'causal_decomposition', causal, 1e-9),
        CheckResult('attention', 'zero_kernels_reduce_to_ssa', zero_kernels, 1e-12),
        CheckResult('attention', 'vsa_row_stochastic', _max_abs(row_sums, 1.), 1e-12),
        CheckResult('attention', 'local_mass_concentration', float(losses), 5.),
    ]


def _relative_error(reference, candidate) -> float:
    scale = float(np.max(np.abs(reference)))
    return _max_abs(reference, candidate) / scale if scale > 0 else _max_abs(reference, candidate)


def dyn_suite(seed: int = 0, lengths: Sequence[int] = (8, 64, 256, 1024),
              params_per_length: int = 20, d: int = 32) -> List[CheckResult]:
    rng = np.random.default_rng(seed)

    duality = 0.
    for n, _ in tqdm.tqdm(list(it.product(lengths, range(params_per_length))),
                          desc='scan/fft'):
        params = dyn.DendriticParams.random(d, rng, k=dyn.DEFAULT_DENDRITES)
        tokens = rng.normal(size=(n, d))
        duality = max(duality, _relative_error(dyn.dyn_scan(tokens, params),
                                               dyn.dyn_fft(tokens, params)))

    power = 0.
    envelope_failures = 0
    for params_seed in range(10):
        params = dyn.DendriticParams.random(4, np.random.default_rng(params_seed))
        kernel = dyn.dyn_kernel(params, 256)
        taps = np.array([params.c_read @ np.linalg.matrix_power(params.m_trans, m)
                         @ params.gamma_in for m in range(256)])
        power = max(power, _max_abs(kernel.taps, np.outer(taps, params.big_gamma)))
        envelope_failures += not kernel.within_envelope(params.spectral_radius)

    params = dyn.DendriticParams.random(4, rng)
    tokens = rng.normal(size=(32, 4))
    changed = tokens.copy()
    changed[20:] += rng.normal(size=(12, 4))
    causality = _max_abs(dyn.dyn_scan(tokens, params)[:20], dyn.dyn_scan(changed, params)[:20])

    return [
        CheckResult('dyn', 'scan_fft_duality', duality, 1e-6),
        CheckResult('dyn', 'kernel_matrix_power', power, 1e-12),
        CheckResult('dyn', 'kernel_envelope', float(envelope_failures), 0.),
        CheckResult('dyn', 'scan_causality', causality, 0.),
    ]


def analysis_suite() -> Dict[str, object]:
    theorem1 = analysis.theorem1_grid()
    theorem2 = analysis.theorem2_grid()
    entropy_residuals = analysis.vsa_entropy_residuals()
    series = max(abs(analysis.series_mu_vsa(beta)
                     - analysis.closed_form_mu(analysis.DistanceModel(1., beta, 1),
                                               analysis.LimitKind.VSA_INF))
                 for beta in (np.log(3.), np.log(2.), .1))
    ln2 = abs(analysis.closed_form_mu(analysis.DistanceModel(1., np.log(2.), 1),
                                      analysis.LimitKind.VSA_INF) - 1.)
    checks = [
        CheckResult('analysis', 'theorem1_ordering',
                    float((theorem1.status == 'fail').sum()), 0.),
        CheckResult('analysis', 'theorem1_identity',
                    float(theorem1.identity_residual.max()), 1e-12),
        CheckResult('analysis', 'theorem2_bound', float((~theorem2.bound_holds).sum()), 0.),
        CheckResult('analysis', 'theorem2_ordering',
                    float((theorem2.status == 'fail').sum()), 0.),
        CheckResult('analysis', 'vsa_entropy_closed_form',
                    float(entropy_residuals.residual.max()), 1e-9),
        CheckResult('analysis', 'vsa_mu_series', series, 1e-6),
        CheckResult('analysis', 'vsa_mu_ln2', ln2, 1e-6),
    ]
    counts = {
        'theorem1_points': len(theorem1),
        'theorem1_pass': int((theorem1.status == 'pass').sum()),
        'theorem1_assumption_violated': int((theorem1.status == 'assumption violated').sum()),
        'theorem2_points': len(theorem2),
        'theorem2_pass': int((theorem2.status == 'pass').sum()),
        'theorem2_bound_only': int((theorem2.status == 'bound only').sum()),
    }
    return {'checks': checks, 'counts': counts}


def membench_suite(seed: int = 0, ns: Sequence[int] = (16, 64, 256),
                   ds: Sequence[int] = (64, 256, 512), k: int = 8) -> List[CheckResult]:
    modes = [mode.value for mode in membench.Mode]
    profiles, ratios = membench.compare(modes, ns, ds, k, seed=seed)
    expected = [membench.expected_peak(row.mode, row.n, row.d, row.k)
                for row in profiles.itertuples()]
    mismatched = int((profiles.peak_state_values != expected).sum())

    ratio = ratios[(ratios.numerator == 'ssa_v2') & (ratios.denominator == 'lrf_dyn')
                   & (ratios.d == max(ds))].ratio
    ratio_residual = float(np.max(np.abs(ratio - max(ds) / k))) if len(ratio) else np.inf

    streaming = 0.
    for mode, n in it.product(modes, (16, 64)):
        inputs = membench.StreamInputs.random(n, 8, k, seed=seed)
        out, _ = membench.stream(mode, inputs)
        streaming = max(streaming, _max_abs(out, membench.batch_reference(mode, inputs)))

    return [
        CheckResult('membench', 'peak_state_exact', float(mismatched), 0.),
        CheckResult('membench', 'ssa_v2_to_lrf_dyn_ratio', ratio_residual, 0.),
        CheckResult('membench', 'streaming_matches_batch', streaming, 1e-9),
    ]


def _resolve_scope(scope: str) -> List[str]:
    if scope == 'all':
        return list(SCOPES)
    if scope not in SCOPES:
        raise ValueError(f'Unknown scope `{scope}`. Options: all, {", ".join(SCOPES)}.')
    return [scope]


def run(scope: str = 'all', seed: int = 0) -> VerificationReport:
    """Runs the suites selected by `scope`."""
    suites: Dict[str, Callable[[], object]] = {
        'attention': lambda: attention_suite(seed),
        'dyn': lambda: dyn_suite(seed),
        'analysis': analysis_suite,
        'membench': lambda: membench_suite(seed),
    }
    return run_suites({name: suites[name] for name in _resolve_scope(scope)})


def run_suites(suites: Mapping[str, Callable[[], object]]) -> VerificationReport:
    """Runs every suite in order and logs a table of every check.

    A suite returns a list of checks, or a dict with `checks` and `counts`.
    """
    checks, counts = [], {}
    for name, suite in suites.items():
        logging.info(f'Running the {name} suite.')
        result = suite()
        if isinstance(result, dict):
            checks.extend(result['checks'])
            counts.update(result['counts'])
        else:
            checks.extend(result)

    report = VerificationReport(checks=checks, counts=counts)
    logging.info('Verification results:\n' + tabulate.tabulate(
        report.frame(), headers='keys', tablefmt='grid', showindex=False, floatfmt='.3g'))
    if not report.passed:
        logging.error(f'Failed checks: {", ".join(report.failed)}')
    return report

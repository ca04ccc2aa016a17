"""A script to compare sampled attention statistics of the mechanisms over a few grid sizes."""
from absl import app
from absl import flags
from absl import logging
import pandas as pd
import tabulate

from lrfkit.analysis import analysis
from lrfkit.data import tensor

_FLAG_SIZES = flags.DEFINE_list('sizes', ['4', '8', '12'], 'Square grid sizes to sweep.')
_FLAG_D = flags.DEFINE_integer('d', 16, 'Channels of the random spike inputs.')
_FLAG_SAMPLES = flags.DEFINE_integer('samples', 20, 'Random inputs per point.')
_FLAG_RADIUS = flags.DEFINE_integer('radius', 4, 'Radius of the reported local mass.')
_FLAG_SEED = flags.DEFINE_integer('seed', 0, 'Random seed.')


def main(_):
    rows = []
    for size in map(int, _FLAG_SIZES.value):
        grid = tensor.TokenGrid(size, size)
        for mechanism in ('vsa', 'ssa', 'lrf-ssa'):
            stats = analysis.sampled_stats(mechanism, grid, _FLAG_D.value, _FLAG_SAMPLES.value,
                                           _FLAG_SEED.value)
            rows.append({'grid': f'{size}x{size}', 'mechanism': mechanism, 'mu': stats.mu,
                         'entropy': stats.entropy,
                         'mass_within': stats.mass_within(_FLAG_RADIUS.value)})
    logging.info('\n' + tabulate.tabulate(pd.DataFrame(rows), headers='keys', tablefmt='grid',
                                          showindex=False, floatfmt='.4f'))


if __name__ == '__main__':
    app.run(main)

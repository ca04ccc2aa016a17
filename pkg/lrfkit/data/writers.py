"""Report writers and the LRFKIT1 checkpoint codec."""
import json
import pathlib
from typing import Dict, Mapping, Protocol, Union

import numpy as np
import pandas as pd

from lrfkit.utils import io_utils


SCHEMA_VERSION = 1
CHECKPOINT_HEADER = 'LRFKIT1'

Report = Union[pd.DataFrame, Mapping[str, object]]


class ReportWriter(Protocol):
    """Protocol for report writers."""
    suffix: str

    def write(self, report: Report, path: pathlib.Path):
        ...


def _to_frame(report: Report) -> pd.DataFrame:
    if isinstance(report, pd.DataFrame):
        return report
    return pd.DataFrame([dict(report)])


def _jsonable(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f'{type(value).__name__} is not JSON serializable.')


class CsvReportWriter:
    """Writes a table with a header row. Mappings become a single-row table."""
    suffix = '.csv'

    def write(self, report: Report, path: pathlib.Path):
        text = _to_frame(report).to_csv(index=False, lineterminator='\n')
        io_utils.atomic_write_text(path, text)


class JsonReportWriter:
    """Writes `{"schema_version": 1, ...}`; tables are stored under `rows`."""
    suffix = '.json'

    def dumps(self, report: Report) -> str:
        if isinstance(report, pd.DataFrame):
            payload = {'rows': report.to_dict('records')}
        else:
            payload = dict(report)
        payload = {'schema_version': SCHEMA_VERSION, **payload}
        return json.dumps(payload, indent=2, default=_jsonable) + '\n'

    def write(self, report: Report, path: pathlib.Path):
        io_utils.atomic_write_text(path, self.dumps(report))


_REPORT_WRITER_REGISTRY = {
    'csv': CsvReportWriter(),
    'json': JsonReportWriter(),
}


def get_report_writer(format_name: str) -> ReportWriter:
    if format_name not in _REPORT_WRITER_REGISTRY:
        raise ValueError(f'Unknown format `{format_name}` for ReportWriter.')
    return _REPORT_WRITER_REGISTRY[format_name]


def encode_checkpoint(params: Mapping[str, np.ndarray]) -> str:
    """Serializes named float arrays. See docs/checkpoint_format.md."""
    lines = [CHECKPOINT_HEADER]
    for name, array in params.items():
        if not name or any(c.isspace() for c in name):
            raise ValueError(f'parameter name `{name}` must be non-empty without whitespace.')
        array = np.asarray(array, dtype=np.float64)
        lines.append(f'{name}\t{",".join(str(dim) for dim in array.shape)}')
        lines.append(' '.join(repr(float(x)) for x in array.ravel()))
    return '\n'.join(lines) + '\n'


def decode_checkpoint(text: str) -> Dict[str, np.ndarray]:
    lines = text.split('\n')
    if lines[-1] == '':
        lines.pop()
    if not lines or lines[0] != CHECKPOINT_HEADER:
        raise ValueError(f'not a checkpoint, expected a `{CHECKPOINT_HEADER}` header.')
    if len(lines) % 2 != 1:
        raise ValueError('checkpoint is truncated, a parameter has no values line.')

    params = {}
    for header, values in zip(lines[1::2], lines[2::2]):
        name, sep, shape_text = header.partition('\t')
        if not sep or name in params:
            raise ValueError(f'bad or duplicate parameter header `{header}`.')
        try:
            shape = tuple(int(dim) for dim in shape_text.split(',')) if shape_text else ()
            flat = np.array([float(x) for x in values.split()], dtype=np.float64)
        except ValueError as e:
            raise ValueError(f'cannot parse parameter `{name}`: {e}') from e
        if flat.size != int(np.prod(shape, dtype=int)):
            raise ValueError(f'parameter `{name}` has {flat.size} values for shape {shape}.')
        params[name] = flat.reshape(shape)
    return params


def save_checkpoint(params: Mapping[str, np.ndarray], path: pathlib.Path):
    io_utils.atomic_write_text(path, encode_checkpoint(params))


def load_checkpoint(path: pathlib.Path) -> Dict[str, np.ndarray]:
    with open(path, encoding='utf8') as f:
        return decode_checkpoint(f.read())

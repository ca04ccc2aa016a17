"""File output helpers."""
import contextlib
import os
import pathlib
import tempfile
from typing import Iterator, TextIO, Union


PathLike = Union[str, os.PathLike]


@contextlib.contextmanager
def atomic_write(path: PathLike) -> Iterator[TextIO]:
    """Opens a temp file next to `path` and renames it over `path` only when the block succeeds.

    Readers never see a partially written file, a failing block leaves `path` untouched.
    """
    path = pathlib.Path(path)
    if not path.parent.is_dir():
        raise OSError(f'output directory `{path.parent}` does not exist.')
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f'.{path.name}.', suffix='.tmp')
    try:
        with os.fdopen(fd, 'w', encoding='utf8', newline='\n') as f:
            yield f
        os.replace(tmp_name, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp_name)
        raise


def atomic_write_text(path: PathLike, text: str):
    with atomic_write(path) as f:
        f.write(text)

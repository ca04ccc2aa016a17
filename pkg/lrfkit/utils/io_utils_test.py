"""Tests for the io_utils module."""
import pathlib
import tempfile
import unittest

from lrfkit.utils import io_utils


class AtomicWriteTest(unittest.TestCase):

    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.dir = pathlib.Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def test_writes_file(self):
        path = self.dir / 'out.txt'
        io_utils.atomic_write_text(path, 'hello\n')
        self.assertEqual(path.read_text(encoding='utf8'), 'hello\n')
        self.assertEqual([p.name for p in self.dir.iterdir()], ['out.txt'])

    def test_failure_keeps_previous_content(self):
        path = self.dir / 'out.txt'
        path.write_text('old', encoding='utf8')
        with self.assertRaises(RuntimeError):
            with io_utils.atomic_write(path) as f:
                f.write('partial')
                raise RuntimeError('boom')
        self.assertEqual(path.read_text(encoding='utf8'), 'old')
        self.assertEqual([p.name for p in self.dir.iterdir()], ['out.txt'])

    def test_missing_directory(self):
        with self.assertRaises(OSError):
            io_utils.atomic_write_text(self.dir / 'missing' / 'out.txt', 'x')


if __name__ == '__main__':
    unittest.main()

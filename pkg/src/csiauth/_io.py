"""Atomic file writing: outputs appear complete or not at all."""

import os
import tempfile
from contextlib import contextmanager


@contextmanager
def atomic_write(path):
    """Write to a temp file in the target directory, rename on success."""
    path = os.path.abspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path), prefix=".tmp.")
    handle = os.fdopen(fd, "w", encoding="utf-8", newline="")
    try:
        yield handle
        handle.close()
        os.replace(tmp, path)
    except BaseException:
        handle.close()
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise

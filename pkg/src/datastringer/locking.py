from __future__ import annotations

import fcntl
import os
import time
from contextlib import contextmanager
from pathlib import Path

from .errors import LockContention


@contextmanager
def file_lock(path: str | os.PathLike, timeout: float = 0.0, poll: float = 0.05):
    """Exclusive advisory lock on ``path``; raises LockContention after ``timeout`` seconds."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd = os.open(path, os.O_RDWR | os.O_CREAT, 0o644)
    try:
        deadline = time.monotonic() + timeout
        while True:
            try:
                fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
                break
            except BlockingIOError:
                if time.monotonic() >= deadline:
                    raise LockContention(f"{path} is held by another process") from None
                time.sleep(poll)
        try:
            yield
        finally:
            fcntl.flock(fd, fcntl.LOCK_UN)
    finally:
        os.close(fd)


def atomic_write(path: str | os.PathLike, data: bytes, tmp_suffix: str = ".tmp") -> None:
    """Write via a sibling temp file, fsync, then rename over ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + tmp_suffix)
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)

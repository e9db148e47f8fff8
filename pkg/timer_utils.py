"""
Shared logging and timing helpers for the solver.
"""

import time
from collections.abc import Callable, Iterator
from contextlib import contextmanager


def format_elapsed(secs: float) -> str:
    """Human-readable duration string (e.g. '1:23' or '1:02:03')."""
    m, s = divmod(int(secs), 60)
    if m >= 60:
        h, m = divmod(m, 60)
        return f"{h}:{m:02d}:{s:02d}"
    return f"{m}:{s:02d}"


def emit_log(log: Callable[[str], None] | None, msg: str) -> None:
    """Print to stdout or forward to a caller-supplied log callback."""
    if log:
        log(msg)
    else:
        print(msg)


@contextmanager
def timed(log: Callable[[str], None] | None, desc: str, timings: dict | None = None) -> Iterator[None]:
    """Log `desc`, run the block, log its duration; also store seconds under timings[desc]."""
    emit_log(log, f"{desc}...")
    start = time.perf_counter()
    yield
    elapsed = time.perf_counter() - start
    if timings is not None:
        timings[desc] = elapsed
    emit_log(log, f"  {desc}: done in {format_elapsed(elapsed)}")

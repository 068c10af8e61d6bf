"""Record subscribed samples to an NDJSON file.

This is the one piece of local persistence the SDK offers: a callback that
appends each sample as a canonical data line, byte for byte what the hub
put on the wire. The resulting file feeds straight back into hub tooling
(extraction, replay) with no conversion step.
"""

from __future__ import annotations

import threading
from pathlib import Path

from .wire import Sample, encode_data

__all__ = ["NdjsonRecorder"]


class NdjsonRecorder:
    """A subscribe callback that appends every sample to ``path``.

    Safe to share between subscriptions on one session; a lock keeps lines
    whole if several sessions write to the same recorder. Use as a context
    manager or call :meth:`close` to flush.
    """

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._fh = open(self.path, "ab")
        self.count = 0

    def __call__(self, sample: Sample) -> None:
        line = encode_data(sample)
        with self._lock:
            self._fh.write(line)
            self.count += 1

    def close(self) -> None:
        with self._lock:
            if not self._fh.closed:
                self._fh.flush()
                self._fh.close()

    def __enter__(self) -> "NdjsonRecorder":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

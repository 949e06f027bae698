"""Wall-clock timers and solve counters threaded through a run."""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field


@dataclass
class RunStats:
    counters: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)
    _t0: float = field(default_factory=time.perf_counter)

    def count(self, key: str, inc: int = 1):
        self.counters[key] = self.counters.get(key, 0) + inc

    @contextmanager
    def timer(self, key: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.seconds[key] = self.seconds.get(key, 0.0) + time.perf_counter() - start

    @property
    def total_seconds(self) -> float:
        return time.perf_counter() - self._t0

    def report(self) -> dict:
        out = {"total_seconds": self.total_seconds}
        out.update({f"seconds_{k}": v for k, v in sorted(self.seconds.items())})
        out.update({f"count_{k}": v for k, v in sorted(self.counters.items())})
        return out

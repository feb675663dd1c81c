"""Per-worker counters and the line-delimited metrics report."""

from __future__ import annotations

import json
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator


@dataclass
class WorkerStats:
    """Counters owned by exactly one worker; merged only after join."""

    worker: int = 0
    # (layer kind, stage) -> payload bytes / messages sent by this worker
    sent_bytes: dict = field(default_factory=lambda: defaultdict(int))
    sent_messages: dict = field(default_factory=lambda: defaultdict(int))
    recv_bytes: dict = field(default_factory=lambda: defaultdict(int))
    layer_calls: dict = field(default_factory=lambda: defaultdict(int))
    stage_seconds: dict = field(default_factory=lambda: defaultdict(float))
    peak_live: int = 0
    resident: int = 0
    score_entries: int = 0
    kv_tokens_max: int = 0
    kv_tokens_last: list = field(default_factory=list)
    bias_global_calls: int = 0
    bias_local_calls: int = 0
    # label used to attribute traffic to a layer kind
    current_kind: str = "control"

    def observe_live(self, *sizes: int) -> None:
        """Record a moment where ``resident + sum(sizes)`` elements are live."""
        live = self.resident + int(sum(sizes))
        if live > self.peak_live:
            self.peak_live = live

    @contextmanager
    def stage(self, kind: str, stage: str) -> Iterator[None]:
        prev = self.current_kind
        self.current_kind = kind
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.stage_seconds[stage] += time.perf_counter() - t0
            self.current_kind = prev

    def count_sent(self, stage: str, nbytes: int) -> None:
        key = (self.current_kind, stage)
        self.sent_bytes[key] += nbytes
        self.sent_messages[key] += 1

    def count_recv(self, stage: str, nbytes: int) -> None:
        self.recv_bytes[(self.current_kind, stage)] += nbytes

    def bytes_for(self, kind: str) -> int:
        return sum(v for (k, _), v in self.sent_bytes.items() if k == kind)

    def to_dict(self) -> dict:
        return {
            "worker": self.worker,
            "sent_bytes": {f"{k}/{s}": v for (k, s), v in sorted(self.sent_bytes.items())},
            "sent_messages": {f"{k}/{s}": v for (k, s), v in sorted(self.sent_messages.items())},
            "recv_bytes": {f"{k}/{s}": v for (k, s), v in sorted(self.recv_bytes.items())},
            "layer_calls": dict(sorted(self.layer_calls.items())),
            "stage_seconds": dict(sorted(self.stage_seconds.items())),
            "peak_live": self.peak_live,
            "score_entries": self.score_entries,
            "kv_tokens_max": self.kv_tokens_max,
            "bias_global_calls": self.bias_global_calls,
            "bias_local_calls": self.bias_local_calls,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorkerStats":
        def split(m):
            out = defaultdict(int)
            for key, v in m.items():
                kind, stage = key.split("/", 1)
                out[(kind, stage)] = v
            return out

        s = cls(worker=d["worker"])
        s.sent_bytes = split(d["sent_bytes"])
        s.sent_messages = split(d["sent_messages"])
        s.recv_bytes = split(d["recv_bytes"])
        s.layer_calls = defaultdict(int, d["layer_calls"])
        s.stage_seconds = defaultdict(float, d["stage_seconds"])
        for name in ("peak_live", "score_entries", "kv_tokens_max",
                     "bias_global_calls", "bias_local_calls"):
            setattr(s, name, d[name])
        return s


@dataclass
class MetricsReport:
    workers: list[WorkerStats]
    wall_seconds: float = 0.0
    baseline_seconds: float | None = None

    @property
    def speedup(self) -> float | None:
        if not self.baseline_seconds or not self.wall_seconds:
            return None
        return self.baseline_seconds / self.wall_seconds

    def bytes_by_kind(self) -> dict[str, int]:
        out: dict[str, int] = defaultdict(int)
        for w in self.workers:
            for (kind, _), v in w.sent_bytes.items():
                out[kind] += v
        return dict(out)

    def calls_by_kind(self) -> dict[str, int]:
        out: dict[str, int] = defaultdict(int)
        for w in self.workers:
            for kind, v in w.layer_calls.items():
                out[kind] += v
        return dict(out)

    def stage_seconds(self) -> dict[str, float]:
        out: dict[str, float] = defaultdict(float)
        for w in self.workers:
            for stage, v in w.stage_seconds.items():
                out[stage] = max(out[stage], v)
        return dict(out)

    def records(self) -> Iterable[dict]:
        for w in self.workers:
            yield {"record": "worker", **w.to_dict()}
        yield {
            "record": "summary",
            "n_workers": len(self.workers),
            "bytes_by_kind": self.bytes_by_kind(),
            "calls_by_kind": self.calls_by_kind(),
            "stage_seconds_max": self.stage_seconds(),
            "peak_live_per_worker": [w.peak_live for w in self.workers],
            "wall_seconds": self.wall_seconds,
            "baseline_seconds": self.baseline_seconds,
            "speedup": self.speedup,
        }

    def append_jsonl(self, path: str | Path, **extra) -> None:
        with open(path, "a", encoding="utf-8") as fh:
            for rec in self.records():
                fh.write(json.dumps({**extra, **rec}, sort_keys=True) + "\n")

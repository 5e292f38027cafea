from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

ENGINE = -1  # event spans the whole TP group

INFERENCE_KINDS = frozenset({"compute_chunk", "decode_step"})
# host offload runs behind compute and never stalls the group
ASYNC_KINDS = frozenset({"offload"})

CSV_COLUMNS = ("time", "worker", "kind", "chunk_id", "request_id", "duration")


@dataclass(frozen=True)
class Event:
    kind: str
    start: float
    duration: float
    worker: int = ENGINE
    chunk_id: int = -1
    request_id: int = -1
    overlappable: bool = False

    @property
    def end(self) -> float:
        return self.start + self.duration


def _union_length(intervals: Iterable[tuple[float, float]]) -> float:
    total = 0.0
    cur_s = cur_e = None
    for s, e in sorted(intervals):
        if cur_e is None or s > cur_e:
            if cur_e is not None:
                total += cur_e - cur_s
            cur_s, cur_e = s, e
        else:
            cur_e = max(cur_e, e)
    if cur_e is not None:
        total += cur_e - cur_s
    return total


def busy_time(timeline: Sequence[Event]) -> float:
    return _union_length((e.start, e.end) for e in timeline
                         if e.duration > 0 and e.kind not in ASYNC_KINDS)


def inference_time(timeline: Sequence[Event]) -> float:
    return _union_length((e.start, e.end) for e in timeline
                         if e.duration > 0 and e.kind in INFERENCE_KINDS)


def write_csv(timeline: Sequence[Event], fh=None) -> str:
    buf = fh or io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for e in timeline:
        w.writerow([repr(e.start), e.worker, e.kind, e.chunk_id, e.request_id, repr(e.duration)])
    return buf.getvalue() if fh is None else ""

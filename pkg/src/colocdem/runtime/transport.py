"""In-process point-to-point channels and deterministic reductions."""
from __future__ import annotations

import threading
from collections import defaultdict, deque

import numpy as np

from ..errors import InvalidArgument, TopologyError


def keyed_sum(parts, size: int | None = None) -> float:
    """Sum ``(keys, values)`` contributions in ascending key order.

    With ``size`` the keys are dense indices into a buffer of that length;
    otherwise the keys are sorted. Either way the result does not depend on how
    the entries are split among contributors.
    """
    if size is not None:
        buf = np.zeros(size)
        for keys, vals in parts:
            buf[keys] = vals
        return float(np.sum(buf))
    keys = np.concatenate([np.asarray(k) for k, _ in parts]) if parts else np.zeros(0)
    vals = np.concatenate([np.asarray(v, float) for _, v in parts]) if parts else np.zeros(0)
    return float(np.sum(vals[np.argsort(keys, kind="stable")]))


def combine(op: str, contributions: list, size: int | None):
    if op == "sum":
        return keyed_sum(contributions, size)
    if op == "max":
        vals = [float(np.max(v)) for _, v in contributions if np.size(v)]
        return max(vals) if vals else -np.inf
    raise InvalidArgument(f"unknown reduction {op!r}")


class Transport:
    """FIFO message queues per ``(src, dst, tag)`` plus a reduction board.

    Messages between an ordered rank pair are delivered in send order.
    Reductions are combined once, from contributions listed in ascending rank
    order, and the same result object is handed to every rank.
    """

    def __init__(self, n_ranks: int):
        self.n_ranks = n_ranks
        self._queues: dict = defaultdict(deque)
        self._slots: dict = {}
        self._results: dict = {}
        self._lock = threading.Lock()

    def send(self, src: int, dst: int, tag: str, payload) -> None:
        if not 0 <= dst < self.n_ranks:
            raise TopologyError(f"rank {src} sent to unknown rank {dst}")
        with self._lock:
            self._queues[(src, dst, tag)].append(payload)

    def recv(self, dst: int, src: int, tag: str):
        with self._lock:
            q = self._queues.get((src, dst, tag))
            if not q:
                raise TopologyError(f"rank {dst} expected a {tag!r} message from rank {src}")
            return q.popleft()

    def pending(self) -> int:
        with self._lock:
            return sum(len(q) for q in self._queues.values())

    def contribute(self, rank: int, seq: int, items) -> None:
        with self._lock:
            self._slots.setdefault(seq, [None] * self.n_ranks)[rank] = items

    def result(self, seq: int, sizes) -> list:
        with self._lock:
            if seq not in self._results:
                slots = self._slots.pop(seq)
                if any(s is None for s in slots):
                    raise TopologyError(f"reduction {seq} is missing contributions")
                out = []
                for k, size in enumerate(sizes):
                    op = slots[0][k][0]
                    out.append(combine(op, [s[k][1:] for s in slots], size))
                self._results[seq] = out
                self._results.pop(seq - 2, None)
            return self._results[seq]

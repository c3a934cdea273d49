"""Per-step exchange accounting in the three-class taxonomy."""
from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field

CFD = "inter_partition_intra_physics_cfd"
DEM = "inter_partition_intra_physics_dem"
LOCAL = "intra_partition_inter_physics"
REMOTE = "inter_partition_inter_physics"
CLASSES = (CFD, DEM, LOCAL, REMOTE)
COUNTERS = ("messages", "bytes", "items", "seconds")

LEDGER_HEADER = ["step", "class", "messages", "bytes", "seconds", "rank"]
TIMING_HEADER = ["step", "phase", "seconds"]


@dataclass
class Counter:
    messages: int = 0
    bytes: int = 0
    items: int = 0
    seconds: float = 0.0

    def add(self, other: "Counter") -> None:
        self.messages += other.messages
        self.bytes += other.bytes
        self.items += other.items
        self.seconds += other.seconds


@dataclass
class ExchangeLedger:
    """Counters of one rank. ``rows[step][cls]`` is a :class:`Counter`.

    For intra-partition inter-physics, ``items`` counts direct memory accesses
    and ``bytes`` their byte-equivalent volume; ``messages`` stays 0.
    """

    rank: int
    rows: dict = field(default_factory=lambda: defaultdict(dict))
    step: int = 0

    def begin(self, step: int) -> None:
        self.step = step
        self.rows[step] = {c: Counter() for c in CLASSES}

    def record(self, cls: str, messages: int = 0, nbytes: int = 0, items: int = 0,
               seconds: float = 0.0) -> None:
        if cls not in CLASSES:
            raise KeyError(cls)
        if messages < 0 or nbytes < 0 or items < 0:
            raise ValueError("ledger counters must be >= 0")
        c = self.rows[self.step][cls]
        c.messages += int(messages)
        c.bytes += int(nbytes)
        c.items += int(items)
        c.seconds += float(seconds)

    def get(self, step: int, cls: str) -> Counter:
        return self.rows[step][cls]


def merge(ledgers, step: int) -> dict:
    """Totals over ranks for one step."""
    out = {c: Counter() for c in CLASSES}
    for led in ledgers:
        for c in CLASSES:
            out[c].add(led.rows[step][c])
    return out


def ledger_rows(ledgers, steps) -> list:
    """CSV rows: per-rank entries followed by an ``all`` total per class."""
    rows = []
    for s in steps:
        for c in CLASSES:
            total = Counter()
            for led in ledgers:
                v = led.rows[s][c]
                total.add(v)
                rows.append([s, c, v.messages, v.bytes, repr(v.seconds), led.rank])
            rows.append([s, c, total.messages, total.bytes, repr(total.seconds), "all"])
    return rows


def write_ledger_csv(path, ledgers, steps) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LEDGER_HEADER)
        w.writerows(ledger_rows(ledgers, steps))


def write_timing_csv(path, timing) -> None:
    """``timing`` is a list of ``(step, phase, seconds)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TIMING_HEADER)
        for step, phase, sec in timing:
            w.writerow([step, phase, repr(float(sec))])

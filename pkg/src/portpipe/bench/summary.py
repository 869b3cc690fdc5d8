"""Latency statistics over per-event (gen, transf, detect) timestamps."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000
DEFAULT_BUCKETS_MS = (2.0, 10.0, 40.0, 160.0)
METRICS = ("t_transf", "t_transf_cep")


class EmptyInput(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class LatencySample:
    gen_ts: int
    transf_ts: Optional[int]
    detect_ts: int

    @property
    def t_transf(self) -> Optional[float]:
        return None if self.transf_ts is None else (self.transf_ts - self.gen_ts) / NS_PER_MS

    @property
    def t_transf_cep(self) -> float:
        return (self.detect_ts - self.gen_ts) / NS_PER_MS


def _stats(values: Sequence[float]) -> dict:
    n = len(values)
    if n == 0:
        return {"count": 0, "min": None, "max": None, "mean": None, "sd": None, "p99": None}
    mean = math.fsum(values) / n
    sd = math.sqrt(math.fsum((v - mean) ** 2 for v in values) / n)
    ordered = sorted(values)
    # Nearest-rank percentile.
    p99 = ordered[max(0, math.ceil(0.99 * n) - 1)]
    return {"count": n, "min": ordered[0], "max": ordered[-1], "mean": mean, "sd": sd, "p99": p99}


def bucket_labels(bounds: Sequence[float]) -> list[str]:
    labels = [f"<{bounds[0]:g}ms"]
    labels += [f"{lo:g}-{hi:g}ms" for lo, hi in zip(bounds, bounds[1:])]
    labels.append(f">={bounds[-1]:g}ms")
    return labels


def bucketize(values: Sequence[float], bounds: Sequence[float] = DEFAULT_BUCKETS_MS) -> list[dict]:
    counts = [0] * (len(bounds) + 1)
    for v in values:
        i = 0
        while i < len(bounds) and v >= bounds[i]:
            i += 1
        counts[i] += 1
    n = len(values)
    edges = [None, *bounds, None]
    rows, running = [], 0
    for label, count, lo, hi in zip(bucket_labels(bounds), counts, edges, edges[1:]):
        running += count
        rows.append(
            {
                "bucket": label,
                "lo_ms": lo,
                "hi_ms": hi,
                "count": count,
                "fraction": count / n if n else 0.0,
                "cumulative": running / n if n else 0.0,
            }
        )
    return rows


def summarize(samples: Iterable[LatencySample], buckets: Sequence[float] = DEFAULT_BUCKETS_MS) -> dict:
    """Per-second means (by generation second), global statistics and latency buckets."""
    samples = list(samples)
    if not samples:
        raise EmptyInput("no latency samples")
    first_second = min(s.gen_ts for s in samples) // NS_PER_S
    per: dict[int, tuple[list[float], list[float]]] = {}
    transf: list[float] = []
    cep: list[float] = []
    for s in samples:
        sec = s.gen_ts // NS_PER_S - first_second
        tt, tc = per.setdefault(sec, ([], []))
        if s.transf_ts is not None:
            transf.append(s.t_transf)
            tt.append(s.t_transf)
        cep.append(s.t_transf_cep)
        tc.append(s.t_transf_cep)
    per_second = []
    for sec in sorted(per):
        tt, tc = per[sec]
        per_second.append(
            {
                "second": sec,
                "count": len(tc),
                "mean_t_transf_ms": math.fsum(tt) / len(tt) if tt else None,
                "mean_t_transf_cep_ms": math.fsum(tc) / len(tc),
            }
        )
    return {
        "count": len(samples),
        "per_second": per_second,
        "t_transf": _stats(transf),
        "t_transf_cep": _stats(cep),
        "buckets": bucketize(cep, buckets),
    }


def write_csv(path, rows: list[dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in columns})


def write_samples(path, samples: Iterable[LatencySample]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["gen_ts", "transf_ts", "detect_ts"])
        for s in samples:
            writer.writerow([s.gen_ts, "" if s.transf_ts is None else s.transf_ts, s.detect_ts])


def read_samples(path) -> list[LatencySample]:
    with open(path, newline="") as fh:
        return [
            LatencySample(int(r["gen_ts"]), int(r["transf_ts"]) if r["transf_ts"] else None, int(r["detect_ts"]))
            for r in csv.DictReader(fh)
        ]

"""Synthetic air-quality stations publishing raw JSON at a paced rate."""
from __future__ import annotations

import argparse
import asyncio
import json
import logging
import random
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

from .broker import BrokerClient, BrokerUnreachable, InvalidName, connect_with_retry
from .broker.protocol import check_queue_name

logger = logging.getLogger(__name__)

DEFAULT_QUEUE = "input-spring"
TICK_NS = 1_000_000  # pacing granularity
RATE_TOLERANCE = 0.95


@dataclass(frozen=True)
class Station:
    station_id: int
    label: str


@dataclass
class SimConfig:
    stations: list[Station]
    rate: float
    duration_s: float
    queue: str = DEFAULT_QUEUE
    host: str = "localhost"
    seed: int = 0
    pm10_dist: tuple[int, int] = (0, 100)
    pm25_dist: tuple[float, float] = (0.0, 50.0)
    # Deterministic genTs sequence (start, step) instead of the wall clock.
    synthetic_clock: Optional[tuple[int, int]] = None
    # Publish in bursts of at most this many events per pacing step.
    max_burst: int = 1000

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError("rate must be positive")
        if not self.stations:
            raise ValueError("at least one station is required")
        if self.duration_s < 0:
            raise ValueError("duration must be non-negative")
        if self.pm10_dist[0] > self.pm10_dist[1] or self.pm25_dist[0] > self.pm25_dist[1]:
            raise ValueError("distribution bounds need lo <= hi")
        try:
            check_queue_name(self.queue)
        except InvalidName as exc:
            raise ValueError(str(exc)) from None


@dataclass
class SimReport:
    sent: int
    actual_rate: float
    duration: float
    target_rate: float
    rate_achieved: bool
    first_gen_ts: Optional[int] = None
    last_gen_ts: Optional[int] = None
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def parse_stations(text: str) -> list[Station]:
    """``"cadiz:1,puertoreal:2"`` -> stations (label:id pairs)."""
    stations = []
    for part in text.split(","):
        label, sep, sid = part.strip().partition(":")
        if not sep or not label:
            raise ValueError(f"station {part!r} must look like label:id")
        stations.append(Station(int(sid), label))
    return stations


def generate_event(station: Station, rng: random.Random, now: int, cfg: SimConfig) -> bytes:
    event = {
        "PM10": rng.randint(*cfg.pm10_dist),
        "PM25": rng.uniform(*cfg.pm25_dist),
        "stationId": station.station_id,
        "genTs": now,
    }
    return json.dumps(event, separators=(",", ":")).encode()


class GenClock:
    """Strictly increasing nanosecond timestamps: the monotonic clock anchored to wall time."""

    def __init__(self):
        self._offset = time.time_ns() - time.monotonic_ns()
        self._last = 0

    def __call__(self) -> int:
        now = time.monotonic_ns() + self._offset
        if now <= self._last:
            now = self._last + 1
        self._last = now
        return now


def synthetic_events(cfg: SimConfig, count: int) -> list[bytes]:
    """Events a synthetic-clock run publishes, without a broker."""
    start, step = cfg.synthetic_clock or (0, 1)
    rng = random.Random(cfg.seed)
    stations = cfg.stations
    return [generate_event(stations[i % len(stations)], rng, start + i * step, cfg) for i in range(count)]


async def run(cfg: SimConfig, client: Optional[BrokerClient] = None) -> SimReport:
    """Publish ``rate * duration_s`` events paced by a token bucket; confirms awaited per burst."""
    total = int(round(cfg.rate * cfg.duration_s))
    if total == 0:
        return SimReport(0, 0.0, 0.0, cfg.rate, True)
    own = client is None
    if own:
        client = await connect_with_retry(cfg.host, attempts=5)
    rng = random.Random(cfg.seed)
    stations = cfg.stations
    n_stations = len(stations)
    if cfg.synthetic_clock is not None:
        start_ns, step_ns = cfg.synthetic_clock
        counter = iter(range(start_ns, start_ns + total * step_ns, step_ns))
        gen_clock: Callable[[], int] = counter.__next__
    else:
        gen_clock = GenClock()
    queue = cfg.queue
    interval = 1e9 / cfg.rate
    sent = 0
    first = last = None
    inflight: list = []
    unconfirmed = 0
    begin = time.monotonic_ns()
    try:
        while sent < total:
            elapsed = time.monotonic_ns() - begin
            due = min(total, int(elapsed / interval) + 1)
            burst = min(due - sent, cfg.max_burst)
            if burst <= 0:
                # Sleep until the next token, at pacing granularity.
                wait_ns = max(TICK_NS, int((sent * interval) - elapsed))
                await _settle(inflight)
                unconfirmed = 0
                await asyncio.sleep(wait_ns / 1e9)
                continue
            events = []
            for _ in range(burst):
                ts = gen_clock()
                if first is None:
                    first = ts
                last = ts
                events.append(generate_event(stations[sent % n_stations], rng, ts, cfg))
                sent += 1
            inflight.append(client.publish_batch_nowait(queue, events))
            unconfirmed += burst
            if unconfirmed >= cfg.max_burst:
                await _settle(inflight)
                unconfirmed = 0
        await _settle(inflight)
    finally:
        if own:
            await client.close()
    duration = (time.monotonic_ns() - begin) / 1e9
    # Rate over the scheduled span: the last event is due at (total - 1) intervals.
    scheduled = max(duration, (total - 1) * interval / 1e9, 1e-9)
    actual = sent / scheduled if total > 1 else cfg.rate
    achieved = actual >= RATE_TOLERANCE * cfg.rate
    report = SimReport(sent, actual, duration, cfg.rate, achieved, first, last)
    if not achieved:
        report.warnings.append(f"RateUnachievable: {actual:.0f} ev/s of {cfg.rate:.0f} requested")
    return report


async def _settle(inflight: list) -> None:
    for fut in inflight:
        await fut
    inflight.clear()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="portpipe-sim", description="Publish synthetic air-quality events at a target rate.")
    parser.add_argument("--rate", type=float, required=True, help="events per second across all stations")
    parser.add_argument("--duration", type=float, required=True, help="seconds")
    parser.add_argument("--stations", default="cadiz:1,puertoreal:2", help="label:id list")
    parser.add_argument("--queue", default=DEFAULT_QUEUE)
    parser.add_argument("--host", default="localhost", help="broker host[:port]")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--pm10", default="0,100", help="integer range lo,hi")
    parser.add_argument("--pm25", default="0,50", help="float range lo,hi")
    parser.add_argument("--synthetic-clock", default=None, help="start_ns,step_ns for deterministic genTs")
    return parser


def _pair(text: str, cast):
    lo, hi = text.split(",")
    return cast(lo), cast(hi)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING)
    try:
        cfg = SimConfig(
            stations=parse_stations(args.stations),
            rate=args.rate,
            duration_s=args.duration,
            queue=args.queue,
            host=args.host,
            seed=args.seed,
            pm10_dist=_pair(args.pm10, int),
            pm25_dist=_pair(args.pm25, float),
            synthetic_clock=_pair(args.synthetic_clock, int) if args.synthetic_clock else None,
        )
    except ValueError as exc:
        print(json.dumps({"error": "InvalidConfig", "detail": str(exc)}))
        return 2
    try:
        report = asyncio.run(run(cfg))
    except BrokerUnreachable as exc:
        print(json.dumps({"error": "BrokerUnreachable", "detail": str(exc)}))
        return 2
    print(json.dumps(report.to_dict()))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

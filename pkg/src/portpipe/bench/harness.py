"""End-to-end benchmark: spawn the pipeline, drive it with the simulator, measure latency.

Every ingested event also matches an always-true measurement statement whose
output carries (genTs, transfTs, detectTs); the collector here consumes those
samples from a dedicated queue and the report is computed from them.
"""
from __future__ import annotations

import argparse
import asyncio
import json
import logging
import os
import socket
import statistics
import subprocess
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import aiohttp
import psutil

from .. import airquality
from ..broker import BrokerClient, connect_with_retry
from .summary import DEFAULT_BUCKETS_MS, LatencySample, summarize, write_csv, write_samples

logger = logging.getLogger(__name__)

RAW_QUEUE = "input-spring"
MAP_QUEUE = "input-map"
ALERTS_QUEUE = "alerts"
MEASURE_QUEUE = "measurements"
PIPELINE_QUEUES = (RAW_QUEUE, MAP_QUEUE, ALERTS_QUEUE, MEASURE_QUEUE)


class TopologyStartupFailure(RuntimeError):
    pass


@dataclass
class Thresholds:
    p99_t_transf_cep_ms: float = 50.0
    measured_fraction: float = 0.99
    underflow_fraction: float = 0.90
    # Max queue depth allowed, in seconds' worth of input at the target rate.
    max_depth_seconds: float = 1.0
    # Allowed least-squares growth of total depth over the load phase, same unit.
    max_depth_growth_seconds: float = 0.1
    buckets_ms: tuple[float, ...] = DEFAULT_BUCKETS_MS

    @classmethod
    def load(cls, path: Optional[str]) -> "Thresholds":
        if not path:
            return cls()
        with open(path) as fh:
            doc = json.load(fh)
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown threshold keys {sorted(unknown)}")
        if "buckets_ms" in doc:
            doc["buckets_ms"] = tuple(float(b) for b in doc["buckets_ms"])
        return cls(**doc)


@dataclass
class BenchConfig:
    rate: float
    duration: float
    out: str
    seed: int = 0
    stations: str = "cadiz:1,puertoreal:2"
    thresholds: Thresholds = field(default_factory=Thresholds)
    drain_timeout: float = 10.0
    startup_timeout: float = 15.0

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError("rate must be positive")
        if not self.duration > 0:
            raise ValueError("duration must be positive")


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class Topology:
    """Broker, transformer, CEP and actions services as child processes."""

    def __init__(self, workdir: Path, startup_timeout: float = 15.0):
        self.workdir = workdir
        self.startup_timeout = startup_timeout
        self.broker_port = free_port()
        self.ports = {name: free_port() for name in ("transformer", "cep", "actions")}
        self.procs: dict[str, subprocess.Popen] = {}
        self._logs: list = []

    @property
    def broker(self) -> str:
        return f"127.0.0.1:{self.broker_port}"

    def url(self, service: str) -> str:
        return f"http://127.0.0.1:{self.ports[service]}"

    def _spawn(self, name: str, module: str, *args: str) -> None:
        log = open(self.workdir / f"{name}.log", "wb")
        self._logs.append(log)
        self.procs[name] = subprocess.Popen([sys.executable, "-m", module, *args], stdout=log, stderr=subprocess.STDOUT)

    async def start(self) -> None:
        schema_file = self.workdir / "schema.json"
        schema_file.write_text(json.dumps(airquality.SCHEMA.to_dict()))
        (self.workdir / "actions").mkdir(exist_ok=True)
        self._spawn("broker", "portpipe.broker.server", "--port", str(self.broker_port))
        client = await connect_with_retry(self.broker, attempts=40, base_delay=0.05, max_delay=0.25)
        await client.close()
        self._spawn(
            "transformer", "portpipe.transformer",
            "--input-type", "json", "--input-queue", RAW_QUEUE, "--output-queue", MAP_QUEUE,
            "--input-host", self.broker, "--output-host", self.broker,
            "--schema-file", str(schema_file), "--http-port", str(self.ports["transformer"]),
        )
        self._spawn(
            "cep", "portpipe.cep_service",
            "--alerts-host", self.broker, "--alerts-queue", ALERTS_QUEUE, "--http-port", str(self.ports["cep"]),
        )
        self._spawn(
            "actions", "portpipe.actions",
            "--input-queue", ALERTS_QUEUE, "--host", self.broker,
            "--file-root", str(self.workdir / "actions"), "--http-port", str(self.ports["actions"]),
        )
        await self._wait_healthy()

    async def _wait_healthy(self) -> None:
        deadline = time.monotonic() + self.startup_timeout
        async with aiohttp.ClientSession() as session:
            for name in self.ports:
                while True:
                    proc = self.procs[name]
                    if proc.poll() is not None:
                        raise TopologyStartupFailure(f"{name} exited with {proc.returncode}; see {self.workdir / (name + '.log')}")
                    try:
                        async with session.get(self.url(name) + "/healthz") as resp:
                            if resp.status == 200:
                                break
                    except aiohttp.ClientError:
                        pass
                    if time.monotonic() > deadline:
                        raise TopologyStartupFailure(f"{name} not healthy after {self.startup_timeout}s")
                    await asyncio.sleep(0.1)

    async def deploy(self, measure_queue: str = MEASURE_QUEUE) -> list[str]:
        cep = self.url("cep")
        ids = []
        async with aiohttp.ClientSession() as session:
            requests = [("/schema", {"schema": airquality.SCHEMA_STATEMENT})]
            requests += [("/pattern", {"pattern": text}) for text in airquality.PM10_CHAIN]
            requests.append(("/pattern", {"pattern": airquality.measure_pattern(measure_queue)}))
            requests.append(("/dataflow", {"dataflow": airquality.dataflow(self.broker, MAP_QUEUE), "name": "AMQPIncomingDataFlow"}))
            for path, body in requests:
                async with session.post(cep + path, json=body) as resp:
                    reply = await resp.json()
                    if resp.status != 201:
                        raise TopologyStartupFailure(f"POST {path} failed: {resp.status} {reply}")
                    ids.append(reply["id"])
        return ids

    async def health(self) -> dict:
        out = {}
        async with aiohttp.ClientSession() as session:
            for name in self.ports:
                try:
                    async with session.get(self.url(name) + "/healthz") as resp:
                        out[name] = await resp.json()
                except aiohttp.ClientError as exc:
                    out[name] = {"error": str(exc)}
        return out

    def stop(self) -> None:
        for proc in self.procs.values():
            if proc.poll() is None:
                proc.terminate()
        for proc in self.procs.values():
            try:
                proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()
        for log in self._logs:
            log.close()


class Collector:
    def __init__(self, client: BrokerClient, queue: str = MEASURE_QUEUE):
        self.client = client
        self.queue = queue
        self.samples: list[LatencySample] = []
        self.last_change = time.monotonic()
        self._task: Optional[asyncio.Task] = None

    async def start(self) -> "Collector":
        sub = await self.client.subscribe(self.queue, prefetch=256)
        self._task = asyncio.create_task(self._run(sub))
        return self

    async def _run(self, sub) -> None:
        while True:
            batch = await sub.get_batch()
            for delivery in batch:
                for gen, transf, detect in json.loads(delivery.payload)["samples"]:
                    if gen is not None:
                        self.samples.append(LatencySample(gen, transf, detect))
            self.last_change = time.monotonic()
            self.client.ack(batch[-1].tag, multiple=True)

    async def wait_for(self, expected: int, idle_timeout: float) -> None:
        while len(self.samples) < expected and time.monotonic() - self.last_change < idle_timeout:
            await asyncio.sleep(0.1)

    async def stop(self) -> None:
        if self._task is not None:
            self._task.cancel()
            try:
                await self._task
            except (asyncio.CancelledError, Exception):
                pass


class ResourceSampler:
    """CPU and RSS of each service process at 1 Hz (informational only)."""

    def __init__(self, procs: dict[str, subprocess.Popen], interval: float = 1.0):
        self.handles = {}
        for name, proc in procs.items():
            try:
                handle = psutil.Process(proc.pid)
                handle.cpu_percent(None)
                self.handles[name] = handle
            except psutil.Error:
                pass
        self.interval = interval
        self.rows: list[dict] = []
        self._task: Optional[asyncio.Task] = None
        self.t0 = time.monotonic()

    def start(self) -> "ResourceSampler":
        self._task = asyncio.create_task(self._run())
        return self

    async def _run(self) -> None:
        while True:
            await asyncio.sleep(self.interval)
            t = round(time.monotonic() - self.t0, 3)
            for name, handle in self.handles.items():
                try:
                    self.rows.append({"t_s": t, "process": name, "cpu_percent": handle.cpu_percent(None), "rss_mb": handle.memory_info().rss / 2**20})
                except psutil.Error:
                    pass

    async def stop(self) -> None:
        if self._task is not None:
            self._task.cancel()
            try:
                await self._task
            except asyncio.CancelledError:
                pass


class DepthMonitor:
    """Samples pipeline queue depths; the broker also tracks each queue's peak."""

    def __init__(self, client: BrokerClient, interval: float = 0.5):
        self.client = client
        self.interval = interval
        self.rows: list[dict] = []
        self._task: Optional[asyncio.Task] = None
        self.t0 = time.monotonic()

    def start(self) -> "DepthMonitor":
        self._task = asyncio.create_task(self._run())
        return self

    async def _run(self) -> None:
        while True:
            stats = (await self.client.stats())["queues"]
            row = {"t_s": round(time.monotonic() - self.t0, 3)}
            for q in PIPELINE_QUEUES:
                row[q] = stats.get(q, {}).get("depth", 0)
            self.rows.append(row)
            await asyncio.sleep(self.interval)

    async def stop(self) -> None:
        if self._task is not None:
            self._task.cancel()
            try:
                await self._task
            except (asyncio.CancelledError, Exception):
                pass


async def _run_simulator(topology: Topology, cfg: BenchConfig) -> dict:
    proc = await asyncio.create_subprocess_exec(
        sys.executable, "-m", "portpipe.simulator",
        "--rate", str(cfg.rate), "--duration", str(cfg.duration),
        "--stations", cfg.stations, "--queue", RAW_QUEUE, "--host", topology.broker, "--seed", str(cfg.seed),
        "--pm10", "0,40",
        stdout=asyncio.subprocess.PIPE,
    )
    out, _ = await proc.communicate()
    report = json.loads(out.decode().strip().splitlines()[-1])
    if proc.returncode != 0:
        raise TopologyStartupFailure(f"simulator failed: {report}")
    return report


def depth_growth(rows: list[dict], until_s: float) -> float:
    """Fitted change of total pipeline depth across the samples taken before ``until_s``."""
    points = [(r["t_s"], sum(r[q] for q in PIPELINE_QUEUES)) for r in rows if r["t_s"] <= until_s]
    if len(points) < 3:
        return 0.0
    xs, ys = zip(*points)
    if len(set(xs)) < 2:
        return 0.0
    slope = statistics.linear_regression(xs, ys).slope
    return slope * (xs[-1] - xs[0])


def verdicts(summary: dict, sent: int, max_depths: dict, cfg: BenchConfig, growth: float = 0.0) -> dict:
    t = cfg.thresholds
    measured = summary["count"] if summary else 0
    fraction = measured / sent if sent else 0.0
    depth_limit = cfg.rate * t.max_depth_seconds
    growth_limit = cfg.rate * t.max_depth_growth_seconds
    peak = max(max_depths.values()) if max_depths else 0
    p99 = summary["t_transf_cep"]["p99"] if summary else None
    return {
        "bounded_queue_depth": {
            "pass": peak <= depth_limit and growth <= growth_limit,
            "max_depth": peak,
            "limit": depth_limit,
            "growth": growth,
            "growth_limit": growth_limit,
        },
        "measured_fraction": {"pass": fraction >= t.measured_fraction, "value": fraction, "limit": t.measured_fraction},
        "p99_t_transf_cep": {"pass": p99 is not None and p99 <= t.p99_t_transf_cep_ms, "value_ms": p99, "limit_ms": t.p99_t_transf_cep_ms},
        "measurement_underflow": fraction < t.underflow_fraction,
    }


async def run_benchmark(cfg: BenchConfig) -> dict:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    workdir = Path(tempfile.mkdtemp(prefix="portpipe-bench-"))
    topology = Topology(workdir, cfg.startup_timeout)
    started = time.time()
    try:
        await topology.start()
        await topology.deploy()
        client = await connect_with_retry(topology.broker)
        monitor_client = await connect_with_retry(topology.broker)
        collector = await Collector(client).start()
        sampler = ResourceSampler(topology.procs).start()
        monitor = DepthMonitor(monitor_client).start()
        sim = await _run_simulator(topology, cfg)
        load_phase_s = time.monotonic() - monitor.t0
        await collector.wait_for(sim["sent"], cfg.drain_timeout)
        await sampler.stop()
        await monitor.stop()
        await collector.stop()
        stats = (await monitor_client.stats())["queues"]
        health = await topology.health()
        await client.close()
        await monitor_client.close()
    finally:
        topology.stop()
    samples = sorted(collector.samples, key=lambda s: s.gen_ts)
    summary = summarize(samples, cfg.thresholds.buckets_ms) if samples else None
    max_depths = {q: stats[q]["max_depth"] for q in PIPELINE_QUEUES if q in stats}
    report = {
        "config": {"rate": cfg.rate, "duration_s": cfg.duration, "seed": cfg.seed, "stations": cfg.stations},
        "thresholds": asdict(cfg.thresholds),
        "started_at": started,
        "simulator": sim,
        "counts": {
            "sent": sim["sent"],
            "measured": len(samples),
            "transformed": health.get("transformer", {}).get("published"),
            "transformer_dlq": health.get("transformer", {}).get("deadLettered"),
            "cep_ingested": health.get("cep", {}).get("ingested"),
            "alerts": health.get("cep", {}).get("alertsPublished"),
            "actions_executed": health.get("actions", {}).get("executed"),
        },
        "broker": {"queues": {q: stats[q] for q in PIPELINE_QUEUES if q in stats}, "max_depth": max_depths},
        "summary": summary,
        "verdicts": verdicts(summary, sim["sent"], max_depths, cfg, depth_growth(monitor.rows, load_phase_s)),
        "resources": _resource_summary(sampler.rows),
        "logs": str(workdir),
    }
    write_report(out, report, samples, sampler.rows, monitor.rows)
    return report


def _resource_summary(rows: list[dict]) -> dict:
    out: dict[str, dict] = {}
    for row in rows:
        entry = out.setdefault(row["process"], {"samples": 0, "cpu_percent_max": 0.0, "rss_mb_max": 0.0, "_cpu": 0.0})
        entry["samples"] += 1
        entry["_cpu"] += row["cpu_percent"]
        entry["cpu_percent_max"] = max(entry["cpu_percent_max"], row["cpu_percent"])
        entry["rss_mb_max"] = max(entry["rss_mb_max"], row["rss_mb"])
    for entry in out.values():
        entry["cpu_percent_mean"] = entry.pop("_cpu") / entry["samples"]
    return out


def write_report(out: Path, report: dict, samples: list[LatencySample], resources: list[dict], depths: list[dict]) -> None:
    with open(out / "summary.json", "w") as fh:
        json.dump(report, fh, indent=2)
    summary = report["summary"] or {"per_second": [], "buckets": []}
    write_csv(out / "per_second.csv", summary["per_second"], ("second", "count", "mean_t_transf_ms", "mean_t_transf_cep_ms"))
    write_csv(out / "buckets.csv", summary["buckets"], ("bucket", "lo_ms", "hi_ms", "count", "fraction", "cumulative"))
    write_samples(out / "samples.csv", samples)
    write_csv(out / "resources.csv", resources, ("t_s", "process", "cpu_percent", "rss_mb"))
    write_csv(out / "queue_depth.csv", depths, ("t_s", *PIPELINE_QUEUES))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="portpipe-bench", description="Run the pipeline end to end and report latency.")
    parser.add_argument("--rate", type=float, required=True, help="events per second")
    parser.add_argument("--duration", type=float, required=True, help="seconds")
    parser.add_argument("--out", default="report", help="output directory")
    parser.add_argument("--thresholds", default=None, help="JSON file overriding verdict thresholds")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--stations", default="cadiz:1,puertoreal:2")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = BenchConfig(args.rate, args.duration, args.out, args.seed, args.stations, Thresholds.load(args.thresholds))
    except ValueError as exc:
        print(f"portpipe-bench: {exc}", file=sys.stderr)
        return 2
    try:
        report = asyncio.run(run_benchmark(cfg))
    except TopologyStartupFailure as exc:
        print(f"portpipe-bench: topology failed to start: {exc}", file=sys.stderr)
        return 3
    v = report["verdicts"]
    print(json.dumps({"counts": report["counts"], "verdicts": v}, indent=2))
    passed = v["bounded_queue_depth"]["pass"] and v["measured_fraction"]["pass"] and v["p99_t_transf_cep"]["pass"]
    return 0 if passed else 1


if __name__ == "__main__":
    raise SystemExit(main())

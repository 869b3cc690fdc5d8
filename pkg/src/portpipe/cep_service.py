"""CEP service: an HTTP API around one engine, fed by broker dataflows.

Every dataflow consumer pushes delivery batches into one bounded inbox;
a single loop drains it, so the engine is only ever touched between
events. Complex events that carry tags leave as alert envelopes (or, for
``action=measure``, as batched latency samples); untagged ones stay
internal.
"""
from __future__ import annotations

import argparse
import asyncio
import logging
import time
from dataclasses import dataclass
from typing import Optional

from aiohttp import web

from . import thingdesc
from .broker import BrokerClient, BrokerError, BrokerUnreachable, connect_with_retry
from .broker.protocol import check_queue_name
from .epl import ClockRegression, ComplexEvent, CreateContext, CreateSchema, Dataflow, Engine, EplError, Pattern, Select, parse_statement
from .epl.errors import UnknownDeployment, UnknownStream
from .events import DecodeError, dumps_canonical, decode_canonical
from .web import HttpEndpoint, error_response, json_response, make_app, read_json, wait_for_signal

logger = logging.getLogger(__name__)

DEFAULT_HTTP_PORT = 8080
DEFAULT_ALERTS_QUEUE = "alerts"
DEFAULT_MEASURE_QUEUE = "measurements"
INBOX_RECORDS = 65_536
TEST_CLOCK_HEADER = "X-Portpipe-Test-Clock"
TICK_S = 0.05


@dataclass
class CepServiceConfig:
    http_port: int = DEFAULT_HTTP_PORT
    alerts_queue: str = DEFAULT_ALERTS_QUEUE
    alerts_host: str = "localhost"
    http_host: str = "127.0.0.1"
    advertise_host: str = "localhost"
    test_clock: bool = False
    prefetch: int = 512
    connect_attempts: int = 3

    def __post_init__(self):
        check_queue_name(self.alerts_queue)


def alert_envelope(ev: ComplexEvent) -> dict:
    env = {
        "stream": ev.stream_name,
        "values": ev.values,
        "tags": [{"name": n, "value": v} for n, v in ev.tags],
        "detectTs": ev.detect_ts,
    }
    if ev.gen_ts is not None:
        env["genTs"] = ev.gen_ts
    return env


class _DataflowRunner:
    """Broker subscription of one deployed dataflow."""

    def __init__(self, dep_id: str, stmt: Dataflow, client: BrokerClient, prefetch: int):
        self.dep_id = dep_id
        self.stmt = stmt
        self.client = client
        self.prefetch = prefetch
        self.stopped = False
        self.task: Optional[asyncio.Task] = None

    @property
    def queue(self) -> str:
        return self.stmt.params.queue_name

    async def stop(self) -> None:
        self.stopped = True
        if self.task is not None:
            self.task.cancel()
            try:
                await self.task
            except (asyncio.CancelledError, BrokerError):
                pass
        await self.client.close()


class CepService:
    def __init__(self, cfg: CepServiceConfig):
        self.cfg = cfg
        self.engine = Engine(clock=None if cfg.test_clock else time.time_ns)
        self.dataflows: dict[str, _DataflowRunner] = {}
        self.alerts: Optional[BrokerClient] = None
        self.http: Optional[HttpEndpoint] = None
        self.ingested = 0
        self.rejected = 0
        self.alerts_published = 0
        self.samples_published = 0
        self._inbox: asyncio.Queue = asyncio.Queue(maxsize=max(1, INBOX_RECORDS // cfg.prefetch))
        self._tasks: list[asyncio.Task] = []

    def health(self) -> dict:
        return {
            "deployments": len(self.engine.deployments),
            "dataflows": sorted(self.dataflows),
            "ingested": self.ingested,
            "rejected": self.rejected,
            "alertsPublished": self.alerts_published,
            "samplesPublished": self.samples_published,
            "alertsQueue": self.cfg.alerts_queue,
            "testClock": self.cfg.test_clock,
            "engineTime": self.engine.now,
        }

    async def start(self, with_http: bool = True) -> "CepService":
        self.alerts = await connect_with_retry(self.cfg.alerts_host, attempts=5)
        await self.alerts.declare(self.cfg.alerts_queue)
        self._tasks.append(asyncio.create_task(self._ingest_loop()))
        if not self.cfg.test_clock:
            self._tasks.append(asyncio.create_task(self._tick_loop()))
        if with_http:
            self.http = await HttpEndpoint(self.make_app(), thingdesc.CEP, self.cfg.http_host, self.cfg.http_port, self.cfg.advertise_host).start()
        return self

    async def close(self) -> None:
        if self.http is not None:
            await self.http.close()
        for runner in list(self.dataflows.values()):
            await runner.stop()
        self.dataflows.clear()
        for task in self._tasks:
            task.cancel()
        for task in self._tasks:
            try:
                await task
            except (asyncio.CancelledError, BrokerError):
                pass
        if self.alerts is not None:
            await self.alerts.close()

    # deployments -------------------------------------------------------------

    def deploy(self, text: str, allowed: tuple[type, ...], test_now: Optional[int] = None) -> tuple[str, object]:
        stmt = parse_statement(text)
        if not isinstance(stmt, allowed):
            raise WrongStatement(type(stmt).__name__, allowed)
        if test_now is not None and self.cfg.test_clock:
            self._publish_later(self.engine.advance_time(test_now))
        return self.engine.deploy(stmt, text=text), stmt

    async def deploy_dataflow(self, text: str, name: Optional[str] = None) -> str:
        stmt = parse_statement(text)
        if not isinstance(stmt, Dataflow):
            raise WrongStatement(type(stmt).__name__, (Dataflow,))
        if name is not None and name != stmt.name:
            raise NameMismatch(f"body name {name!r} does not match dataflow {stmt.name!r}")
        dep_id = self.engine.deploy(stmt, text=text)
        try:
            client = await connect_with_retry(stmt.params.host, attempts=self.cfg.connect_attempts, base_delay=0.05)
            try:
                sub = await client.subscribe(stmt.params.queue_name, prefetch=self.cfg.prefetch)
            except BaseException:
                client.abort()
                raise
        except BaseException:
            self.engine.undeploy(dep_id)
            raise
        runner = _DataflowRunner(dep_id, stmt, client, self.cfg.prefetch)
        runner.task = asyncio.create_task(self._consume(runner, sub))
        self.dataflows[dep_id] = runner
        logger.info("dataflow %s (%s) consuming %s", stmt.name, dep_id, stmt.params.queue_name)
        return dep_id

    async def undeploy(self, dep_id: str) -> None:
        self.engine.undeploy(dep_id)
        runner = self.dataflows.pop(dep_id, None)
        if runner is not None:
            await runner.stop()

    # ingestion ---------------------------------------------------------------

    async def _consume(self, runner: _DataflowRunner, sub) -> None:
        while not runner.stopped:
            try:
                while True:
                    batch = await sub.get_batch()
                    await self._inbox.put((runner, runner.client, batch))
            except BrokerError as exc:
                if runner.stopped:
                    return
                logger.warning("dataflow %s lost its broker (%s); reconnecting", runner.stmt.name, exc)
                runner.client.abort()
                runner.client = await connect_with_retry(runner.stmt.params.host, attempts=0)
                sub = await runner.client.subscribe(runner.queue, prefetch=runner.prefetch)

    async def _ingest_loop(self) -> None:
        engine = self.engine
        test_clock = self.cfg.test_clock
        while True:
            runner, client, batch = await self._inbox.get()
            if runner.stopped:
                # Unacked deliveries of a closed subscription are requeued by the broker.
                continue
            schema_name = runner.stmt.out_schema
            schema = engine.schemas.get(schema_name)
            known = {schema_name: schema} if schema is not None else {}
            outputs: list[ComplexEvent] = []
            for delivery in batch:
                try:
                    record = decode_canonical(delivery.payload, known)
                except DecodeError as exc:
                    self.rejected += 1
                    logger.debug("dataflow %s rejected a record: %s", runner.stmt.name, exc)
                    continue
                if record.schema_name != schema_name:
                    self.rejected += 1
                    continue
                now = record.gen_ts if test_clock and record.gen_ts is not None else time.time_ns()
                if engine.now is not None and now < engine.now:
                    now = engine.now
                try:
                    outputs.extend(engine.on_event(record, now))
                except (UnknownStream, ClockRegression) as exc:
                    self.rejected += 1
                    logger.debug("engine rejected a record: %s", exc)
                    continue
                self.ingested += 1
            await self._publish(outputs)
            # Tags belong to the connection that delivered them.
            if not runner.stopped and not client.closed:
                client.ack(batch[-1].tag, multiple=True)

    async def _tick_loop(self) -> None:
        while True:
            await asyncio.sleep(TICK_S)
            now = time.time_ns()
            if self.engine.now is not None and now < self.engine.now:
                continue
            out = self.engine.advance_time(now)
            if out:
                await self._publish(out)

    def _publish_later(self, outputs: list[ComplexEvent]) -> None:
        if outputs:
            self._tasks.append(asyncio.create_task(self._publish(outputs)))

    async def _publish(self, outputs: list[ComplexEvent]) -> None:
        if not outputs:
            return
        envelopes: dict[str, list[bytes]] = {}
        samples: dict[str, list] = {}
        for ev in outputs:
            if not ev.tags:
                continue
            tags = dict(ev.tags)
            if tags.get("action") == "measure":
                samples.setdefault(tags.get("queue", DEFAULT_MEASURE_QUEUE), []).append([ev.gen_ts, ev.transf_ts, ev.detect_ts])
            else:
                envelopes.setdefault(tags.get("queue", self.cfg.alerts_queue), []).append(dumps_canonical(alert_envelope(ev)))
        confirms = [self.alerts.publish_batch_nowait(q, batch) for q, batch in envelopes.items()]
        confirms += [self.alerts.publish_nowait(q, dumps_canonical({"samples": rows})) for q, rows in samples.items()]
        for fut in confirms:
            await fut
        self.alerts_published += sum(len(b) for b in envelopes.values())
        self.samples_published += sum(len(r) for r in samples.values())

    # HTTP --------------------------------------------------------------------

    def make_app(self) -> web.Application:
        app = make_app(self.health)
        app.router.add_post("/schema", self.http_schema)
        app.router.add_post("/pattern", self.http_pattern)
        app.router.add_post("/dataflow", self.http_dataflow)
        app.router.add_delete("/deployment/{id}", self.http_delete)
        app.router.add_get("/deployments", self.http_deployments)
        app.router.add_get("/properties/deploymentsCount", self.http_count)
        return app

    @staticmethod
    def _test_now(request: web.Request) -> Optional[int]:
        raw = request.headers.get(TEST_CLOCK_HEADER)
        if raw is None:
            return None
        try:
            return int(raw)
        except ValueError:
            raise web.HTTPBadRequest(text=f"{TEST_CLOCK_HEADER} must be integer nanoseconds") from None

    async def _deploy_handler(self, request: web.Request, key: str, allowed: tuple[type, ...]) -> web.Response:
        body = await read_json(request)
        text = body.get(key)
        if not isinstance(text, str):
            return error_response(400, "InvalidRequest", f"'{key}' must be a string")
        try:
            dep_id, _ = self.deploy(text, allowed, self._test_now(request))
        except EplError as exc:
            return json_response(exc.to_dict(), status=400)
        except WrongStatement as exc:
            return error_response(400, "WrongStatementKind", str(exc))
        return json_response({"id": dep_id}, status=201)

    async def http_schema(self, request: web.Request) -> web.Response:
        return await self._deploy_handler(request, "schema", (CreateSchema,))

    async def http_pattern(self, request: web.Request) -> web.Response:
        return await self._deploy_handler(request, "pattern", (Select, Pattern, CreateContext))

    async def http_dataflow(self, request: web.Request) -> web.Response:
        body = await read_json(request)
        text, name = body.get("dataflow"), body.get("name")
        if not isinstance(text, str) or (name is not None and not isinstance(name, str)):
            return error_response(400, "InvalidRequest", "'dataflow' (and 'name') must be strings")
        try:
            dep_id = await self.deploy_dataflow(text, name)
        except EplError as exc:
            return json_response(exc.to_dict(), status=400)
        except (WrongStatement, NameMismatch) as exc:
            return error_response(400, type(exc).__name__, str(exc))
        except BrokerUnreachable as exc:
            return error_response(502, "BrokerUnreachable", str(exc))
        except BrokerError as exc:
            return error_response(502, exc.reason, str(exc))
        return json_response({"id": dep_id}, status=201)

    async def http_delete(self, request: web.Request) -> web.Response:
        try:
            await self.undeploy(request.match_info["id"])
        except UnknownDeployment as exc:
            return json_response(exc.to_dict(), status=404)
        return web.Response(status=204)

    async def http_deployments(self, request: web.Request) -> web.Response:
        return json_response(
            [
                {"id": d.id, "kind": d.kind, "name": getattr(d.statement, "statement_name", None) or getattr(d.statement, "name", None), "text": d.text}
                for d in self.engine.deployments.values()
            ]
        )

    async def http_count(self, request: web.Request) -> web.Response:
        return json_response(len(self.engine.deployments))


class WrongStatement(ValueError):
    def __init__(self, got: str, allowed: tuple[type, ...]):
        super().__init__(f"{got} is not accepted here; expected one of {[a.__name__ for a in allowed]}")


class NameMismatch(ValueError):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="portpipe-cep", description="Complex event processing service with an HTTP deployment API.")
    parser.add_argument("--http-port", type=int, default=DEFAULT_HTTP_PORT)
    parser.add_argument("--http-host", default="127.0.0.1")
    parser.add_argument("--advertise-host", default="localhost")
    parser.add_argument("--alerts-queue", default=DEFAULT_ALERTS_QUEUE)
    parser.add_argument("--alerts-host", default="localhost", help="broker host[:port] for alerts")
    parser.add_argument("--test-clock", action="store_true", help="take engine time from each record's genTs")
    parser.add_argument("--prefetch", type=int, default=512)
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


async def _serve(cfg: CepServiceConfig) -> None:
    service = await CepService(cfg).start()
    try:
        await wait_for_signal()
    finally:
        await service.close()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    cfg = CepServiceConfig(
        http_port=args.http_port,
        alerts_queue=args.alerts_queue,
        alerts_host=args.alerts_host,
        http_host=args.http_host,
        advertise_host=args.advertise_host,
        test_clock=args.test_clock,
        prefetch=args.prefetch,
    )
    try:
        asyncio.run(_serve(cfg))
    except BrokerUnreachable as exc:
        logger.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

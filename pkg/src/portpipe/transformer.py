"""Transformer service: raw JSON/XML in, canonical records out.

Loop per batch of deliveries: decode, encode canonically (stamping the
transformation time), publish to the output queue, wait for the broker's
confirm, then acknowledge the input. Undecodable messages go to
``<inputQueue>.dlq`` with the reason attached.
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
from .broker import BrokerClient, BrokerError, BrokerUnreachable, connect_with_retry, parse_hostport
from .broker.protocol import b64, check_queue_name
from .events import (
    DecodeError,
    EventRecord,
    EventSchema,
    Format,
    RawMessage,
    decode,
    decode_canonical,
    dumps_canonical,
    encode_canonical,
    load_schema_file,
)
from .web import HttpEndpoint, error_response, json_response, make_app, read_json, wait_for_signal

logger = logging.getLogger(__name__)

DEFAULT_OUTPUT_QUEUE = "map-events"
DEFAULT_HOST = "localhost"
DEFAULT_HTTP_PORT = 8081


@dataclass
class TransformerConfig:
    input_type: Format
    input_queue: str
    schema: EventSchema
    output_queue: str = DEFAULT_OUTPUT_QUEUE
    input_host: str = DEFAULT_HOST
    output_host: str = DEFAULT_HOST
    http_host: str = "127.0.0.1"
    http_port: int = DEFAULT_HTTP_PORT
    advertise_host: str = "localhost"
    prefetch: int = 256

    def __post_init__(self):
        self.input_type = Format.parse(self.input_type)
        check_queue_name(self.input_queue)
        check_queue_name(self.output_queue)

    @property
    def dlq(self) -> str:
        return f"{self.input_queue}.dlq"


def transform_message(event: bytes, fmt: "Format | str", schema: EventSchema) -> bytes:
    """Canonical bytes for one raw message; deterministic for a given input."""
    record = decode(RawMessage(event, Format.parse(fmt)), schema, recv_ts=0)
    return encode_canonical(record)


def dead_letter(error: DecodeError, payload: bytes, queue: str) -> bytes:
    return dumps_canonical({**error.to_dict(), "queue": queue, "payload": b64(payload)})


async def send_event_map(
    output_host: str,
    output_queue: str,
    record: EventRecord,
    client: Optional[BrokerClient] = None,
    attempts: int = 5,
) -> None:
    """Publish ``record`` canonically; connection failures retry with backoff."""
    payload = encode_canonical(record)
    if client is not None and not client.closed:
        await client.publish(output_queue, payload)
        return
    conn = await connect_with_retry(output_host, attempts=attempts)
    try:
        await conn.publish(output_queue, payload)
    finally:
        await conn.close()


class TransformerService:
    def __init__(self, cfg: TransformerConfig):
        self.cfg = cfg
        self.consumed = 0
        self.published = 0
        self.dead_lettered = 0
        self.input: Optional[BrokerClient] = None
        self.output: Optional[BrokerClient] = None
        self.http: Optional[HttpEndpoint] = None
        self._task: Optional[asyncio.Task] = None

    def health(self) -> dict:
        return {
            "consumed": self.consumed,
            "published": self.published,
            "deadLettered": self.dead_lettered,
            "inputQueue": self.cfg.input_queue,
            "outputQueue": self.cfg.output_queue,
            "inputHost": self.cfg.input_host,
            "outputHost": self.cfg.output_host,
        }

    def _same_broker(self) -> bool:
        return parse_hostport(self.cfg.input_host) == parse_hostport(self.cfg.output_host)

    async def _connect(self, attempts: int) -> None:
        self.input = await connect_with_retry(self.cfg.input_host, attempts=attempts)
        self.output = self.input if self._same_broker() else await connect_with_retry(self.cfg.output_host, attempts=attempts)
        await self.output.declare(self.cfg.output_queue)
        await self.output.declare(self.cfg.dlq)
        self.subscription = await self.input.subscribe(self.cfg.input_queue, prefetch=self.cfg.prefetch)

    async def start(self, with_http: bool = True) -> "TransformerService":
        """Connect (BrokerUnreachable is fatal here) and start consuming."""
        await self._connect(attempts=5)
        if with_http:
            self.http = await HttpEndpoint(self.make_app(), thingdesc.TRANSFORMER, self.cfg.http_host, self.cfg.http_port, self.cfg.advertise_host).start()
        self._task = asyncio.create_task(self._run())
        return self

    async def _run(self) -> None:
        while True:
            try:
                await self._consume()
            except BrokerError as exc:
                logger.warning("broker connection lost (%s); reconnecting", exc)
                await self._disconnect()
                await self._connect(attempts=0)

    async def _consume(self) -> None:
        cfg = self.cfg
        schema = cfg.schema
        fmt = cfg.input_type
        out = self.output
        sub = self.subscription
        while True:
            batch = await sub.get_batch()
            good, bad = [], []
            for delivery in batch:
                try:
                    record = decode(RawMessage(delivery.payload, fmt), schema)
                except DecodeError as exc:
                    logger.debug("dead-lettering message: %s", exc)
                    bad.append(dead_letter(exc, delivery.payload, cfg.input_queue))
                    continue
                record = EventRecord(record.schema_name, record.values, record.gen_ts, time.time_ns())
                good.append(encode_canonical(record))
            confirms = []
            if good:
                confirms.append(out.publish_batch_nowait(cfg.output_queue, good))
            if bad:
                confirms.append(out.publish_batch_nowait(cfg.dlq, bad))
            for fut in confirms:
                await fut
            self.published += len(good)
            self.dead_lettered += len(bad)
            self.input.ack(batch[-1].tag, multiple=True)
            self.consumed += len(batch)

    async def _disconnect(self) -> None:
        for conn in {self.input, self.output}:
            if conn is not None:
                conn.abort()

    async def close(self) -> None:
        if self._task is not None:
            self._task.cancel()
            try:
                await self._task
            except (asyncio.CancelledError, BrokerError):
                pass
        if self.http is not None:
            await self.http.close()
        for conn in {self.input, self.output}:
            if conn is not None:
                await conn.close()

    # HTTP actions ------------------------------------------------------------

    def make_app(self) -> web.Application:
        app = make_app(self.health)
        app.router.add_post("/transformmessage", self.http_transform)
        app.router.add_post("/sendeventmap", self.http_send)
        return app

    async def http_transform(self, request: web.Request) -> web.Response:
        body = await read_json(request)
        event = body.get("event")
        if not isinstance(event, str):
            return error_response(400, "InvalidRequest", "'event' must be a string")
        is_json, is_xml = bool(body.get("json")), bool(body.get("xml"))
        if is_json and is_xml:
            return error_response(400, "InvalidRequest", "set at most one of 'json' and 'xml'")
        fmt = Format.JSON if is_json else Format.XML if is_xml else self.cfg.input_type
        try:
            canonical = transform_message(event.encode(), fmt, self.cfg.schema)
        except DecodeError as exc:
            return json_response(exc.to_dict(), status=400)
        return web.Response(body=canonical, content_type="application/json")

    async def http_send(self, request: web.Request) -> web.Response:
        body = await read_json(request)
        host = body.get("outputHost") or self.cfg.output_host
        queue = body.get("outputQueue") or self.cfg.output_queue
        event_map = body.get("eventMap")
        if not isinstance(event_map, dict):
            return error_response(400, "InvalidRequest", "'eventMap' must be an object")
        if "values" not in event_map:
            event_map = {"schema": self.cfg.schema.name, "values": event_map}
        try:
            check_queue_name(queue)
            record = decode_canonical(dumps_canonical(event_map), {self.cfg.schema.name: self.cfg.schema})
        except DecodeError as exc:
            return json_response(exc.to_dict(), status=400)
        except BrokerError as exc:
            return error_response(400, exc.reason, str(exc))
        reuse = self.output if parse_hostport(host) == parse_hostport(self.cfg.output_host) else None
        try:
            await send_event_map(host, queue, record, client=reuse)
        except BrokerError as exc:
            return error_response(502, exc.reason, str(exc))
        return json_response({"status": "published", "outputHost": host, "outputQueue": queue})


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="portpipe-transform", description="Homogenize raw JSON/XML events into canonical records.")
    parser.add_argument("--input-type", required=True, choices=["json", "xml", "JSON", "XML"])
    parser.add_argument("--input-queue", required=True)
    parser.add_argument("--output-queue", default=DEFAULT_OUTPUT_QUEUE)
    parser.add_argument("--input-host", default=DEFAULT_HOST, help="broker host[:port]")
    parser.add_argument("--output-host", default=DEFAULT_HOST, help="broker host[:port]")
    parser.add_argument("--schema-file", required=True, help='JSON: {"name": ..., "fields": {"field": "Integer", ...}}')
    parser.add_argument("--http-host", default="127.0.0.1")
    parser.add_argument("--http-port", type=int, default=DEFAULT_HTTP_PORT)
    parser.add_argument("--advertise-host", default="localhost", help="host name used in Thing Description URLs")
    parser.add_argument("--prefetch", type=int, default=256)
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


async def _serve(cfg: TransformerConfig) -> None:
    service = await TransformerService(cfg).start()
    try:
        await wait_for_signal()
    finally:
        await service.close()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    cfg = TransformerConfig(
        input_type=args.input_type,
        input_queue=args.input_queue,
        schema=load_schema_file(args.schema_file),
        output_queue=args.output_queue,
        input_host=args.input_host,
        output_host=args.output_host,
        http_host=args.http_host,
        http_port=args.http_port,
        advertise_host=args.advertise_host,
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

"""In-memory queue broker served over TCP.

Queues are FIFO buffers with competing consumers. A message handed to a
consumer stays "unacked" until the consumer acknowledges it; if the
consumer's connection drops first, its unacked messages go back to the
head of the queue in their original order.
"""
from __future__ import annotations

import argparse
import asyncio
import collections
import itertools
import logging
import os
import signal
from typing import Optional

from .protocol import (
    DEFAULT_PORT,
    DEFAULT_PREFETCH,
    MAX_FRAME,
    PORT_ENV,
    BrokerError,
    FrameDecoder,
    FrameTooLarge,
    InvalidName,
    ProtocolError,
    UnknownQueue,
    UnknownTag,
    b64,
    encode_frame,
    unb64,
    valid_queue_name,
)

logger = logging.getLogger(__name__)

# Room left for the JSON envelope of a multi-message DELIVER frame.
_DELIVER_BUDGET = MAX_FRAME - 4096


class Consumer:
    __slots__ = ("conn", "queue", "prefetch", "outstanding")

    def __init__(self, conn: "Connection", queue: "Queue", prefetch: int):
        self.conn = conn
        self.queue = queue
        self.prefetch = prefetch
        self.outstanding = 0

    @property
    def ready(self) -> bool:
        return self.outstanding < self.prefetch and not self.conn.write_paused


class Queue:
    def __init__(self, name: str):
        self.name = name
        self.pending: collections.deque[bytes] = collections.deque()
        self.consumers: list[Consumer] = []
        self._rr = 0
        self.published = 0
        self.delivered = 0
        self.acked = 0
        self.redelivered = 0
        self.max_depth = 0

    @property
    def unacked(self) -> int:
        return sum(c.outstanding for c in self.consumers)

    def push(self, payload: bytes) -> None:
        self.pending.append(payload)
        self.published += 1
        if len(self.pending) > self.max_depth:
            self.max_depth = len(self.pending)

    def requeue(self, payloads: list[bytes]) -> None:
        self.pending.extendleft(reversed(payloads))
        self.redelivered += len(payloads)
        if len(self.pending) > self.max_depth:
            self.max_depth = len(self.pending)

    def dispatch(self) -> None:
        """Hand pending messages to consumers round-robin, honouring prefetch.

        Messages picked for the same consumer in one pass leave in a single
        DELIVER frame carrying consecutive tags.
        """
        pending = self.pending
        consumers = self.consumers
        if not pending or not consumers:
            return
        if len(consumers) == 1:
            consumer = consumers[0]
            n = min(len(pending), consumer.prefetch - consumer.outstanding)
            if n <= 0 or consumer.conn.write_paused:
                return
            batch = [pending.popleft() for _ in range(n)]
            self.delivered += n
            consumer.conn.deliver(consumer, batch)
            return
        picked: dict[Consumer, list[bytes]] = {}
        n = len(consumers)
        while pending:
            for step in range(n):
                consumer = consumers[(self._rr + step) % n]
                if consumer.ready:
                    self._rr = (self._rr + step + 1) % n
                    break
            else:
                break
            consumer.outstanding += 1
            picked.setdefault(consumer, []).append(pending.popleft())
            self.delivered += 1
        for consumer, batch in picked.items():
            consumer.outstanding -= len(batch)
            consumer.conn.deliver(consumer, batch)

    def stats(self) -> dict:
        return {
            "depth": len(self.pending),
            "unacked": self.unacked,
            "consumers": len(self.consumers),
            "published": self.published,
            "delivered": self.delivered,
            "acked": self.acked,
            "redelivered": self.redelivered,
            "max_depth": self.max_depth,
        }


class Broker:
    def __init__(self, auto_declare: bool = True):
        self.auto_declare = auto_declare
        self.queues: dict[str, Queue] = {}
        self.connections: set[Connection] = set()
        self._server: Optional[asyncio.base_events.Server] = None
        self.port: Optional[int] = None

    def declare(self, name: str) -> Queue:
        if not valid_queue_name(name):
            raise InvalidName(f"invalid queue name {name!r}")
        queue = self.queues.get(name)
        if queue is None:
            queue = self.queues[name] = Queue(name)
        return queue

    def lookup(self, name: str) -> Queue:
        queue = self.queues.get(name)
        if queue is not None:
            return queue
        if not self.auto_declare:
            if not valid_queue_name(name):
                raise InvalidName(f"invalid queue name {name!r}")
            raise UnknownQueue(f"queue {name!r} is not declared")
        return self.declare(name)

    def stats(self) -> dict:
        return {
            "queues": {name: q.stats() for name, q in sorted(self.queues.items())},
            "connections": len(self.connections),
        }

    async def start(self, host: str = "127.0.0.1", port: int = DEFAULT_PORT) -> "Broker":
        loop = asyncio.get_running_loop()
        self._server = await loop.create_server(lambda: Connection(self), host, port)
        self.port = self._server.sockets[0].getsockname()[1]
        logger.info("broker listening on %s:%d", host, self.port)
        return self

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None
        for conn in list(self.connections):
            conn.abort()
        self.connections.clear()

    async def __aenter__(self) -> "Broker":
        if self._server is None:
            await self.start(port=0)
        return self

    async def __aexit__(self, *exc) -> None:
        await self.close()


class Connection(asyncio.Protocol):
    """One client connection; frames are handled strictly in arrival order."""

    def __init__(self, broker: Broker):
        self.broker = broker
        self.decoder = FrameDecoder()
        self.transport: Optional[asyncio.Transport] = None
        self.consumers: dict[str, Consumer] = {}
        self.unacked: dict[int, tuple[Consumer, bytes]] = {}
        self._tags = itertools.count(1)
        self._out: list[bytes] = []
        self._flush_scheduled = False
        self._publish_ok: Optional[int] = None
        self.write_paused = False
        self.closed = False

    # asyncio.Protocol ------------------------------------------------------

    def connection_made(self, transport) -> None:
        self.transport = transport
        self.broker.connections.add(self)

    def data_received(self, data: bytes) -> None:
        try:
            for frame in self.decoder.feed(data):
                self.handle(frame)
        except BrokerError as exc:
            logger.warning("closing connection after protocol failure: %s", exc)
            self.send({"type": "ERR", "reason": exc.reason, "detail": str(exc)})
            self._flush()
            self.transport.close()
        self._flush_publish_ok()

    def connection_lost(self, exc) -> None:
        self.closed = True
        self.broker.connections.discard(self)
        touched = set()
        # Return unacked messages per queue, oldest tag first.
        by_queue: dict[Queue, list[bytes]] = {}
        for tag in sorted(self.unacked):
            consumer, payload = self.unacked[tag]
            by_queue.setdefault(consumer.queue, []).append(payload)
        self.unacked.clear()
        for consumer in self.consumers.values():
            consumer.queue.consumers.remove(consumer)
            touched.add(consumer.queue)
        self.consumers.clear()
        for queue, payloads in by_queue.items():
            queue.requeue(payloads)
            touched.add(queue)
        for queue in touched:
            queue.dispatch()

    def pause_writing(self) -> None:
        self.write_paused = True

    def resume_writing(self) -> None:
        self.write_paused = False
        for consumer in list(self.consumers.values()):
            consumer.queue.dispatch()

    # outgoing --------------------------------------------------------------

    def send(self, body: dict) -> None:
        self._out.append(encode_frame(body))
        if not self._flush_scheduled:
            self._flush_scheduled = True
            asyncio.get_running_loop().call_soon(self._flush)

    def _flush(self) -> None:
        self._flush_scheduled = False
        if self._out and not self.closed:
            self.transport.write(b"".join(self._out))
        self._out.clear()

    def _flush_publish_ok(self) -> None:
        if self._publish_ok is not None:
            self.send({"type": "OK", "id": self._publish_ok, "multiple": True})
            self._publish_ok = None

    def deliver(self, consumer: Consumer, payloads: list[bytes]) -> None:
        tags = self._tags
        unacked = self.unacked
        name = consumer.queue.name
        consumer.outstanding += len(payloads)
        chunk: list[str] = []
        first = size = 0
        for payload in payloads:
            tag = next(tags)
            unacked[tag] = (consumer, payload)
            encoded = b64(payload)
            if chunk and size + len(encoded) > _DELIVER_BUDGET:
                self._send_deliver(name, first, chunk)
                chunk, size = [], 0
            if not chunk:
                first = tag
            chunk.append(encoded)
            size += len(encoded) + 3
        self._send_deliver(name, first, chunk)

    def _send_deliver(self, queue: str, first: int, chunk: list[str]) -> None:
        if len(chunk) == 1:
            self.send({"type": "DELIVER", "queue": queue, "tag": first, "payload": chunk[0]})
        else:
            self.send({"type": "DELIVER", "queue": queue, "tag": first, "payloads": chunk})

    def abort(self) -> None:
        if self.transport is not None:
            self.transport.abort()

    # frame handlers --------------------------------------------------------

    def reply(self, frame: dict, **fields) -> None:
        rid = frame.get("id")
        if rid is not None:
            self._flush_publish_ok()
            self.send({"type": "OK", "id": rid, **fields})

    def fail(self, frame: dict, exc: BrokerError) -> None:
        self._flush_publish_ok()
        body = {"type": "ERR", "reason": exc.reason, "detail": str(exc)}
        if frame.get("id") is not None:
            body["id"] = frame["id"]
        self.send(body)

    def handle(self, frame: dict) -> None:
        ftype = frame["type"]
        try:
            if ftype == "PUBLISH":
                self.on_publish(frame)
            elif ftype == "ACK":
                self.on_ack(frame)
            elif ftype == "DECLARE":
                self.broker.declare(frame.get("queue"))
                self.reply(frame)
            elif ftype == "SUBSCRIBE":
                self.on_subscribe(frame)
            elif ftype == "STATS":
                self.reply(frame, stats=self.broker.stats())
            else:
                raise ProtocolError(f"clients may not send {ftype} frames")
        except BrokerError as exc:
            if isinstance(exc, ProtocolError):
                raise
            self.fail(frame, exc)
        except (KeyError, TypeError, ValueError) as exc:
            self.fail(frame, ProtocolError(f"malformed {ftype} frame: {exc}"))

    def on_publish(self, frame: dict) -> None:
        queue = self.broker.lookup(frame.get("queue"))
        payloads = [unb64(p) for p in frame["payloads"]] if "payloads" in frame else [unb64(frame["payload"])]
        for payload in payloads:
            # Anything bigger could not be re-framed as a DELIVER.
            if len(payload) * 4 // 3 > _DELIVER_BUDGET:
                raise FrameTooLarge(f"payload of {len(payload)} bytes is too large to deliver")
        for payload in payloads:
            queue.push(payload)
        queue.dispatch()
        rid = frame.get("id")
        if rid is not None:
            self._publish_ok = rid

    def on_subscribe(self, frame: dict) -> None:
        queue = self.broker.lookup(frame.get("queue"))
        prefetch = int(frame.get("prefetch") or DEFAULT_PREFETCH)
        if prefetch <= 0:
            raise ProtocolError("prefetch must be positive")
        consumer = self.consumers.get(queue.name)
        if consumer is None:
            consumer = self.consumers[queue.name] = Consumer(self, queue, prefetch)
            queue.consumers.append(consumer)
        else:
            consumer.prefetch = prefetch
        self.reply(frame)
        queue.dispatch()

    def on_ack(self, frame: dict) -> None:
        tag = frame["tag"]
        if frame.get("multiple"):
            # unacked is keyed in tag order, so the covered tags form a prefix.
            tags = list(itertools.takewhile(lambda t: t <= tag, self.unacked))
            if not tags:
                raise UnknownTag(f"no outstanding deliveries up to tag {tag}")
        elif tag in self.unacked:
            tags = [tag]
        else:
            raise UnknownTag(f"unknown delivery tag {tag}")
        touched = set()
        for t in tags:
            consumer, _ = self.unacked.pop(t)
            consumer.outstanding -= 1
            consumer.queue.acked += 1
            touched.add(consumer.queue)
        self.reply(frame)
        for queue in touched:
            queue.dispatch()


async def serve(host: str, port: int, auto_declare: bool = True) -> None:
    broker = Broker(auto_declare=auto_declare)
    await broker.start(host, port)
    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        loop.add_signal_handler(sig, stop.set)
    await stop.wait()
    await broker.close()


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(prog="portpipe-broker", description="Run the in-memory queue broker.")
    parser.add_argument("--host", default="127.0.0.1", help="interface to bind")
    parser.add_argument("--port", type=int, default=int(os.environ.get(PORT_ENV, DEFAULT_PORT)))
    parser.add_argument("--no-auto-declare", action="store_true", help="reject publish/subscribe to undeclared queues")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    asyncio.run(serve(args.host, args.port, auto_declare=not args.no_auto_declare))


if __name__ == "__main__":
    main()

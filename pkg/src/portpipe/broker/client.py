"""asyncio client for the queue broker."""
from __future__ import annotations

import asyncio
import collections
import itertools
import logging
from typing import Optional

from .protocol import (
    DEFAULT_PREFETCH,
    BrokerError,
    BrokerUnreachable,
    ConnectionClosed,
    FrameDecoder,
    b64,
    check_queue_name,
    encode_frame,
    error_from_reason,
    parse_hostport,
    unb64,
)

logger = logging.getLogger(__name__)


class Delivery:
    __slots__ = ("queue", "tag", "payload")

    def __init__(self, queue: str, tag: int, payload: bytes):
        self.queue = queue
        self.tag = tag
        self.payload = payload

    def __repr__(self):
        return f"Delivery(queue={self.queue!r}, tag={self.tag}, payload={self.payload[:40]!r})"


class Subscription:
    """Buffered stream of deliveries from one queue."""

    def __init__(self, client: "BrokerClient", queue: str, prefetch: int):
        self.client = client
        self.queue = queue
        self.prefetch = prefetch
        self._buf: collections.deque[Delivery] = collections.deque()
        self._waiter: Optional[asyncio.Future] = None
        self._error: Optional[BaseException] = None

    def _push(self, delivery: Delivery) -> None:
        self._buf.append(delivery)
        if self._waiter is not None and not self._waiter.done():
            self._waiter.set_result(None)

    def _push_many(self, deliveries: list[Delivery]) -> None:
        self._buf.extend(deliveries)
        if self._waiter is not None and not self._waiter.done():
            self._waiter.set_result(None)

    def _fail(self, exc: BaseException) -> None:
        self._error = exc
        if self._waiter is not None and not self._waiter.done():
            self._waiter.set_result(None)

    async def _wait(self) -> None:
        while not self._buf:
            if self._error is not None:
                raise self._error
            self._waiter = asyncio.get_running_loop().create_future()
            try:
                await self._waiter
            finally:
                self._waiter = None

    async def get(self) -> Delivery:
        await self._wait()
        return self._buf.popleft()

    async def get_batch(self, limit: Optional[int] = None) -> list[Delivery]:
        """Wait for at least one delivery, then drain what is buffered."""
        await self._wait()
        buf = self._buf
        n = len(buf) if limit is None else min(limit, len(buf))
        return [buf.popleft() for _ in range(n)]

    def ack(self, delivery: Delivery) -> None:
        self.client.ack(delivery.tag)

    def __aiter__(self):
        return self

    async def __anext__(self) -> Delivery:
        try:
            return await self.get()
        except ConnectionClosed:
            raise StopAsyncIteration from None


class BrokerClient(asyncio.Protocol):
    """One broker connection; may publish and consume at the same time.

    Not safe for concurrent use from several tasks that interleave
    multi-step exchanges without external serialization.
    """

    def __init__(self):
        self.transport: Optional[asyncio.Transport] = None
        self.decoder = FrameDecoder()
        self._ids = itertools.count(1)
        self._pending: dict[int, asyncio.Future] = {}
        self._publish_ids: collections.deque[int] = collections.deque()
        self._subs: dict[str, Subscription] = {}
        self._out: list[bytes] = []
        self._flush_scheduled = False
        self._can_write: Optional[asyncio.Event] = None
        self._closed_fut: Optional[asyncio.Future] = None
        self.errors: collections.deque[BrokerError] = collections.deque(maxlen=100)
        self.closed = False
        self.address: tuple[str, int] = ("", 0)

    @classmethod
    async def connect(cls, host: str = "localhost", port: Optional[int] = None, timeout: float = 5.0) -> "BrokerClient":
        if port is None:
            host, port = parse_hostport(host)
        loop = asyncio.get_running_loop()
        try:
            _, client = await asyncio.wait_for(loop.create_connection(cls, host, port), timeout)
        except (OSError, asyncio.TimeoutError) as exc:
            raise BrokerUnreachable(f"cannot reach broker at {host}:{port}: {exc}") from None
        client.address = (host, port)
        return client

    # asyncio.Protocol ------------------------------------------------------

    def connection_made(self, transport) -> None:
        self.transport = transport
        loop = asyncio.get_running_loop()
        self._can_write = asyncio.Event()
        self._can_write.set()
        self._closed_fut = loop.create_future()

    def data_received(self, data: bytes) -> None:
        try:
            frames = list(self.decoder.feed(data))
        except BrokerError as exc:
            logger.error("dropping connection: %s", exc)
            self.transport.abort()
            return
        for frame in frames:
            ftype = frame["type"]
            if ftype == "DELIVER":
                queue = frame["queue"]
                sub = self._subs.get(queue)
                if sub is None:
                    logger.warning("delivery for unsubscribed queue %s", queue)
                elif "payloads" in frame:
                    sub._push_many([Delivery(queue, tag, unb64(p)) for tag, p in enumerate(frame["payloads"], frame["tag"])])
                else:
                    sub._push(Delivery(queue, frame["tag"], unb64(frame["payload"])))
            elif ftype == "OK":
                self._on_ok(frame)
            elif ftype == "ERR":
                self._on_err(frame)

    def _on_ok(self, frame: dict) -> None:
        rid = frame.get("id")
        if rid is None:
            return
        if frame.get("multiple"):
            ids = self._publish_ids
            while ids and ids[0] <= rid:
                fut = self._pending.pop(ids.popleft(), None)
                if fut is not None and not fut.done():
                    fut.set_result(frame)
        fut = self._pending.pop(rid, None)
        if fut is not None and not fut.done():
            fut.set_result(frame)

    def _on_err(self, frame: dict) -> None:
        exc = error_from_reason(frame.get("reason", "BrokerError"), frame.get("detail", ""))
        fut = self._pending.pop(frame["id"], None) if frame.get("id") is not None else None
        if fut is not None:
            if not fut.done():
                fut.set_exception(exc)
        else:
            logger.warning("broker error: %s", exc)
            self.errors.append(exc)

    def connection_lost(self, exc) -> None:
        self.closed = True
        err = ConnectionClosed(f"connection to broker lost: {exc}" if exc else "connection closed")
        for fut in self._pending.values():
            if not fut.done():
                fut.set_exception(err)
                # Mark retrieved so unobserved publish confirms do not warn.
                fut.exception()
        self._pending.clear()
        self._publish_ids.clear()
        for sub in self._subs.values():
            sub._fail(err)
        if self._can_write is not None:
            self._can_write.set()
        if self._closed_fut is not None and not self._closed_fut.done():
            self._closed_fut.set_result(None)

    def pause_writing(self) -> None:
        self._can_write.clear()

    def resume_writing(self) -> None:
        self._can_write.set()

    # outgoing --------------------------------------------------------------

    def _send(self, body: dict) -> None:
        if self.closed:
            raise ConnectionClosed("connection is closed")
        self._out.append(encode_frame(body))
        if not self._flush_scheduled:
            self._flush_scheduled = True
            asyncio.get_running_loop().call_soon(self._flush)

    def _flush(self) -> None:
        self._flush_scheduled = False
        if self._out and not self.closed:
            self.transport.write(b"".join(self._out))
        self._out.clear()

    def _request(self, body: dict) -> asyncio.Future:
        rid = next(self._ids)
        body["id"] = rid
        self._send(body)
        fut = asyncio.get_running_loop().create_future()
        self._pending[rid] = fut
        return fut

    async def drain(self) -> None:
        """Wait until the transport's write buffer is below its high-water mark."""
        await self._can_write.wait()
        if self.closed:
            raise ConnectionClosed("connection is closed")

    # public API ------------------------------------------------------------

    async def declare(self, queue: str) -> None:
        check_queue_name(queue)
        await self._request({"type": "DECLARE", "queue": queue})

    def publish_nowait(self, queue: str, payload: bytes, confirm: bool = True) -> Optional[asyncio.Future]:
        """Queue a PUBLISH frame; returns a future resolved on broker confirm."""
        body = {"type": "PUBLISH", "queue": queue, "payload": b64(payload)}
        if not confirm:
            self._send(body)
            return None
        fut = self._request(body)
        self._publish_ids.append(body["id"])
        return fut

    def publish_batch_nowait(self, queue: str, payloads: list[bytes], confirm: bool = True) -> Optional[asyncio.Future]:
        """Queue one PUBLISH frame carrying several messages, enqueued in list order."""
        if not payloads:
            raise ValueError("empty batch")
        body = {"type": "PUBLISH", "queue": queue, "payloads": [b64(p) for p in payloads]}
        if not confirm:
            self._send(body)
            return None
        fut = self._request(body)
        self._publish_ids.append(body["id"])
        return fut

    async def publish_batch(self, queue: str, payloads: list[bytes]) -> None:
        await self.publish_batch_nowait(queue, payloads)

    async def publish(self, queue: str, payload: bytes) -> None:
        await self.publish_nowait(queue, payload)

    async def subscribe(self, queue: str, prefetch: int = DEFAULT_PREFETCH) -> Subscription:
        if prefetch <= 0:
            raise ValueError("prefetch must be positive")
        sub = self._subs.get(queue)
        if sub is None:
            sub = self._subs[queue] = Subscription(self, queue, prefetch)
        try:
            await self._request({"type": "SUBSCRIBE", "queue": queue, "prefetch": prefetch})
        except BrokerError:
            self._subs.pop(queue, None)
            raise
        return sub

    def ack(self, tag: int, multiple: bool = False) -> None:
        body = {"type": "ACK", "tag": tag}
        if multiple:
            body["multiple"] = True
        self._send(body)

    async def ack_wait(self, tag: int, multiple: bool = False) -> None:
        """Acknowledge and wait for the broker's verdict (raises UnknownTag)."""
        body = {"type": "ACK", "tag": tag}
        if multiple:
            body["multiple"] = True
        await self._request(body)

    async def stats(self) -> dict:
        reply = await self._request({"type": "STATS"})
        return reply["stats"]

    async def close(self) -> None:
        if self.transport is None or self.closed:
            return
        self._flush()
        self.transport.close()
        await self._closed_fut

    def abort(self) -> None:
        if self.transport is not None and not self.closed:
            self.transport.abort()

    async def wait_closed(self) -> None:
        await self._closed_fut

    async def __aenter__(self) -> "BrokerClient":
        return self

    async def __aexit__(self, *exc) -> None:
        await self.close()


async def connect_with_retry(
    address: Optional[str],
    attempts: int = 5,
    base_delay: float = 0.1,
    max_delay: float = 5.0,
) -> BrokerClient:
    """Connect with exponential backoff; raises BrokerUnreachable after ``attempts`` failures.

    ``attempts=0`` retries forever.
    """
    host, port = parse_hostport(address)
    delay = base_delay
    for attempt in itertools.count(1):
        try:
            return await BrokerClient.connect(host, port)
        except BrokerUnreachable:
            if attempts and attempt >= attempts:
                raise
            logger.info("broker %s:%d unreachable (attempt %d), retrying in %.1fs", host, port, attempt, delay)
            await asyncio.sleep(delay)
            delay = min(delay * 2, max_delay)
    raise AssertionError("unreachable")

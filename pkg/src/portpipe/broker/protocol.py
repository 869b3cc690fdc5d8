"""Length-prefixed JSON frames spoken between broker and clients.

Each frame is a 4-byte big-endian body length followed by a UTF-8 JSON
object whose ``type`` is one of :data:`FRAME_TYPES`. Payloads travel
base64-encoded in the ``payload`` field.

Optional fields beyond the basic set:

``id``
    client-chosen request id; the broker answers the request with an
    ``OK``/``ERR`` frame carrying the same id. Consecutive ``OK`` replies
    to ``PUBLISH`` may be coalesced into one frame with ``multiple: true``
    meaning "every request up to and including ``id``".
``multiple``
    on ``ACK``, acknowledges every outstanding delivery on the connection
    with a tag less than or equal to ``tag``.
``prefetch``
    on ``SUBSCRIBE``, the consumer's window of unacknowledged deliveries.
"""
from __future__ import annotations

import base64
import json
import os
import re
import struct
from typing import Any, Iterator

MAX_FRAME = 16 * 1024 * 1024
DEFAULT_PORT = 5680
DEFAULT_PREFETCH = 64
PORT_ENV = "PORTPIPE_BROKER_PORT"

FRAME_TYPES = frozenset({"DECLARE", "PUBLISH", "SUBSCRIBE", "DELIVER", "ACK", "OK", "ERR", "STATS"})

_HEADER = struct.Struct(">I")
_QUEUE_RE = re.compile(r"[A-Za-z0-9._-]{1,255}")


class BrokerError(Exception):
    """Error reported by the broker or raised by the protocol layer."""

    reason = "BrokerError"

    def __init__(self, message: str = ""):
        super().__init__(message or self.reason)


class InvalidName(BrokerError):
    reason = "InvalidName"


class FrameTooLarge(BrokerError):
    reason = "FrameTooLarge"


class ConnectionClosed(BrokerError):
    reason = "ConnectionClosed"


class UnknownQueue(BrokerError):
    reason = "UnknownQueue"


class UnknownTag(BrokerError):
    reason = "UnknownTag"


class ProtocolError(BrokerError):
    reason = "ProtocolError"


class BrokerUnreachable(BrokerError):
    reason = "BrokerUnreachable"


ERRORS = {cls.reason: cls for cls in (InvalidName, FrameTooLarge, ConnectionClosed, UnknownQueue, UnknownTag, ProtocolError)}


def error_from_reason(reason: str, detail: str = "") -> BrokerError:
    cls = ERRORS.get(reason, BrokerError)
    return cls(detail or reason)


def valid_queue_name(name: Any) -> bool:
    return isinstance(name, str) and _QUEUE_RE.fullmatch(name) is not None


def check_queue_name(name: Any) -> str:
    if not valid_queue_name(name):
        raise InvalidName(f"invalid queue name {name!r}")
    return name


def encode_frame(body: dict) -> bytes:
    data = json.dumps(body, separators=(",", ":")).encode()
    if len(data) > MAX_FRAME:
        raise FrameTooLarge(f"frame of {len(data)} bytes exceeds {MAX_FRAME}")
    return _HEADER.pack(len(data)) + data


def b64(payload: bytes) -> str:
    return base64.b64encode(payload).decode("ascii")


def unb64(text: str) -> bytes:
    return base64.b64decode(text)


class FrameDecoder:
    """Incremental decoder: feed bytes, iterate complete frame bodies."""

    def __init__(self, max_frame: int = MAX_FRAME):
        self._buf = bytearray()
        self._max = max_frame

    def feed(self, data: bytes) -> Iterator[dict]:
        buf = self._buf
        buf += data
        pos = 0
        end = len(buf)
        try:
            while end - pos >= 4:
                (size,) = _HEADER.unpack_from(buf, pos)
                if size > self._max:
                    raise FrameTooLarge(f"incoming frame of {size} bytes exceeds {self._max}")
                if end - pos - 4 < size:
                    break
                body = bytes(buf[pos + 4 : pos + 4 + size])
                pos += 4 + size
                try:
                    frame = json.loads(body)
                except ValueError as exc:
                    raise ProtocolError(f"frame body is not JSON: {exc}") from None
                if not isinstance(frame, dict) or frame.get("type") not in FRAME_TYPES:
                    raise ProtocolError(f"bad frame {frame!r:.200}")
                yield frame
        finally:
            del buf[:pos]


def parse_hostport(value: str | None, default_port: int | None = None) -> tuple[str, int]:
    """Split ``host[:port]``; the port defaults to the broker port setting."""
    if default_port is None:
        default_port = int(os.environ.get(PORT_ENV, DEFAULT_PORT))
    if not value:
        return "localhost", default_port
    if value.startswith("["):
        host, _, rest = value[1:].partition("]")
        return host, int(rest[1:]) if rest.startswith(":") else default_port
    host, sep, port = value.rpartition(":")
    if sep and port.isdigit() and host:
        return host, int(port)
    return value, default_port

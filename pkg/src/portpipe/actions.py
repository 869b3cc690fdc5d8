"""Actions service: executes the file or database action named in each alert's tags."""
from __future__ import annotations

import abc
import argparse
import asyncio
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

from aiohttp import web

from . import thingdesc
from .broker import BrokerClient, BrokerError, BrokerUnreachable, connect_with_retry
from .broker.protocol import b64, check_queue_name
from .events import dumps_canonical
from .web import HttpEndpoint, error_response, json_response, make_app, read_json, wait_for_signal

logger = logging.getLogger(__name__)

DEFAULT_HTTP_PORT = 8082
RETRIES = 3
ACTIONS = ("file", "database")
REQUIRED_TAGS = {"file": ("name",), "database": ("mongoURI", "databaseName")}


class ActionError(Exception):
    """Failure of one envelope; ``transient`` failures are retried before dead-lettering."""

    reason = "ActionError"
    transient = False

    def to_dict(self) -> dict:
        return {"error": self.reason, "detail": str(self)}


class MalformedEnvelope(ActionError):
    reason = "MalformedEnvelope"


class UnknownAction(ActionError):
    reason = "UnknownAction"


class MissingTag(ActionError):
    reason = "MissingTag"


class PathTraversal(ActionError):
    reason = "PathTraversal"


class IoError(ActionError):
    reason = "IoError"
    transient = True


class SinkUnavailable(ActionError):
    reason = "SinkUnavailable"
    transient = True


@dataclass(frozen=True)
class AlertEnvelope:
    stream: str
    values: dict
    tags: tuple[tuple[str, str], ...]
    detect_ts: int
    gen_ts: Optional[int] = None

    @property
    def tag_map(self) -> dict[str, str]:
        return dict(self.tags)

    def to_dict(self) -> dict:
        doc: dict[str, Any] = {
            "stream": self.stream,
            "values": self.values,
            "tags": [{"name": n, "value": v} for n, v in self.tags],
            "detectTs": self.detect_ts,
        }
        if self.gen_ts is not None:
            doc["genTs"] = self.gen_ts
        return doc

    @classmethod
    def from_dict(cls, doc: Any) -> "AlertEnvelope":
        if not isinstance(doc, dict):
            raise MalformedEnvelope("envelope must be a JSON object")
        stream, values, tags, detect_ts = doc.get("stream"), doc.get("values"), doc.get("tags"), doc.get("detectTs")
        if not isinstance(stream, str) or not isinstance(values, dict) or not isinstance(tags, list):
            raise MalformedEnvelope("envelope needs string 'stream', object 'values' and list 'tags'")
        if isinstance(detect_ts, bool) or not isinstance(detect_ts, int):
            raise MalformedEnvelope("'detectTs' must be an integer")
        pairs = []
        for tag in tags:
            if isinstance(tag, dict) and isinstance(tag.get("name"), str) and isinstance(tag.get("value"), str):
                pairs.append((tag["name"], tag["value"]))
            elif isinstance(tag, list) and len(tag) == 2 and all(isinstance(x, str) for x in tag):
                pairs.append((tag[0], tag[1]))
            else:
                raise MalformedEnvelope(f"bad tag {tag!r}")
        gen_ts = doc.get("genTs")
        if gen_ts is not None and (isinstance(gen_ts, bool) or not isinstance(gen_ts, int)):
            raise MalformedEnvelope("'genTs' must be an integer")
        return cls(stream, values, tuple(pairs), detect_ts, gen_ts)

    @classmethod
    def from_bytes(cls, payload: bytes) -> "AlertEnvelope":
        try:
            doc = json.loads(payload)
        except (ValueError, UnicodeDecodeError) as exc:
            raise MalformedEnvelope(f"not JSON: {exc}") from None
        return cls.from_dict(doc)


# --------------------------------------------------------------------------
# sinks


def append_line(path: Path, line: bytes) -> None:
    """Append ``line`` plus a newline with one O_APPEND write, so concurrent writers never tear it."""
    data = line + b"\n"
    fd = os.open(path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
    try:
        written = os.write(fd, data)
        if written != len(data):
            raise OSError(f"short write to {path}: {written} of {len(data)} bytes")
    finally:
        os.close(fd)


def resolve_under(root: Path, name: str) -> Path:
    if not name or "\x00" in name:
        raise PathTraversal(f"invalid file name {name!r}")
    root = root.resolve()
    target = (root / name).resolve()
    if target == root or root not in target.parents:
        raise PathTraversal(f"{name!r} escapes {root}")
    return target


class DocumentSink(abc.ABC):
    @abc.abstractmethod
    def insert(self, database: str, document: dict, uri: Optional[str] = None) -> None: ...

    @abc.abstractmethod
    def count(self, database: str) -> int: ...

    def close(self) -> None:
        pass


class JsonlDocumentSink(DocumentSink):
    """One append-only JSON-lines file per database name under ``directory``."""

    def __init__(self, directory: "str | Path"):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def path(self, database: str) -> Path:
        return resolve_under(self.directory, database + ".jsonl")

    def insert(self, database: str, document: dict, uri: Optional[str] = None) -> None:
        path = self.path(database)
        try:
            append_line(path, dumps_canonical(document))
        except OSError as exc:
            raise SinkUnavailable(str(exc)) from exc

    def count(self, database: str) -> int:
        try:
            with open(self.path(database), "rb") as fh:
                return sum(1 for _ in fh)
        except FileNotFoundError:
            return 0

    def documents(self, database: str) -> list[dict]:
        try:
            with open(self.path(database), "rb") as fh:
                return [json.loads(line) for line in fh]
        except FileNotFoundError:
            return []


class ExternalDocumentSink(DocumentSink):
    """Adapter for a real document database (needs the optional ``pymongo`` extra)."""

    COLLECTION = "alerts"

    def __init__(self, default_uri: Optional[str] = None):
        try:
            import pymongo
        except ImportError as exc:
            raise RuntimeError("the external sink needs pymongo; install the 'mongo' extra") from exc
        self._pymongo = pymongo
        self.default_uri = default_uri
        self._clients: dict[str, Any] = {}

    def _client(self, uri: Optional[str]):
        uri = uri or self.default_uri
        if uri is None:
            raise SinkUnavailable("no database URI")
        client = self._clients.get(uri)
        if client is None:
            client = self._clients[uri] = self._pymongo.MongoClient(uri, serverSelectionTimeoutMS=2000)
        return client

    def insert(self, database: str, document: dict, uri: Optional[str] = None) -> None:
        try:
            self._client(uri)[database][self.COLLECTION].insert_one(dict(document))
        except self._pymongo.errors.PyMongoError as exc:
            raise SinkUnavailable(str(exc)) from exc

    def count(self, database: str) -> int:
        return self._client(None)[database][self.COLLECTION].count_documents({})

    def close(self) -> None:
        for client in self._clients.values():
            client.close()


# --------------------------------------------------------------------------
# dispatch


class ActionExecutor:
    def __init__(self, file_root: "str | Path", sink: DocumentSink):
        self.file_root = Path(file_root)
        self.file_root.mkdir(parents=True, exist_ok=True)
        self.sink = sink
        self.file_lines = 0
        self.db_inserts = 0

    @staticmethod
    def action_of(envelope: AlertEnvelope) -> str:
        tags = envelope.tag_map
        action = tags.get("action")
        if action is None:
            raise MissingTag("alert has no 'action' tag")
        if action not in ACTIONS:
            raise UnknownAction(f"action {action!r} is not one of {list(ACTIONS)}")
        missing = [t for t in REQUIRED_TAGS[action] if t not in tags]
        if missing:
            raise MissingTag(f"action {action!r} needs tags {missing}")
        return action

    def execute(self, envelope: AlertEnvelope) -> str:
        action = self.action_of(envelope)
        if action == "file":
            self.execute_file(envelope)
        else:
            self.execute_database(envelope)
        return action

    def execute_file(self, envelope: AlertEnvelope) -> None:
        path = resolve_under(self.file_root, envelope.tag_map["name"])
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            append_line(path, dumps_canonical(envelope.to_dict()))
        except OSError as exc:
            raise IoError(str(exc)) from exc
        self.file_lines += 1

    def execute_database(self, envelope: AlertEnvelope) -> None:
        tags = envelope.tag_map
        document = {**envelope.values, "stream": envelope.stream, "detectTs": envelope.detect_ts}
        self.sink.insert(tags["databaseName"], document, uri=tags["mongoURI"])
        self.db_inserts += 1


async def execute_with_retry(executor: ActionExecutor, envelope: AlertEnvelope, retries: int = RETRIES, delay: float = 0.05) -> str:
    for attempt in range(retries + 1):
        try:
            return executor.execute(envelope)
        except ActionError as exc:
            if not exc.transient or attempt == retries:
                raise
            logger.warning("action failed (%s), retry %d of %d", exc, attempt + 1, retries)
            await asyncio.sleep(delay * 2**attempt)
    raise AssertionError("unreachable")


# --------------------------------------------------------------------------
# service


@dataclass
class ActionsConfig:
    input_queue: str
    host: str = "localhost"
    file_root: str = "."
    sink: str = "jsonl"
    data_dir: Optional[str] = None
    http_host: str = "127.0.0.1"
    http_port: int = DEFAULT_HTTP_PORT
    advertise_host: str = "localhost"
    prefetch: int = 256

    def __post_init__(self):
        if not self.input_queue:
            raise ValueError("input_queue is mandatory")
        check_queue_name(self.input_queue)
        if self.sink not in ("jsonl", "external"):
            raise ValueError(f"unknown sink {self.sink!r}")

    @property
    def dlq(self) -> str:
        return f"{self.input_queue}.dlq"

    def make_sink(self) -> DocumentSink:
        if self.sink == "external":
            return ExternalDocumentSink()
        return JsonlDocumentSink(self.data_dir or os.path.join(self.file_root, "databases"))


class ActionsService:
    def __init__(self, cfg: ActionsConfig, sink: Optional[DocumentSink] = None):
        self.cfg = cfg
        self.sink = sink if sink is not None else cfg.make_sink()
        self.executor = ActionExecutor(cfg.file_root, self.sink)
        self.client: Optional[BrokerClient] = None
        self.http: Optional[HttpEndpoint] = None
        self.processed = 0
        self.executed = 0
        self.dead_lettered = 0
        self._task: Optional[asyncio.Task] = None

    def health(self) -> dict:
        return {
            "inputQueue": self.cfg.input_queue,
            "host": self.cfg.host,
            "processed": self.processed,
            "executed": self.executed,
            "deadLettered": self.dead_lettered,
            "fileLines": self.executor.file_lines,
            "dbInserts": self.executor.db_inserts,
        }

    async def _connect(self, attempts: int) -> None:
        self.client = await connect_with_retry(self.cfg.host, attempts=attempts)
        await self.client.declare(self.cfg.dlq)
        self.subscription = await self.client.subscribe(self.cfg.input_queue, prefetch=self.cfg.prefetch)

    async def start(self, with_http: bool = True) -> "ActionsService":
        await self._connect(attempts=5)
        if with_http:
            self.http = await HttpEndpoint(self.make_app(), thingdesc.ACTIONS, self.cfg.http_host, self.cfg.http_port, self.cfg.advertise_host).start()
        self._task = asyncio.create_task(self._run())
        return self

    async def _run(self) -> None:
        while True:
            try:
                await self._consume()
            except BrokerError as exc:
                logger.warning("broker connection lost (%s); reconnecting", exc)
                self.client.abort()
                await self._connect(attempts=0)

    async def _consume(self) -> None:
        client = self.client
        sub = self.subscription
        while True:
            batch = await sub.get_batch()
            pending = []
            for delivery in batch:
                try:
                    await execute_with_retry(self.executor, AlertEnvelope.from_bytes(delivery.payload))
                    self.executed += 1
                except ActionError as exc:
                    logger.info("dead-lettering alert: %s: %s", exc.reason, exc)
                    doc = {**exc.to_dict(), "queue": self.cfg.input_queue, "payload": b64(delivery.payload)}
                    pending.append(client.publish_nowait(self.cfg.dlq, dumps_canonical(doc)))
                    self.dead_lettered += 1
            for fut in pending:
                await fut
            client.ack(batch[-1].tag, multiple=True)
            self.processed += len(batch)

    async def close(self) -> None:
        if self._task is not None:
            self._task.cancel()
            try:
                await self._task
            except (asyncio.CancelledError, BrokerError):
                pass
        if self.http is not None:
            await self.http.close()
        if self.client is not None:
            await self.client.close()
        self.sink.close()

    def make_app(self) -> web.Application:
        app = make_app(self.health)
        app.router.add_post("/execute", self.http_execute)
        return app

    async def http_execute(self, request: web.Request) -> web.Response:
        body = await read_json(request)
        try:
            action = await execute_with_retry(self.executor, AlertEnvelope.from_dict(body))
        except ActionError as exc:
            return error_response(502 if exc.transient else 400, exc.reason, str(exc))
        self.executed += 1
        return json_response({"status": "executed", "action": action})


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="portpipe-actions", description="Execute file/database actions for alerts.")
    parser.add_argument("--input-queue", required=True)
    parser.add_argument("--host", default="localhost", help="broker host[:port]")
    parser.add_argument("--file-root", default=".", help="directory that file actions write under")
    parser.add_argument("--sink", choices=["jsonl", "external"], default="jsonl")
    parser.add_argument("--data-dir", default=None, help="directory of the jsonl document store (default FILE_ROOT/databases)")
    parser.add_argument("--http-host", default="127.0.0.1")
    parser.add_argument("--http-port", type=int, default=DEFAULT_HTTP_PORT)
    parser.add_argument("--advertise-host", default="localhost")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


async def _serve(cfg: ActionsConfig) -> None:
    service = await ActionsService(cfg).start()
    try:
        await wait_for_signal()
    finally:
        await service.close()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    cfg = ActionsConfig(
        input_queue=args.input_queue,
        host=args.host,
        file_root=args.file_root,
        sink=args.sink,
        data_dir=args.data_dir,
        http_host=args.http_host,
        http_port=args.http_port,
        advertise_host=args.advertise_host,
    )
    try:
        asyncio.run(_serve(cfg))
    except BrokerUnreachable as exc:
        logger.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

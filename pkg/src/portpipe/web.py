"""aiohttp plumbing shared by the HTTP-facing services."""
from __future__ import annotations

import asyncio
import json
import logging
from typing import Any, Callable

from aiohttp import web

from .thingdesc import TD_MEDIA_TYPE, ServiceDescriptor, ThingDescription, build_td

logger = logging.getLogger(__name__)

STATE = web.AppKey("state", dict)


@web.middleware
async def basic_auth_stub(request: web.Request, handler):
    # Thing Descriptions advertise basic auth; any credentials (or none) are accepted.
    return await handler(request)


def json_response(data: Any, status: int = 200) -> web.Response:
    return web.Response(body=json.dumps(data).encode(), status=status, content_type="application/json")


def error_response(status: int, error: str, detail: str = "", **extra) -> web.Response:
    return json_response({"error": error, "detail": detail, **extra}, status=status)


async def read_json(request: web.Request) -> dict:
    try:
        body = await request.json()
    except (ValueError, UnicodeDecodeError) as exc:
        raise web.HTTPBadRequest(text=json.dumps({"error": "InvalidJSON", "detail": str(exc)}), content_type="application/json") from None
    if not isinstance(body, dict):
        raise web.HTTPBadRequest(text=json.dumps({"error": "InvalidJSON", "detail": "expected a JSON object"}), content_type="application/json")
    return body


def make_app(health: Callable[[], dict]) -> web.Application:
    app = web.Application(middlewares=[basic_auth_stub])
    app[STATE] = {"td_body": b"{}"}

    async def get_td(request: web.Request) -> web.Response:
        body = request.app[STATE]["td_body"]
        return web.Response(body=body, content_type=TD_MEDIA_TYPE)

    async def get_health(request: web.Request) -> web.Response:
        return json_response({"status": "ok", **health()})

    app.router.add_get("/td", get_td)
    app.router.add_get("/healthz", get_health)
    return app


class HttpEndpoint:
    """Runs an app on ``host:port`` and serves its TD with the bound port in every form."""

    def __init__(self, app: web.Application, descriptor: ServiceDescriptor, host: str = "127.0.0.1", port: int = 0, advertise_host: str = "localhost"):
        self.app = app
        self.descriptor = descriptor
        self.host = host
        self.port = port
        self.advertise_host = advertise_host
        self.runner: web.AppRunner | None = None
        self.td: ThingDescription | None = None

    @property
    def base_url(self) -> str:
        return f"http://{self.advertise_host}:{self.port}"

    async def start(self) -> "HttpEndpoint":
        self.runner = web.AppRunner(self.app, access_log=None)
        await self.runner.setup()
        site = web.TCPSite(self.runner, self.host, self.port)
        await site.start()
        self.port = site._server.sockets[0].getsockname()[1]
        self.td = build_td(self.descriptor, self.base_url)
        self.app[STATE]["td_body"] = self.td.to_json()
        logger.info("%s HTTP API on %s", self.descriptor.name, self.base_url)
        return self

    async def close(self) -> None:
        if self.runner is not None:
            await self.runner.cleanup()
            self.runner = None


async def wait_for_signal() -> None:
    import signal

    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        loop.add_signal_handler(sig, stop.set)
    await stop.wait()

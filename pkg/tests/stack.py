"""In-process pipeline: broker, transformer, CEP service and actions service."""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import aiohttp

from portpipe.actions import ActionsConfig, ActionsService
from portpipe.airquality import SCHEMA
from portpipe.broker import Broker, BrokerClient
from portpipe.cep_service import CepService, CepServiceConfig
from portpipe.transformer import TransformerConfig, TransformerService


@dataclass
class Stack:
    broker: Broker
    host: str
    transformer: TransformerService
    cep: CepService
    actions: ActionsService
    client: BrokerClient
    http: aiohttp.ClientSession

    @property
    def services(self):
        return {"transformer": self.transformer, "cep": self.cep, "actions": self.actions}

    async def post(self, path: str, body: dict, status: int = 201, headers=None) -> dict:
        async with self.http.post(self.cep.http.base_url + path, json=body, headers=headers) as resp:
            data = await resp.json()
            assert resp.status == status, data
            return data


@contextlib.asynccontextmanager
async def stack(file_root, test_clock: bool = True, input_queue: str = "input-spring"):
    async with Broker() as broker:
        host = f"127.0.0.1:{broker.port}"
        transformer = await TransformerService(
            TransformerConfig("json", input_queue, SCHEMA, output_queue="input-map", input_host=host, output_host=host, http_port=0)
        ).start()
        cep = await CepService(CepServiceConfig(http_port=0, alerts_host=host, test_clock=test_clock)).start()
        actions = await ActionsService(ActionsConfig("alerts", host=host, file_root=str(file_root), http_port=0)).start()
        client = await BrokerClient.connect(host)
        try:
            async with aiohttp.ClientSession() as http:
                yield Stack(broker, host, transformer, cep, actions, client, http)
        finally:
            await client.close()
            for svc in (transformer, cep, actions):
                await svc.close()

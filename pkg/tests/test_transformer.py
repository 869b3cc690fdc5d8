import asyncio
import json

import aiohttp
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import free_port, run
from portpipe.airquality import SCHEMA
from portpipe.broker import Broker, BrokerClient, BrokerUnreachable
from portpipe.events import EventRecord, TypeMismatch, decode_canonical
from portpipe.transformer import TransformerConfig, TransformerService, send_event_map, transform_message

AQ_JSON = b'{"PM10":7,"PM25":2.5,"stationId":1,"genTs":1000}'
AQ_XML = b"<e><PM10>7</PM10><PM25>2.5</PM25><stationId>1</stationId><genTs>1000</genTs></e>"
CANONICAL = b'{"genTs":1000,"schema":"AirQualityMeasurement","values":{"PM10":7,"PM25":2.5,"stationId":1}}'


def test_transform_message_json_and_xml():
    assert transform_message(AQ_JSON, "json", SCHEMA) == CANONICAL
    assert transform_message(AQ_XML, "xml", SCHEMA) == CANONICAL
    assert transform_message(AQ_JSON, "json", SCHEMA) == transform_message(AQ_JSON, "json", SCHEMA)


def test_transform_message_errors():
    with pytest.raises(TypeMismatch) as exc:
        transform_message(b'{"PM10":"high","PM25":2.5,"stationId":1}', "json", SCHEMA)
    assert exc.value.field == "PM10"


@settings(max_examples=200, deadline=None)
@given(st.integers(-(2**63), 2**63 - 1), st.floats(allow_nan=False, allow_infinity=False), st.integers(0, 2**31))
def test_json_and_xml_agree(pm10, pm25, station):
    as_json = json.dumps({"PM10": pm10, "PM25": pm25, "stationId": station}).encode()
    as_xml = f"<m><PM10>{pm10}</PM10><PM25>{pm25!r}</PM25><stationId>{station}</stationId></m>".encode()
    assert transform_message(as_json, "json", SCHEMA) == transform_message(as_xml, "xml", SCHEMA)


def test_config_defaults():
    cfg = TransformerConfig("json", "input-spring", SCHEMA)
    assert (cfg.output_queue, cfg.input_host, cfg.output_host, cfg.dlq) == ("map-events", "localhost", "localhost", "input-spring.dlq")


async def _service(broker, http=False):
    host = f"127.0.0.1:{broker.port}"
    cfg = TransformerConfig("json", "raw", SCHEMA, input_host=host, output_host=host, http_port=free_port())
    return await TransformerService(cfg).start(with_http=http)


def test_pipeline_good_and_bad_messages():
    async def body():
        async with Broker() as broker:
            svc = await _service(broker)
            client = await BrokerClient.connect(f"127.0.0.1:{broker.port}")
            out = await client.subscribe("map-events")
            dlq = await client.subscribe("raw.dlq")
            await client.publish("raw", AQ_JSON)
            await client.publish("raw", b"{not json")
            rec = decode_canonical((await asyncio.wait_for(out.get(), 5)).payload)
            assert rec.values == {"PM10": 7, "PM25": 2.5, "stationId": 1}
            assert rec.gen_ts == 1000 and rec.transf_ts is not None
            dead = json.loads((await asyncio.wait_for(dlq.get(), 5)).payload)
            assert dead["error"] == "MalformedPayload" and dead["queue"] == "raw"
            with pytest.raises(asyncio.TimeoutError):
                await asyncio.wait_for(out.get(), 0.2)
            assert (svc.consumed, svc.published, svc.dead_lettered) == (2, 1, 1)
            await svc.close()

    run(body())


def test_ten_thousand_in_order():
    async def body():
        async with Broker() as broker:
            svc = await _service(broker)
            client = await BrokerClient.connect(f"127.0.0.1:{broker.port}")
            out = await client.subscribe("map-events", prefetch=1000)
            payloads = [json.dumps({"PM10": i, "PM25": 0.0, "stationId": 1}).encode() for i in range(10_000)]
            await client.publish_batch("raw", payloads)
            seen = []
            while len(seen) < 10_000:
                batch = await asyncio.wait_for(out.get_batch(), 10)
                seen.extend(decode_canonical(d.payload).values["PM10"] for d in batch)
                client.ack(batch[-1].tag, multiple=True)
            assert seen == list(range(10_000))
            await asyncio.sleep(0.05)
            stats = broker.stats()["queues"]
            assert stats["raw"]["acked"] == 10_000 and stats["raw"]["depth"] == 0
            assert svc.published + svc.dead_lettered == svc.consumed == 10_000
            await svc.close()

    run(body())


def test_reconnects_after_broker_restart():
    async def body():
        port = free_port()
        broker = await Broker().start(port=port)
        svc = await _service(broker)
        await broker.close()
        await asyncio.sleep(0.3)
        broker = await Broker().start(port=port)
        try:
            client = await BrokerClient.connect(f"127.0.0.1:{port}")
            out = await client.subscribe("map-events")
            await client.publish("raw", AQ_JSON)
            rec = decode_canonical((await asyncio.wait_for(out.get(), 10)).payload)
            assert rec.values["PM10"] == 7
            await svc.close()
        finally:
            await broker.close()

    run(body())


def test_send_event_map():
    async def body():
        async with Broker() as broker:
            host = f"127.0.0.1:{broker.port}"
            for i in range(3):
                await send_event_map(host, "map-events", EventRecord("AirQualityMeasurement", {"PM10": i, "PM25": 0.0, "stationId": 1}))
            assert broker.stats()["queues"]["map-events"]["depth"] == 3
            client = await BrokerClient.connect(host)
            sub = await client.subscribe("map-events")
            assert [decode_canonical((await sub.get()).payload).values["PM10"] for _ in range(3)] == [0, 1, 2]

    run(body())


def test_send_event_map_unreachable():
    async def body():
        with pytest.raises(BrokerUnreachable):
            await send_event_map(f"127.0.0.1:{free_port()}", "q", EventRecord("S", {}), attempts=2)

    run(body())


def test_http_actions():
    async def body():
        async with Broker() as broker:
            svc = await _service(broker, http=True)
            base = svc.http.base_url
            async with aiohttp.ClientSession() as http:
                async with http.post(base + "/transformmessage", json={"event": AQ_XML.decode(), "xml": True}) as resp:
                    assert resp.status == 200
                    assert await resp.read() == CANONICAL
                async with http.post(base + "/transformmessage", json={"event": "{}", "json": True}) as resp:
                    assert resp.status == 400
                    assert (await resp.json())["error"] == "MissingField"
                async with http.post(
                    base + "/sendeventmap",
                    json={"outputQueue": "side", "eventMap": {"PM10": 1, "PM25": 1.0, "stationId": 2}},
                ) as resp:
                    assert resp.status == 200
                async with http.get(base + "/healthz") as resp:
                    assert (await resp.json())["outputQueue"] == "map-events"
            assert broker.stats()["queues"]["side"]["depth"] == 1
            await svc.close()

    run(body())

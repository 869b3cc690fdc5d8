import asyncio
import contextlib
import json

import aiohttp

from conftest import free_port, run
from epl_corpus import L1, L2, L3, L4, L6_1
from portpipe.airquality import PM10_CHAIN, SCHEMA_STATEMENT, dataflow, measure_pattern
from portpipe.broker import Broker, BrokerClient
from portpipe.cep_service import TEST_CLOCK_HEADER, CepService, CepServiceConfig
from portpipe.epl import NS
from portpipe.events import EventRecord, encode_canonical

HOUR = 3600 * NS


@contextlib.asynccontextmanager
async def cep(test_clock=True):
    async with Broker() as broker:
        host = f"127.0.0.1:{broker.port}"
        svc = await CepService(CepServiceConfig(http_port=0, alerts_host=host, test_clock=test_clock)).start()
        client = await BrokerClient.connect(host)
        async with aiohttp.ClientSession(base_url=svc.http.base_url) as http:
            try:
                yield broker, host, svc, client, http
            finally:
                await client.close()
                await svc.close()


async def post(http, path, body, status=201, headers=None):
    async with http.post(path, json=body, headers=headers) as resp:
        data = await resp.json()
        assert resp.status == status, data
        return data


def aq(pm10, gen, station=1):
    return encode_canonical(EventRecord("AirQualityMeasurement", {"PM10": pm10, "PM25": 0.5, "stationId": station}, gen_ts=gen))


async def drain(sub, n, timeout=5):
    return [json.loads((await asyncio.wait_for(sub.get(), timeout)).payload) for _ in range(n)]


def test_schema_endpoint():
    async def body():
        async with cep() as (_, _, _, _, http):
            assert "id" in await post(http, "/schema", {"schema": L1})
            err = await post(http, "/schema", {"schema": "create schema"}, 400)
            assert err["error"] == "ParseError" and err["line"] == 1
            assert (await post(http, "/schema", {"schema": L1}, 400))["error"] == "DuplicateSchema"
            assert (await post(http, "/schema", {"schema": L4}, 400))["error"] == "WrongStatementKind"
            assert (await post(http, "/schema", {"nope": 1}, 400))["error"] == "InvalidRequest"
            async with http.post("/schema", data=b"{broken") as resp:
                assert resp.status == 400

    run(body())


def test_pattern_endpoint_accepts_listings():
    async def body():
        async with cep() as (_, _, _, _, http):
            await post(http, "/schema", {"schema": L1})
            ids = [(await post(http, "/pattern", {"pattern": text}))["id"] for text in (L2, L3, L4)]
            assert len(set(ids)) == 3
            async with http.get("/deployments") as resp:
                listed = await resp.json()
            assert [d["text"] for d in listed] == [L1, L2, L3, L4]
            assert [d["kind"] for d in listed] == ["CreateSchema", "Select", "Select", "CreateContext"]
            async with http.get("/properties/deploymentsCount") as resp:
                assert await resp.json() == 4
            err = await post(http, "/pattern", {"pattern": "select * from Unknown"}, 400)
            assert err["error"] == "UnknownSchema"

    run(body())


def test_dataflow_consumes_and_alerts_end_to_end():
    async def body():
        async with cep() as (broker, host, svc, client, http):
            alerts = await client.subscribe("alerts")
            await post(http, "/schema", {"schema": SCHEMA_STATEMENT})
            for text in PM10_CHAIN:
                await post(http, "/pattern", {"pattern": text})
            await post(http, "/dataflow", {"dataflow": dataflow(host), "name": "AMQPIncomingDataFlow"})
            assert broker.stats()["queues"]["input-map"]["consumers"] == 1
            await client.publish_batch("input-map", [aq(v, i * NS) for i, v in enumerate((10, 20, 30))])
            # An event after the hour closes the interval under the test clock.
            await client.publish("input-map", aq(90, HOUR + 1))
            (env,) = await drain(alerts, 1)
            assert env["stream"] == "PollutantLevel"
            assert env["values"] == {"AlertLevel": 1, "Value": 20.0, "kindAlertDscr": "PM10", "stationId": 1}
            assert env["tags"] == [{"name": "action", "value": "file"}, {"name": "name", "value": "alert.txt"}]
            assert env["detectTs"] == HOUR and env["genTs"] == 0
            # Derived untagged streams never reach the alerts queue.
            await asyncio.sleep(0.1)
            assert broker.stats()["queues"]["alerts"]["published"] == 1
            assert svc.ingested == 4

    run(body())


def test_two_patterns_two_envelopes():
    async def body():
        async with cep() as (_, host, _, client, http):
            alerts = await client.subscribe("alerts")
            await post(http, "/schema", {"schema": SCHEMA_STATEMENT})
            await post(http, "/pattern", {"pattern": "@Tag(name='action', value='file') @Tag(name='name', value='a.txt') select * from AirQualityMeasurement"})
            await post(http, "/pattern", {"pattern": "@Tag(name='action', value='file') @Tag(name='name', value='b.txt') select * from AirQualityMeasurement"})
            await post(http, "/dataflow", {"dataflow": dataflow(host)})
            await client.publish("input-map", aq(1, 5))
            envs = await drain(alerts, 2)
            assert sorted(e["tags"][1]["value"] for e in envs) == ["a.txt", "b.txt"]

    run(body())


def test_dataflow_errors_roll_back():
    async def body():
        async with cep() as (_, host, svc, _, http):
            err = await post(http, "/dataflow", {"dataflow": dataflow(host)}, 400)
            assert err["error"] == "UnknownSchema"
            await post(http, "/schema", {"schema": SCHEMA_STATEMENT})
            err = await post(http, "/dataflow", {"dataflow": dataflow(f"127.0.0.1:{free_port()}")}, 502)
            assert err["error"] == "BrokerUnreachable"
            assert len(svc.engine.deployments) == 1 and not svc.dataflows
            err = await post(http, "/dataflow", {"dataflow": dataflow(host), "name": "Other"}, 400)
            assert err["error"] == "NameMismatch"

    run(body())


def test_delete_deployment():
    async def body():
        async with cep() as (broker, host, svc, _, http):
            schema_id = (await post(http, "/schema", {"schema": L6_1}))["id"]
            flow_id = (await post(http, "/dataflow", {"dataflow": dataflow(host)}))["id"]
            assert broker.stats()["queues"]["input-map"]["consumers"] == 1
            async with http.delete(f"/deployment/{flow_id}") as resp:
                assert resp.status == 204
            await asyncio.sleep(0.05)
            assert broker.stats()["queues"]["input-map"]["consumers"] == 0
            async with http.delete(f"/deployment/{flow_id}") as resp:
                assert resp.status == 404
            async with http.delete("/deployment/zzz") as resp:
                assert resp.status == 404
            async with http.delete(f"/deployment/{schema_id}") as resp:
                assert resp.status == 204
            assert svc.engine.deployments == {}

    run(body())


def test_test_clock_header_closes_intervals():
    async def body():
        async with cep() as (_, host, _, client, http):
            batches = await client.subscribe("alerts")
            await post(http, "/schema", {"schema": SCHEMA_STATEMENT})
            await post(http, "/pattern", {"pattern": "create context C start @now end after 10 sec"})
            await post(
                http,
                "/pattern",
                {"pattern": "@Tag(name='action', value='file') @Tag(name='name', value='x') context C select count(*) as n "
                 "from AirQualityMeasurement a output snapshot when terminated"},
            )
            await post(http, "/dataflow", {"dataflow": dataflow(host)})
            await client.publish_batch("input-map", [aq(1, 0), aq(1, NS)])
            await asyncio.sleep(0.2)
            # Deploying with the header moves engine time past the interval end.
            await post(http, "/pattern", {"pattern": "select * from AirQualityMeasurement"}, headers={TEST_CLOCK_HEADER: str(20 * NS)})
            (env,) = await drain(batches, 1)
            assert env["values"] == {"n": 2} and env["detectTs"] == 10 * NS
            async with http.post("/pattern", json={"pattern": L4}, headers={TEST_CLOCK_HEADER: "soon"}) as resp:
                assert resp.status == 400

    run(body())


def test_measure_samples_batched():
    async def body():
        async with cep() as (_, host, _, client, http):
            samples = await client.subscribe("measurements")
            await post(http, "/schema", {"schema": SCHEMA_STATEMENT})
            await post(http, "/pattern", {"pattern": measure_pattern()})
            await post(http, "/dataflow", {"dataflow": dataflow(host)})
            await client.publish_batch("input-map", [aq(i, 100 + i) for i in range(50)])
            rows = []
            while len(rows) < 50:
                rows.extend(json.loads((await asyncio.wait_for(samples.get(), 5)).payload)["samples"])
            assert [r[0] for r in rows] == list(range(100, 150))
            assert all(r[2] == r[0] for r in rows)  # test clock: detection at genTs

    run(body())


def test_replay_is_deterministic():
    async def once():
        async with cep() as (_, host, _, client, http):
            alerts = await client.subscribe("alerts")
            await post(http, "/schema", {"schema": SCHEMA_STATEMENT})
            for text in PM10_CHAIN:
                await post(http, "/pattern", {"pattern": text})
            await post(http, "/dataflow", {"dataflow": dataflow(host)})
            trace = [aq((i * 7) % 45, i * 900 * NS, 1 + i % 2) for i in range(200)]
            await client.publish_batch("input-map", trace)
            out = []
            with contextlib.suppress(asyncio.TimeoutError):
                while True:
                    out.append(json.loads((await asyncio.wait_for(alerts.get(), 0.5)).payload))
            return out

    first, second = run(once()), run(once())
    assert first and first == second


def test_wall_clock_mode_ticks_contexts():
    async def body():
        async with cep(test_clock=False) as (_, host, _, client, http):
            alerts = await client.subscribe("alerts")
            await post(http, "/schema", {"schema": SCHEMA_STATEMENT})
            await post(http, "/pattern", {"pattern": "create context C start @now end after 1 sec"})
            await post(
                http,
                "/pattern",
                {"pattern": "@Tag(name='action', value='file') @Tag(name='name', value='x') context C select count(*) as n "
                 "from AirQualityMeasurement a output snapshot when terminated"},
            )
            await post(http, "/dataflow", {"dataflow": dataflow(host)})
            await client.publish("input-map", aq(1, 0))
            (env,) = await drain(alerts, 1, timeout=5)
            assert env["values"] == {"n": 1}

    run(body())

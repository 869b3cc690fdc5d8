"""Air-quality monitoring statements used by the demo pipeline and the benchmark."""
from __future__ import annotations

from .events import EventSchema, FieldType

SCHEMA = EventSchema(
    "AirQualityMeasurement",
    (("PM10", FieldType.INTEGER), ("PM25", FieldType.DOUBLE), ("stationId", FieldType.INTEGER)),
)

SCHEMA_STATEMENT = (
    "@public @buseventtype create schema AirQualityMeasurement as (PM10 integer, PM25 Double, stationId integer)"
)

HOURLY_CONTEXT = "@public create context IntervalSpanningSeconds start @now end after3600 s;"

PM10_HOURLY = (
    "@Name('PM10_Avg1h_batch') @public context IntervalSpanningSeconds insert into PM10_Avg1h_batch "
    "select a1.stationId as stationId, avg(a1.PM10) as Value, count(*) as Total "
    "from AirQualityMeasurement a1 group by a1.stationId output snapshot when terminated;"
)

PM10_DAILY = (
    "@Name('PM10_Avg24h_slide') @public @buseventtype insert into PM10_Avg24h_slide "
    "select a1.stationId as stationId, avg(a1.Value) as Value, a1.Total as Total "
    "from PM10_Avg1h_batch#time(24 hour) a1 group by a1.stationId;"
)

PM10_GOOD = (
    "@Tag(name='action', value='file') @Tag(name='name', value='alert.txt') @Name('PM10_Good') "
    "@public @buseventtype insert into PollutantLevel select 'PM10' as kindAlertDscr, 1 as AlertLevel, "
    "a1.stationId as stationId, a1.Value as Value from pattern "
    "[every a1 = PM10_Avg24h_slide (a1.Value >= 0 and a1.Value < 25)];"
)

PM10_CHAIN = (HOURLY_CONTEXT, PM10_HOURLY, PM10_DAILY, PM10_GOOD)

MEASURE_PATTERN = (
    "@Tag(name='action', value='measure') @Tag(name='queue', value='{queue}') @Name('Measure') "
    "select * from AirQualityMeasurement"
)


def measure_pattern(queue: str = "measurements") -> str:
    return MEASURE_PATTERN.format(queue=queue)


def dataflow(host: str = "localhost", queue: str = "input-map", name: str = "AMQPIncomingDataFlow") -> str:
    return (
        f"create dataflow {name} AMQPSource -> outstream<AirQualityMeasurement> "
        f"{{host: '{host}', queueName: '{queue}', collector: {{class: 'AMQPSerializer'}}, "
        "logMessages: true, declareAutoDelete: false, declareDurable: true} EventBusSink(outstream) {}"
    )

"""portpipe: IoT telemetry pipeline with an embedded event-pattern engine."""

__version__ = "0.1.0"

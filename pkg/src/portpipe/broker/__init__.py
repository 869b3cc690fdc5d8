"""Minimal framed queue broker: server, client and wire protocol."""
from .client import BrokerClient, Delivery, Subscription, connect_with_retry
from .protocol import (
    DEFAULT_PORT,
    DEFAULT_PREFETCH,
    BrokerError,
    BrokerUnreachable,
    ConnectionClosed,
    FrameTooLarge,
    InvalidName,
    UnknownQueue,
    UnknownTag,
    parse_hostport,
)
from .server import Broker

__all__ = [
    "Broker",
    "BrokerClient",
    "BrokerError",
    "BrokerUnreachable",
    "ConnectionClosed",
    "DEFAULT_PORT",
    "DEFAULT_PREFETCH",
    "Delivery",
    "FrameTooLarge",
    "InvalidName",
    "Subscription",
    "UnknownQueue",
    "UnknownTag",
    "connect_with_retry",
    "parse_hostport",
]

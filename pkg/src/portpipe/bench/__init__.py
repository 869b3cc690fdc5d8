"""Benchmark harness and latency summarizer."""
from .summary import DEFAULT_BUCKETS_MS, EmptyInput, LatencySample, bucketize, summarize

__all__ = ["DEFAULT_BUCKETS_MS", "EmptyInput", "LatencySample", "bucketize", "summarize"]

"""Embedded time-series store.

Points live in an in-memory ordered index per metric and in an append-only
JSON-lines file (``points.log``) that is replayed on open. Writes are keyed
by (metric, timestamp, tags): rewriting a stored point with the same value
touches neither memory nor disk, so replays leave the file byte-identical.
"""
from __future__ import annotations

import bisect
import json
import logging
import math
import os
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Optional
from urllib.parse import parse_qs, urlparse

import numpy as np

from . import _kernels
from .errors import ConfigError, CorruptionError

log = logging.getLogger(__name__)

AGGREGATORS = ("avg", "min", "max", "count")


@dataclass(frozen=True)
class TimeSeriesPoint:
    metric: str
    timestamp: int
    value: float
    tags: dict = field(default_factory=dict)

    @property
    def tag_key(self) -> tuple:
        return tuple(sorted(self.tags.items()))

    def as_dict(self) -> dict:
        return {"metric": self.metric, "timestamp": self.timestamp, "value": self.value, "tags": dict(self.tags)}

    @classmethod
    def from_dict(cls, obj) -> "TimeSeriesPoint":
        try:
            tags = obj.get("tags") or {}
            if not isinstance(tags, dict):
                raise TypeError("tags must be an object")
            return cls(
                metric=str(obj["metric"]),
                timestamp=int(obj["timestamp"]),
                value=float(obj["value"]),
                tags={str(k): str(v) for k, v in tags.items()},
            )
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise ValueError(f"invalid point payload {obj!r}: {exc}") from exc


def _validate(point: TimeSeriesPoint) -> None:
    if not point.metric:
        raise ValueError("point metric must be non-empty")
    if point.timestamp < 0:
        raise ValueError(f"point timestamp must be >= 0, got {point.timestamp}")
    if not math.isfinite(point.value):
        raise ValueError(f"point value must be finite, got {point.value}")


class _Series:
    def __init__(self):
        self.keys = []  # sorted (timestamp, tag_key)
        self.values = {}

    def put(self, ts, tag_key, value) -> bool:
        key = (ts, tag_key)
        old = self.values.get(key)
        if old is None:
            bisect.insort(self.keys, key)
        elif old == value:
            return False
        self.values[key] = value
        return True

    def scan(self, start, end):
        lo = bisect.bisect_left(self.keys, (start,))
        hi = bisect.bisect_left(self.keys, (end,))
        for key in self.keys[lo:hi]:
            yield key[0], key[1], self.values[key]


class TSDB:
    """Point store; ``data_dir=None`` keeps everything in memory."""

    def __init__(self, data_dir=None, fsync: bool = True):
        self.fsync = fsync
        self._series: dict = {}
        self._lock = threading.RLock()
        self._fh = None
        self.path = None
        if data_dir is not None:
            self.path = Path(data_dir) / "points.log"
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._replay()
            self._fh = open(self.path, "ab")

    def _replay(self) -> None:
        if not self.path.exists():
            return
        data = self.path.read_bytes()
        pos = 0
        good = 0
        while pos < len(data):
            nl = data.find(b"\n", pos)
            if nl < 0:
                break
            try:
                p = TimeSeriesPoint.from_dict(json.loads(data[pos:nl]))
                _validate(p)
            except ValueError as exc:
                if nl + 1 < len(data):
                    raise CorruptionError(f"{self.path}: bad record at byte {pos}: {exc}") from exc
                break
            self._series.setdefault(p.metric, _Series()).put(p.timestamp, p.tag_key, p.value)
            pos = good = nl + 1
        if good < len(data):
            log.warning("%s: dropping torn tail of %d bytes", self.path, len(data) - good)
            os.truncate(self.path, good)

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def write_point(self, point: TimeSeriesPoint) -> bool:
        return self.write_points([point]) == 1

    def write_points(self, points) -> int:
        """Store points durably; returns how many changed the store."""
        points = list(points)
        for p in points:
            _validate(p)
        changed = 0
        with self._lock:
            lines = []
            for p in points:
                if self._series.setdefault(p.metric, _Series()).put(p.timestamp, p.tag_key, p.value):
                    changed += 1
                    lines.append(json.dumps(p.as_dict(), sort_keys=True))
            if lines and self._fh is not None:
                self._fh.write(("\n".join(lines) + "\n").encode("utf-8"))
                self._fh.flush()
                if self.fsync:
                    os.fsync(self._fh.fileno())
        return changed

    def metrics(self) -> list:
        with self._lock:
            return sorted(self._series)

    def count(self, metric: Optional[str] = None) -> int:
        with self._lock:
            if metric is not None:
                s = self._series.get(metric)
                return len(s.keys) if s else 0
            return sum(len(s.keys) for s in self._series.values())

    def query_range(self, metric: str, start: int, end: int, tags: Optional[dict] = None) -> list:
        """Points with start <= timestamp < end, ascending, matching every tag in ``tags``."""
        if start > end:
            raise ValueError(f"query start {start} after end {end}")
        want = tuple((tags or {}).items())
        with self._lock:
            series = self._series.get(metric)
            if series is None:
                return []
            out = []
            for ts, tag_key, value in series.scan(start, end):
                if want:
                    have = dict(tag_key)
                    if any(have.get(k) != v for k, v in want):
                        continue
                out.append(TimeSeriesPoint(metric, ts, value, dict(tag_key)))
            return out

    def downsample(self, metric, start, end, bucket_ms, aggregator="avg", tags=None) -> list:
        """[(bucket_start, value)] with buckets aligned to ``start``; empty buckets omitted."""
        if bucket_ms < 1:
            raise ValueError("bucket_ms must be >= 1")
        if aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {aggregator!r}; expected one of {AGGREGATORS}")
        buckets = {}
        for p in self.query_range(metric, start, end, tags):
            b = start + (p.timestamp - start) // bucket_ms * bucket_ms
            buckets.setdefault(b, []).append(p.value)
        return [(b, aggregate(vals, aggregator)) for b, vals in sorted(buckets.items())]


def aggregate(values, aggregator: str) -> float:
    if aggregator == "count":
        return float(len(values))
    if aggregator == "min":
        return min(values)
    if aggregator == "max":
        return max(values)
    total = 0.0
    for v in values:
        total += v
    return total / len(values)


@dataclass
class RollingBands:
    """Bands for windows ending at positions n-1 .. len(series)-1."""

    n: int
    k: float
    mean: np.ndarray
    sigma: np.ndarray
    upper: np.ndarray
    lower: np.ndarray

    def __len__(self):
        return len(self.mean)

    def rows(self) -> list:
        return [
            {"position": i + self.n - 1, "mean": m, "sigma": s, "upper": u, "lower": l}
            for i, (m, s, u, l) in enumerate(
                zip(self.mean.tolist(), self.sigma.tolist(), self.upper.tolist(), self.lower.tolist())
            )
        ]


def rolling_bands(values, n: int = 20, k: float = 2.0) -> RollingBands:
    """Bollinger bands: rolling mean +/- k population standard deviations."""
    if n < 2:
        raise ConfigError(f"band window must be >= 2, got {n}")
    x = np.ascontiguousarray(values, dtype=np.float64)
    if len(x) < n:
        empty = np.empty(0)
        return RollingBands(n, k, empty, empty, empty, empty)
    mean, sigma = _kernels.rolling_mean_std(x, n)
    return RollingBands(n, k, mean, sigma, mean + k * sigma, mean - k * sigma)


# ---- local HTTP endpoint ---------------------------------------------------


def _parse_tags(raw) -> dict:
    tags = {}
    for item in raw:
        for pair in item.split(","):
            if pair:
                k, _, v = pair.partition(":")
                tags[k] = v
    return tags


def make_handler(db: TSDB):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):
            log.debug("tsdb http: " + fmt, *args)

        def _send(self, status, obj):
            body = json.dumps(obj).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_POST(self):
            if urlparse(self.path).path != "/api/put":
                return self._send(404, {"error": "not found"})
            try:
                raw = json.loads(self.rfile.read(int(self.headers.get("Content-Length", 0))))
                items = raw if isinstance(raw, list) else [raw]
                points = [TimeSeriesPoint.from_dict(o) for o in items]
                changed = db.write_points(points)
            except ValueError as exc:
                return self._send(400, {"error": str(exc)})
            self._send(200, {"success": len(points), "changed": changed})

        def do_GET(self):
            url = urlparse(self.path)
            q = parse_qs(url.query)
            try:
                metric = q["metric"][0]
                start, end = int(q["start"][0]), int(q["end"][0])
                tags = _parse_tags(q.get("tags", []))
                if url.path == "/api/query":
                    if "bucket_ms" in q:
                        rows = db.downsample(metric, start, end, int(q["bucket_ms"][0]), q.get("agg", ["avg"])[0], tags)
                        return self._send(200, [{"timestamp": b, "value": v} for b, v in rows])
                    return self._send(200, [p.as_dict() for p in db.query_range(metric, start, end, tags)])
                if url.path == "/api/bands":
                    vals = [p.value for p in db.query_range(metric, start, end, tags)]
                    bands = rolling_bands(vals, int(q.get("n", ["20"])[0]), float(q.get("k", ["2"])[0]))
                    return self._send(200, bands.rows())
            except (KeyError, ValueError, ConfigError) as exc:
                return self._send(400, {"error": str(exc)})
            self._send(404, {"error": "not found"})

    return Handler


def serve_http(db: TSDB, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """Start the ingestion/query endpoint on a daemon thread; ``server.server_address`` has the port."""
    server = ThreadingHTTPServer((host, port), make_handler(db))
    server.daemon_threads = True
    threading.Thread(target=server.serve_forever, name="tsdb-http", daemon=True).start()
    return server

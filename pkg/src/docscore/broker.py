"""Embedded append-only message log with per-consumer offsets.

Layout under ``data_dir``::

    <topic>.log                  records: u32 length, u32 crc32, body
    offsets/<consumer>.<topic>   JSON {"consumer", "topic", "next_offset"}

A record body is a u64 enqueue time (ms) followed by the payload; the CRC
covers the body. Writers hold an exclusive ``flock`` on the log while
appending and readers a shared one while indexing, so several processes
can publish to and consume from the same directory.

Delivery is at-least-once: ``fetch_batch`` never moves the offset, only
``commit_offset`` does. One consumer id must not be driven from two
threads or processes at once.
"""
from __future__ import annotations

import fcntl
import json
import logging
import os
import re
import struct
import threading
import time
import zlib
from array import array
from dataclasses import dataclass
from pathlib import Path

from ._io import atomic_write_bytes
from .errors import ConfigError, CorruptionError

log = logging.getLogger(__name__)

TOPIC_RE = re.compile(r"^[a-z0-9_.-]+$")
CONSUMER_RE = re.compile(r"^[A-Za-z0-9_.-]+$")
HEADER = struct.Struct("<II")
STAMP = struct.Struct("<Q")
POLL_FLOOR_MS = 10


@dataclass(frozen=True)
class Message:
    offset: int
    payload: bytes
    enqueue_time: int
    topic: str = ""


@dataclass
class RecoveryInfo:
    topic: str
    end_offset: int
    truncated_bytes: int


class _TopicLog:
    def __init__(self, path: Path, topic: str, fsync: bool):
        self.path = path
        self.topic = topic
        self.fsync = fsync
        self.lock = threading.Lock()
        self.fd = os.open(path, os.O_RDWR | os.O_CREAT | os.O_APPEND, 0o644)
        self.positions = array("q")  # byte position of each offset
        self.indexed_bytes = 0
        self.truncated_bytes = 0
        self._scan(repair=True)

    @property
    def end_offset(self) -> int:
        return len(self.positions)

    def close(self):
        if self.fd >= 0:
            os.close(self.fd)
            self.fd = -1

    def _scan(self, repair: bool) -> None:
        """Index complete records past ``indexed_bytes``.

        With ``repair`` (caller holds the exclusive lock, so no writer is
        live) an incomplete or corrupt final record is a torn write and is
        cut off. Without it the tail is left for a later scan.
        """
        fcntl.flock(self.fd, fcntl.LOCK_EX if repair else fcntl.LOCK_SH)
        try:
            self._scan_locked(repair)
        finally:
            fcntl.flock(self.fd, fcntl.LOCK_UN)

    def _scan_locked(self, repair: bool) -> None:
        size = os.fstat(self.fd).st_size
        pos = self.indexed_bytes
        while pos < size:
            head = os.pread(self.fd, HEADER.size, pos)
            if len(head) < HEADER.size:
                break
            length, crc = HEADER.unpack(head)
            end = pos + HEADER.size + length
            if length < STAMP.size or end > size:
                break
            body = os.pread(self.fd, length, pos + HEADER.size)
            if zlib.crc32(body) != crc:
                if end < size:
                    raise CorruptionError(
                        f"{self.path}: checksum failure at offset {len(self.positions)} "
                        f"(byte {pos}) with records following it"
                    )
                break
            self.positions.append(pos)
            pos = end
        if pos < size and repair:
            log.warning("%s: truncating torn final record (%d bytes at byte %d)", self.path, size - pos, pos)
            os.ftruncate(self.fd, pos)
            self.truncated_bytes += size - pos
            if self.fsync:
                os.fsync(self.fd)
        self.indexed_bytes = pos

    def refresh(self) -> None:
        if os.fstat(self.fd).st_size > self.indexed_bytes:
            self._scan(repair=False)

    def append(self, payload: bytes, now_ms: int) -> int:
        body = STAMP.pack(now_ms) + payload
        record = HEADER.pack(len(body), zlib.crc32(body)) + body
        with self.lock:
            fcntl.flock(self.fd, fcntl.LOCK_EX)
            try:
                # another process may have appended (or died mid-append) since our last scan
                self._scan_locked(repair=True)
                pos = self.indexed_bytes
                written = os.write(self.fd, record)
                if written != len(record):
                    os.ftruncate(self.fd, pos)
                    raise OSError(f"short write to {self.path} ({written}/{len(record)} bytes)")
                if self.fsync:
                    os.fsync(self.fd)
            finally:
                fcntl.flock(self.fd, fcntl.LOCK_UN)
            self.positions.append(pos)
            self.indexed_bytes = pos + len(record)
            return len(self.positions) - 1

    def read(self, start: int, max_messages: int) -> list:
        with self.lock:
            self.refresh()
            stop = min(self.end_offset, start + max_messages)
            if start >= stop:
                return []
            lo = self.positions[start]
            hi = self.positions[stop] if stop < self.end_offset else self.indexed_bytes
        blob = os.pread(self.fd, hi - lo, lo)
        out = []
        pos = 0
        for off in range(start, stop):
            length, crc = HEADER.unpack_from(blob, pos)
            body = blob[pos + HEADER.size : pos + HEADER.size + length]
            if zlib.crc32(body) != crc:
                raise CorruptionError(f"{self.path}: checksum failure reading offset {off}")
            (stamp,) = STAMP.unpack_from(body)
            out.append(Message(off, bytes(body[STAMP.size :]), stamp, self.topic))
            pos += HEADER.size + length
        return out


class Broker:
    """Handle on a broker directory. Opening it runs recovery."""

    def __init__(self, data_dir, fsync: bool = True):
        self.data_dir = Path(data_dir)
        self.fsync = fsync
        self.data_dir.mkdir(parents=True, exist_ok=True)
        (self.data_dir / "offsets").mkdir(exist_ok=True)
        self._topics: dict = {}
        self._offsets: dict = {}
        self._lock = threading.Lock()
        self.recovery: list = []
        self._recover()

    # -- recovery ----------------------------------------------------------

    def _recover(self) -> None:
        for path in sorted(self.data_dir.glob("*.log")):
            topic = path.stem
            if not TOPIC_RE.match(topic):
                continue
            tl = _TopicLog(path, topic, self.fsync)
            self._topics[topic] = tl
            self.recovery.append(RecoveryInfo(topic, tl.end_offset, tl.truncated_bytes))
        for path in sorted((self.data_dir / "offsets").iterdir()):
            if path.name.startswith("."):
                continue
            try:
                rec = json.loads(path.read_text())
                key = (rec["consumer"], rec["topic"])
                value = int(rec["next_offset"])
            except (ValueError, KeyError, TypeError) as exc:
                raise CorruptionError(f"unreadable offset file {path}: {exc}") from exc
            end = self.end_offset(key[1])
            if value > end:
                log.warning("offset %s for %s/%s beyond log end %d; clamping", value, key[0], key[1], end)
                value = end
            self._offsets[key] = value

    def close(self) -> None:
        with self._lock:
            for tl in self._topics.values():
                tl.close()
            self._topics.clear()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- topics ------------------------------------------------------------

    def _topic(self, topic: str, create: bool):
        if not isinstance(topic, str) or not TOPIC_RE.match(topic):
            raise ConfigError(f"invalid topic name {topic!r}: must match [a-z0-9_.-]+")
        with self._lock:
            tl = self._topics.get(topic)
            if tl is None:
                path = self.data_dir / f"{topic}.log"
                if not create and not path.exists():
                    return None
                tl = self._topics[topic] = _TopicLog(path, topic, self.fsync)
            return tl

    def topics(self) -> list:
        for path in self.data_dir.glob("*.log"):
            if TOPIC_RE.match(path.stem):
                self._topic(path.stem, create=False)
        return sorted(self._topics)

    def end_offset(self, topic: str) -> int:
        tl = self._topic(topic, create=False)
        if tl is None:
            return 0
        with tl.lock:
            tl.refresh()
            return tl.end_offset

    # -- producer ----------------------------------------------------------

    def publish(self, topic: str, payload) -> int:
        if isinstance(payload, str):
            payload = payload.encode("utf-8")
        tl = self._topic(topic, create=True)
        return tl.append(bytes(payload), int(time.time() * 1000))

    # -- consumer ----------------------------------------------------------

    def committed(self, consumer: str, topic: str) -> int:
        return self._offsets.get((consumer, topic), 0)

    def fetch_batch(self, consumer: str, topic: str, max_messages: int, max_wait_ms: float = 0) -> list:
        """Up to ``max_messages`` from the consumer's committed position; does not commit."""
        if not CONSUMER_RE.match(consumer):
            raise ConfigError(f"invalid consumer id {consumer!r}")
        if max_messages < 1:
            raise ConfigError("max_messages must be >= 1")
        start = self._offsets.setdefault((consumer, topic), 0)
        deadline = time.monotonic() + max_wait_ms / 1000.0
        while True:
            tl = self._topic(topic, create=False)
            if tl is not None:
                batch = tl.read(start, max_messages)
                if batch:
                    return batch
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return []
            time.sleep(min(remaining, POLL_FLOOR_MS / 1000.0))

    def commit_offset(self, consumer: str, topic: str, next_offset: int, rewind: bool = False) -> int:
        if not CONSUMER_RE.match(consumer):
            raise ConfigError(f"invalid consumer id {consumer!r}")
        end = self.end_offset(topic)
        if next_offset < 0 or next_offset > end:
            raise ConfigError(f"commit {next_offset} outside [0, {end}] for topic {topic!r}")
        current = self._offsets.get((consumer, topic), 0)
        if next_offset < current and not rewind:
            raise ConfigError(
                f"commit {next_offset} < stored offset {current} for {consumer}/{topic}; pass rewind=True to go back"
            )
        record = json.dumps({"consumer": consumer, "topic": topic, "next_offset": next_offset})
        atomic_write_bytes(self.data_dir / "offsets" / f"{consumer}.{topic}", record.encode(), fsync=self.fsync)
        self._offsets[(consumer, topic)] = next_offset
        return next_offset


def recover_log(data_dir, fsync: bool = True) -> Broker:
    return Broker(data_dir, fsync=fsync)

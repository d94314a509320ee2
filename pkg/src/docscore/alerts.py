"""Threshold rules over windowed aggregates of stored score points."""
from __future__ import annotations

import json
import logging
import operator
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .tsdb import aggregate

log = logging.getLogger(__name__)

COMPARATORS = {"<": operator.lt, ">": operator.gt, "<=": operator.le, ">=": operator.ge}


@dataclass(frozen=True)
class AlertRule:
    name: str
    metric: str
    threshold: float
    window_ms: int = 60_000
    aggregator: str = "avg"
    comparator: str = "<"
    cooldown_ms: int = 0
    min_points: int = 1
    tags: Optional[dict] = None

    def __post_init__(self):
        if self.window_ms <= 0:
            raise ConfigError(f"rule {self.name!r}: window_ms must be > 0")
        if self.cooldown_ms < 0:
            raise ConfigError(f"rule {self.name!r}: cooldown_ms must be >= 0")
        if self.min_points < 1:
            raise ConfigError(f"rule {self.name!r}: min_points must be >= 1")
        if self.aggregator not in ("avg", "min", "max"):
            raise ConfigError(f"rule {self.name!r}: aggregator must be avg, min or max")
        if self.comparator not in COMPARATORS:
            raise ConfigError(f"rule {self.name!r}: comparator must be one of {sorted(COMPARATORS)}")


@dataclass(frozen=True)
class AlertEvent:
    rule: str
    fired_at: int
    value: float
    threshold: float
    window_start: int
    window_end: int
    n_points: int

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate_rules(rules, db, now: int, last_fired: Optional[dict] = None) -> tuple:
    """Check every rule against the window [now - window_ms, now).

    Returns (events, updated last-fired map); the input map is not modified.
    """
    state = dict(last_fired or {})
    events = []
    for rule in rules:
        start = now - rule.window_ms
        points = db.query_range(rule.metric, max(start, 0), now, rule.tags)
        if len(points) < rule.min_points:
            continue
        value = aggregate([p.value for p in points], rule.aggregator)
        if not COMPARATORS[rule.comparator](value, rule.threshold):
            continue
        prev = state.get(rule.name)
        if prev is not None and now - prev < rule.cooldown_ms:
            continue
        state[rule.name] = now
        events.append(AlertEvent(rule.name, now, value, rule.threshold, start, now, len(points)))
    return events, state


class AlertEvaluator:
    """Holds last-fired state between evaluations."""

    def __init__(self, rules, sinks=()):
        self.rules = list(rules)
        self.sinks = list(sinks)
        self.last_fired: dict = {}
        self._lock = threading.Lock()

    def evaluate(self, db, now: Optional[int] = None) -> list:
        now = int(time.time() * 1000) if now is None else now
        with self._lock:
            events, self.last_fired = evaluate_rules(self.rules, db, now, self.last_fired)
        for ev in events:
            log.info("alert %s fired: value %.4f vs threshold %s", ev.rule, ev.value, ev.threshold)
            if self.sinks:
                emit_alert(ev, self.sinks)
        return events

    def tick_interval_ms(self) -> Optional[float]:
        if not self.rules:
            return None
        return min(r.window_ms for r in self.rules) / 4.0


# ---- sinks -----------------------------------------------------------------


@dataclass
class DeliveryRecord:
    sink: str
    rule: str
    fired_at: int
    ok: bool
    attempts: int = 1
    error: Optional[str] = None


class FileSink:
    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()

    @property
    def name(self):
        return f"file:{self.path}"

    def deliver(self, event: AlertEvent) -> DeliveryRecord:
        line = json.dumps(event.as_dict(), sort_keys=True) + "\n"
        try:
            with self._lock:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(line)
        except OSError as exc:
            return DeliveryRecord(self.name, event.rule, event.fired_at, False, 1, str(exc))
        return DeliveryRecord(self.name, event.rule, event.fired_at, True)


class WebhookSink:
    def __init__(self, url: str, retries: int = 2, timeout: float = 2.0, backoff: float = 0.1):
        self.url = url
        self.retries = retries
        self.timeout = timeout
        self.backoff = backoff

    @property
    def name(self):
        return f"webhook:{self.url}"

    def deliver(self, event: AlertEvent) -> DeliveryRecord:
        body = json.dumps(event.as_dict(), sort_keys=True).encode("utf-8")
        error = None
        for attempt in range(1, self.retries + 2):
            req = urllib.request.Request(self.url, data=body, headers={"Content-Type": "application/json"})
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    if 200 <= resp.status < 300:
                        return DeliveryRecord(self.name, event.rule, event.fired_at, True, attempt)
                    error = f"HTTP {resp.status}"
            except (urllib.error.URLError, OSError, ValueError) as exc:
                error = str(exc)
            log.warning("webhook %s delivery attempt %d failed: %s", self.url, attempt, error)
            if attempt <= self.retries:
                time.sleep(self.backoff * attempt)
        return DeliveryRecord(self.name, event.rule, event.fired_at, False, self.retries + 1, error)


def emit_alert(event: AlertEvent, sinks) -> list:
    """Deliver to every sink; failures are recorded, never raised."""
    sinks = list(sinks)
    if not sinks:
        raise ConfigError("emit_alert needs at least one sink")

    def one(sink):
        try:
            return sink.deliver(event)
        except Exception as exc:  # a broken sink must not stop evaluation
            return DeliveryRecord(getattr(sink, "name", repr(sink)), event.rule, event.fired_at, False, 1, repr(exc))

    if len(sinks) == 1:
        return [one(sinks[0])]
    with ThreadPoolExecutor(len(sinks)) as pool:
        return list(pool.map(one, sinks))


def replay_rules(rules, db, start: int, end: int, step_ms: Optional[int] = None) -> list:
    """Re-run rules over stored data, ticking from ``start`` to ``end``."""
    if not rules:
        return []
    step = step_ms or max(1, int(min(r.window_ms for r in rules) / 4))
    state: dict = {}
    events = []
    ticks = list(range(start, end + 1, step))
    if not ticks or ticks[-1] != end:
        ticks.append(end)  # always look at the end of the range too
    for now in ticks:
        fired, state = evaluate_rules(rules, db, now, state)
        events.extend(fired)
    return events

"""Online scoring loop over the broker.

Each micro-batch goes fetch -> parse/tokenize -> infer vector -> predict ->
write points -> commit. The offset is committed only after the batch's
points are durable, so a crash anywhere replays at most the in-flight batch
(at-least-once into the store). Inference within a batch may run on a
thread pool; fetch and commit stay on the engine thread.
"""
from __future__ import annotations

import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .corpus import FieldMapping, Skip, parse_record, tokenize
from .embedding import infer_vector
from .regression import predict_score
from .tsdb import TimeSeriesPoint

log = logging.getLogger(__name__)
trace = logging.getLogger("docscore.trace")


def now_ms() -> int:
    return int(time.time() * 1000)


@dataclass
class StreamSettings:
    topic: str = "documents"
    consumer: str = "scorer"
    metric: str = "sentiment.score"
    batch_max: int = 128
    batch_wait_ms: int = 500
    clip: bool = True
    score_range: tuple = (1.0, 5.0)
    workers: int = 1
    mapping: FieldMapping = field(default_factory=FieldMapping)
    stop_file: Optional[Path] = None
    reload_file: Optional[Path] = None
    batch_log: Optional[Path] = None
    write_retries: int = 5
    retry_backoff_ms: int = 50


@dataclass
class MicroBatch:
    messages: list
    batch_start: int
    batch_end: int
    drain_time: int


@dataclass
class ScoredDocument:
    offset: int
    score: float
    degenerate_inference: bool
    processed_at: int


def _score_one(message, docvec_model, ml_model, mapping, clip_range):
    rec = parse_record(message.payload, mapping)
    if isinstance(rec, Skip):
        trace.debug(json.dumps({"stage": "skip", "offset": message.offset, "reason": rec.reason}))
        return None
    tokens = tokenize(rec.text)
    trace.debug(json.dumps({"stage": "tokenize", "offset": message.offset, "n_tokens": len(tokens)}))
    inferred = infer_vector(docvec_model, tokens)
    trace.debug(json.dumps({"stage": "infer", "offset": message.offset, "degenerate": inferred.degenerate}))
    score = predict_score(ml_model, inferred.vector, clip_range)
    trace.debug(json.dumps({"stage": "predict", "offset": message.offset, "score": score}))
    return ScoredDocument(message.offset, score, inferred.degenerate, now_ms())


def infer_sentiment_batch(messages, docvec_model, ml_model, mapping=FieldMapping(), clip_range=None, pool=None):
    """Score each message in order; returns (scored documents, skipped count)."""
    fn = lambda m: _score_one(m, docvec_model, ml_model, mapping, clip_range)  # noqa: E731
    results = list(pool.map(fn, messages)) if pool is not None else [fn(m) for m in messages]
    scored = [r for r in results if r is not None]
    return scored, len(results) - len(scored)


class StreamEngine:
    """One engine per consumer id.

    ``loader`` (optional) returns ``(docvec_model, ml_model, checksum)``;
    it is called between batches when a reload is requested, and models
    are swapped only if the checksum changed.
    """

    def __init__(
        self,
        docvec_model,
        ml_model,
        broker,
        tsdb,
        settings: StreamSettings = StreamSettings(),
        alerts=None,
        loader: Optional[Callable] = None,
        model_checksum: str = "",
        before_commit: Optional[Callable] = None,
    ):
        self.docvec_model = docvec_model
        self.ml_model = ml_model
        self.broker = broker
        self.tsdb = tsdb
        self.settings = settings
        self.alerts = alerts
        self.loader = loader
        self.model_checksum = model_checksum
        self.before_commit = before_commit
        self.stop_event = threading.Event()
        self.reload_event = threading.Event()
        self.batches = 0
        self.points_written = 0
        self.skipped = 0
        self._pool = ThreadPoolExecutor(settings.workers) if settings.workers > 1 else None
        self._last_tick = time.monotonic()

    def request_stop(self):
        self.stop_event.set()

    def request_reload(self):
        self.reload_event.set()

    def _stop_requested(self) -> bool:
        sf = self.settings.stop_file
        if sf is not None and Path(sf).exists():
            self.stop_event.set()
        return self.stop_event.is_set()

    def _maybe_reload(self):
        rf = self.settings.reload_file
        if rf is not None and Path(rf).exists():
            try:
                os.unlink(rf)
            except FileNotFoundError:
                pass
            self.reload_event.set()
        if not self.reload_event.is_set() or self.loader is None:
            self.reload_event.clear()
            return
        self.reload_event.clear()
        try:
            docvec, ml, checksum = self.loader()
        except Exception as exc:  # keep serving the old models
            log.error("model reload failed, keeping current models: %s", exc)
            return
        if checksum != self.model_checksum:
            log.info("reloaded models %s -> %s", self.model_checksum[:12], checksum[:12])
            self.docvec_model, self.ml_model, self.model_checksum = docvec, ml, checksum

    def _write_with_retry(self, points):
        delay = self.settings.retry_backoff_ms / 1000.0
        for attempt in range(self.settings.write_retries + 1):
            try:
                return self.tsdb.write_points(points)
            except OSError as exc:
                if attempt == self.settings.write_retries:
                    raise
                log.warning("point write failed (attempt %d): %s; retrying", attempt + 1, exc)
                time.sleep(delay)
                delay *= 2

    def step(self) -> Optional[MicroBatch]:
        """Process at most one micro-batch; returns it, or None when nothing arrived."""
        s = self.settings
        self._maybe_reload()
        messages = self.broker.fetch_batch(s.consumer, s.topic, s.batch_max, s.batch_wait_ms)
        if not messages:
            self._idle_tick()
            return None
        t0 = time.perf_counter()
        clip = tuple(s.score_range) if s.clip else None
        scored, skipped = infer_sentiment_batch(
            messages, self.docvec_model, self.ml_model, s.mapping, clip, self._pool
        )
        points = [
            TimeSeriesPoint(s.metric, d.processed_at, d.score, {"offset": str(d.offset), "topic": s.topic})
            for d in scored
        ]
        for p in points:
            trace.debug(json.dumps({"stage": "post", "offset": int(p.tags["offset"]), "timestamp": p.timestamp}))
        self._write_with_retry(points)
        batch = MicroBatch(messages, messages[0].offset, messages[-1].offset, now_ms())
        if self.before_commit is not None:
            self.before_commit(batch)
        self.broker.commit_offset(s.consumer, s.topic, batch.batch_end + 1)
        self.batches += 1
        self.points_written += len(points)
        self.skipped += skipped
        record = {
            "batch_start": batch.batch_start,
            "batch_end": batch.batch_end,
            "size": len(messages),
            "skipped": skipped,
            "elapsed_ms": round((time.perf_counter() - t0) * 1000.0, 3),
            "model_checksum": self.model_checksum,
        }
        self._log_batch(record)
        if self.alerts is not None:
            # the window is half-open, so look from just past the newest point
            newest = max((p.timestamp for p in points), default=0)
            self.alerts.evaluate(self.tsdb, max(now_ms(), newest + 1))
            self._last_tick = time.monotonic()
        return batch

    def _idle_tick(self):
        if self.alerts is None:
            return
        interval = self.alerts.tick_interval_ms()
        if interval is not None and (time.monotonic() - self._last_tick) * 1000.0 >= interval:
            self.alerts.evaluate(self.tsdb)
            self._last_tick = time.monotonic()

    def _log_batch(self, record):
        line = json.dumps(record, sort_keys=True)
        log.info(line)
        if self.settings.batch_log is not None:
            with open(self.settings.batch_log, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    def run(self, max_batches: Optional[int] = None) -> dict:
        """Loop until stopped (signal, stop file, or ``max_batches``); the in-flight batch always completes."""
        try:
            while not self._stop_requested():
                if self.step() is not None and max_batches is not None and self.batches >= max_batches:
                    break
        finally:
            if self._pool is not None:
                self._pool.shutdown()
        return {"batches": self.batches, "points": self.points_written, "skipped": self.skipped}


def run_online(docvec_model, ml_model, broker, tsdb, settings: StreamSettings = StreamSettings(), **kwargs) -> StreamEngine:
    """Build an engine and run it on the calling thread until stopped; returns the engine."""
    engine = StreamEngine(docvec_model, ml_model, broker, tsdb, settings, **kwargs)
    engine.run()
    return engine

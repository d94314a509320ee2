"""JSON-lines document streaming and tokenization."""
from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

from .errors import ConfigError

log = logging.getLogger(__name__)

_SPLIT = re.compile(r"[^0-9a-z]+")


@dataclass(frozen=True)
class FieldMapping:
    text: str = "reviewText"
    score: str = "overall"
    id: Optional[str] = None
    min_score: float = 1.0
    max_score: float = 5.0


@dataclass(frozen=True)
class RawRecord:
    text: str
    score: Optional[float] = None
    id: Optional[str] = None


@dataclass(frozen=True)
class TokenizedDocument:
    doc_index: int
    tokens: list
    score: Optional[float] = None
    id: Optional[str] = None


@dataclass
class SkipCounts:
    admitted: int = 0
    skipped_malformed: int = 0
    skipped_empty: int = 0
    skipped_score: int = 0

    def count(self, reason: str) -> None:
        setattr(self, "skipped_" + reason, getattr(self, "skipped_" + reason) + 1)

    def as_dict(self) -> dict:
        return dict(self.__dict__)


class Skip:
    """Returned by :func:`parse_record` for lines that are not admitted."""

    __slots__ = ("reason",)

    def __init__(self, reason: str):
        self.reason = reason

    def __repr__(self):
        return f"Skip({self.reason!r})"


def tokenize(text: str) -> list:
    """Lowercase and split on runs of non-alphanumerics."""
    return [t for t in _SPLIT.split(text.lower()) if t]


def _coerce_score(value) -> Optional[float]:
    if isinstance(value, bool):
        return None
    if isinstance(value, (int, float)):
        out = float(value)
    elif isinstance(value, str):
        try:
            out = float(value.strip())
        except ValueError:
            return None
    else:
        return None
    return out if math.isfinite(out) else None


def parse_record(line, mapping: FieldMapping = FieldMapping(), counts: Optional[SkipCounts] = None):
    """Parse one JSON line into a RawRecord, or return a Skip.

    Missing score fields are allowed (unlabeled documents); a present but
    unusable or out-of-range score is skipped rather than clamped.
    """
    if isinstance(line, bytes):
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError:
            return _skip("malformed", counts)
    try:
        obj = json.loads(line)
    except ValueError:
        return _skip("malformed", counts)
    if not isinstance(obj, dict):
        return _skip("malformed", counts)
    text = obj.get(mapping.text)
    if not isinstance(text, str):
        return _skip("malformed" if text is not None else "empty", counts)
    if not text.strip():
        return _skip("empty", counts)
    score = None
    if obj.get(mapping.score) is not None:
        score = _coerce_score(obj[mapping.score])
        if score is None or not mapping.min_score <= score <= mapping.max_score:
            return _skip("score", counts)
    rec_id = obj.get(mapping.id) if mapping.id else None
    return RawRecord(text=text, score=score, id=None if rec_id is None else str(rec_id))


def _skip(reason, counts):
    if counts is not None:
        counts.count(reason)
    return Skip(reason)


@dataclass
class CorpusIterator:
    """Re-iterable view over a JSON-lines file.

    Each ``iter()`` opens the file afresh and reads one line at a time, so
    memory does not depend on file size. ``counts`` holds the skip tally of
    the most recent completed pass.
    """

    path: Path
    mapping: FieldMapping = field(default_factory=FieldMapping)
    counts: SkipCounts = field(default_factory=SkipCounts)
    cursor: int = 0

    def __post_init__(self):
        self.path = Path(self.path)
        if not self.path.is_file():
            raise ConfigError(f"corpus file not readable: {self.path}")

    def __iter__(self) -> Iterator[TokenizedDocument]:
        counts = SkipCounts()
        self.cursor = 0
        try:
            fh = open(self.path, "rb")
        except OSError as exc:
            raise ConfigError(f"corpus file not readable: {self.path}: {exc}") from exc
        with fh:
            index = 0
            while True:
                try:
                    line = fh.readline()
                except OSError as exc:
                    raise OSError(f"read failed in {self.path} at byte {self.cursor}: {exc}") from exc
                if not line:
                    break
                self.cursor += len(line)
                if not line.strip():
                    continue
                rec = parse_record(line, self.mapping, counts)
                if isinstance(rec, Skip):
                    continue
                tokens = tokenize(rec.text)
                if not tokens:
                    counts.count("empty")
                    continue
                counts.admitted += 1
                yield TokenizedDocument(index, tokens, rec.score, rec.id)
                index += 1
        self.counts = counts
        log.debug("corpus pass over %s: %s", self.path, counts.as_dict())


def stream_corpus(path, mapping: FieldMapping = FieldMapping()) -> CorpusIterator:
    return CorpusIterator(path, mapping)

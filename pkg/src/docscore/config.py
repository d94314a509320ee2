"""Pipeline configuration: a YAML file validated into typed sections.

Relative paths are resolved against the directory holding the config file.
Unknown keys are rejected so a typo never silently falls back to a default.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .alerts import AlertRule
from .corpus import FieldMapping
from .embedding import Hyperparameters
from .errors import ConfigError
from .regression import RegressionParams
from .stream import StreamSettings


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class CorpusSection(_Section):
    train_path: Path
    text_field: str = "reviewText"
    score_field: str = "overall"
    id_field: Optional[str] = None


class EmbeddingSection(_Section):
    dim: int = Field(100, ge=1)
    window: int = Field(5, ge=0)
    negatives: int = Field(5, ge=1)
    epochs: int = Field(10, ge=1)
    alpha_start: float = Field(0.025, gt=0)
    alpha_end: float = Field(0.0001, ge=0)
    min_count: int = Field(2, ge=1)
    subsample_t: float = Field(0.0, ge=0)
    infer_steps: int = Field(50, ge=1)
    workers: int = Field(1, ge=1)


class RegressionSection(_Section):
    kinds: List[Literal["linear", "svr"]] = ["linear", "svr"]
    epsilon: float = Field(0.1, ge=0)
    l2_lambda: float = Field(1e-4, ge=0)
    epochs: int = Field(50, ge=1)
    lr: float = Field(0.01, gt=0)
    unit_norm: bool = True
    test_fraction: float = Field(0.2, gt=0, lt=1)
    serve_kind: Literal["linear", "svr"] = "linear"


class BrokerSection(_Section):
    data_dir: Path = Path("broker")
    topic: str = Field("documents", pattern=r"^[a-z0-9_.-]+$")
    consumer: str = Field("scorer", pattern=r"^[A-Za-z0-9_.-]+$")
    fsync: bool = True


class StreamSection(_Section):
    batch_max: int = Field(128, ge=1)
    batch_wait_ms: int = Field(500, ge=0)
    clip: bool = True
    workers: int = Field(1, ge=1)
    stop_file: Optional[Path] = None
    reload_file: Optional[Path] = None
    batch_log: Optional[Path] = None


class TsdbSection(_Section):
    data_dir: Path = Path("tsdb")
    metric: str = "sentiment.score"
    fsync: bool = True
    band_window: int = Field(20, ge=2)
    band_k: float = 2.0
    http_port: Optional[int] = Field(None, ge=0, le=65535)


class RuleSection(_Section):
    name: str
    threshold: float
    metric: Optional[str] = None
    window_ms: int = Field(60_000, gt=0)
    aggregator: Literal["avg", "min", "max"] = "avg"
    comparator: Literal["<", ">", "<=", ">="] = "<"
    cooldown_ms: int = Field(0, ge=0)
    min_points: int = Field(1, ge=1)


class AlertsSection(_Section):
    rules: List[RuleSection] = []
    log_path: Optional[Path] = Path("alerts.jsonl")
    webhook: Optional[str] = None
    webhook_retries: int = Field(2, ge=0)


class PipelineConfig(_Section):
    corpus: CorpusSection
    seed: int = 1
    score_range: Tuple[float, float] = (1.0, 5.0)
    artifacts_dir: Path = Path("models")
    report_path: Optional[Path] = None
    embedding: EmbeddingSection = EmbeddingSection()
    regression: RegressionSection = RegressionSection()
    broker: BrokerSection = BrokerSection()
    stream: StreamSection = StreamSection()
    tsdb: TsdbSection = TsdbSection()
    alerts: AlertsSection = AlertsSection()

    @field_validator("score_range")
    @classmethod
    def _ordered(cls, v):
        if not v[0] < v[1]:
            raise ValueError("score_range must be [min, max] with min < max")
        return v

    @model_validator(mode="after")
    def _serve_kind_trained(self):
        if self.regression.serve_kind not in self.regression.kinds:
            raise ValueError(f"regression.serve_kind {self.regression.serve_kind!r} is not in regression.kinds")
        return self

    # ---- derived settings --------------------------------------------------

    def field_mapping(self) -> FieldMapping:
        c = self.corpus
        return FieldMapping(c.text_field, c.score_field, c.id_field, *self.score_range)

    def embedding_hp(self) -> Hyperparameters:
        return Hyperparameters(seed=self.seed, **self.embedding.model_dump())

    def regression_params(self) -> RegressionParams:
        r = self.regression
        return RegressionParams(
            epsilon=r.epsilon, l2_lambda=r.l2_lambda, epochs=r.epochs, lr=r.lr, seed=self.seed,
            unit_norm=r.unit_norm,
        )

    def stream_settings(self) -> StreamSettings:
        s = self.stream
        return StreamSettings(
            topic=self.broker.topic,
            consumer=self.broker.consumer,
            metric=self.tsdb.metric,
            batch_max=s.batch_max,
            batch_wait_ms=s.batch_wait_ms,
            clip=s.clip,
            score_range=tuple(self.score_range),
            workers=s.workers,
            mapping=self.field_mapping(),
            stop_file=s.stop_file,
            reload_file=s.reload_file,
            batch_log=s.batch_log,
        )

    def alert_rules(self) -> list:
        return [
            AlertRule(
                name=r.name, metric=r.metric or self.tsdb.metric, threshold=r.threshold, window_ms=r.window_ms,
                aggregator=r.aggregator, comparator=r.comparator, cooldown_ms=r.cooldown_ms, min_points=r.min_points,
            )
            for r in self.alerts.rules
        ]

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


_PATH_FIELDS = {
    (): ("artifacts_dir", "report_path"),
    ("corpus",): ("train_path",),
    ("broker",): ("data_dir",),
    ("stream",): ("stop_file", "reload_file", "batch_log"),
    ("tsdb",): ("data_dir",),
    ("alerts",): ("log_path",),
}


def _resolve_paths(cfg: PipelineConfig, base: Path) -> PipelineConfig:
    updates = {}
    for section, keys in _PATH_FIELDS.items():
        obj = getattr(cfg, section[0]) if section else cfg
        changed = {}
        for key in keys:
            val = getattr(obj, key)
            if val is not None and not val.expanduser().is_absolute():
                changed[key] = (base / val.expanduser()).resolve()
        if changed and section:
            updates[section[0]] = obj.model_copy(update=changed)
        else:
            updates.update(changed)
    return cfg.model_copy(update=updates)


def _format_errors(exc: ValidationError, source) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(x) for x in err["loc"]) or "<root>"
        if err["type"] == "extra_forbidden":
            parts.append(f"unknown key '{loc}'")
        elif err["type"] == "missing":
            parts.append(f"missing required key '{loc}'")
        else:
            parts.append(f"'{loc}': {err['msg']}")
    return f"{source}: " + "; ".join(parts)


def config_from_dict(raw: dict, base_dir=".", source="<config>") -> PipelineConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    try:
        cfg = PipelineConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc, source)) from None
    return _resolve_paths(cfg, Path(base_dir).resolve())


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: YAML syntax error: {exc}") from exc
    return config_from_dict(raw or {}, path.parent, path)


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)

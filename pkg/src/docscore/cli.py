"""Command-line front door.

Every subcommand prints one JSON object (or array) on success. Failures
print ``{"error": ..., "type": ...}`` on stderr and exit 1 (usage/config),
2 (runtime) or 3 (data integrity). Flags can also come from the
environment: ``DOCSCORE_CONFIG`` for ``--config``, otherwise
``DOCSCORE_<COMMAND>_<OPTION>`` (e.g. ``DOCSCORE_SYNTH_N_DOCS``).
"""
from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from .errors import ConfigError, DocscoreError, IntegrityError

ENV_PREFIX = "DOCSCORE"

config_option = click.option(
    "--config", "config_path", required=True, envvar="DOCSCORE_CONFIG",
    type=click.Path(dir_okay=False), help="Pipeline YAML config.",
)


def _load(config_path):
    from .config import load_config

    return load_config(config_path)


def _parse_tags(items) -> dict:
    tags = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise click.BadParameter(f"tag {item!r} must look like key=value", param_hint="--tag")
        tags[key] = value
    return tags


@click.group()
@click.option("-v", "--verbose", count=True, help="More logging on stderr.")
def cli(verbose):
    logging.basicConfig(
        level=logging.WARNING - 10 * min(verbose, 2), stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


@cli.command()
@click.option("--n-docs", type=int, default=2000, show_default=True)
@click.option("--seed", type=int, default=1, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def synth(n_docs, seed, out):
    """Write a seeded synthetic labeled corpus."""
    from .synth import generate_synthetic_corpus

    return generate_synthetic_corpus(n_docs, seed, out)


@cli.command()
@config_option
def train(config_path):
    """Offline flow: embed the labeled corpus, fit regressors, persist artifacts."""
    from .pipeline import run_offline

    cfg = _load(config_path)

    def progress(rec):
        click.echo(json.dumps(rec), err=True)

    return run_offline(cfg, progress).as_dict()


@cli.command()
@config_option
@click.option("--max-batches", type=int, default=None, help="Exit after this many batches.")
def serve(config_path, max_batches):
    """Online flow: score documents from the broker until stopped."""
    from .pipeline import run_online

    return run_online(_load(config_path), max_batches=max_batches)


@cli.command()
@config_option
@click.argument("source", type=click.File("rb"))
def publish(config_path, source):
    """Publish each non-empty line of SOURCE (a file or -) to the configured topic."""
    from .broker import Broker

    cfg = _load(config_path)
    offsets = []
    with Broker(cfg.broker.data_dir, fsync=cfg.broker.fsync) as broker:
        for line in source:
            line = line.strip()
            if line:
                offsets.append(broker.publish(cfg.broker.topic, line))
    return {
        "topic": cfg.broker.topic,
        "published": len(offsets),
        "first_offset": offsets[0] if offsets else None,
        "last_offset": offsets[-1] if offsets else None,
    }


@cli.command()
@config_option
@click.argument("metric")
@click.argument("start", type=int)
@click.argument("end", type=int)
@click.option("--tag", "tags", multiple=True, help="key=value filter; repeatable.")
@click.option("--bucket-ms", type=int, default=None, help="Downsample into buckets of this width.")
@click.option("--agg", type=click.Choice(["avg", "min", "max", "count"]), default="avg", show_default=True)
def query(config_path, metric, start, end, tags, bucket_ms, agg):
    """Points of METRIC in [START, END), optionally downsampled."""
    from .tsdb import TSDB

    cfg = _load(config_path)
    with TSDB(cfg.tsdb.data_dir, fsync=False) as db:
        if bucket_ms is not None:
            return [{"timestamp": b, "value": v} for b, v in db.downsample(metric, start, end, bucket_ms, agg, _parse_tags(tags))]
        return [p.as_dict() for p in db.query_range(metric, start, end, _parse_tags(tags))]


@cli.command()
@config_option
@click.argument("metric")
@click.argument("start", type=int)
@click.argument("end", type=int)
@click.option("--n", "window", type=int, default=None, help="Window length (default from config).")
@click.option("--k", type=float, default=None, help="Band width in std devs (default from config).")
def bands(config_path, metric, start, end, window, k):
    """Bollinger bands over the values of METRIC in [START, END)."""
    from .tsdb import TSDB, rolling_bands

    cfg = _load(config_path)
    with TSDB(cfg.tsdb.data_dir, fsync=False) as db:
        points = db.query_range(metric, start, end)
    result = rolling_bands([p.value for p in points], window or cfg.tsdb.band_window, cfg.tsdb.band_k if k is None else k)
    rows = result.rows()
    for row in rows:
        row["timestamp"] = points[row["position"]].timestamp
    return rows


@cli.command()
@config_option
@click.argument("corpus", required=False, type=click.Path(dir_okay=False))
def evaluate(config_path, corpus):
    """R^2 of the saved models on CORPUS (default: the training corpus), via inferred vectors."""
    from .pipeline import evaluate_corpus

    cfg = _load(config_path)
    return evaluate_corpus(cfg, corpus or cfg.corpus.train_path)


@cli.command("alerts-test")
@config_option
@click.option("--start", type=int, default=None, help="First evaluation time (default: first point).")
@click.option("--end", type=int, default=None, help="Last evaluation time (default: last point + 1).")
@click.option("--step-ms", type=int, default=None, help="Tick width (default: shortest window / 4).")
def alerts_test(config_path, start, end, step_ms):
    """Replay the configured alert rules over stored points."""
    from .alerts import replay_rules
    from .tsdb import TSDB

    cfg = _load(config_path)
    rules = cfg.alert_rules()
    with TSDB(cfg.tsdb.data_dir, fsync=False) as db:
        times = [p.timestamp for r in rules for p in db.query_range(r.metric, 0, 2**63 - 1)]
        if not times:
            return {"events": [], "rules": len(rules)}
        lo = min(times) if start is None else start
        hi = max(times) + 1 if end is None else end
        events = replay_rules(rules, db, lo, hi, step_ms)
    return {"rules": len(rules), "events": [e.as_dict() for e in events]}


def _fail(message, kind, code):
    click.echo(json.dumps({"error": message, "type": kind}), err=True)
    return code


def main(argv=None) -> int:
    try:
        result = cli.main(args=argv, prog_name="docscore", standalone_mode=False, auto_envvar_prefix=ENV_PREFIX)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.Abort:
        return _fail("aborted", "Abort", 2)
    except click.ClickException as exc:
        return _fail(exc.format_message(), type(exc).__name__, 1)
    except ConfigError as exc:
        return _fail(str(exc), type(exc).__name__, 1)
    except IntegrityError as exc:
        return _fail(str(exc), type(exc).__name__, 3)
    except DocscoreError as exc:
        return _fail(str(exc), type(exc).__name__, exc.exit_code)
    except Exception as exc:  # noqa: BLE001 - every failure leaves as JSON
        return _fail(str(exc), type(exc).__name__, 2)
    if isinstance(result, int):
        return result
    if result is not None:
        click.echo(json.dumps(result, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())

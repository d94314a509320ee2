import json
import math
import urllib.request

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from docscore.errors import ConfigError, CorruptionError
from docscore.tsdb import TSDB, TimeSeriesPoint, aggregate, rolling_bands, serve_http


def P(ts, value, metric="m", **tags):
    return TimeSeriesPoint(metric, ts, value, tags)


# ---- oracles ----------------------------------------------------------------


def brute_bands(values, n, k):
    rows = []
    for end in range(n - 1, len(values)):
        window = values[end - n + 1 : end + 1]
        s = 0.0
        for v in window:
            s += v
        mean = s / n
        q = 0.0
        for v in window:
            d = v - mean
            q += d * d
        sigma = math.sqrt(q / n)
        rows.append((mean, sigma, mean + k * sigma, mean - k * sigma))
    return rows


def brute_downsample(points, start, end, bucket, agg):
    buckets = {}
    for ts, v in points:
        if start <= ts < end:
            b = start + ((ts - start) // bucket) * bucket
            buckets.setdefault(b, []).append(v)
    out = []
    for b in sorted(buckets):
        vals = buckets[b]
        if agg == "count":
            out.append((b, float(len(vals))))
        elif agg == "min":
            out.append((b, min(vals)))
        elif agg == "max":
            out.append((b, max(vals)))
        else:
            s = 0.0
            for v in vals:
                s += v
            out.append((b, s / len(vals)))
    return out


def brute_bands_equal(values, n, k):
    got = rolling_bands(values, n, k)
    want = brute_bands(list(values), n, k)
    if len(got) != len(want):
        return False
    for i, (m, s, u, l) in enumerate(want):
        if (got.mean[i], got.sigma[i], got.upper[i], got.lower[i]) != (m, s, u, l):
            return False
    return True


# ---- writes -----------------------------------------------------------------


def test_idempotent_write():
    db = TSDB()
    assert db.write_point(P(5, 1.0, src="a"))
    assert not db.write_point(P(5, 1.0, src="a"))
    assert db.count() == 1


def test_overwrite_same_key():
    db = TSDB()
    db.write_point(P(5, 1.0))
    db.write_point(P(5, 2.0))
    assert [p.value for p in db.query_range("m", 0, 10)] == [2.0]


@pytest.mark.parametrize("bad", [float("nan"), float("inf"), -float("inf")])
def test_non_finite_rejected(bad):
    db = TSDB()
    with pytest.raises(ValueError):
        db.write_point(P(1, bad))
    assert db.count() == 0


def test_negative_timestamp_rejected():
    with pytest.raises(ValueError):
        TSDB().write_point(P(-1, 1.0))


def test_persistence_round_trip(tmp_path):
    with TSDB(tmp_path, fsync=False) as db:
        for i in range(1000):
            db.write_point(P(i * 3, float(i), src=str(i % 4)))
    with TSDB(tmp_path, fsync=False) as db:
        assert db.count() == 1000
        pts = db.query_range("m", 0, 10**9)
        assert [p.value for p in pts] == [float(i) for i in range(1000)]
        assert pts[5].tags == {"src": "1"}


def test_replays_leave_file_byte_identical(tmp_path):
    points = [P(i, i * 0.5, src="x") for i in range(200)]
    with TSDB(tmp_path / "once", fsync=False) as db:
        db.write_points(points)
    with TSDB(tmp_path / "many", fsync=False) as db:
        for _ in range(5):
            db.write_points(points)
    with TSDB(tmp_path / "many", fsync=False) as db:  # and across a reopen
        db.write_points(points)
    assert (tmp_path / "once" / "points.log").read_bytes() == (tmp_path / "many" / "points.log").read_bytes()


def test_torn_tail_recovered(tmp_path):
    with TSDB(tmp_path, fsync=False) as db:
        db.write_points([P(1, 1.0), P(2, 2.0)])
    with open(tmp_path / "points.log", "ab") as fh:
        fh.write(b'{"metric": "m", "timest')
    with TSDB(tmp_path, fsync=False) as db:
        assert db.count() == 2
        db.write_point(P(3, 3.0))
    with TSDB(tmp_path, fsync=False) as db:
        assert db.count() == 3


def test_corrupt_middle_line_is_fatal(tmp_path):
    with TSDB(tmp_path, fsync=False) as db:
        db.write_points([P(1, 1.0), P(2, 2.0)])
    text = (tmp_path / "points.log").read_text().splitlines()
    (tmp_path / "points.log").write_text("garbage\n" + "\n".join(text) + "\n")
    with pytest.raises(CorruptionError):
        TSDB(tmp_path, fsync=False)


# ---- queries ----------------------------------------------------------------


@pytest.fixture
def three():
    db = TSDB()
    db.write_points([P(10, 1.0, src="a"), P(20, 2.0, src="b"), P(30, 3.0, src="a")])
    return db


def test_half_open_range(three):
    assert [p.timestamp for p in three.query_range("m", 10, 30)] == [10, 20]


def test_empty_range(three):
    assert three.query_range("m", 0, 5) == []
    assert three.query_range("unknown", 0, 100) == []


def test_tag_filter(three):
    assert [p.timestamp for p in three.query_range("m", 0, 100, {"src": "a"})] == [10, 30]
    assert three.query_range("m", 0, 100, {"src": "a", "other": "x"}) == []


def test_start_after_end_rejected(three):
    with pytest.raises(ValueError):
        three.query_range("m", 5, 1)


def test_same_timestamp_different_tags_coexist():
    db = TSDB()
    db.write_points([P(1, 1.0, offset="0"), P(1, 2.0, offset="1")])
    assert db.count("m") == 2


@pytest.mark.parametrize(
    "agg, expected",
    [("avg", [(0, 2.0)]), ("count", [(0, 3.0)]), ("min", [(0, 1.0)]), ("max", [(0, 3.0)])],
)
def test_downsample_single_bucket(agg, expected):
    db = TSDB()
    db.write_points([P(0, 1.0), P(1, 2.0), P(2, 3.0)])
    assert db.downsample("m", 0, 10, 10, agg) == expected


def test_downsample_alignment():
    db = TSDB()
    db.write_points([P(0, 1.0), P(15, 5.0)])
    assert db.downsample("m", 0, 100, 10, "avg") == [(0, 1.0), (10, 5.0)]
    # buckets are aligned to the query start, not to zero
    assert db.downsample("m", 5, 100, 10, "count") == [(15, 1.0)]
    assert db.downsample("m", 6, 100, 10, "count") == [(6, 1.0)]


def test_downsample_bad_args():
    with pytest.raises(ValueError):
        TSDB().downsample("m", 0, 10, 0)
    with pytest.raises(ValueError):
        TSDB().downsample("m", 0, 10, 5, "median")


def test_query_and_downsample_match_brute_force():
    rng = np.random.default_rng(21)
    for _ in range(1000):
        n = int(rng.integers(0, 40))
        ts = rng.integers(0, 500, n)
        vals = rng.normal(3, 1, n).round(3)
        db = TSDB()
        last = {}
        for t, v in zip(ts.tolist(), vals.tolist()):
            db.write_point(P(t, v))
            last[t] = v  # same key overwrites
        points = sorted(last.items())
        start = int(rng.integers(0, 300))
        end = start + int(rng.integers(0, 300))
        bucket = int(rng.integers(1, 80))
        agg = ["avg", "min", "max", "count"][int(rng.integers(4))]
        got = [(p.timestamp, p.value) for p in db.query_range("m", start, end)]
        assert got == [(t, v) for t, v in points if start <= t < end]
        assert db.downsample("m", start, end, bucket, agg) == brute_downsample(points, start, end, bucket, agg)


def test_concurrent_writers_and_readers():
    import threading

    db = TSDB()
    stop = threading.Event()
    errors = []

    def reader():
        while not stop.is_set():
            pts = db.query_range("m", 0, 10**9)
            if [p.timestamp for p in pts] != sorted(p.timestamp for p in pts):
                errors.append("unordered")

    def writer(base):
        for i in range(500):
            db.write_point(P(base + i * 10, 1.0))

    r = threading.Thread(target=reader)
    r.start()
    ws = [threading.Thread(target=writer, args=(b,)) for b in range(4)]
    for w in ws:
        w.start()
    for w in ws:
        w.join()
    stop.set()
    r.join()
    assert not errors and db.count() == 2000


# ---- bands ------------------------------------------------------------------


def test_band_constant():
    b = rolling_bands([5.0, 5.0, 5.0], 3, 2)
    assert (b.mean[0], b.sigma[0], b.upper[0], b.lower[0]) == (5.0, 0.0, 5.0, 5.0)


def test_band_reference_example():
    b = rolling_bands([1.0, 2.0, 3.0], 3, 2)
    assert b.mean[0] == 2.0
    assert abs(b.sigma[0] - math.sqrt(2 / 3)) < 1e-12
    assert abs(b.lower[0] - 0.3670) < 1e-3 and abs(b.upper[0] - 3.6330) < 1e-3


def test_band_too_short():
    assert len(rolling_bands([1.0, 2.0], 3, 2)) == 0


def test_band_window_validation():
    with pytest.raises(ConfigError):
        rolling_bands([1.0, 2.0], 1, 2)


def test_bands_rows_positions():
    rows = rolling_bands(np.arange(6.0), 4, 1.0).rows()
    assert [r["position"] for r in rows] == [3, 4, 5]


def test_bands_match_brute_force_exactly():
    rng = np.random.default_rng(8)
    for _ in range(1000):
        length = int(rng.integers(0, 80))
        n = int(rng.integers(2, 25))
        k = float(rng.uniform(0, 3))
        values = rng.normal(3, 1.2, length) * rng.choice([1.0, 1e-3, 1e3])
        assert brute_bands_equal(values, n, k)


@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=60), st.integers(2, 10))
@settings(max_examples=200)
def test_band_ordering_and_k_zero(values, n):
    b = rolling_bands(values, n, 2.0)
    assert np.all(b.sigma >= 0)
    assert np.all(b.upper >= b.mean) and np.all(b.mean >= b.lower)
    z = rolling_bands(values, n, 0.0)
    assert np.array_equal(z.upper, z.mean) and np.array_equal(z.lower, z.mean)


def test_aggregate_helper():
    assert aggregate([1.0, 2.0, 4.0], "avg") == pytest.approx(7 / 3)
    assert aggregate([3.0], "count") == 1.0


# ---- http -------------------------------------------------------------------


def _get(url):
    with urllib.request.urlopen(url, timeout=5) as r:
        return json.loads(r.read())


def test_http_put_query_bands():
    db = TSDB()
    server = serve_http(db)
    base = "http://%s:%d" % server.server_address
    try:
        one = json.dumps({"metric": "s", "timestamp": 1, "value": 1.0, "tags": {"src": "a"}}).encode()
        req = urllib.request.Request(base + "/api/put", data=one, method="POST")
        assert json.loads(urllib.request.urlopen(req, timeout=5).read())["success"] == 1
        many = json.dumps([{"metric": "s", "timestamp": t, "value": float(t)} for t in (2, 3)]).encode()
        urllib.request.urlopen(urllib.request.Request(base + "/api/put", data=many, method="POST"), timeout=5)
        assert [p["timestamp"] for p in _get(base + "/api/query?metric=s&start=0&end=10")] == [1, 2, 3]
        assert _get(base + "/api/query?metric=s&start=0&end=10&tags=src:a")[0]["tags"] == {"src": "a"}
        assert _get(base + "/api/query?metric=s&start=0&end=10&bucket_ms=10&agg=count") == [{"timestamp": 0, "value": 3.0}]
        rows = _get(base + "/api/bands?metric=s&start=0&end=10&n=3&k=2")
        assert len(rows) == 1 and abs(rows[0]["upper"] - 3.6330) < 1e-3
        bad = urllib.request.Request(base + "/api/put", data=b'{"metric":"s","timestamp":1,"value":"NaN"}', method="POST")
        with pytest.raises(urllib.error.HTTPError) as info:
            urllib.request.urlopen(bad, timeout=5)
        assert info.value.code == 400
    finally:
        server.shutdown()

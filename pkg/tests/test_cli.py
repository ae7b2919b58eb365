import csv
import os

import numpy as np
import pytest

from timeclave import bench
from timeclave.cli import main
from timeclave.service import BackgroundServer, load_config, load_key
from timeclave.tsengine import Engine, EngineConfig


@pytest.fixture
def server(tmp_path, monkeypatch):
    for k in list(os.environ):
        if k.startswith("TIMECLAVE_"):
            monkeypatch.delenv(k)
    conf = tmp_path / "tc.conf"
    assert main(["init", "--config", str(conf)]) == 0
    cfg = load_config(conf, env={})
    eng = Engine(EngineConfig(intervals_ms=(10, 60), retention_ms=100_000, seed=0, r=8))
    with BackgroundServer(eng, load_key(cfg.key_file)) as srv:
        yield ["--config", str(conf), "--addr", f"127.0.0.1:{srv.port}"]


def test_init_writes_config_and_key(tmp_path, capsys):
    conf = tmp_path / "a.conf"
    assert main(["init", "--config", str(conf)]) == 0
    cfg = load_config(conf, env={})
    assert len(load_key(cfg.key_file)) == 32
    assert cfg.engine_config().intervals_ms == (10_000, 60_000)
    assert main(["init", "--config", str(conf)]) == 1
    assert "exists" in capsys.readouterr().err
    assert main(["init", "--config", str(conf), "--force"]) == 0


def test_ingest_and_query(server, tmp_path, capsys):
    data = tmp_path / "pts.csv"
    data.write_text("ts_ms,value\n1,2.0\n5,4.0\n15,10.0\n")
    assert main(["ingest", str(data)] + server) == 0
    assert "ingested 3 points" in capsys.readouterr().out
    assert main(["query", "mean", "0", "20"] + server) == 0
    assert capsys.readouterr().out.strip() == repr(16.0 / 3)
    assert main(["query", "3", "0", "10"] + server) == 0
    assert capsys.readouterr().out.strip() == "2.0"


def test_query_sum_matches_oracle(server, tmp_path, capsys):
    rng = np.random.default_rng(70)
    ts = np.sort(rng.choice(80_000, 400, replace=False))
    vals = rng.normal(3.0, 1.0, ts.size)
    data = tmp_path / "series.csv"
    data.write_text("".join(f"{t},{v!r}\n" for t, v in zip(ts.tolist(), vals.tolist())))
    assert main(["ingest", str(data)] + server) == 0
    capsys.readouterr()
    assert main(["query", "sum", "0", "70000"] + server) == 0
    got = float(capsys.readouterr().out)
    assert got == pytest.approx(vals[ts < 70_000].sum(), rel=1e-12)
    assert main(["query", "mean", "70000", "0"] + server) == 1


def test_ingest_empty_file(server, tmp_path, capsys):
    empty = tmp_path / "empty.csv"
    empty.write_text("ts_ms,value\n")
    assert main(["ingest", str(empty)] + server) == 0
    assert "ingested 0 points" in capsys.readouterr().out


def test_exit_codes(server, tmp_path, capsys):
    assert main(["query", "sum", "20", "10"] + server) == 1
    assert "error" in capsys.readouterr().err
    assert main(["query", "min", "5000", "5010"] + server) == 1
    with pytest.raises(SystemExit) as exc:
        main(["query", "median", "0", "10"] + server)
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["query", "sum", "zero", "10"] + server)
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2
    assert main(["ingest", str(tmp_path / "missing.csv")] + server) == 1


def test_unreachable_server(tmp_path):
    conf = tmp_path / "c.conf"
    main(["init", "--config", str(conf)])
    assert main(["query", "sum", "0", "10", "--config", str(conf), "--addr", "127.0.0.1:1"]) == 1


def test_trace_record_and_check(tmp_path, capsys):
    out = tmp_path / "t.bin"
    assert main(["trace-record", str(out), "--n", "1024", "--reads", "10000", "--hot"]) == 0
    assert main(["trace-check", str(out)]) == 0
    text = capsys.readouterr().out
    assert "distinct paths: pass" in text and "uniformity: pass" in text
    assert main(["trace-record", str(out), "--n", "64", "--reads", "50"]) == 0
    assert main(["trace-check", str(out)]) == 0
    assert "skipped" in capsys.readouterr().out


def test_bench_quick_grid(tmp_path):
    out = tmp_path / "b.csv"
    assert main(["bench", "--family", "grid", "--quick", "--out", str(out)]) == 0
    with open(out, newline="") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == bench.CSV_HEADER
    body = bench.read_csv(out.read_text())
    for variant in ("roram", "pathoram-baseline", "nonoblivious"):
        cells = [r for r in body if r.variant == variant]
        assert len(cells) == 30
        assert {(r.range, r.block_bytes) for r in cells} == {
            (rl, b) for rl in bench.RANGES for b in bench.BLOCK_SIZES}
        assert all(r.p50_us > 0 and r.p95_us >= r.p50_us and r.throughput_ops > 0 for r in cells)


def test_bench_unknown_family():
    assert main(["bench", "--family", "nope"]) == 2


def test_bench_other_families_small():
    rows = bench.eviction_sweep((1, 8), n=256, reps=3)
    assert [r.variant for r in rows] == ["roram:R=1", "roram:R=8"]
    rows = bench.interval_sweep((1, 5), span_s=20, reps=2)
    assert [(r.variant, r.range) for r in rows] == [("roram:T=1s", 20), ("roram:T=5s", 4)]
    rows = bench.variant_comparison(n=256, ops=200, workers=2)
    assert [r.variant for r in rows] == ["roram", "pathoram-baseline", "nonoblivious"]

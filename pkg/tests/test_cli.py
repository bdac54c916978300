import csv
import json

import numpy as np
import pytest

from stratakv.cli import main

SMALL = {
    "workload": {"n_tokens": 2048, "d": 16, "query_count": 6},
    "contexts": [1024, 2048],
    "token_budgets": [128, 256],
    "granularities": [1, 2],
    "audit_queries": 16,
}


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(SMALL))
    return p


def _last_json(out):
    return json.loads(out.strip().splitlines()[-1])


def test_chunk_prints_rows(corpus_path, capsys):
    assert main(["chunk", str(corpus_path)]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert rows[0]["start"] == 0
    assert all(a["end"] == b["start"] for a, b in zip(rows, rows[1:]))
    assert {"start", "end", "boundary_kind", "preview_text"} <= set(rows[0])
    assert rows[-1]["boundary_kind"] == "tail"


def test_chunk_writes_to_out(corpus_path, tmp_path, capsys):
    assert main(["--out", str(tmp_path), "chunk", str(corpus_path), "--min-len", "4", "--max-len", "8"]) == 0
    rows = json.loads((tmp_path / "chunks.json").read_text())
    assert all(r["end"] - r["start"] <= 8 for r in rows)


def test_build_query_export(tmp_path, cfg_file, capsys):
    out = tmp_path / "idx"
    assert main(["build", "--config", str(cfg_file), "--out", str(out)]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["M"] >= stats["L"] >= stats["P"] >= 1
    assert (out / "index.npz").exists() and (out / "stats.json").exists()

    qpath = tmp_path / "q.json"
    qpath.write_text(json.dumps(np.ones(16).tolist()))
    assert main(["query", str(out / "index.npz"), str(qpath), "--budget", "64"]) == 0
    res = _last_json(capsys.readouterr().out)
    assert len(res["output_vector"]) == 16 and res["active_count"] >= 1
    assert res["scanned_centroids"] >= stats["P"]

    npy = tmp_path / "q.npy"
    np.save(npy, np.ones(16))
    assert main(["query", str(out / "index.npz"), str(npy), "--k-c", "2"]) == 0
    assert len(_last_json(capsys.readouterr().out)["selected_clusters"]) == 2

    target = tmp_path / "chunks.csv"
    assert main(["export", str(out / "index.npz"), "--csv", str(target)]) == 0
    with open(target) as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:3] == ["chunk_id", "cluster_id", "unit_id"] and len(rows[0]) == 3 + 16
    assert len(rows) - 1 == stats["M"]


def test_build_from_npz(tmp_path, capsys):
    keys = np.random.default_rng(0).standard_normal((100, 4))
    bounds = np.full(100, -1)
    bounds[9::10] = 2
    np.savez(tmp_path / "t.npz", keys=keys, values=keys, boundaries=bounds)
    assert main(["build", "--input", str(tmp_path / "t.npz")]) == 0
    assert json.loads(capsys.readouterr().out)["M"] == 10


def test_query_dimension_mismatch_is_usage_error(tmp_path, cfg_file, capsys):
    main(["build", "--config", str(cfg_file), "--out", str(tmp_path)])
    q = tmp_path / "q.json"
    q.write_text("[1.0, 2.0]")
    assert main(["query", str(tmp_path / "index.npz"), str(q)]) == 1


def test_stream(tmp_path, capsys):
    rc = main(["--out", str(tmp_path), "stream", "--prefill", "1024", "--steps", "64", "--budget", "128"])
    assert rc == 0
    lines = (tmp_path / "stream.jsonl").read_text().splitlines()
    assert len(lines) == 64
    row = json.loads(lines[1])
    assert {"step", "active_count", "scanned_centroids", "jaccard", "window_hit"} <= set(row)
    assert json.loads(lines[0])["jaccard"] is None
    summary = json.loads((tmp_path / "stream_summary.json").read_text())
    assert summary["covering_violations"] == 0 and summary["grafts"] >= 1


def test_bench_and_timings(tmp_path, cfg_file, capsys):
    assert main(["bench", "--config", str(cfg_file), "--out", str(tmp_path)]) == 0
    for name in ("summary.json", "cells.csv", "queries.csv"):
        assert (tmp_path / name).exists()
    assert not (tmp_path / "timings.json").exists()
    assert len(json.loads((tmp_path / "summary.json").read_text())["cells"]) == 8
    assert main(["bench", "--config", str(cfg_file), "--out", str(tmp_path / "t"), "--timings"]) == 0
    assert (tmp_path / "t" / "timings.json").exists()


def test_bench_audit_failure_exit_code(tmp_path, cfg_file, monkeypatch, capsys):
    import stratakv.harness as harness

    monkeypatch.setattr(harness, "covering_violations", lambda index: 1)
    assert main(["bench", "--config", str(cfg_file), "--out", str(tmp_path)]) == 2


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["nope"],
        ["build", "--tokens", "abc"],
        ["stream", "--graft-scope", "everywhere"],
    ],
)
def test_usage_errors(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 1


def test_input_errors_exit_one(tmp_path, capsys):
    assert main(["chunk", str(tmp_path / "missing.txt")]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["--config", str(bad), "build"]) == 1
    bad.write_text(json.dumps({"unknown_key": 1}))
    assert main(["--config", str(bad), "build"]) == 1


def test_env_overrides(tmp_path, cfg_file, monkeypatch, capsys):
    monkeypatch.setenv("STRATAKV_CONFIG", str(cfg_file))
    monkeypatch.setenv("STRATAKV_OUT", str(tmp_path / "env"))
    monkeypatch.setenv("STRATAKV_SEED", "3")
    assert main(["build"]) == 0
    assert (tmp_path / "env" / "index.npz").exists()
    env_stats = json.loads(capsys.readouterr().out)
    # explicit flag beats the environment
    assert main(["build", "--seed", "4", "--out", str(tmp_path / "flag")]) == 0
    flag_stats = json.loads(capsys.readouterr().out)
    assert (tmp_path / "flag" / "index.npz").exists()
    assert env_stats != flag_stats
    monkeypatch.delenv("STRATAKV_OUT")
    assert main(["build", "--seed", "3"]) == 0
    assert json.loads(capsys.readouterr().out) == env_stats


def test_seed_flag_before_or_after_command(tmp_path, cfg_file, capsys):
    main(["--seed", "7", "build", "--config", str(cfg_file)])
    a = capsys.readouterr().out
    main(["build", "--config", str(cfg_file), "--seed", "7"])
    assert capsys.readouterr().out == a

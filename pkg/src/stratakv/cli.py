"""Command-line entry point: ``stratakv {chunk,build,query,stream,bench,export}``.

Exit codes: 0 ok, 1 usage or input error, 2 invariant-audit failure.
Every global flag can also come from the environment as ``STRATAKV_<FLAG>``
(``STRATAKV_SEED``, ``STRATAKV_CONFIG``, ``STRATAKV_OUT``); explicit flags win.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from stratakv.chunker import ChunkPolicy, boundary_levels, segment, segment_levels
from stratakv.evaluator import covering_violations
from stratakv.harness import RunConfig, run_bench, run_stream
from stratakv.kv_index import TokenStore, build_index, index_memory_bytes, load_index, save_index
from stratakv.retriever import Budgets, query
from stratakv.workload import gen_clustered_workload, ingest_text

ENV_PREFIX = "STRATAKV_"
EXIT_OK, EXIT_USAGE, EXIT_AUDIT = 0, 1, 2

class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _env(name: str, default=None):
    return os.environ.get(ENV_PREFIX + name.upper(), default)


def _load_config(path: Optional[str], seed: Optional[int]) -> RunConfig:
    data = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
    try:
        cfg = RunConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    if seed is not None:
        cfg = dataclasses.replace(
            cfg,
            workload=dataclasses.replace(cfg.workload, seed=seed),
            index=dataclasses.replace(cfg.index, seed=seed),
        )
    return cfg


def _write(text: str, out: Optional[Path], name: str) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text)


def _budgets(args, base: Budgets) -> Budgets:
    changes = {}
    for attr in ("k_g", "k_c", "token_budget", "sink_size"):
        val = getattr(args, attr, None)
        if val is not None:
            changes[attr] = val
    return dataclasses.replace(base, **changes)


def cmd_chunk(args, cfg: RunConfig, out: Optional[Path]) -> int:
    policy = ChunkPolicy(args.min_len or cfg.chunk.min_len, args.max_len or cfg.chunk.max_len)
    wl = ingest_text(args.file, seed=cfg.workload.seed, d=8)
    spans = segment(wl.records(), policy)
    rows = [
        {
            "start": s.start,
            "end": s.end,
            "boundary_kind": s.boundary_kind,
            "preview_text": "".join(wl.texts[s.start : s.end])[:80],
        }
        for s in spans
    ]
    _write(json.dumps(rows, indent=2, ensure_ascii=False) + "\n", out, "chunks.json")
    return EXIT_OK


def _load_tokens(path: str) -> TokenStore:
    with np.load(path, allow_pickle=False) as z:
        if "keys" not in z or "values" not in z:
            raise UsageError(f"{path} must contain 'keys' and 'values' arrays")
        texts = list(z["texts"]) if "texts" in z else None
        boundaries = None
        if "boundaries" in z:
            boundaries = [None if b < 0 else int(b) for b in z["boundaries"]]
        return TokenStore.from_arrays(z["keys"], z["values"], texts, boundaries)


def _stats(index) -> dict:
    index_bytes, kv_bytes, ratio = index_memory_bytes(index)
    return {
        "M": index.n_chunks,
        "L": index.n_fine,
        "P": index.n_coarse,
        "mean_radius_fine": float(np.mean(index.fine_radii)),
        "mean_radius_coarse": float(np.mean(index.coarse_radii)),
        "index_bytes": index_bytes,
        "kv_bytes": kv_bytes,
        "ratio": ratio,
    }


def cmd_build(args, cfg: RunConfig, out: Optional[Path]) -> int:
    if args.input:
        store = _load_tokens(args.input)
        levels = boundary_levels(store.records(), cfg.chunk)
    else:
        spec = cfg.workload if args.tokens is None else dataclasses.replace(cfg.workload, n_tokens=args.tokens)
        wl = gen_clustered_workload(spec)
        store, levels = wl.store(), wl.boundaries
    index = build_index(store, segment_levels(levels, cfg.chunk), cfg.index)
    stats = _stats(index)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_index(index, out / "index.npz")
        (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    sys.stdout.write(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    return EXIT_OK if covering_violations(index) == 0 else EXIT_AUDIT


def _load_vector(path: str) -> np.ndarray:
    if path.endswith(".npy"):
        return np.load(path, allow_pickle=False)
    return np.asarray(json.loads(Path(path).read_text()), dtype=float)


def cmd_query(args, cfg: RunConfig, out: Optional[Path]) -> int:
    index = load_index(args.index)
    q = _load_vector(args.query)
    try:
        res = query(index, q, _budgets(args, cfg.budgets))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    payload = {
        "selected_clusters": res.selected_clusters,
        "active_count": int(len(res.active_token_ids)),
        "scanned_centroids": res.scanned_centroids,
        "output_vector": res.output.tolist(),
    }
    _write(json.dumps(payload) + "\n", out, "query.json")
    return EXIT_OK


def cmd_stream(args, cfg: RunConfig, out: Optional[Path]) -> int:
    lines: list[str] = []

    def emit(row):
        line = json.dumps(row) + "\n"
        if out is None:
            sys.stdout.write(line)
        else:
            lines.append(line)

    summary = run_stream(
        cfg.workload,
        prefill=args.prefill,
        steps=args.steps,
        budgets=_budgets(args, cfg.budgets),
        policy=cfg.chunk,
        index_cfg=cfg.index,
        graft_scope=args.graft_scope,
        window=args.window,
        sink=emit,
    )
    final = {k: v for k, v in summary.items() if not k.endswith("_series")}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "stream.jsonl").write_text("".join(lines))
        (out / "stream_summary.json").write_text(json.dumps(final, indent=2, sort_keys=True) + "\n")
    sys.stdout.write(json.dumps({"summary": final}) + "\n")
    return EXIT_OK if final["covering_violations"] == 0 else EXIT_AUDIT


def cmd_bench(args, cfg: RunConfig, out: Optional[Path]) -> int:
    summary = run_bench(cfg, out_dir=out or Path("bench_out"), timings=args.timings)
    audit = summary["audit"]
    sys.stdout.write(json.dumps({"cells": len(summary["cells"]), "audit": audit}) + "\n")
    return EXIT_OK if audit["ok"] else EXIT_AUDIT


def cmd_export(args, cfg: RunConfig, out: Optional[Path]) -> int:
    index = load_index(args.index)
    target = Path(args.csv) if args.csv else (out or Path(".")) / "chunks.csv"
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["chunk_id", "cluster_id", "unit_id"] + [f"k{i}" for i in range(index.dim)])
        for j in range(index.n_chunks):
            c = index.chunk_cluster[j]
            w.writerow([j, c, int(index.cluster_unit[c])] + [repr(float(x)) for x in index.rep_keys[j]])
    sys.stdout.write(f"{target}\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    def global_flags(default):
        # subcommands use SUPPRESS so they don't clobber flags given before the command
        g = argparse.ArgumentParser(add_help=False)
        g.add_argument("--seed", type=int, default=default)
        g.add_argument("--config", default=default, help="JSON run config")
        g.add_argument("--out", default=default, help="output directory")
        g.add_argument("-v", "--verbose", action="store_true", default=default or False)
        return g

    top = global_flags(None)
    common = global_flags(argparse.SUPPRESS)

    budget_flags = argparse.ArgumentParser(add_help=False)
    budget_flags.add_argument("--k-g", dest="k_g", type=int)
    budget_flags.add_argument("--k-c", dest="k_c", type=int)
    budget_flags.add_argument("--budget", dest="token_budget", type=int)
    budget_flags.add_argument("--sink", dest="sink_size", type=int)

    p = _Parser(prog="stratakv", description="Hierarchical KV-cache retrieval engine", parents=[top])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("chunk", parents=[common], help="segment a UTF-8 text file")
    c.add_argument("file")
    c.add_argument("--min-len", type=int)
    c.add_argument("--max-len", type=int)
    c.set_defaults(func=cmd_chunk)

    b = sub.add_parser("build", parents=[common], help="build an index and print stats")
    b.add_argument("--input", help="npz with keys, values[, texts, boundaries]; synthetic if absent")
    b.add_argument("--tokens", type=int, help="synthetic token count")
    b.set_defaults(func=cmd_build)

    q = sub.add_parser("query", parents=[common, budget_flags], help="query a saved index")
    q.add_argument("index")
    q.add_argument("query", help=".npy or JSON list")
    q.set_defaults(func=cmd_query)

    s = sub.add_parser("stream", parents=[common, budget_flags], help="prefill then decode a synthetic stream")
    s.add_argument("--prefill", type=int, default=8192)
    s.add_argument("--steps", type=int, default=1000)
    s.add_argument("--graft-scope", choices=("scoped", "full"), default="scoped")
    s.add_argument("--window", type=int, default=32)
    s.set_defaults(func=cmd_stream)

    be = sub.add_parser("bench", parents=[common], help="run the sweep and write reports")
    be.add_argument("--timings", action="store_true", help="also write wall-clock timings.json")
    be.set_defaults(func=cmd_bench)

    e = sub.add_parser("export", parents=[common], help="CSV of chunk reps and labels")
    e.add_argument("index")
    e.add_argument("--csv")
    e.set_defaults(func=cmd_export)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    seed = args.seed if args.seed is not None else _env("seed")
    config = args.config or _env("config")
    out = args.out or _env("out")
    try:
        cfg = _load_config(config, int(seed) if seed is not None else None)
        return args.func(args, cfg, Path(out) if out else None)
    except (UsageError, ValueError, OSError) as exc:
        print(f"stratakv: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""aanet-cli: feature I/O checks, retrieval, mining, evaluation, benchmarks.

Exit codes: 0 success, 1 usage error, 2 data error (unreadable or
malformed inputs). All randomness funnels through ``--seed``; every
command except the wall-clock numbers of ``bench`` is byte-deterministic
given the same seed and inputs.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import evalkit, mining, retrieval
from .alignment import (
    build_distance_matrix,
    format_alignment_debug,
    normalized_dtw_align,
)
from .descriptor import (
    AXIS_HORIZONTAL,
    AXIS_VERTICAL,
    GemParams,
    downsample_grid,
    gem_pool,
    split_regional,
)
from .tensorio import (
    AAFMError,
    GlobalDescriptor,
    ManifestError,
    load_feature_map,
    read_manifest,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

_DATA_ERRORS = (AAFMError, ManifestError, retrieval.IndexBuildError, ValueError, OSError, KeyError)


@dataclass
class RunConfig:
    """Resolved options for one command; defaults need no config file."""

    command: str
    manifest: Optional[Path] = None
    out: Path = Path(".")
    gem_p: float = 3.0
    k_rerank: int = 20
    mining_cfg: mining.MiningConfig = field(default_factory=mining.MiningConfig)
    seed: int = 0
    workers: int = 0  # 0 = available cores
    verbose: bool = False

    @property
    def gem(self) -> GemParams:
        return GemParams(p=self.gem_p)

    @property
    def worker_count(self) -> int:
        return self.workers if self.workers > 0 else (os.cpu_count() or 1)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_config_file(path: Path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ManifestError(f"{path}:{lineno}: expected key=value")
        key, _, value = line.partition("=")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def build_parser() -> tuple[_Parser, dict[str, argparse.ArgumentParser]]:
    parser = _Parser(prog="aanet-cli", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key=value defaults, overridden by flags")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    subparsers: dict[str, argparse.ArgumentParser] = {}

    def command(name: str, help: str) -> argparse.ArgumentParser:
        subparsers[name] = sub.add_parser(name, parents=[common], help=help)
        return subparsers[name]

    p = command("retrieve", "two-stage retrieval over a manifest")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--gem-p", type=float, default=3.0)
    p.add_argument("--k-rerank", type=int, default=20)
    p.add_argument("--workers", type=int, default=0, help="0 = available cores")

    p = command("mine", "semi-hard positive and hard negative mining")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--gem-p", type=float, default=3.0)
    p.add_argument("--k", type=float, default=0.3,
                   help="global-rank cutoff: fraction below 1, else an absolute rank")
    p.add_argument("--k-prime", type=float, default=0.3)
    p.add_argument("--margin", type=float, default=0.1)
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--negatives", type=int, default=2)
    p.add_argument("--pool", type=int, default=1000)

    p = command("eval", "recall and PR from a records CSV")
    p.add_argument("--records", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True, help="source of geotag ground truth")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--recall-ns", type=int, nargs="+", default=[1, 5, 10, 20])

    p = command("gen", "generate a synthetic shifted feature set")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--channels", type=int, default=384)
    p.add_argument("--db-size", type=int, default=30)
    p.add_argument("--queries", type=int, default=20)
    p.add_argument("--shift-cols", type=int, nargs=2, default=[1, 2], metavar=("LO", "HI"))
    p.add_argument("--shift-rows", type=int, nargs=2, default=[0, 0], metavar=("LO", "HI"))
    p.add_argument("--sigma", type=float, default=0.02)

    p = command("bench", "DALF vs naive alignment benchmark")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--pairs", type=int, default=200)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--channels", type=int, default=384)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--k-rerank", type=int, default=20)

    p = command("inspect", "print AAFM headers or an alignment dump")
    p.add_argument("files", type=Path, nargs="+")
    p.add_argument("--dump-alignment", action="store_true",
                   help="treat the two files as (reference, query) and dump both axes")
    return parser, subparsers


def _apply_config_file(
    parser: _Parser,
    subparsers: dict[str, argparse.ArgumentParser],
    argv: list[str],
) -> argparse.Namespace:
    """Load key=value defaults; explicit flags still win (scalar keys only)."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config", type=Path)
    known, _ = probe.parse_known_args(argv)
    if known.config is not None:
        values = _read_config_file(known.config)
        matched = set()
        for sub in subparsers.values():
            dests = {a.dest for a in sub._actions}
            applicable = {k: v for k, v in values.items() if k in dests}
            sub.set_defaults(**applicable)
            matched.update(applicable)
        unknown = set(values) - matched
        if unknown:
            raise ManifestError(f"unknown config keys: {sorted(unknown)}")
    return parser.parse_args(argv)


def _write(path: Path, text: str, verbose: bool) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    if verbose:
        print(f"wrote {path}", file=sys.stderr)


def _records_csv(records: Sequence[retrieval.RetrievalRecord]) -> str:
    lines = ["query_id,stage,rank,image_id,distance"]
    for r in records:
        for rank, (i, d) in enumerate(r.stage1, start=1):
            lines.append(f"{r.query_id},1,{rank},{i},{d!r}")
        for rank, (i, d) in enumerate(r.stage2, start=1):
            lines.append(f"{r.query_id},2,{rank},{i},{d!r}")
    return "\n".join(lines) + "\n"


def _records_from_csv(path: Path) -> list[retrieval.RetrievalRecord]:
    stage1: dict[str, list[tuple[str, float]]] = {}
    stage2: dict[str, list[tuple[str, float]]] = {}
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "query_id,stage,rank,image_id,distance":
        raise ManifestError(f"{path}: not a records CSV")
    for line in lines[1:]:
        if not line:
            continue
        query_id, stage, _, image_id, dist = line.split(",")
        bucket = stage1 if stage == "1" else stage2
        bucket.setdefault(query_id, []).append((image_id, float(dist)))
    records = []
    for query_id in sorted(stage1):
        s2 = stage2.get(query_id, [])
        records.append(
            retrieval.RetrievalRecord(
                query_id, tuple(stage1[query_id]), tuple(s2), max(len(s2), 1)
            )
        )
    return records


def _eval_reports(records, manifest, recall_ns, out_dir: Path, verbose: bool) -> None:
    gt = evalkit.ground_truth_from_geotags(manifest)
    if not any(gt.positives(r.query_id) for r in records):
        print("no geotag ground truth; skipping recall/PR reports", file=sys.stderr)
        return
    db_size = len(manifest.database_entries())
    ns = sorted({min(n, db_size) for n in recall_ns})
    recalls = evalkit.recall_at_n(records, gt, ns)
    _write(out_dir / "recall.csv", evalkit.recall_csv(recalls), verbose)
    points = evalkit.pr_curve(records, gt)
    _write(out_dir / "pr.csv", evalkit.pr_csv(points), verbose)
    for n in ns:
        print(f"R@{n} = {recalls[n]:.1f}")


def cmd_retrieve(cfg: RunConfig, args) -> int:
    manifest = read_manifest(cfg.manifest)
    index = retrieval.build_index(manifest, cfg.gem)
    queries = manifest.query_entries()
    if not queries:
        raise ManifestError("manifest has no query entries")

    def run(entry):
        fmap = load_feature_map(entry.path)
        return retrieval.retrieve(
            index, fmap, k_rerank=cfg.k_rerank, gem=cfg.gem, query_id=entry.image_id
        )

    with ThreadPoolExecutor(max_workers=cfg.worker_count) as pool:
        records = list(pool.map(run, queries))
    records.sort(key=lambda r: r.query_id)
    _write(cfg.out / "records.csv", _records_csv(records), cfg.verbose)
    _eval_reports(records, manifest, [1, 5, 10, 20], cfg.out, cfg.verbose)
    return EXIT_OK


def cmd_mine(cfg: RunConfig, args) -> int:
    manifest = read_manifest(cfg.manifest)
    index = retrieval.build_index(manifest, cfg.gem)
    tuples = mining.build_training_tuples(manifest, cfg.mining_cfg)
    if not tuples:
        raise ManifestError("no usable training tuples (check geotags)")
    query_entries = {e.image_id: e for e in manifest.query_entries()}
    row_of = {i: t for t, i in enumerate(index.ids)}
    rng = np.random.default_rng(cfg.seed)
    outcomes = []
    for tup in tuples:
        entry = query_entries[tup.query_id]
        fmap = load_feature_map(entry.path)
        q_desc, q_grid = gem_pool(fmap, cfg.gem), downsample_grid(fmap)
        positives = [
            (i, GlobalDescriptor(index.descriptors[row_of[i]]), index.grids[i])
            for i in tup.positives
        ]
        pool_ids = mining.sample_negative_pool(
            tup.negatives, cfg.mining_cfg.negative_pool, rng
        )
        pool = [
            (i, GlobalDescriptor(index.descriptors[row_of[i]])) for i in pool_ids
        ]
        outcomes.append(
            mining.mine_query(q_desc, q_grid, tup.query_id, positives, pool, cfg.mining_cfg)
        )
    _write(cfg.out / "mining.tsv", mining.format_mining_report(outcomes), cfg.verbose)
    print(f"mined {len(outcomes)} tuples")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    records = _records_from_csv(args.records)
    manifest = read_manifest(cfg.manifest)
    _eval_reports(records, manifest, args.recall_ns, cfg.out, cfg.verbose)
    return EXIT_OK


def cmd_gen(cfg: RunConfig, args) -> int:
    spec = evalkit.SyntheticSpec(
        n=args.n,
        channels=args.channels,
        database_size=args.db_size,
        num_queries=args.queries,
        shift_cols=tuple(args.shift_cols),
        shift_rows=tuple(args.shift_rows),
        sigma=args.sigma,
        seed=cfg.seed,
    )
    manifest_path = evalkit.write_synthetic(evalkit.generate_synthetic(spec), cfg.out)
    print(f"generated {spec.database_size} database + {spec.num_queries} query maps")
    print(f"manifest: {manifest_path}")
    return EXIT_OK


def cmd_bench(cfg: RunConfig, args) -> int:
    result = evalkit.bench_alignment(
        args.pairs, n=args.n, channels=args.channels, repetitions=args.reps, seed=cfg.seed
    )
    rerank_ns = _bench_rerank(args.n, args.channels, cfg.k_rerank, cfg.seed)
    lines = [
        "stage,ns_per_item,passes",
        f"dalf,{result.dalf_ns_per_pair!r},{result.dalf_passes_per_pair}",
        f"naive,{result.naive_ns_per_pair!r},{result.naive_passes_per_pair}",
        f"rerank_query,{rerank_ns!r},{result.dalf_passes_per_pair * cfg.k_rerank}",
    ]
    _write(cfg.out / "bench.csv", "\n".join(lines) + "\n", cfg.verbose)
    print(
        f"dalf {result.dalf_ns_per_pair / 1e3:.1f} us/pair"
        f" vs naive {result.naive_ns_per_pair / 1e3:.1f} us/pair"
        f" (ratio {result.ratio:.1f}x)"
    )
    return EXIT_OK


def _bench_rerank(n: int, channels: int, k_rerank: int, seed: int) -> float:
    """Median per-query latency of re-ranking k_rerank candidates."""
    rng = np.random.default_rng(seed)
    query = evalkit.random_grid(rng, n, channels)
    grids = {f"c{t}": evalkit.random_grid(rng, n, channels) for t in range(k_rerank)}
    ids = tuple(grids)
    descriptors = np.zeros((k_rerank, 1), dtype=np.float32)  # unused by rerank
    index = retrieval.DescriptorIndex(ids, descriptors, grids)
    retrieval.rerank(index, query, ids)
    times = []
    for _ in range(5):
        t0 = time.perf_counter_ns()
        retrieval.rerank(index, query, ids)
        times.append(float(time.perf_counter_ns() - t0))
    times.sort()
    return times[len(times) // 2]


def cmd_inspect(cfg: RunConfig, args) -> int:
    if args.dump_alignment:
        if len(args.files) != 2:
            raise ManifestError("--dump-alignment needs exactly two files")
        ref = downsample_grid(load_feature_map(args.files[0]))
        qry = downsample_grid(load_feature_map(args.files[1]))
        for axis in (AXIS_HORIZONTAL, AXIS_VERTICAL):
            d = build_distance_matrix(split_regional(ref, axis), split_regional(qry, axis))
            path, cum = normalized_dtw_align(d)
            print(f"== axis {axis}")
            print(format_alignment_debug(d, cum, path), end="")
        return EXIT_OK
    for path in args.files:
        fmap = load_feature_map(path)
        size = path.stat().st_size
        print(
            f"{path}: W={fmap.width} H={fmap.height} C={fmap.channels}"
            f" ({size} bytes, min={fmap.data.min():.4f}, max={fmap.data.max():.4f})"
        )
    return EXIT_OK


_COMMANDS = {
    "retrieve": cmd_retrieve,
    "mine": cmd_mine,
    "eval": cmd_eval,
    "gen": cmd_gen,
    "bench": cmd_bench,
    "inspect": cmd_inspect,
}


def _run_config(args: argparse.Namespace) -> RunConfig:
    mining_cfg = mining.MiningConfig(
        k=_cutoff(getattr(args, "k", 0.3)),
        k_prime=_cutoff(getattr(args, "k_prime", 0.3)),
        margin=getattr(args, "margin", 0.1),
        lam=getattr(args, "lam", 1.0),
        negatives_per_triplet=getattr(args, "negatives", 2),
        negative_pool=getattr(args, "pool", 1000),
        seed=args.seed,
    )
    return RunConfig(
        command=args.command,
        manifest=getattr(args, "manifest", None),
        out=getattr(args, "out", Path(".")),
        gem_p=float(getattr(args, "gem_p", 3.0)),
        k_rerank=int(getattr(args, "k_rerank", 20)),
        mining_cfg=mining_cfg,
        seed=args.seed,
        workers=int(getattr(args, "workers", 0)),
        verbose=args.verbose,
    )


def _cutoff(value) -> int | float:
    value = float(value)
    return int(value) if value >= 1.0 and value.is_integer() else value


def main(argv: Optional[list[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subparsers = build_parser()
    try:
        args = _apply_config_file(parser, subparsers, argv)
        return _COMMANDS[args.command](_run_config(args), args)
    except _DATA_ERRORS as e:
        print(f"aanet-cli: error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

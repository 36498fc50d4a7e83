"""Command-line pipeline: preprocess, match, index, query, simulate,
evaluate and bench.

Every command writes its artifacts plus ``manifest.json`` into ``--out``.
Outputs are written to a temporary name first and renamed into place, so a
failing stage never clobbers earlier artifacts.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy

from . import __version__
from .codec import read_store, write_store
from .ingest import (FilterConfig, TowerSequence, build_sequences, format_time, load_towers,
                     parse_records, parse_time, preprocess)
from .mapmatch import CandidateSet, MatchConfig, MatchError, expand_candidates, match_gps
from .roadnet import RoadNetwork, load_network
from .simsearch import (Dataset, EmptyQueryError, QueryResult, SearchConfig, search,
                        summarize)
from .simulate import (BenchmarkConfig, evaluate_matching, evaluate_search, load_world,
                       save_world, synthesize_benchmark)

logger = logging.getLogger("celltraj")

SECTIONS = {
    "filter": FilterConfig,
    "match": MatchConfig,
    "search": SearchConfig,
    "bench": BenchmarkConfig,
}
RUN_KEYS = {"workers"}


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config
def _coerce(value, default, key):
    """Convert a config-file string (or flag value) to the default's type."""
    if not isinstance(value, str):
        return value
    text = value.strip()
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {value!r}") from None
    if isinstance(default, float):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    if isinstance(default, tuple):
        try:
            parsed = json.loads(text)
        except json.JSONDecodeError:
            parsed = [_scalar(p.strip()) for p in text.split(",") if p.strip()]
        return _to_tuple(parsed)
    if default is None:
        if text.lower() in ("none", ""):
            return None
        try:
            return json.loads(text)
        except json.JSONDecodeError:
            return text
    return text


def _scalar(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _to_tuple(v):
    if isinstance(v, list):
        return tuple(_to_tuple(x) for x in v)
    return v


def _field_owner() -> dict[str, str]:
    owner = {}
    for section, cls in SECTIONS.items():
        for f in fields(cls):
            owner.setdefault(f.name, section)
    return owner


@dataclass
class RunConfig:
    filter: FilterConfig = field(default_factory=FilterConfig)
    match: MatchConfig = field(default_factory=MatchConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    bench: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    workers: int = 1

    @classmethod
    def build(cls, file_values: dict[str, str] | None = None, overrides: dict | None = None) -> "RunConfig":
        """Defaults, then config-file values, then flag overrides.

        Keys are bare field names; a key shared by several sections (``seed``
        is the only one) may be qualified as ``section.key``.
        """
        owner = _field_owner()
        per_section: dict[str, dict] = {s: {} for s in SECTIONS}
        workers = 1
        merged = dict(file_values or {})
        merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
        unknown = []
        for key, value in merged.items():
            if key in RUN_KEYS:
                workers = int(value)
                continue
            section, _, name = key.rpartition(".")
            if section and section not in SECTIONS:
                unknown.append(key)
                continue
            section = section or owner.get(name)
            if section is None or name not in {f.name for f in fields(SECTIONS[section])}:
                unknown.append(key)
                continue
            default = getattr(SECTIONS[section](), name)
            per_section[section][name] = _coerce(value, default, key)
        if unknown:
            raise ConfigError("unknown config keys: " + ", ".join(sorted(unknown)))
        if workers < 1:
            raise ConfigError("workers must be >= 1")
        try:
            built = {s: SECTIONS[s](**kw) for s, kw in per_section.items()}
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return cls(workers=workers, **built)

    def to_dict(self) -> dict:
        out = {s: dataclasses.asdict(getattr(self, s)) for s in SECTIONS}
        out["workers"] = self.workers
        return out

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()


def read_config_file(path) -> dict[str, str]:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


# --------------------------------------------------------------- artifacts
def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@contextmanager
def atomic_path(path: Path):
    """Yield a temporary sibling path; rename it onto ``path`` on success."""
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def write_text(path: Path, text: str) -> None:
    with atomic_path(path) as tmp:
        tmp.write_text(text)


def write_manifest(out: Path, command: str, cfg: RunConfig, argv: Sequence[str],
                   inputs: Iterable[Path] = (), extra: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": cfg.to_dict(),
        "config_sha256": cfg.digest(),
        "seed": cfg.bench.seed,
        "versions": {
            "celltraj": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "inputs": {str(p): _sha256(Path(p)) for p in inputs if Path(p).is_file()},
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    write_text(path, json.dumps(manifest, indent=1, sort_keys=True, default=str) + "\n")
    return path


# ------------------------------------------------------------- worker pool
_POOL_STATE: dict = {}


def _pool_init(state):
    _POOL_STATE.clear()
    _POOL_STATE.update(state)


def _match_one(seq: TowerSequence):
    s = _POOL_STATE
    try:
        return expand_candidates(seq, s["towers"], s["net"], s["cfg"], s["m"]), None
    except MatchError as exc:
        return None, f"{seq.user_id}: {exc}"


def map_pool(fn, items: Sequence, workers: int, state: dict, chunksize: int = 8) -> list:
    """Run ``fn`` over ``items`` with a fixed pool; ``state`` is shared,
    read-only input made available to every worker."""
    if workers <= 1 or len(items) <= 1:
        _pool_init(state)
        return [fn(x) for x in items]
    with ProcessPoolExecutor(workers, initializer=_pool_init, initargs=(state,)) as ex:
        return list(ex.map(fn, items, chunksize=chunksize))


def match_sequences(seqs: Sequence[TowerSequence], towers, net: RoadNetwork, cfg: MatchConfig,
                    workers: int = 1, m: int | None = None) -> tuple[list[CandidateSet], list[str]]:
    out = map_pool(_match_one, list(seqs), workers, {"towers": towers, "net": net, "cfg": cfg, "m": m})
    sets = [cs for cs, _ in out if cs is not None]
    errors = [e for _, e in out if e is not None]
    return sets, errors


def _query_one(i):
    s = _POOL_STATE
    q = s["dataset"].sets[i]
    try:
        rep = search(q, s["dataset"], s["cfg"], s["m_max"])
        return q.sequence_id, rep.results, dataclasses.asdict(rep.stats), None
    except EmptyQueryError as exc:
        return q.sequence_id, [], None, str(exc)


def query_all(dataset: Dataset, cfg: SearchConfig, m_max: int | None = None, workers: int = 1):
    """Use every dataset entry as a query; returns (results by id, stats, errors)."""
    out = map_pool(_query_one, list(range(len(dataset))), workers,
                   {"dataset": dataset, "cfg": cfg, "m_max": m_max})
    results = {qid: res for qid, res, _, _ in out}
    stats = {qid: st for qid, _, st, _ in out if st is not None}
    errors = {qid: err for qid, _, _, err in out if err is not None}
    return results, stats, errors


# ----------------------------------------------------------------- reports
RESULT_HEADER = ["query_id", "entry_id", "similarity", "query_rank", "entry_rank"]


def results_csv(results: dict[str, list[QueryResult]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_HEADER)
    for qid in sorted(results):
        for r in results[qid]:
            qr, tr = r.ranks if r.ranks else ("", "")
            w.writerow([qid, r.entry_id, f"{r.similarity:.6f}", qr, tr])
    return buf.getvalue()


def read_results_csv(path) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header != RESULT_HEADER:
            raise ValueError(f"{path}: not a results file")
        for row in rows:
            out.setdefault(row[0], []).append(row[1])
    return out


def _read_sequences(path, towers) -> list[TowerSequence]:
    records, skipped = parse_records(Path(path).read_text().splitlines())
    if skipped:
        logger.warning("%s: skipped %d malformed lines", path, skipped)
    return build_sequences([r for r in records if r.tower in towers])


def _load_inputs(args):
    net = load_network(args.network)
    towers = load_towers(args.towers, net.project)
    return net, towers


def _require(*paths):
    for p in paths:
        if p is None:
            continue
        if not Path(p).exists():
            raise FileNotFoundError(f"input not found: {p}")


def _read_gps(path, net: RoadNetwork):
    """``time,lon,lat`` rows; time is epoch seconds or YYYYMMDDhhmmss."""
    pts = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or (lineno == 1 and line.replace(" ", "") == "time,lon,lat"):
            continue
        t, lon, lat = (p.strip() for p in line.split(","))
        ts = parse_time(t) if len(t) == 14 and t.isdigit() else float(t)
        x, y = net.project(float(lon), float(lat))
        pts.append((float(ts), x, y))
    pts.sort()
    return pts


# ---------------------------------------------------------------- commands
def cmd_preprocess(args, cfg: RunConfig) -> dict:
    _require(args.records, args.towers, args.network)
    net, towers = _load_inputs(args)
    seqs, stats = preprocess(Path(args.records).read_text().splitlines(), towers, cfg.filter)
    out = Path(args.out)
    with atomic_path(out / "sequences.csv") as tmp:
        with open(tmp, "w") as fh:
            fh.write("id,time,lac,cid\n")
            for s in seqs:
                for t, (lac, cid) in s.points:
                    fh.write(f"{s.user_id},{format_time(t)},{lac},{cid}\n")
    summary = {"sequences": len(seqs), "points": sum(len(s) for s in seqs),
               **dataclasses.asdict(stats)}
    write_text(out / "preprocess.json", json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(f"preprocess: {len(seqs)} sequences, {summary['points']} points, removed {sum(stats.removed.values())} noisy points")
    return {"inputs": [args.records, args.towers, args.network]}


def cmd_match(args, cfg: RunConfig) -> dict:
    _require(args.sequences, args.towers, args.network)
    net, towers = _load_inputs(args)
    seqs = _read_sequences(args.sequences, towers)
    t0 = time.perf_counter()
    sets, errors = match_sequences(seqs, towers, net, cfg.match, cfg.workers, args.m_max)
    elapsed = time.perf_counter() - t0
    out = Path(args.out)
    with atomic_path(out / "candidates.store") as tmp:
        write_store(tmp, sets)
    if errors:
        write_text(out / "match_errors.txt", "\n".join(errors) + "\n")
    print(f"match: {len(sets)} candidate sets, {len(errors)} failures, {elapsed:.2f}s "
          f"({len(seqs) / elapsed if elapsed > 0 else 0:.1f} seq/s, {cfg.workers} workers)")
    return {"inputs": [args.sequences, args.towers, args.network]}


def cmd_index(args, cfg: RunConfig) -> dict:
    _require(args.store)
    sets = read_store(args.store)
    out = Path(args.out)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "start_x", "start_y", "start_t", "end_x", "end_y", "end_t", "density",
                "length_m", "candidates"])
    for cs in sets:
        s = summarize(cs)
        w.writerow([cs.sequence_id, *(repr(v) for v in s.start), *(repr(v) for v in s.end),
                    repr(s.density), repr(s.length_m), len(cs.candidates)])
    write_text(out / "index.csv", buf.getvalue())
    print(f"index: {len(sets)} entries")
    return {"inputs": [args.store]}


def _report(results: dict[str, list[QueryResult]], stats: dict, errors: dict) -> str:
    lines = []
    for qid in sorted(results):
        st = stats.get(qid)
        head = f"query {qid}: {len(results[qid])} results"
        if st:
            head += (f" (M={st['m']}, evaluated {st['evaluated']}/{st['entries']}, "
                     f"skipped {st['skipped_global']} globally, {st['pairs_cut']} pairs cut)")
        if qid in errors:
            head += f" [error: {errors[qid]}]"
        lines.append(head)
        for r in results[qid]:
            lines.append(f"  {r.entry_id}  sim={r.similarity:.4f}  ranks={r.ranks}")
    return "\n".join(lines) + "\n"


def cmd_query(args, cfg: RunConfig) -> dict:
    _require(args.store, args.network, args.records, args.gps, args.towers)
    net = load_network(args.network)
    dataset = Dataset(read_store(args.store), net)
    inputs = [args.store, args.network]
    t0 = time.perf_counter()
    if args.query_id is None and args.records is None and args.gps is None:
        results, stats, errors = query_all(dataset, cfg.search, args.m_max, cfg.workers)
    else:
        if args.query_id is not None:
            by_id = {cs.sequence_id: cs for cs in dataset.sets}
            if args.query_id not in by_id:
                raise KeyError(f"query id {args.query_id!r} not in store")
            q = by_id[args.query_id]
        elif args.records is not None:
            if args.towers is None:
                raise ValueError("--records needs --towers")
            towers = load_towers(args.towers, net.project)
            seqs = _read_sequences(args.records, towers)
            if len(seqs) != 1:
                raise ValueError(f"query file holds {len(seqs)} sequences, expected 1")
            q = expand_candidates(seqs[0], towers, net, cfg.match)
            inputs += [args.records, args.towers]
        else:
            q = match_gps(Path(args.gps).stem, _read_gps(args.gps, net), net, cfg.match)
            inputs.append(args.gps)
        rep = search(q, dataset, cfg.search, args.m_max, workers=cfg.workers)
        results, stats, errors = ({q.sequence_id: rep.results},
                                  {q.sequence_id: dataclasses.asdict(rep.stats)}, {})
    elapsed = time.perf_counter() - t0
    out = Path(args.out)
    write_text(out / "results.csv", results_csv(results))
    write_text(out / "report.txt", _report(results, stats, errors))
    n = sum(len(v) for v in results.values())
    print(f"query: {len(results)} queries, {n} result rows, {elapsed:.2f}s")
    return {"inputs": inputs}


def cmd_simulate(args, cfg: RunConfig) -> dict:
    world = synthesize_benchmark(cfg.bench)
    out = Path(args.out)
    save_world(world, out / "world")
    print(f"simulate: {len(world.truth.members)} phones, {len(world.truth.groups)} groups, "
          f"{len(world.records)} records, {len(world.towers)} towers")
    return {}


def cmd_evaluate(args, cfg: RunConfig) -> dict:
    _require(args.world, args.results, args.store)
    world = load_world(args.world)
    results = read_results_csv(args.results)
    inputs = [args.results]
    if args.store:
        sets = read_store(args.store)
        # queries with no rows still count, with an empty answer
        for cs in sets:
            results.setdefault(cs.sequence_id, [])
        mm = evaluate_matching({cs.sequence_id: cs.candidates[0] for cs in sets},
                               world.truth, world.network)
        inputs.append(args.store)
    else:
        mm = None
    m = evaluate_search(results, world.truth)
    if mm is not None:
        m.matching_precision = mm.matching_precision
        m.matching_recall = mm.matching_recall
    metrics = {k: v for k, v in dataclasses.asdict(m).items() if k != "per_query"}
    out = Path(args.out)
    write_text(out / "metrics.json", json.dumps(metrics, indent=1, sort_keys=True) + "\n")
    print(f"evaluate: precision={m.precision:.4f} recall={m.recall:.4f} F={m.f_measure:.4f} "
          f"({m.queries} queries, {m.excluded} excluded)"
          + (f" matching P={m.matching_precision:.4f} R={m.matching_recall:.4f}" if mm else ""))
    return {"inputs": inputs}


def bench_matching(seqs, towers, net, cfg: MatchConfig, worker_counts: Sequence[int],
                   repeats: int = 1) -> list[dict]:
    """Matching throughput (sequences/s) for each worker count."""
    rows = []
    for w in worker_counts:
        best = math.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            match_sequences(seqs, towers, net, cfg, w)
            best = min(best, time.perf_counter() - t0)
        rows.append({"stage": "match", "workers": w, "size": len(seqs), "seconds": best,
                     "throughput": len(seqs) / best if best > 0 else math.inf})
    return rows


def bench_query(dataset: Dataset, queries: Sequence[CandidateSet], cfg: SearchConfig,
                sizes: Sequence[int]) -> list[dict]:
    """Query time per pruning combination and dataset size."""
    rows = []
    for size in sizes:
        sub = Dataset(dataset.sets[:size], dataset.net)
        for g, l in ((True, True), (True, False), (False, True), (False, False)):
            c = dataclasses.replace(cfg, global_pruning=g, local_pruning=l)
            t0 = time.perf_counter()
            hits = 0
            for q in queries:
                try:
                    hits += len(search(q, sub, c).results)
                except EmptyQueryError:
                    pass
            rows.append({"stage": "query", "size": size, "global_pruning": g, "local_pruning": l,
                         "seconds": time.perf_counter() - t0, "results": hits})
    return rows


def cmd_bench(args, cfg: RunConfig) -> dict:
    _require(args.world)
    world = load_world(args.world) if args.world else synthesize_benchmark(cfg.bench)
    net, towers = world.network, world.towers
    lines = ["id,time,lac,cid"] + [f"{r.user_id},{format_time(r.timestamp)},{r.lac},{r.cid}"
                                   for r in world.records]
    seqs, _ = preprocess(lines, towers, cfg.filter)
    workers = [int(w) for w in args.worker_sweep.split(",")]
    rows = bench_matching(seqs, towers, net, cfg.match, workers, args.repeats)
    sets, _ = match_sequences(seqs, towers, net, cfg.match, cfg.workers)
    sizes = sorted({min(len(sets), int(s)) for s in args.sizes.split(",")}) if args.sizes else [len(sets)]
    queries = sets[:args.queries]
    rows += bench_query(Dataset(sets, net), queries, cfg.search, sizes)
    keys = ["stage", "workers", "size", "global_pruning", "local_pruning", "seconds", "throughput",
            "results"]
    buf = io.StringIO()
    w = csv.DictWriter(buf, keys, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    out = Path(args.out)
    write_text(out / "bench.csv", buf.getvalue())
    base = next(r for r in rows if r["stage"] == "match")["throughput"]
    for r in rows:
        if r["stage"] == "match":
            print(f"match  workers={r['workers']:<3} {r['throughput']:8.1f} seq/s  "
                  f"speedup {r['throughput'] / base:5.2f}")
        else:
            print(f"query  size={r['size']:<6} global={r['global_pruning']!s:<5} "
                  f"local={r['local_pruning']!s:<5} {r['seconds']:8.3f}s")
    return {"inputs": [args.world] if args.world else []}


COMMANDS = {
    "preprocess": cmd_preprocess,
    "match": cmd_match,
    "index": cmd_index,
    "query": cmd_query,
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--workers", type=int, help="worker processes")
    common.add_argument("--tau", type=float, help="similarity threshold")
    common.add_argument("--epsilon", type=float, help="base global-prune radius")
    common.add_argument("--m-max", type=int, dest="m_max", help="cap on candidates per set")
    common.add_argument("--no-global-prune", action="store_true")
    common.add_argument("--no-local-prune", action="store_true")
    common.add_argument("--seed", type=int, help="benchmark seed")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="celltraj", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("preprocess", parents=[common], help="filter raw records into sequences")
    s.add_argument("--records", required=True)
    s.add_argument("--towers", required=True)
    s.add_argument("--network", required=True)

    s = sub.add_parser("match", parents=[common], help="map-match sequences into a candidate store")
    s.add_argument("--sequences", required=True)
    s.add_argument("--towers", required=True)
    s.add_argument("--network", required=True)

    s = sub.add_parser("index", parents=[common], help="write pruning summaries of a store")
    s.add_argument("--store", required=True)

    s = sub.add_parser("query", parents=[common], help="similarity search against a store")
    s.add_argument("--store", required=True)
    s.add_argument("--network", required=True)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--query-id", help="use a stored entry as the query")
    g.add_argument("--records", help="tower-sequence CSV holding one query sequence")
    g.add_argument("--gps", help="GPS trace CSV (time,lon,lat)")
    s.add_argument("--towers", help="tower CSV, needed with --records")

    sub.add_parser("simulate", parents=[common], help="generate a synthetic benchmark world")

    s = sub.add_parser("evaluate", parents=[common], help="score query results against truth")
    s.add_argument("--world", required=True)
    s.add_argument("--results", required=True)
    s.add_argument("--store", help="candidate store, adds matching precision/recall")

    s = sub.add_parser("bench", parents=[common], help="time matching and querying")
    s.add_argument("--world", help="world directory (default: simulate one)")
    s.add_argument("--worker-sweep", default="1,2,4,8")
    s.add_argument("--sizes", help="comma-separated dataset sizes for the query sweep")
    s.add_argument("--queries", type=int, default=20)
    s.add_argument("--repeats", type=int, default=1)
    return p


def config_from_args(args) -> RunConfig:
    file_values = read_config_file(args.config) if args.config else {}
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.tau is not None:
        overrides["tau"] = args.tau
    if args.epsilon is not None:
        overrides["epsilon0"] = args.epsilon
    if args.m_max is not None:
        overrides["m_max"] = args.m_max
    if args.no_global_prune:
        overrides["global_pruning"] = False
    if args.no_local_prune:
        overrides["local_pruning"] = False
    if args.seed is not None:
        overrides["bench.seed"] = args.seed
    return RunConfig.build(file_values, overrides)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        if args.m_max is None:
            args.m_max = cfg.match.m_max
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        info = COMMANDS[args.command](args, cfg) or {}
        write_manifest(out, args.command, cfg, argv, [Path(p) for p in info.get("inputs", [])],
                       {"elapsed_s": round(time.perf_counter() - t0, 3)})
    except (ConfigError, FileNotFoundError, KeyError, ValueError, MatchError, OSError) as exc:
        print(f"celltraj {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

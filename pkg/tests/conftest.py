from __future__ import annotations

import functools
import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from celltraj.ingest import CellTower, TowerSequence
from celltraj.roadnet import planar_network

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def grid_net(rows: int, cols: int, block: float = 100.0, speed: float = 50.0):
    """Two-way grid; node r*cols+c sits at (c*block, r*block).

    Returns (network, seg) where ``seg[(u, v)]`` is the segment id u -> v.
    """
    nodes = {r * cols + c: (c * block, r * block) for r in range(rows) for c in range(cols)}
    edges, seg = [], {}
    for r in range(rows):
        for c in range(cols):
            u = r * cols + c
            for v in ((u + 1) if c + 1 < cols else None, (u + cols) if r + 1 < rows else None):
                if v is None:
                    continue
                for a, b in ((u, v), (v, u)):
                    seg[(a, b)] = len(edges)
                    edges.append((len(edges), a, b, speed))
    return planar_network(nodes, edges), seg


@functools.lru_cache(maxsize=None)
def random_net(seed: int, n: int = 12, extra: int = 14, size: float = 1000.0):
    """Strongly connected random directed graph: a two-way ring through all
    nodes plus ``extra`` random one-way chords."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, size, (n, 2))
    nodes = {i: (float(x), float(y)) for i, (x, y) in enumerate(pts)}
    pairs = set()
    for i in range(n):
        pairs.add((i, (i + 1) % n))
        pairs.add(((i + 1) % n, i))
    while len(pairs) < 2 * n + extra:
        a, b = (int(v) for v in rng.integers(0, n, 2))
        if a != b:
            pairs.add((a, b))
    speeds = (30.0, 50.0, 60.0, 80.0, 120.0)
    edges = [(k, a, b, speeds[int(rng.integers(0, len(speeds)))])
             for k, (a, b) in enumerate(sorted(pairs))]
    return planar_network(nodes, edges)


def tower(x: float, y: float, density: float = 50.0, lac: int = 1, cid: int = 0) -> CellTower:
    return CellTower(lac, cid, float(x), float(y), density)


def seq_of(user: str, towers_in_order, t0: int = 0, dt: int = 60) -> TowerSequence:
    return TowerSequence(user, tuple((t0 + i * dt, k) for i, k in enumerate(towers_in_order)))


def brute_distance(net, a, b) -> float:
    """Network distance by exhaustive simple-path enumeration."""
    sa, sb = net.segments[a.segment], net.segments[b.segment]
    if a.segment == b.segment and b.offset >= a.offset:
        return b.offset - a.offset
    best = math.inf
    for mids in simple_paths(net, sa.target, sb.source):
        length = sum(net.segments[s].length_m for s in mids)
        best = min(best, (sa.length_m - a.offset) + length + b.offset)
    return best


def simple_paths(net, src: int, dst: int):
    """Every node-simple directed segment sequence from ``src`` to ``dst``."""
    out = []

    def walk(u, seen, acc):
        if u == dst:
            out.append(tuple(acc))
            return
        for sid in net.adjacency[u]:
            v = net.segments[sid].target
            if v not in seen:
                seen.add(v)
                acc.append(sid)
                walk(v, seen, acc)
                acc.pop()
                seen.discard(v)

    walk(src, {src}, [])
    return out


@pytest.fixture(scope="session")
def small_world():
    """A small seeded benchmark world shared by several test modules."""
    from celltraj.simulate import BenchmarkConfig, synthesize_benchmark

    cfg = BenchmarkConfig(seed=3, rows=10, cols=10, group_count=6, background_users=6,
                          trip_km=(2.0, 4.0))
    return synthesize_benchmark(cfg)


def world_lines(world) -> list[str]:
    from celltraj.ingest import format_time

    return ["id,time,lac,cid"] + [f"{r.user_id},{format_time(r.timestamp)},{r.lac},{r.cid}"
                                  for r in world.records]


@pytest.fixture(scope="session")
def small_sets(small_world):
    """Preprocessed and expanded candidate sets for ``small_world``."""
    from celltraj.ingest import preprocess
    from celltraj.mapmatch import MatchError, expand_candidates

    seqs, _ = preprocess(world_lines(small_world), small_world.towers)
    sets = []
    for s in seqs:
        try:
            sets.append(expand_candidates(s, small_world.towers, small_world.network))
        except MatchError:
            pass
    return sets


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)

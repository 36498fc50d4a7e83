"""Overlap-ratio similarity between candidate trajectories and threshold
search over a candidate-set dataset with global and local pruning."""
from __future__ import annotations

import bisect
import logging
import math
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

from .mapmatch import CandidateSet, CandidateTrajectory
from .roadnet import RoadNetwork, search_range

logger = logging.getLogger(__name__)

# pruning keeps a small margin so float rounding never cuts a pair whose
# exact similarity reaches the threshold
_BOUND_EPS = 1e-9


class EmptyQueryError(ValueError):
    pass


@dataclass(frozen=True)
class SearchConfig:
    tau: float = 0.85
    epsilon0: float = 2.0
    space_scale: float = 1000.0
    time_scale: float = 600.0
    m_table: tuple[tuple[float, int], ...] = (
        (3000.0, 2), (6000.0, 3), (9000.0, 5), (12000.0, 6), (15000.0, 7),
    )
    m_saturation: int = 7
    local_pruning: bool = True
    global_pruning: bool = True

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise ValueError("tau must be in (0, 1]")
        if not self.epsilon0 > 0:
            raise ValueError("epsilon0 must be > 0")
        ms = [m for _, m in self.m_table] + [self.m_saturation]
        if any(b < a for a, b in zip(ms, ms[1:])) or min(ms) < 1:
            raise ValueError("m_table must be positive and non-decreasing")
        limits = [l for l, _ in self.m_table]
        if limits != sorted(limits):
            raise ValueError("m_table limits must increase")


# ---------------------------------------------------------------- alignment
class TimedTrajectory:
    """Road path parameterised by arc length plus a piecewise-linear
    time -> offset map through the anchor timestamps.

    ``pieces`` are (segment, start, end) sub-intervals of directed segments
    in travel order.
    """

    def __init__(self, pieces, anchor_offsets, anchor_times, collapsed=0):
        self.pieces = pieces
        self.cum = []
        total = 0.0
        for _, a, b in pieces:
            self.cum.append(total)
            total += b - a
        self.length = total
        self.anchor_offsets = anchor_offsets
        self.anchor_times = anchor_times
        self.collapsed = collapsed

    @property
    def span(self) -> tuple[float, float]:
        return self.anchor_times[0], self.anchor_times[-1]

    def offset_at(self, t: float) -> float | None:
        """Path offset at time ``t``; None outside the anchor span."""
        ts = self.anchor_times
        if t < ts[0] or t > ts[-1]:
            return None
        k = bisect.bisect_right(ts, t) - 1
        if k >= len(ts) - 1:
            return self.anchor_offsets[-1]
        frac = (t - ts[k]) / (ts[k + 1] - ts[k])
        o0, o1 = self.anchor_offsets[k], self.anchor_offsets[k + 1]
        return o0 + frac * (o1 - o0)

    def position_at(self, t: float, net: RoadNetwork) -> tuple[float, float] | None:
        o = self.offset_at(t)
        if o is None:
            return None
        k = max(0, bisect.bisect_right(self.cum, o) - 1)
        if not self.pieces:
            return None
        seg, a, b = self.pieces[min(k, len(self.pieces) - 1)]
        return net.segments[seg].point_at(min(b, a + (o - self.cum[min(k, len(self.pieces) - 1)])))

    def arcs(self, o0: float, o1: float) -> list[tuple[int, float, float]]:
        """Segment intervals covered between path offsets ``o0 <= o1``."""
        out = []
        if o1 <= o0:
            return out
        k = max(0, bisect.bisect_right(self.cum, o0) - 1)
        while k < len(self.pieces) and self.cum[k] < o1:
            seg, a, b = self.pieces[k]
            lo = a + max(0.0, o0 - self.cum[k])
            hi = min(b, a + (o1 - self.cum[k]))
            if hi > lo:
                out.append((seg, lo, hi))
            k += 1
        return out

    def arcs_between(self, t0: float, t1: float) -> list[tuple[int, float, float]]:
        """Arcs traversed during [t0, t1], clipped to the anchor span."""
        lo, hi = max(t0, self.anchor_times[0]), min(t1, self.anchor_times[-1])
        if hi <= lo:
            return []
        return self.arcs(self.offset_at(lo), self.offset_at(hi))


def align_time(cand: CandidateTrajectory, net: RoadNetwork) -> TimedTrajectory:
    """Time-parameterise a candidate with constant speed between anchors.

    Anchors sharing a timestamp collapse into one (counted in ``collapsed``).
    """
    if len(cand.anchors) < 2:
        raise ValueError("need at least 2 anchors")
    pieces = []
    offsets = [0.0]
    total = 0.0
    for path in cand.subpaths:
        last = len(path.segments) - 1
        for i, sid in enumerate(path.segments):
            a = path.entry_offset if i == 0 else 0.0
            b = path.exit_offset if i == last else net.segments[sid].length_m
            if b > a:
                pieces.append((sid, a, b))
                total += b - a
        offsets.append(total)
    kept_t, kept_o, collapsed = [cand.anchors[0].timestamp], [offsets[0]], 0
    for a, o in zip(cand.anchors[1:], offsets[1:]):
        if a.timestamp <= kept_t[-1]:
            kept_o[-1] = o
            collapsed += 1
        else:
            kept_t.append(a.timestamp)
            kept_o.append(o)
    if len(kept_t) < 2:
        raise ValueError("all anchors share one timestamp")
    return TimedTrajectory(pieces, kept_o, kept_t, collapsed)


def _union(intervals):
    intervals.sort()
    merged = []
    for a, b in intervals:
        if merged and a <= merged[-1][1]:
            if b > merged[-1][1]:
                merged[-1][1] = b
        else:
            merged.append([a, b])
    return merged


def arc_overlap(qa, ta) -> float:
    """Measure of (union of qa) intersected with (union of ta), per segment."""
    if not qa or not ta:
        return 0.0
    by_q = defaultdict(list)
    for seg, a, b in qa:
        by_q[seg].append((a, b))
    by_t = defaultdict(list)
    for seg, a, b in ta:
        if seg in by_q:
            by_t[seg].append((a, b))
    total = 0.0
    for seg, tiv in by_t.items():
        uq, ut = _union(by_q[seg]), _union(tiv)
        i = j = 0
        while i < len(uq) and j < len(ut):
            lo = max(uq[i][0], ut[j][0])
            hi = min(uq[i][1], ut[j][1])
            if hi > lo:
                total += hi - lo
            if uq[i][1] < ut[j][1]:
                i += 1
            else:
                j += 1
    return total


def window_overlap(q: TimedTrajectory, t: TimedTrajectory, t0: float, t1: float) -> float:
    """Shared directed length both trajectories cover during [t0, t1]."""
    if not t0 < t1:
        raise ValueError("t0 must be < t1")
    return arc_overlap(q.arcs_between(t0, t1), t.arcs_between(t0, t1))


# --------------------------------------------------------------- similarity
class QueryWindows:
    """Query-side window grid: one window per consecutive anchor pair."""

    def __init__(self, q: TimedTrajectory):
        self.traj = q
        self.windows = []
        for k in range(1, len(q.anchor_times)):
            arcs = q.arcs(q.anchor_offsets[k - 1], q.anchor_offsets[k])
            self.windows.append((q.anchor_times[k - 1], q.anchor_times[k], arcs,
                                 sum(b - a for _, a, b in arcs)))
        # remaining[k]: query length still ahead of window k
        self.remaining = [0.0] * (len(self.windows) + 1)
        for k in range(len(self.windows) - 1, -1, -1):
            self.remaining[k] = self.remaining[k + 1] + self.windows[k][3]
        self.length = q.length


def similarity_steps(qw: QueryWindows, q_conf: float, t: TimedTrajectory, t_conf: float):
    """Yield (windows done, accumulated overlap, optimistic bound) before
    each window and once at the end; the final bound is the similarity."""
    if not qw.length > 0:
        raise EmptyQueryError("empty query")
    factor = q_conf * t_conf / qw.length
    acc = 0.0
    for k, (t0, t1, arcs, _) in enumerate(qw.windows):
        yield k, acc, factor * (acc + qw.remaining[k])
        acc += arc_overlap(arcs, t.arcs_between(t0, t1))
    yield len(qw.windows), acc, factor * acc


def _evaluate_pair(qw, q_conf, t, t_conf, threshold):
    """Similarity, or None when the bound drops below ``threshold``."""
    sim = 0.0
    for k, acc, bound in similarity_steps(qw, q_conf, t, t_conf):
        if threshold is not None and k < len(qw.windows) and bound < threshold - _BOUND_EPS:
            return None
        sim = bound
    return min(1.0, sim)


def pair_similarity(qc: CandidateTrajectory, tc: CandidateTrajectory, net: RoadNetwork) -> float:
    """Confidence-weighted share of the query's length that the candidate
    co-traverses in time-aligned windows."""
    q = align_time(qc, net)
    if not q.length > 0:
        raise EmptyQueryError("empty query")
    return _evaluate_pair(QueryWindows(q), qc.confidence, align_time(tc, net), tc.confidence, None)


@dataclass
class PairOutcome:
    similarity: float
    ranks: tuple[int, int] | None
    above: bool
    pairs_cut: int = 0
    pairs_evaluated: int = 0


def _best_pair(q_items, t_items, tau, local_pruning, cut_at_tau=True) -> PairOutcome:
    """q_items/t_items: lists of (rank, confidence, aligned or windows)."""
    order = sorted(
        ((qc * tc, qi, ti, qw, t) for qi, qc, qw in q_items for ti, tc, t in t_items),
        key=lambda x: (-x[0], x[1], x[2]),
    )
    best, ranks = -1.0, None
    cut = done = 0
    for _, qi, ti, qw, t in order:
        qc = q_items[qi][1]
        tc = t_items[ti][1]
        threshold = None
        if local_pruning:
            threshold = max(best, tau) if cut_at_tau else best
        sim = _evaluate_pair(qw, qc, t, tc, threshold)
        if sim is None:
            cut += 1
            continue
        done += 1
        if sim > best:
            best, ranks = sim, (qi, ti)
    if ranks is None:
        best = 0.0
    return PairOutcome(best, ranks, best >= tau, cut, done)


def best_pair_similarity(qset: CandidateSet, tset: CandidateSet, net: RoadNetwork,
                         cfg: SearchConfig = SearchConfig(), cut_at_tau: bool = True) -> PairOutcome:
    """Highest pair similarity over all candidate pairs.

    Pairs are tried in order of decreasing confidence product; ties keep the
    first pair found. With local pruning a pair stops as soon as its
    optimistic bound falls below max(best so far, tau). Above-threshold
    outcomes are identical with or without pruning; below-threshold ones
    report the best pair that ran to completion. ``cut_at_tau=False`` cuts
    only against the best so far, which keeps every outcome exact.
    """
    if not qset.candidates or not tset.candidates:
        raise ValueError("candidate sets must be non-empty")
    q_items = [(i, c.confidence, QueryWindows(align_time(c, net))) for i, c in enumerate(qset.candidates)]
    if not q_items[0][2].length > 0:
        raise EmptyQueryError("empty query")
    t_items = [(i, c.confidence, align_time(c, net)) for i, c in enumerate(tset.candidates)]
    return _best_pair(q_items, t_items, cfg.tau, cfg.local_pruning, cut_at_tau)


# ------------------------------------------------------------ adaptive M
def adapt_m(query_length_m: float, cfg: SearchConfig = SearchConfig(), m_max: int | None = None) -> int:
    """Candidate count for a query of the given length (table lookup)."""
    if query_length_m < 0:
        raise ValueError("length must be >= 0")
    m = cfg.m_saturation
    for limit, value in cfg.m_table:
        if query_length_m < limit:
            m = value
            break
    return m if m_max is None else min(m, m_max)


# ------------------------------------------------------------ global pruning
@dataclass(frozen=True)
class EntrySummary:
    start: tuple[float, float, float]
    end: tuple[float, float, float]
    density: float
    length_m: float


def summarize(cs: CandidateSet) -> EntrySummary:
    top = cs.candidates[0]
    a, b = top.anchors[0], top.anchors[-1]
    return EntrySummary((a.x, a.y, a.timestamp), (b.x, b.y, b.timestamp), cs.density, top.length_m)


def prune_epsilon(density: float, cfg: SearchConfig) -> float:
    return cfg.epsilon0 * search_range(density) / 200.0


def spacetime_distance(p, q, cfg: SearchConfig) -> float:
    return math.sqrt(((p[0] - q[0]) / cfg.space_scale) ** 2
                     + ((p[1] - q[1]) / cfg.space_scale) ** 2
                     + ((p[2] - q[2]) / cfg.time_scale) ** 2)


def global_prune(query: EntrySummary, entry: EntrySummary, cfg: SearchConfig = SearchConfig(),
                 density: float | None = None) -> bool:
    """True to keep ``entry``: both its start and end are within epsilon of
    the query's in normalised space-time."""
    if density is None:
        density = min(query.density, entry.density)
    eps = prune_epsilon(density, cfg)
    return (spacetime_distance(query.start, entry.start, cfg) <= eps
            and spacetime_distance(query.end, entry.end, cfg) <= eps)


# ------------------------------------------------------------------- search
@dataclass
class QueryResult:
    entry_id: str
    similarity: float
    ranks: tuple[int, int] | None
    above: bool
    pairs_cut: int = 0


@dataclass
class SearchStats:
    entries: int = 0
    skipped_global: int = 0
    evaluated: int = 0
    pairs_cut: int = 0
    pairs_evaluated: int = 0
    m: int = 0


@dataclass
class SearchReport:
    results: list[QueryResult]
    stats: SearchStats
    evaluated: list[QueryResult] = field(default_factory=list)


class Dataset:
    """Candidate sets plus their pruning summaries; alignments are built
    lazily and cached."""

    def __init__(self, sets: Sequence[CandidateSet], net: RoadNetwork):
        self.sets = list(sets)
        self.net = net
        self.summaries = [summarize(cs) for cs in self.sets]
        self._aligned: dict[int, list] = {}

    def __len__(self) -> int:
        return len(self.sets)

    def aligned(self, i: int) -> list:
        items = self._aligned.get(i)
        if items is None:
            items = [(k, c.confidence, align_time(c, self.net)) for k, c in enumerate(self.sets[i].candidates)]
            self._aligned[i] = items
        return items


def _evaluate_entries(q_items, dataset: Dataset, idx, m, tau, local_pruning):
    out = []
    for i in idx:
        t_items = dataset.aligned(i)[:m]
        res = _best_pair(q_items, t_items, tau, local_pruning)
        out.append((i, res))
    return out


_WORKER_STATE: dict = {}


def _worker_init(dataset, q_items, m, tau, local_pruning):
    _WORKER_STATE.update(dataset=dataset, q_items=q_items, m=m, tau=tau, lp=local_pruning)


def _worker_run(idx):
    s = _WORKER_STATE
    return _evaluate_entries(s["q_items"], s["dataset"], idx, s["m"], s["tau"], s["lp"])


def search(query: CandidateSet, dataset: Dataset, cfg: SearchConfig = SearchConfig(),
           m_max: int | None = None, workers: int = 1, keep_all: bool = False) -> SearchReport:
    """All dataset entries whose best pair similarity reaches ``cfg.tau``,
    sorted by similarity (descending) then id."""
    net = dataset.net
    top = query.candidates[0]
    m = adapt_m(top.length_m, cfg, m_max)
    q_items = [(k, c.confidence, QueryWindows(align_time(c, net)))
               for k, c in enumerate(query.candidates[:m])]
    if not q_items[0][2].length > 0:
        raise EmptyQueryError("empty query")
    stats = SearchStats(entries=len(dataset), m=m)
    qsum = summarize(query)
    idx = []
    for i, s in enumerate(dataset.summaries):
        if cfg.global_pruning and not global_prune(qsum, s, cfg):
            stats.skipped_global += 1
            continue
        idx.append(i)
    stats.evaluated = len(idx)
    if workers > 1 and len(idx) > 1:
        chunks = [idx[k::workers] for k in range(workers)]
        with ProcessPoolExecutor(workers, initializer=_worker_init,
                                 initargs=(dataset, q_items, m, cfg.tau, cfg.local_pruning)) as ex:
            pairs = [r for part in ex.map(_worker_run, chunks) for r in part]
    else:
        pairs = _evaluate_entries(q_items, dataset, idx, m, cfg.tau, cfg.local_pruning)
    evaluated = []
    for i, res in pairs:
        stats.pairs_cut += res.pairs_cut
        stats.pairs_evaluated += res.pairs_evaluated
        evaluated.append(QueryResult(dataset.sets[i].sequence_id, res.similarity, res.ranks,
                                     res.above, res.pairs_cut))
    evaluated.sort(key=lambda r: (-r.similarity, r.entry_id))
    results = [r for r in evaluated if r.above]
    return SearchReport(results, stats, evaluated if keep_all else [])

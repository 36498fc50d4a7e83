import numpy as np
import pytest
from hypothesis import given, strategies as st

from celltraj.mapmatch import Anchor, CandidateSet, CandidateTrajectory
from celltraj.roadnet import PathOnNetwork
from celltraj.simsearch import (
    Dataset,
    EmptyQueryError,
    EntrySummary,
    SearchConfig,
    adapt_m,
    align_time,
    best_pair_similarity,
    global_prune,
    pair_similarity,
    prune_epsilon,
    search,
    similarity_steps,
    QueryWindows,
    window_overlap,
)

from conftest import grid_net
from oracles import (brute_arcs, brute_overlap, candidate_on_walk, random_pair, random_set_pair,
                     random_walk)

NET, SEG = grid_net(4, 4, 400.0)
LINE, LSEG = grid_net(1, 8, 100.0)


def along(net, nodes_or_segs, times, conf=1.0, seg=None):
    """Candidate through whole segments; one anchor per segment boundary."""
    segs = [seg[(a, b)] for a, b in zip(nodes_or_segs, nodes_or_segs[1:])] if seg else list(nodes_or_segs)
    assert len(times) == len(segs) + 1
    anchors, subpaths = [], []
    for k, t in enumerate(times):
        sid, off = (segs[k], 0.0) if k < len(segs) else (segs[-1], net.segments[segs[-1]].length_m)
        x, y = net.segments[sid].point_at(off)
        anchors.append(Anchor(float(t), sid, off, x, y, 0.0))
        if k:
            prev = segs[k - 1]
            if k < len(segs):
                subpaths.append(PathOnNetwork((prev, segs[k]), 0.0, 0.0, net.segments[prev].length_m))
            else:
                subpaths.append(PathOnNetwork((prev,), 0.0, off, off))
    return CandidateTrajectory(tuple(anchors), tuple(subpaths), (0.0,) * len(subpaths), 0.0, conf)


def staircase(moves, conf=1.0, t0=0.0, dt=60.0):
    """Path on the 4x4 grid from node 0 by 'R'/'U' moves."""
    nodes = [0]
    for m in moves:
        nodes.append(nodes[-1] + (1 if m == "R" else 4))
    return along(NET, nodes, [t0 + i * dt for i in range(len(nodes))], conf, SEG)


def cset(*cands, sid="x", density=50.0):
    return CandidateSet(sid, tuple(cands), density)


# ---------------------------------------------------------------- alignment
def test_align_time_positions():
    c = along(LINE, list(range(5)), [0, 10, 20, 40, 80], seg=LSEG)
    tt = align_time(c, LINE)
    assert tt.length == pytest.approx(400.0)
    for t, x in ((0, 0), (10, 100), (20, 200), (40, 300), (80, 400)):
        assert tt.position_at(t, LINE) == pytest.approx((x, 0.0))
    assert tt.position_at(5, LINE) == pytest.approx((50.0, 0.0))
    assert tt.position_at(60, LINE) == pytest.approx((350.0, 0.0))
    assert tt.offset_at(-1) is None and tt.offset_at(81) is None


def test_align_time_collapses_shared_timestamps():
    c = along(LINE, list(range(4)), [0, 10, 10, 30], seg=LSEG)
    tt = align_time(c, LINE)
    assert tt.collapsed == 1
    assert tt.anchor_times == [0, 10, 30]
    assert tt.anchor_offsets == pytest.approx([0.0, 200.0, 300.0])
    with pytest.raises(ValueError):
        align_time(along(LINE, [0, 1], [5, 5], seg=LSEG), LINE)


@given(seed=st.integers(0, 10_000))
def test_aligned_offset_is_monotone(seed):
    rng = np.random.default_rng(seed)
    c = candidate_on_walk(rng, NET, random_walk(rng, NET, 8), int(rng.integers(2, 7)))
    tt = align_time(c, NET)
    ts = np.linspace(tt.span[0], tt.span[1], 50)
    offs = [tt.offset_at(t) for t in ts]
    assert all(b >= a - 1e-9 for a, b in zip(offs, offs[1:]))
    assert offs[-1] == pytest.approx(tt.length)


# ------------------------------------------------------------------ overlap
def test_window_overlap_examples():
    q = along(LINE, list(range(4)), [0, 60, 120, 180], seg=LSEG)
    tq = align_time(q, LINE)
    assert window_overlap(tq, tq, 0, 180) == pytest.approx(300.0)
    assert window_overlap(tq, tq, 30, 90) == pytest.approx(100.0)
    later = align_time(along(LINE, list(range(4)), [600, 660, 720, 780], seg=LSEG), LINE)
    assert window_overlap(tq, later, 0, 180) == 0.0
    assert window_overlap(tq, later, 0, 1000) == pytest.approx(300.0)
    back = align_time(along(LINE, [3, 2, 1, 0], [0, 60, 120, 180], seg=LSEG), LINE)
    assert window_overlap(tq, back, 0, 180) == 0.0
    with pytest.raises(ValueError):
        window_overlap(tq, tq, 10, 10)


def test_window_overlap_three_segment_toy():
    # q covers 0..300 m over 0..300 s; t covers 100..300 m over 100..200 s
    q = align_time(along(LINE, [0, 1, 2, 3], [0, 100, 200, 300], seg=LSEG), LINE)
    t = align_time(along(LINE, [1, 2, 3], [100, 150, 200], seg=LSEG), LINE)
    # during [100, 200] q spans 100..200 m and t spans 100..300 m
    assert window_overlap(q, t, 100, 200) == pytest.approx(100.0)
    assert window_overlap(q, t, 0, 150) == pytest.approx(50.0)
    assert window_overlap(q, t, 250, 300) == 0.0


@given(seed=st.integers(0, 100_000))
def test_window_overlap_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    q, t = random_pair(rng, NET)
    tq, tt = align_time(q, NET), align_time(t, NET)
    lo = min(tq.span[0], tt.span[0]) - 10
    hi = max(tq.span[1], tt.span[1]) + 10
    t0, t1 = sorted(rng.uniform(lo, hi, 2))
    want = brute_overlap(brute_arcs(q, NET, t0, t1), brute_arcs(t, NET, t0, t1))
    assert window_overlap(tq, tt, t0, t1) == pytest.approx(want, abs=1e-6)


# --------------------------------------------------------------- similarity
def test_pair_similarity_examples():
    q = staircase("RRRUUU")
    assert pair_similarity(q, q, NET) == pytest.approx(1.0)
    assert pair_similarity(q, staircase("RRRUUU", t0=3600), NET) == 0.0
    assert pair_similarity(q, staircase("UUURRR"), NET) == 0.0
    half = staircase("RRR")
    assert pair_similarity(q, half, NET) == pytest.approx(0.5)
    assert pair_similarity(half, q, NET) == pytest.approx(1.0)
    weighted = staircase("RRRUUU", conf=0.8)
    assert pair_similarity(q, weighted, NET) == pytest.approx(0.8)


def test_empty_query_raises():
    a = Anchor(0.0, LSEG[(0, 1)], 50.0, 50.0, 0.0, 0.0)
    b = Anchor(60.0, LSEG[(0, 1)], 50.0, 50.0, 0.0, 0.0)
    still = CandidateTrajectory((a, b), (PathOnNetwork((LSEG[(0, 1)],), 50.0, 50.0, 0.0),), (0.0,), 0.0)
    other = along(LINE, [0, 1, 2], [0, 30, 60], seg=LSEG)
    with pytest.raises(EmptyQueryError):
        pair_similarity(still, other, LINE)
    with pytest.raises(EmptyQueryError):
        best_pair_similarity(cset(still), cset(other), LINE)


@given(seed=st.integers(0, 100_000))
def test_similarity_bounds_and_local_bound(seed):
    rng = np.random.default_rng(seed)
    q, t = random_pair(rng, NET)
    tq = align_time(q, NET)
    if not tq.length > 0:
        return
    qw = QueryWindows(tq)
    steps = list(similarity_steps(qw, q.confidence, align_time(t, NET), t.confidence))
    final = steps[-1][2]
    assert 0.0 <= final <= 1.0 + 1e-12
    assert steps[-1][1] <= tq.length + 1e-6
    for _, acc, bound in steps:
        assert bound >= final - 1e-12
    assert final == pytest.approx(pair_similarity(q, t, NET))


def test_comoving_pair_is_argmax():
    # both sets hold the true route at a lower rank among distinct wrong staircases
    truth = "RURURU"
    q = cset(staircase("RRRUUU"), staircase(truth, 0.96), staircase("URRRUU", 0.9),
             staircase("UUURRR", 0.85), sid="q")
    t = cset(staircase("RRUUUR"), staircase("UURRRU", 0.97), staircase(truth, 0.95),
             staircase("RUUURR", 0.9), sid="t")
    out = best_pair_similarity(q, t, NET)
    assert out.ranks == (1, 2)
    assert out.similarity == pytest.approx(0.96 * 0.95)


@pytest.mark.parametrize("tau", [0.3, 0.6, 0.85])
def test_local_pruning_is_lossless(tau):
    for seed in range(500):
        qs, ts = random_set_pair(seed, NET)
        on = SearchConfig(tau=tau)
        off = SearchConfig(tau=tau, local_pruning=False)
        full = best_pair_similarity(qs, ts, NET, off)
        exact = best_pair_similarity(qs, ts, NET, on, cut_at_tau=False)
        assert (exact.similarity, exact.ranks) == (full.similarity, full.ranks)
        fast = best_pair_similarity(qs, ts, NET, on)
        assert fast.above == full.above
        if full.above:
            assert (fast.similarity, fast.ranks) == (full.similarity, full.ranks)
        else:
            assert fast.similarity <= full.similarity


@given(seed=st.integers(0, 100_000), m=st.integers(1, 4))
def test_best_similarity_non_decreasing_in_m(seed, m):
    qs, ts = random_set_pair(seed, NET)
    cfg = SearchConfig(local_pruning=False)
    a = best_pair_similarity(qs.truncated(m), ts.truncated(m), NET, cfg)
    b = best_pair_similarity(qs.truncated(m + 1), ts.truncated(m + 1), NET, cfg)
    assert b.similarity >= a.similarity


# --------------------------------------------------------------- adaptive M
@pytest.mark.parametrize("km,m", [(0.0, 2), (1.0, 2), (2.999, 2), (3.0, 3), (5.0, 3), (7.0, 5),
                                  (10.0, 6), (14.0, 7), (20.0, 7), (500.0, 7)])
def test_adapt_m_table(km, m):
    assert adapt_m(km * 1000) == m


@given(a=st.floats(0, 1e6), b=st.floats(0, 1e6), cap=st.integers(1, 10))
def test_adapt_m_monotone_and_capped(a, b, cap):
    lo, hi = sorted((a, b))
    assert adapt_m(lo) <= adapt_m(hi)
    assert adapt_m(hi, m_max=cap) <= cap
    with pytest.raises(ValueError):
        adapt_m(-1.0)


# ------------------------------------------------------------ global prune
def _summary(start, end, density=50.0):
    return EntrySummary(start, end, density, 1000.0)


def test_global_prune_examples():
    q = _summary((0.0, 0.0, 0.0), (3000.0, 0.0, 600.0))
    assert global_prune(q, q)
    assert prune_epsilon(50.0, SearchConfig()) == pytest.approx(2.0)
    # 1000 m and 600 s apart at both ends: distance sqrt(2) <= 2
    near = _summary((1000.0, 0.0, 600.0), (4000.0, 0.0, 1200.0))
    assert global_prune(q, near)
    day = _summary((0.0, 0.0, 86400.0), (3000.0, 0.0, 87000.0))
    assert not global_prune(q, day)
    one_end = _summary((0.0, 0.0, 0.0), (9000.0, 0.0, 600.0))
    assert not global_prune(q, one_end)
    # lower density widens epsilon
    assert global_prune(q, _summary((0.0, 0.0, 0.0), (6000.0, 0.0, 600.0), density=5.0))
    assert global_prune(q, day, SearchConfig(epsilon0=1e12))


# ------------------------------------------------------------------- search
def test_search_returns_self_sorted(small_world, small_sets):
    ds = Dataset(small_sets, small_world.network)
    for cs in small_sets[:8]:
        rep = search(cs, ds)
        ids = [r.entry_id for r in rep.results]
        assert cs.sequence_id in ids
        sims = [r.similarity for r in rep.results]
        assert sims == sorted(sims, reverse=True)
        assert all(r.similarity >= 0.85 and r.above for r in rep.results)
        assert rep.stats.evaluated + rep.stats.skipped_global == len(ds)


def test_pruning_switches_do_not_change_results(small_world, small_sets):
    ds = Dataset(small_sets, small_world.network)
    for cs in small_sets[::3]:
        rows = set()
        for g in (True, False):
            for l in (True, False):
                rep = search(cs, ds, SearchConfig(global_pruning=g, local_pruning=l))
                rows.add(tuple((r.entry_id, r.similarity, r.ranks) for r in rep.results))
        assert len(rows) == 1


def test_huge_epsilon_prunes_nothing(small_world, small_sets):
    ds = Dataset(small_sets, small_world.network)
    rep = search(small_sets[0], ds, SearchConfig(epsilon0=1e12))
    assert rep.stats.skipped_global == 0


def test_workers_give_identical_results(small_world, small_sets):
    ds = Dataset(small_sets, small_world.network)
    q = small_sets[1]
    one = search(q, ds, keep_all=True)
    two = search(q, ds, workers=2, keep_all=True)
    assert one.results == two.results and one.evaluated == two.evaluated


def test_lower_tau_returns_superset(small_world, small_sets):
    ds = Dataset(small_sets, small_world.network)
    for cs in small_sets[::4]:
        prev = set()
        for tau in (0.95, 0.9, 0.85, 0.8):
            got = {r.entry_id for r in search(cs, ds, SearchConfig(tau=tau)).results}
            assert prev <= got
            prev = got


def test_search_config_validation():
    for bad in (dict(tau=0.0), dict(tau=1.5), dict(epsilon0=0.0),
                dict(m_table=((3000.0, 4), (6000.0, 2)))):
        with pytest.raises(ValueError):
            SearchConfig(**bad)

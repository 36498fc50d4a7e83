import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from celltraj.ingest import (
    CellRecord,
    CellTower,
    FilterConfig,
    IngestStats,
    TowerSequence,
    apply_filters,
    backward_filter,
    build_sequences,
    compute_local_density,
    drifting_filter,
    format_time,
    implied_speed_kmh,
    load_towers,
    parse_records,
    parse_time,
    pingpong_filter,
    preprocess,
    screen_sample_rate,
    write_towers,
)

from conftest import seq_of

A, B, C, D, E = ((1, k) for k in range(5))


def _line_towers(xs):
    """Towers on the x axis keyed (1, i)."""
    return {(1, i): CellTower(1, i, float(x), 0.0, 50.0) for i, x in enumerate(xs)}


def _keys(seq):
    return [k for _, k in seq.points]


# ------------------------------------------------------------------ parsing
def test_parse_table_row():
    recs, skipped = parse_records(["1B2A7,20170901080234,37146,19618"])
    assert skipped == 0
    (r,) = recs
    assert (r.user_id, r.lac, r.cid) == ("1B2A7", 37146, 19618)
    assert format_time(r.timestamp) == "20170901080234"


def test_parse_empty_and_malformed():
    assert parse_records([]) == ([], 0)
    recs, skipped = parse_records(["id,time,lac,cid", "u,2017090108023,1,2", "", "u,x"])
    assert recs == [] and skipped == 2


def test_parse_time_roundtrip():
    assert parse_time("19700101000100") == 60
    with pytest.raises(ValueError):
        parse_time("2017090108023")


def test_build_sequences_groups_and_sorts():
    recs = [CellRecord(u, t, 1, t) for t in (30, 10, 20) for u in ("c", "a", "b")]
    seqs = build_sequences(recs)
    assert [s.user_id for s in seqs] == ["a", "b", "c"]
    for s in seqs:
        assert [t for t, _ in s.points] == [10, 20, 30]


def test_duplicates_and_conflicts():
    st_ = IngestStats()
    recs = [CellRecord("u", 5, 1, 1), CellRecord("u", 5, 1, 1), CellRecord("u", 9, 1, 2),
            CellRecord("u", 9, 1, 3)]
    (s,) = build_sequences(recs, st_)
    assert s.points == ((5, (1, 1)), (9, (1, 2)))
    assert (st_.duplicates, st_.conflicts) == (1, 1)


def test_sample_rate_screening():
    fast = seq_of("f", [A, B, C], dt=300)
    slow = seq_of("s", [A, B, C], dt=700)
    single = seq_of("x", [A])
    assert [s.user_id for s in screen_sample_rate([fast, slow, single])] == ["f"]


# ------------------------------------------------------------------ density
def test_density_examples():
    one = compute_local_density({A: CellTower(1, 0, 0.0, 0.0)})
    assert one[A].local_density == pytest.approx(1 / math.pi)
    far = compute_local_density({A: CellTower(1, 0, 0.0, 0.0), B: CellTower(1, 1, 2500.0, 0.0)})
    assert all(t.local_density == pytest.approx(1 / math.pi) for t in far.values())
    rng = np.random.default_rng(0)
    r = 500 * np.sqrt(rng.random(157))
    a = rng.random(157) * 2 * math.pi
    disc = {(1, i): CellTower(1, i, float(r[i] * math.cos(a[i])), float(r[i] * math.sin(a[i])))
            for i in range(157)}
    for t in compute_local_density(disc).values():
        assert t.local_density == pytest.approx(157 / math.pi)
        assert t.local_density == pytest.approx(50.0, abs=0.05)


@given(seed=st.integers(0, 10_000), n=st.integers(1, 300))
def test_density_matches_all_pairs(seed, n):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(0, 4000, (n, 2))
    towers = {(1, i): CellTower(1, i, float(x), float(y)) for i, (x, y) in enumerate(xy)}
    got = compute_local_density(towers)
    d = np.hypot(xy[:, None, 0] - xy[None, :, 0], xy[:, None, 1] - xy[None, :, 1])
    counts = (d <= 1000.0).sum(axis=1)
    for i in range(n):
        assert got[(1, i)].local_density == pytest.approx(counts[i] / math.pi)
        assert got[(1, i)].local_density >= 1 / math.pi


def test_tower_file_roundtrip(tmp_path):
    towers = compute_local_density({(7, 1): CellTower(7, 1, 10.0, 20.0),
                                    (7, 2): CellTower(7, 2, -300.0, 50.0)})
    p = tmp_path / "towers.csv"
    unproject = lambda x, y: (x / 1000, y / 1000)
    write_towers(p, towers, unproject)
    back = load_towers(p, lambda lon, lat: (lon * 1000, lat * 1000))
    assert back.keys() == towers.keys()
    for k in towers:
        assert back[k].x == pytest.approx(towers[k].x)
        assert back[k].local_density == towers[k].local_density


def test_duplicate_tower_rejected(tmp_path):
    p = tmp_path / "towers.csv"
    p.write_text("lac,cid,lon,lat\n1,2,0,0\n1,2,1,1\n")
    with pytest.raises(ValueError, match="duplicate"):
        load_towers(p, lambda lon, lat: (lon, lat))


# ---------------------------------------------------------------- ping-pong
@pytest.mark.parametrize("inp,out", [
    ([A, B, A, B, A], [A, A, A]),
    ([A, A, A], [A, A, A]),
    ([A, B, B, B, B], [A, B, B, B, B]),
    ([A, A, B, B, B, C, C, D, D, E], [A, A, B, B, B, C, C, D, D, E]),
    ([A, B, C, A, D], [A, A, D]),
    ([A, B, C, D, A], [A, B, C, D, A]),
])
def test_pingpong_traces(inp, out):
    assert _keys(pingpong_filter(seq_of("u", inp), 3)) == out


def test_pingpong_window_one_is_noop():
    s = seq_of("u", [A, B, A, B, A])
    assert pingpong_filter(s, 1) == s
    with pytest.raises(ValueError):
        pingpong_filter(s, 0)


# ----------------------------------------------------------------- backward
def test_backward_monotone_unchanged():
    towers = _line_towers([0, 1000, 2000, 3000, 4000])
    s = seq_of("u", list(towers))
    assert backward_filter(s, towers, 5) == s


def test_backward_isolated_flip_dropped():
    towers = _line_towers([0, 1000, 2000, 1500, 3000, 4000])
    s = seq_of("u", list(towers))
    out = backward_filter(s, towers, 2)
    assert _keys(out) == [(1, 0), (1, 1), (1, 2), (1, 4), (1, 5)]


def test_backward_sustained_uturn_kept():
    towers = _line_towers([0, 1000, 2000, 1500, 1000, 500, 0])
    s = seq_of("u", list(towers))
    assert backward_filter(s, towers, 2) == s


def test_backward_disabled_and_short():
    towers = _line_towers([0, 1000, 2000, 1500, 3000])
    s = seq_of("u", list(towers))
    assert backward_filter(s, towers, 0) == s
    short = seq_of("u", [(1, 2), (1, 3)])
    assert backward_filter(short, towers, 5) == short


# ----------------------------------------------------------------- drifting
def test_drifting_examples():
    towers = _line_towers([0, 40_000, 500])
    still = seq_of("u", [(1, 0)] * 4)
    assert drifting_filter(still, towers) == still
    spike = seq_of("u", [(1, 0), (1, 1)])
    assert _keys(drifting_filter(spike, towers)) == [(1, 0)]
    out_back = seq_of("u", [(1, 0), (1, 1), (1, 2)])
    assert _keys(drifting_filter(out_back, towers)) == [(1, 0), (1, 2)]


def test_drifting_first_point_spike():
    towers = _line_towers([40_000, 0, 500, 1000])
    s = seq_of("u", list(towers))
    assert _keys(drifting_filter(s, towers)) == [(1, 1), (1, 2), (1, 3)]


# --------------------------------------------------------------- properties
TOWERS = _line_towers(range(0, 30_000, 500)) | {
    (2, i): CellTower(2, i, float(x), float(y), 50.0)
    for i, (x, y) in enumerate(np.random.default_rng(1).uniform(-20_000, 20_000, (40, 2)))
}
KEYS = sorted(TOWERS)


@st.composite
def noisy_sequences(draw):
    n = draw(st.integers(0, 40))
    picks = draw(st.lists(st.integers(0, len(KEYS) - 1), min_size=n, max_size=n))
    gaps = draw(st.lists(st.integers(1, 300), min_size=n, max_size=n))
    times = np.cumsum(gaps).tolist() if n else []
    return TowerSequence("u", tuple((int(t), KEYS[k]) for t, k in zip(times, picks)))


def _is_ordered_subset(sub, full):
    it = iter(full.points)
    return all(any(p == q for q in it) for p in sub.points)


@given(noisy_sequences(), st.integers(1, 6))
def test_pingpong_properties(seq, w_p):
    out = pingpong_filter(seq, w_p)
    assert _is_ordered_subset(out, seq)
    assert pingpong_filter(out, w_p) == out


@given(noisy_sequences(), st.sampled_from([30.0, 60.0, 120.0]))
def test_drifting_properties(seq, cap):
    out = drifting_filter(seq, TOWERS, cap)
    assert _is_ordered_subset(out, seq)
    assert drifting_filter(out, TOWERS, cap) == out
    for a, b in zip(out.points, out.points[1:]):
        assert implied_speed_kmh(TOWERS, a, b) <= cap


@given(noisy_sequences(), st.integers(0, 6))
def test_backward_subset(seq, w_b):
    assert _is_ordered_subset(backward_filter(seq, TOWERS, w_b), seq)


@given(noisy_sequences())
def test_pipeline_subset(seq):
    for order in (("pingpong", "backward", "drifting"), FilterConfig().order):
        out = apply_filters(seq, TOWERS, FilterConfig(order=order))
        assert _is_ordered_subset(out, seq)


def test_filter_config_validation():
    with pytest.raises(ValueError):
        FilterConfig(w_p=0)
    with pytest.raises(ValueError):
        FilterConfig(order=("pingpong", "smoothing"))


def test_preprocess_drops_unknown_towers():
    towers = _line_towers([0, 500, 1000])
    lines = ["id,time,lac,cid"] + [
        f"u,{format_time(60 * i)},1,{i}" for i in range(3)
    ] + [f"u,{format_time(300)},9,9"]
    seqs, stats = preprocess(lines, towers)
    assert len(seqs) == 1 and len(seqs[0]) == 3
    assert stats.skipped_lines == 1

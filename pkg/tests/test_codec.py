import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from celltraj.codec import (
    CandidateFormatError,
    block_layout,
    decode_candidate_set,
    dump_debug,
    encode_candidate_set,
    read_store,
    unshared_size,
    write_store,
)
from celltraj.mapmatch import Anchor, CandidateSet, CandidateTrajectory
from celltraj.roadnet import PathOnNetwork

from oracles import random_candidate_set


def _set(m, n_gap, divergent=()):
    anchors = tuple(Anchor(60.0 * i, i, 10.0, float(i), 0.0, -1.0) for i in range(n_gap + 1))
    cands = []
    for k in range(m):
        paths = []
        for g in range(n_gap):
            mid = (1000 + k,) if g in divergent else (1000,)
            paths.append(PathOnNetwork((g, *mid, g + 1), 10.0, 10.0, 500.0 + (k if g in divergent else 0)))
        cands.append(CandidateTrajectory(anchors, tuple(paths), (-1.0,) * n_gap, -10.0 - k,
                                         math.exp(-k)))
    return CandidateSet("s", tuple(cands), 42.0)


@given(st.integers(0, 2**32 - 1))
def test_roundtrip(seed):
    cs = random_candidate_set(np.random.default_rng(seed))
    blob = encode_candidate_set(cs)
    back = decode_candidate_set(blob)
    assert back == cs
    assert encode_candidate_set(back) == blob
    if len(cs) > 1 and any(cs.shared_gaps()):
        assert len(blob) < unshared_size(cs)


def test_single_candidate_all_shared():
    cs = _set(1, 5)
    assert [t for _, t, _ in block_layout(encode_candidate_set(cs))] == [1] * 5


def test_one_divergent_gap_layout():
    cs = _set(4, 10, divergent={6})
    layout = block_layout(encode_candidate_set(cs))
    assert [(g, t, n) for g, t, n in layout if t == 1] == [(g, 1, 1) for g in range(10) if g != 6]
    assert [(g, t, n) for g, t, n in layout if t == 0] == [(6, 0, 4)]
    assert len(encode_candidate_set(cs)) < unshared_size(cs)


def test_unshared_encoding_is_equivalent():
    cs = _set(3, 4, divergent={1})
    assert decode_candidate_set(encode_candidate_set(cs, share=False)) == cs


def test_corrupt_bytes_report_offset():
    blob = encode_candidate_set(_set(2, 3, divergent={0}))
    with pytest.raises(CandidateFormatError, match="bad magic") as e:
        decode_candidate_set(b"XXXX" + blob[4:])
    assert e.value.offset == 0
    with pytest.raises(CandidateFormatError, match="version"):
        decode_candidate_set(blob[:4] + b"\x09" + blob[5:])
    with pytest.raises(CandidateFormatError, match="truncated") as e:
        decode_candidate_set(blob[:-3])
    assert 0 < e.value.offset <= len(blob)
    with pytest.raises(CandidateFormatError, match="trailing"):
        decode_candidate_set(blob + b"\x00")


@given(st.integers(0, 2**32 - 1), st.integers(0, 10_000), st.integers(0, 255))
def test_random_corruption_never_crashes(seed, pos, byte):
    blob = bytearray(encode_candidate_set(random_candidate_set(np.random.default_rng(seed))))
    blob[pos % len(blob)] = byte
    try:
        decode_candidate_set(bytes(blob))
    except CandidateFormatError as exc:
        assert 0 <= exc.offset <= len(blob)


def test_empty_set_rejected():
    with pytest.raises(ValueError):
        encode_candidate_set(CandidateSet("e", ()))


def test_store_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    sets = [random_candidate_set(rng) for _ in range(20)]
    p = tmp_path / "c.store"
    assert write_store(p, sets) == 20
    assert read_store(p) == sets
    data = p.read_bytes()
    p.write_bytes(data[:-1])
    with pytest.raises(CandidateFormatError):
        read_store(p)


def test_debug_export_is_json_lines():
    rng = np.random.default_rng(6)
    sets = [random_candidate_set(rng) for _ in range(3)]
    lines = dump_debug(sets).splitlines()
    assert len(lines) == 3
    doc = json.loads(lines[0])
    assert doc["sequence_id"] == sets[0].sequence_id
    assert len(doc["candidates"]) == len(sets[0])

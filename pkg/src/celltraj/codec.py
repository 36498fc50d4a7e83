"""Binary storage of candidate sets with shared sub-paths.

A set is stored as a header, the anchors shared by all candidates, and one
length-prefixed block per gap. A block of type 1 holds the single sub-path
used by every candidate; a block of type 0 holds one entry per candidate.
Each stored sub-path carries its log transition score.

Layout (little endian)::

    set    := b"CTCS" version:u8 id_len:u16 id density:f64
              n_cand:u16 n_anchor:u32 (raw:f64 conf:f64)*n_cand
              (t:f64 seg:i64 off:f64 x:f64 y:f64 log_em:f64)*n_anchor
              n_block:u32 (block_len:u32 block)*n_block
    block  := gap:u32 type:u8 alt_count:u16 body
    body   := path score:f64                        (type 1)
            | (entry:u16 path score:f64)*alt_count  (type 0)
    path   := n_seg:u32 seg:i64*n_seg entry:f64 exit:f64 length:f64

A store file is ``b"CTST" version:u8`` followed by ``len:u32 set`` records.
"""
from __future__ import annotations

import io
import json
import math
import struct
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator

from .mapmatch import Anchor, CandidateSet, CandidateTrajectory
from .roadnet import PathOnNetwork

FORMAT_VERSION = 1
SET_MAGIC = b"CTCS"
STORE_MAGIC = b"CTST"

_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_F64 = struct.Struct("<d")
_CAND = struct.Struct("<dd")
_ANCHOR = struct.Struct("<dqdddd")
_BLOCK = struct.Struct("<IBH")
_PATH_TAIL = struct.Struct("<ddd")


class CandidateFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def _pack_path(buf: list[bytes], path: PathOnNetwork, score: float) -> None:
    buf.append(_U32.pack(len(path.segments)))
    buf.append(struct.pack(f"<{len(path.segments)}q", *path.segments))
    buf.append(_PATH_TAIL.pack(path.entry_offset, path.exit_offset, path.length_m))
    buf.append(_F64.pack(score))


def encode_candidate_set(cs: CandidateSet, share: bool = True) -> bytes:
    """Serialise ``cs``; ``share=False`` writes every gap as type 0."""
    if not cs.candidates:
        raise ValueError("empty candidate set")
    anchors = cs.candidates[0].anchors
    n_gap = len(cs.candidates[0].subpaths)
    for c in cs.candidates:
        if c.anchors != anchors or len(c.subpaths) != n_gap:
            raise ValueError("candidates of one set must share anchors")
    ident = cs.sequence_id.encode("utf-8")
    out = [SET_MAGIC, _U8.pack(FORMAT_VERSION), _U16.pack(len(ident)), ident,
           _F64.pack(cs.density), _U16.pack(len(cs.candidates)), _U32.pack(len(anchors))]
    for c in cs.candidates:
        out.append(_CAND.pack(c.raw_log_prob, c.confidence))
    for a in anchors:
        out.append(_ANCHOR.pack(a.timestamp, a.segment, a.offset, a.x, a.y, a.log_emission))
    out.append(_U32.pack(n_gap))
    shared = cs.shared_gaps() if share else [False] * n_gap
    for g in range(n_gap):
        body: list[bytes] = []
        if shared[g]:
            c0 = cs.candidates[0]
            body.append(_BLOCK.pack(g, 1, 1))
            _pack_path(body, c0.subpaths[g], c0.gap_log_probs[g])
        else:
            body.append(_BLOCK.pack(g, 0, len(cs.candidates)))
            for k, c in enumerate(cs.candidates):
                body.append(_U16.pack(k))
                _pack_path(body, c.subpaths[g], c.gap_log_probs[g])
        blob = b"".join(body)
        out.append(_U32.pack(len(blob)))
        out.append(blob)
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes, base: int = 0):
        self.data = data
        self.pos = 0
        self.base = base

    def take(self, st: struct.Struct):
        end = self.pos + st.size
        if end > len(self.data):
            raise CandidateFormatError("truncated data", self.base + self.pos)
        vals = st.unpack_from(self.data, self.pos)
        self.pos = end
        return vals

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CandidateFormatError("truncated data", self.base + self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def fail(self, msg: str):
        raise CandidateFormatError(msg, self.base + self.pos)


def _read_path(r: _Reader) -> tuple[PathOnNetwork, float]:
    (n,) = r.take(_U32)
    if n == 0 or n * 8 > len(r.data) - r.pos:
        r.fail(f"bad segment count {n}")
    segs = struct.unpack(f"<{n}q", r.raw(8 * n))
    entry, exit_, length = r.take(_PATH_TAIL)
    (score,) = r.take(_F64)
    return PathOnNetwork(tuple(segs), entry, exit_, length), score


def decode_candidate_set(data: bytes, base_offset: int = 0) -> CandidateSet:
    r = _Reader(bytes(data), base_offset)
    if r.raw(4) != SET_MAGIC:
        raise CandidateFormatError("bad magic", base_offset)
    (version,) = r.take(_U8)
    if version != FORMAT_VERSION:
        raise CandidateFormatError(f"unsupported version {version}", base_offset + 4)
    (id_len,) = r.take(_U16)
    try:
        ident = r.raw(id_len).decode("utf-8")
    except UnicodeDecodeError:
        r.fail("sequence id is not utf-8")
    (density,) = r.take(_F64)
    (n_cand,) = r.take(_U16)
    (n_anchor,) = r.take(_U32)
    if n_cand == 0:
        r.fail("set without candidates")
    if n_anchor * _ANCHOR.size > len(r.data):
        r.fail(f"bad anchor count {n_anchor}")
    heads = [r.take(_CAND) for _ in range(n_cand)]
    anchors = tuple(Anchor(*r.take(_ANCHOR)) for _ in range(n_anchor))
    (n_gap,) = r.take(_U32)
    if n_gap + 1 != n_anchor:
        r.fail(f"{n_gap} gaps for {n_anchor} anchors")
    paths = [[None] * n_gap for _ in range(n_cand)]
    scores = [[0.0] * n_gap for _ in range(n_cand)]
    for g in range(n_gap):
        (blen,) = r.take(_U32)
        start = r.pos
        block = _Reader(r.raw(blen), r.base + start)
        gap, kind, count = block.take(_BLOCK)
        if gap != g:
            block.fail(f"expected gap {g}, found {gap}")
        if kind == 1:
            if count != 1:
                block.fail("shared block must hold one path")
            path, score = _read_path(block)
            for k in range(n_cand):
                paths[k][g], scores[k][g] = path, score
        elif kind == 0:
            if count != n_cand:
                block.fail(f"alternative block holds {count} entries for {n_cand} candidates")
            for _ in range(count):
                (k,) = block.take(_U16)
                if k >= n_cand or paths[k][g] is not None:
                    block.fail(f"bad entry index {k}")
                paths[k][g], scores[k][g] = _read_path(block)
        else:
            block.fail(f"unknown block type {kind}")
        if block.pos != blen:
            block.fail("trailing bytes in block")
    if r.pos != len(r.data):
        r.fail("trailing bytes after set")
    cands = tuple(
        CandidateTrajectory(anchors, tuple(paths[k]), tuple(scores[k]), heads[k][0], heads[k][1])
        for k in range(n_cand)
    )
    return CandidateSet(ident, cands, density)


def block_layout(data: bytes) -> list[tuple[int, int, int]]:
    """(gap, type, entry count) of every block in an encoded set."""
    r = _Reader(bytes(data))
    r.raw(4)
    r.take(_U8)
    (id_len,) = r.take(_U16)
    r.raw(id_len)
    r.take(_F64)
    (n_cand,) = r.take(_U16)
    (n_anchor,) = r.take(_U32)
    r.raw(n_cand * _CAND.size + n_anchor * _ANCHOR.size)
    (n_gap,) = r.take(_U32)
    out = []
    for _ in range(n_gap):
        (blen,) = r.take(_U32)
        out.append(_BLOCK.unpack_from(r.raw(blen), 0))
    return out


def unshared_size(cs: CandidateSet) -> int:
    """Bytes needed to store each candidate on its own without sharing."""
    return sum(
        len(encode_candidate_set(CandidateSet(cs.sequence_id, (c,), cs.density), share=False))
        for c in cs.candidates
    )


# ---------------------------------------------------------------- store file
class StoreWriter:
    """Append-only candidate-set store."""

    def __init__(self, fh: BinaryIO):
        self.fh = fh
        fh.write(STORE_MAGIC + _U8.pack(FORMAT_VERSION))

    def write(self, cs: CandidateSet) -> None:
        blob = encode_candidate_set(cs)
        self.fh.write(_U32.pack(len(blob)))
        self.fh.write(blob)


def write_store(path, sets: Iterable[CandidateSet]) -> int:
    n = 0
    with open(path, "wb") as fh:
        w = StoreWriter(fh)
        for cs in sets:
            w.write(cs)
            n += 1
    return n


def iter_store(data: bytes) -> Iterator[CandidateSet]:
    if data[:4] != STORE_MAGIC:
        raise CandidateFormatError("bad store magic", 0)
    if len(data) < 5 or data[4] != FORMAT_VERSION:
        raise CandidateFormatError("unsupported store version", 4)
    pos = 5
    while pos < len(data):
        if pos + 4 > len(data):
            raise CandidateFormatError("truncated record header", pos)
        (n,) = _U32.unpack_from(data, pos)
        if pos + 4 + n > len(data):
            raise CandidateFormatError("truncated record", pos)
        yield decode_candidate_set(data[pos + 4:pos + 4 + n], base_offset=pos + 4)
        pos += 4 + n


def read_store(path) -> list[CandidateSet]:
    return list(iter_store(Path(path).read_bytes()))


def candidate_set_to_dict(cs: CandidateSet) -> dict:
    """Debug export (JSON-friendly)."""
    def fnum(v):
        return v if math.isfinite(v) else str(v)

    return {
        "sequence_id": cs.sequence_id,
        "density": fnum(cs.density),
        "shared_gaps": cs.shared_gaps(),
        "anchors": [
            {"t": a.timestamp, "segment": a.segment, "offset": a.offset, "x": a.x, "y": a.y,
             "log_emission": a.log_emission}
            for a in cs.candidates[0].anchors
        ],
        "candidates": [
            {
                "confidence": c.confidence,
                "raw_log_prob": c.raw_log_prob,
                "subpaths": [
                    {"segments": list(p.segments), "entry": p.entry_offset, "exit": p.exit_offset,
                     "length_m": p.length_m, "log_prob": s}
                    for p, s in zip(c.subpaths, c.gap_log_probs)
                ],
            }
            for c in cs.candidates
        ],
    }


def dump_debug(sets: Iterable[CandidateSet]) -> str:
    buf = io.StringIO()
    for cs in sets:
        buf.write(json.dumps(candidate_set_to_dict(cs)))
        buf.write("\n")
    return buf.getvalue()

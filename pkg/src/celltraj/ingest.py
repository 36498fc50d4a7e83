"""Carrier-log ingestion: record parsing, per-user sequences, tower density
and the Ping-Pong / backward / drifting noise filters."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from scipy.spatial import cKDTree

from .roadnet import MAX_SPEED_KMH, angle_difference, angle_of

logger = logging.getLogger(__name__)

TIME_FORMAT = "%Y%m%d%H%M%S"
DENSITY_RADIUS_M = 1000.0
RECORD_HEADER = "id,time,lac,cid"
TOWER_HEADER = "lac,cid,lon,lat"

TowerKey = tuple[int, int]


@dataclass(frozen=True)
class CellTower:
    lac: int
    cid: int
    x: float
    y: float
    local_density: float = 0.0

    @property
    def key(self) -> TowerKey:
        return (self.lac, self.cid)


@dataclass(frozen=True)
class CellRecord:
    user_id: str
    timestamp: int
    lac: int
    cid: int

    @property
    def tower(self) -> TowerKey:
        return (self.lac, self.cid)


@dataclass(frozen=True)
class TowerSequence:
    user_id: str
    points: tuple[tuple[int, TowerKey], ...]

    def __len__(self) -> int:
        return len(self.points)

    def with_points(self, points) -> "TowerSequence":
        return TowerSequence(self.user_id, tuple(points))


@dataclass(frozen=True)
class FilterConfig:
    w_p: int = 3
    w_b: int = 5
    speed_cap_kmh: float = MAX_SPEED_KMH
    order: tuple[str, ...] = ("pingpong", "drifting", "backward")
    screen_sample_rate: bool = True
    max_mean_interval_s: float = 600.0

    def __post_init__(self):
        if self.w_p < 1:
            raise ValueError("w_p must be >= 1")
        if self.w_b < 0:
            raise ValueError("w_b must be >= 0")
        if not self.speed_cap_kmh > 0:
            raise ValueError("speed_cap_kmh must be > 0")
        unknown = set(self.order) - set(FILTERS)
        if unknown:
            raise ValueError(f"unknown filters: {sorted(unknown)}")


@dataclass
class IngestStats:
    skipped_lines: int = 0
    duplicates: int = 0
    conflicts: int = 0
    screened_out: int = 0
    removed: dict = field(default_factory=dict)


def format_time(ts: int) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).strftime(TIME_FORMAT)


def parse_time(text: str) -> int:
    if len(text) != 14 or not text.isdigit():
        raise ValueError(f"bad time field {text!r}")
    dt = datetime.strptime(text, TIME_FORMAT).replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def parse_records(lines: Iterable[str]) -> tuple[list[CellRecord], int]:
    """Parse ``id,time,lac,cid`` lines. Returns (records, skipped count).

    Blank lines and a leading header line are ignored without counting.
    """
    records = []
    skipped = 0
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or (lineno == 1 and line.replace(" ", "") == RECORD_HEADER):
            continue
        parts = [p.strip() for p in line.split(",")]
        try:
            if len(parts) != 4 or not parts[0]:
                raise ValueError("expected 4 fields")
            records.append(CellRecord(parts[0], parse_time(parts[1]), int(parts[2]), int(parts[3])))
        except ValueError as exc:
            skipped += 1
            logger.debug("skipping line %d: %s", lineno, exc)
    return records, skipped


def write_records(path, records: Iterable[CellRecord]) -> None:
    with open(path, "w") as fh:
        fh.write(RECORD_HEADER + "\n")
        for r in records:
            fh.write(f"{r.user_id},{format_time(r.timestamp)},{r.lac},{r.cid}\n")


def build_sequences(records: Iterable[CellRecord], stats: IngestStats | None = None) -> list[TowerSequence]:
    """Group records per user and sort by time.

    Exact duplicates collapse; a second record at an already-seen timestamp
    with a different tower is dropped and counted as a conflict.
    """
    stats = stats if stats is not None else IngestStats()
    per_user: dict[str, dict[int, TowerKey]] = {}
    for r in records:
        slots = per_user.setdefault(r.user_id, {})
        prev = slots.get(r.timestamp)
        if prev is None:
            slots[r.timestamp] = r.tower
        elif prev == r.tower:
            stats.duplicates += 1
        else:
            stats.conflicts += 1
    return [
        TowerSequence(uid, tuple(sorted(slots.items())))
        for uid, slots in sorted(per_user.items())
    ]


def screen_sample_rate(seqs: Iterable[TowerSequence], max_mean_interval_s: float = 600.0,
                       stats: IngestStats | None = None) -> list[TowerSequence]:
    """Drop sequences sampled less often than once per ``max_mean_interval_s``
    on average (single-point sequences are dropped too)."""
    kept = []
    for s in seqs:
        if len(s) >= 2:
            span = s.points[-1][0] - s.points[0][0]
            if span / (len(s) - 1) <= max_mean_interval_s:
                kept.append(s)
                continue
        if stats is not None:
            stats.screened_out += 1
    return kept


def load_towers(path, project) -> dict[TowerKey, CellTower]:
    """Read a ``lac,cid,lon,lat`` file; ``project`` maps (lon, lat) to meters."""
    towers = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or (lineno == 1 and line.replace(" ", "") == TOWER_HEADER):
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected lac,cid,lon,lat")
        lac, cid = int(parts[0]), int(parts[1])
        x, y = project(float(parts[2]), float(parts[3]))
        if (lac, cid) in towers:
            raise ValueError(f"{path}:{lineno}: duplicate tower {(lac, cid)}")
        towers[(lac, cid)] = CellTower(lac, cid, x, y)
    return compute_local_density(towers)


def write_towers(path, towers: Mapping[TowerKey, CellTower], unproject) -> None:
    with open(path, "w") as fh:
        fh.write(TOWER_HEADER + "\n")
        for key in sorted(towers):
            t = towers[key]
            lon, lat = unproject(t.x, t.y)
            fh.write(f"{t.lac},{t.cid},{lon!r},{lat!r}\n")


def compute_local_density(towers: Mapping[TowerKey, CellTower],
                          radius_m: float = DENSITY_RADIUS_M) -> dict[TowerKey, CellTower]:
    """Towers per km^2 inside a ``radius_m`` disc around each tower
    (the tower itself included)."""
    keys = list(towers)
    if not keys:
        return {}
    xy = np.array([(towers[k].x, towers[k].y) for k in keys])
    tree = cKDTree(xy)
    # tiny outward tolerance keeps towers exactly on the rim inside
    counts = tree.query_ball_point(xy, radius_m * (1 + 1e-12), return_length=True)
    area_km2 = math.pi * (radius_m / 1000.0) ** 2
    return {
        k: replace(towers[k], local_density=float(c) / area_km2)
        for k, c in zip(keys, counts)
    }


# -------------------------------------------------------------------- filters
def _pingpong_pass(points, w_p):
    removed = [False] * len(points)
    for i, (_, tower) in enumerate(points):
        if removed[i]:
            continue
        window = []
        j = i + 1
        while j < len(points) and len(window) < w_p:
            if not removed[j]:
                window.append(j)
            j += 1
        # alternation means leaving the current tower and coming back to it
        back = [k for k, j in enumerate(window) if points[j][1] == tower]
        if not back:
            continue
        for j in window[:back[-1]]:
            if points[j][1] != tower:
                removed[j] = True
    return [p for p, r in zip(points, removed) if not r]


def pingpong_filter(seq: TowerSequence, w_p: int = 3) -> TowerSequence:
    """Drop towers that interleave with the current tower inside the next
    ``w_p`` points (other towers seen before a return to the current one);
    repeats until the length stops shrinking."""
    if w_p < 1:
        raise ValueError("w_p must be >= 1")
    points = list(seq.points)
    while True:
        nxt = _pingpong_pass(points, w_p)
        if len(nxt) >= len(points):
            return seq.with_points(points)
        points = nxt


def _pos(towers, key):
    t = towers[key]
    return (t.x, t.y)


def _heading(towers, kept):
    """Angle between the last two distinct positions of ``kept``."""
    last = _pos(towers, kept[-1][1])
    for p in reversed(kept[:-1]):
        q = _pos(towers, p[1])
        if q != last:
            return angle_of(last[0] - q[0], last[1] - q[1])
    return None


def backward_filter(seq: TowerSequence, towers: Mapping[TowerKey, CellTower],
                    w_b: int = 5) -> TowerSequence:
    """Remove isolated direction reversals.

    A point whose movement angle departs from the running heading by more
    than 90 degrees is cached. If every one of the next ``w_b`` points keeps
    moving along the new direction (as seen from the cached point), all of
    them are kept and the heading resets; otherwise only the cached point is
    dropped and scanning resumes right after it. ``w_b == 0`` disables the
    filter.
    """
    pts = seq.points
    if w_b == 0 or len(pts) < 3:
        return seq
    kept = [pts[0]]
    heading = None
    i = 1
    while i < len(pts):
        p = pts[i]
        last = _pos(towers, kept[-1][1])
        here = _pos(towers, p[1])
        if here == last:
            kept.append(p)
            i += 1
            continue
        move = angle_of(here[0] - last[0], here[1] - last[1])
        if heading is None or angle_difference(move, heading) <= math.pi / 2:
            kept.append(p)
            heading = move
            i += 1
            continue
        window = pts[i + 1:i + 1 + w_b]
        confirmed = bool(window)
        for q in window:
            there = _pos(towers, q[1])
            if there != here and angle_difference(
                angle_of(there[0] - here[0], there[1] - here[1]), move
            ) > math.pi / 2:
                confirmed = False
                break
        if confirmed:
            kept.append(p)
            kept.extend(window)
            heading = _heading(towers, kept)
            i += 1 + len(window)
        else:
            # the window points still get checked one by one, so a second
            # reversal right behind the first is caught too
            i += 1
    return seq.with_points(kept)


def implied_speed_kmh(towers, a, b) -> float:
    (t0, k0), (t1, k1) = a, b
    x0, y0 = _pos(towers, k0)
    x1, y1 = _pos(towers, k1)
    dt = t1 - t0
    if dt <= 0:
        return math.inf
    return math.hypot(x1 - x0, y1 - y0) / dt * 3.6


def drifting_filter(seq: TowerSequence, towers: Mapping[TowerKey, CellTower],
                    speed_cap_kmh: float = MAX_SPEED_KMH, head: int = 3) -> TowerSequence:
    """Drop points reached from the last kept point faster than the cap.

    The scan may start at any of the first ``head`` points; the start that
    keeps the most points wins (earliest on ties), so a drifted first point
    does not drag the rest of the sequence out with it.
    """
    if not speed_cap_kmh > 0:
        raise ValueError("speed_cap_kmh must be > 0")

    def scan(pts):
        kept = pts[:1]
        for p in pts[1:]:
            if implied_speed_kmh(towers, kept[-1], p) <= speed_cap_kmh:
                kept.append(p)
        return kept

    pts = list(seq.points)
    while True:
        kept = max((scan(pts[k:]) for k in range(min(head, len(pts)))),
                   key=len, default=[])
        if len(kept) == len(pts):
            return seq.with_points(kept)
        pts = kept


FILTERS = ("pingpong", "backward", "drifting")


def apply_filters(seq: TowerSequence, towers: Mapping[TowerKey, CellTower],
                  cfg: FilterConfig = FilterConfig(), stats: IngestStats | None = None) -> TowerSequence:
    for name in cfg.order:
        before = len(seq)
        if name == "pingpong":
            seq = pingpong_filter(seq, cfg.w_p)
        elif name == "backward":
            seq = backward_filter(seq, towers, cfg.w_b)
        else:
            seq = drifting_filter(seq, towers, cfg.speed_cap_kmh)
        if stats is not None:
            stats.removed[name] = stats.removed.get(name, 0) + before - len(seq)
    return seq


def preprocess(lines: Iterable[str], towers: Mapping[TowerKey, CellTower],
               cfg: FilterConfig = FilterConfig()) -> tuple[list[TowerSequence], IngestStats]:
    """Records -> screened, filtered tower sequences (unknown towers dropped)."""
    stats = IngestStats()
    records, stats.skipped_lines = parse_records(lines)
    unknown = [r for r in records if r.tower not in towers]
    if unknown:
        logger.warning("%d records reference unknown towers; dropped", len(unknown))
        stats.skipped_lines += len(unknown)
        records = [r for r in records if r.tower in towers]
    seqs = build_sequences(records, stats)
    if cfg.screen_sample_rate:
        seqs = screen_sample_rate(seqs, cfg.max_mean_interval_s, stats)
    return [apply_filters(s, towers, cfg, stats) for s in seqs], stats

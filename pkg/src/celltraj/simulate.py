"""Synthetic benchmark worlds (grid city, carrier towers, co-moving groups,
noisy handover logs) and the evaluation metrics used on them."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .ingest import (TOWER_HEADER, CellRecord, CellTower, TowerKey, compute_local_density,
                     load_towers, parse_records, write_records)
from .mapmatch import CandidateSet, CandidateTrajectory
from .roadnet import (PathOnNetwork, RoadNetwork, load_network, network_from_dict,
                      project_point, unproject_point)
from .simsearch import QueryResult, arc_overlap

BASE_TIME = 1_704_067_200  # 2024-01-01T00:00:00Z
WORLD_ORIGIN = (116.30, 39.90)
WORLD_FILES = ("network.json", "towers.csv", "records.csv", "truth.json", "config.json")


class BenchmarkConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BenchmarkConfig:
    seed: int = 1
    rows: int = 20
    cols: int = 20
    block_m: float = 400.0
    arterial_every: int = 5
    local_speed_kmh: float = 40.0
    arterial_speed_kmh: float = 60.0
    # (outer radius as a fraction of the half-diagonal, towers/km^2 over all carriers)
    tower_density_profile: tuple[tuple[float, float], ...] = ((0.6, 400.0), (1.01, 300.0))
    carrier_count: int = 2
    group_count: int = 50
    group_size: tuple[int, int] = (2, 8)
    background_users: int = 50
    trip_km: tuple[float, float] = (8.0, 15.0)
    sample_interval_s: tuple[int, int] = (30, 60)
    speed_fraction: tuple[float, float] = (0.6, 0.9)
    start_window_s: int = 7200
    handover_hysteresis: float = 0.10
    pingpong_rate: float = 0.05
    backward_rate: float = 0.05
    drift_rate: float = 0.05

    def __post_init__(self):
        for name in ("pingpong_rate", "backward_rate", "drift_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise BenchmarkConfigError(f"{name} must be in [0, 1], got {v}")
        lo, hi = self.group_size
        if lo < 2 or hi < lo:
            raise BenchmarkConfigError("group_size must satisfy 2 <= min <= max")
        if self.rows < 2 or self.cols < 2 or not self.block_m > 0:
            raise BenchmarkConfigError("grid must be at least 2x2 with a positive block size")
        if self.carrier_count < 1 or self.group_count < 0 or self.background_users < 0:
            raise BenchmarkConfigError("counts must be non-negative, carriers >= 1")
        if not 0 < self.sample_interval_s[0] <= self.sample_interval_s[1]:
            raise BenchmarkConfigError("bad sample_interval_s range")
        if not 0 < self.trip_km[0] <= self.trip_km[1]:
            raise BenchmarkConfigError("bad trip_km range")
        if not 0 < self.speed_fraction[0] <= self.speed_fraction[1] <= 1:
            raise BenchmarkConfigError("speed_fraction must lie in (0, 1]")
        if not self.tower_density_profile or any(d <= 0 for _, d in self.tower_density_profile):
            raise BenchmarkConfigError("tower densities must be positive")
        if not 0 <= self.handover_hysteresis < 1:
            raise BenchmarkConfigError("handover_hysteresis must be in [0, 1)")

    @classmethod
    def from_dict(cls, data: Mapping) -> "BenchmarkConfig":
        kw = {}
        for f in fields(cls):
            if f.name in data:
                v = data[f.name]
                if isinstance(v, list):
                    v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
                kw[f.name] = v
        return cls(**kw)


# ------------------------------------------------------------- ground truth
@dataclass(frozen=True)
class MemberTruth:
    """True route of one phone: segments with entry/exit times (s)."""

    user_id: str
    group: int | None
    carrier: int
    path: PathOnNetwork
    times: tuple[float, ...]  # len(segments) + 1 boundary instants

    @property
    def span(self) -> tuple[float, float]:
        return self.times[0], self.times[-1]

    def arcs(self, t0: float | None = None, t1: float | None = None, net: RoadNetwork | None = None):
        """Directed (segment, lo, hi) intervals traversed during [t0, t1]."""
        t0 = self.times[0] if t0 is None else max(t0, self.times[0])
        t1 = self.times[-1] if t1 is None else min(t1, self.times[-1])
        out = []
        segs = self.path.segments
        for i, sid in enumerate(segs):
            a = self.path.entry_offset if i == 0 else 0.0
            if i == len(segs) - 1:
                b = self.path.exit_offset
            elif net is not None:
                b = net.segments[sid].length_m
            else:
                raise ValueError("net is needed for interior segment lengths")
            ta, tb = self.times[i], self.times[i + 1]
            lo_t, hi_t = max(t0, ta), min(t1, tb)
            if hi_t <= lo_t or tb <= ta:
                continue
            lo = a + (b - a) * (lo_t - ta) / (tb - ta)
            hi = a + (b - a) * (hi_t - ta) / (tb - ta)
            if hi > lo:
                out.append((sid, lo, hi))
        return out

    def position(self, t: float, net: RoadNetwork) -> tuple[float, float]:
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        i = min(max(i, 0), len(self.path.segments) - 1)
        seg = net.segments[self.path.segments[i]]
        ta, tb = self.times[i], self.times[i + 1]
        frac = 0.0 if tb <= ta else min(1.0, max(0.0, (t - ta) / (tb - ta)))
        return seg.point_at(frac * seg.length_m)


@dataclass
class GroundTruth:
    members: dict[str, MemberTruth]
    groups: dict[int, tuple[str, ...]]

    def group_of(self, user_id: str) -> tuple[str, ...]:
        m = self.members.get(user_id)
        if m is None or m.group is None:
            return ()
        return self.groups.get(m.group, ())

    def comoving_pairs(self) -> list[tuple[str, str]]:
        return [(a, b) for g in sorted(self.groups) for i, a in enumerate(self.groups[g])
                for b in self.groups[g][i + 1:]]

    def to_dict(self) -> dict:
        return {
            "groups": {str(g): list(u) for g, u in sorted(self.groups.items())},
            "members": {
                uid: {
                    "group": m.group,
                    "carrier": m.carrier,
                    "entry": m.path.entry_offset,
                    "exit": m.path.exit_offset,
                    "length_m": m.path.length_m,
                    "segments": [[sid, ta, tb] for sid, ta, tb in
                                 zip(m.path.segments, m.times, m.times[1:])],
                }
                for uid, m in sorted(self.members.items())
            },
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "GroundTruth":
        members = {}
        for uid, m in data["members"].items():
            segs = m["segments"]
            path = PathOnNetwork(tuple(int(s[0]) for s in segs), float(m["entry"]),
                                 float(m["exit"]), float(m["length_m"]))
            times = tuple(float(s[1]) for s in segs) + (float(segs[-1][2]),)
            members[uid] = MemberTruth(uid, m["group"], int(m["carrier"]), path, times)
        groups = {int(g): tuple(u) for g, u in data["groups"].items()}
        return cls(members, groups)


@dataclass
class BenchmarkWorld:
    config: BenchmarkConfig
    network: RoadNetwork
    network_doc: dict
    towers: dict[TowerKey, CellTower]
    tower_carrier: dict[TowerKey, int]
    tower_geo: dict[TowerKey, tuple[float, float]]
    records: list[CellRecord]
    truth: GroundTruth


# ----------------------------------------------------------------- building
def scaled_config(n_phones: int, seed: int = 1, **overrides) -> BenchmarkConfig:
    """A world of about ``n_phones`` short trips spread over a day, half of
    the phones in groups. Used for pruning and throughput runs."""
    kw = dict(seed=seed, trip_km=(2.0, 5.0), sample_interval_s=(60, 120),
              start_window_s=86400)
    kw.update(overrides)
    lo, hi = kw.get("group_size", BenchmarkConfig.group_size)
    grouped = n_phones // 2
    kw.setdefault("group_count", max(1, round(grouped / ((lo + hi) / 2))))
    kw.setdefault("background_users", max(0, n_phones - grouped))
    return BenchmarkConfig(**kw)


def grid_network_doc(rows: int, cols: int, block_m: float, arterial_every: int = 5,
                     local_kmh: float = 40.0, arterial_kmh: float = 60.0,
                     origin: tuple[float, float] = WORLD_ORIGIN) -> dict:
    """Road-network document for a rows x cols grid of two-way streets.

    Node (r, c) has id ``r * cols + c``; every ``arterial_every``-th row and
    column is an arterial with the higher speed limit.
    """
    nodes = []
    for r in range(rows):
        for c in range(cols):
            lon, lat = unproject_point(origin, c * block_m, r * block_m)
            nodes.append({"id": r * cols + c, "lon": lon, "lat": lat})

    def speed(line_index):
        return arterial_kmh if arterial_every and line_index % arterial_every == 0 else local_kmh

    segs = []
    sid = 0
    for r in range(rows):
        for c in range(cols):
            u = r * cols + c
            if c + 1 < cols:
                segs.append({"id": sid, "reverse_id": sid + 1, "from": u, "to": u + 1,
                             "speed_kmh": speed(r), "oneway": False})
                sid += 2
            if r + 1 < rows:
                segs.append({"id": sid, "reverse_id": sid + 1, "from": u, "to": u + cols,
                             "speed_kmh": speed(c), "oneway": False})
                sid += 2
    return {"origin": {"lon": origin[0], "lat": origin[1]}, "nodes": nodes, "segments": segs}


def _place_towers(cfg: BenchmarkConfig, rng: np.random.Generator, origin):
    """Jittered lattices per density zone; carriers assigned round-robin in
    placement order. Positions are whole meters."""
    w = (cfg.cols - 1) * cfg.block_m
    h = (cfg.rows - 1) * cfg.block_m
    cx, cy = w / 2, h / 2
    half_diag = math.hypot(cx, cy)
    margin = cfg.block_m
    placed = []
    inner = 0.0
    for frac, density in cfg.tower_density_profile:
        spacing = 1000.0 / math.sqrt(density)
        jitter = max(1, int(spacing / 4))
        ys = np.arange(-margin, h + margin + 1e-9, spacing)
        xs = np.arange(-margin, w + margin + 1e-9, spacing)
        for y in ys:
            for x in xs:
                r = math.hypot(x - cx, y - cy) / half_diag
                if not inner <= r < frac:
                    continue
                jx, jy = rng.integers(-jitter, jitter + 1, size=2)
                placed.append((float(round(x) + jx), float(round(y) + jy)))
        inner = frac
    towers, carrier, geo = {}, {}, {}
    for i, (x, y) in enumerate(placed):
        c = i % cfg.carrier_count
        key = (100 * (c + 1), i)
        # towers live in lon/lat on disk; project back so memory matches a reload
        geo[key] = unproject_point(origin, x, y)
        towers[key] = CellTower(key[0], key[1], *project_point(origin, *geo[key]))
        carrier[key] = c
    return compute_local_density(towers), carrier, geo


def _legs(r0, c0, r1, c1, rng):
    """Grid nodes of an L- or Z-shaped drive from (r0, c0) to (r1, c1)."""
    def run(r, c, dr, dc, n):
        return [(r + dr * k, c + dc * k) for k in range(1, n + 1)]

    def along_row(r, c, c_to):
        step = 1 if c_to >= c else -1
        return run(r, c, 0, step, abs(c_to - c))

    def along_col(r, c, r_to):
        step = 1 if r_to >= r else -1
        return run(r, c, step, 0, abs(r_to - r))

    shape = int(rng.integers(4))
    pts = [(r0, c0)]
    if shape == 0 or c0 == c1 or r0 == r1:  # row first
        pts += along_row(r0, c0, c1)
        pts += along_col(r0, c1, r1)
    elif shape == 1:  # column first
        pts += along_col(r0, c0, r1)
        pts += along_row(r1, c0, c1)
    elif shape == 2:  # row, column, row
        cm = int(rng.integers(min(c0, c1), max(c0, c1) + 1))
        pts += along_row(r0, c0, cm)
        pts += along_col(r0, cm, r1)
        pts += along_row(r1, cm, c1)
    else:  # column, row, column
        rm = int(rng.integers(min(r0, r1), max(r0, r1) + 1))
        pts += along_col(r0, c0, rm)
        pts += along_row(rm, c0, c1)
        pts += along_col(rm, c1, r1)
    return pts


def _trip(net: RoadNetwork, by_pair, cfg: BenchmarkConfig, rng: np.random.Generator):
    lo = cfg.trip_km[0] * 1000 / cfg.block_m
    hi = cfg.trip_km[1] * 1000 / cfg.block_m
    for _ in range(1000):
        r0, c0, r1, c1 = (int(v) for v in rng.integers(0, [cfg.rows, cfg.cols, cfg.rows, cfg.cols]))
        if lo <= abs(r0 - r1) + abs(c0 - c1) <= hi:
            break
    else:
        raise BenchmarkConfigError("could not draw a trip; check trip_km against the grid size")
    cells = _legs(r0, c0, r1, c1, rng)
    nodes = [r * cfg.cols + c for r, c in cells]
    segs = [by_pair[(u, v)] for u, v in zip(nodes, nodes[1:])]
    t = float(BASE_TIME + int(rng.integers(cfg.start_window_s)))
    times = [t]
    for sid in segs:
        s = net.segments[sid]
        v = s.speed_limit_kmh * rng.uniform(*cfg.speed_fraction) / 3.6
        t += s.length_m / v
        times.append(t)
    last = net.segments[segs[-1]].length_m
    length = sum(net.segments[s].length_m for s in segs[:-1]) + last
    return PathOnNetwork(tuple(segs), 0.0, last, length), tuple(times)


class _Handover:
    """Nearest-tower attachment per carrier with switching hysteresis."""

    def __init__(self, towers, carrier_of, carriers):
        self.keys = {}
        self.xy = {}
        self.trees = {}
        for c in range(carriers):
            keys = sorted(k for k in towers if carrier_of[k] == c)
            self.keys[c] = keys
            self.xy[c] = np.array([(towers[k].x, towers[k].y) for k in keys])
            self.trees[c] = cKDTree(self.xy[c])
        self.towers = towers

    def nearest(self, carrier, p, k=1):
        d, i = self.trees[carrier].query(p, k=k)
        if k == 1:
            return self.keys[carrier][int(i)], float(d)
        return [(self.keys[carrier][int(j)], float(e)) for e, j in zip(d, i)]

    def dist(self, key, p):
        t = self.towers[key]
        return math.hypot(t.x - p[0], t.y - p[1])


def _observe(member: MemberTruth, net, handover: _Handover, cfg, rng, interval, phase):
    t0, t1 = member.span
    obs = []
    current = None
    t = math.ceil(t0) + phase
    while t <= t1:
        p = member.position(t, net)
        best, d = handover.nearest(member.carrier, p)
        if current is None or (best != current and d < (1 - cfg.handover_hysteresis) * handover.dist(current, p)):
            current = best
        obs.append((int(t), current, p))
        t += interval
    return obs


# the ping-pong rate counts noisy records, and a burst adds 2 or 3 of them
_MEAN_BURST = 2.5


def _inject_noise(obs, member, net, handover: _Handover, cfg, rng):
    """Corrupt sampled towers: far-tower drift spikes, flips back to an
    earlier tower, and ping-pong bursts. A burst adds records between two
    samples that alternate between the two cells nearest the phone."""
    out = []
    carrier = member.carrier
    keys = handover.keys[carrier]
    xy = handover.xy[carrier]
    for i, (t, key, p) in enumerate(obs):
        u = rng.random(3)
        if u[0] < cfg.drift_rate:
            d = np.hypot(xy[:, 0] - p[0], xy[:, 1] - p[1])
            far = np.flatnonzero(d >= 0.6 * d.max())
            key = keys[int(far[int(rng.integers(len(far)))])]
        elif u[1] < cfg.backward_rate and i >= 2:
            # a cell behind the phone that it has not just reported
            back = member.position(t - 1.5 * (t - obs[i - 1][0]), net)
            recent = {obs[i - 1][1], obs[i - 2][1], key}
            for cand, _ in handover.nearest(carrier, back, k=4):
                if cand not in recent:
                    key = cand
                    break
        elif u[2] < cfg.pingpong_rate / _MEAN_BURST and i >= 1:
            n = int(rng.integers(2, 4))
            gap = int(rng.integers(3, 9))
            t_prev = obs[i - 1][0]
            if t - t_prev > n * gap + 1:
                start = int(rng.integers(t_prev + 1, t - n * gap))
                pair = [k for k, _ in handover.nearest(carrier, member.position(start, net), k=2)]
                for j in range(n):
                    out.append((start + j * gap, pair[j % 2]))
        out.append((t, key))
    return out


def synthesize_benchmark(cfg: BenchmarkConfig = BenchmarkConfig()) -> BenchmarkWorld:
    """Seed-deterministic world: grid network, towers, truth and records."""
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    # separate stream so noise settings never change the underlying world
    noise_rng = np.random.default_rng(np.random.PCG64([cfg.seed, 1]))
    doc = grid_network_doc(cfg.rows, cfg.cols, cfg.block_m, cfg.arterial_every,
                           cfg.local_speed_kmh, cfg.arterial_speed_kmh)
    net = network_from_dict(doc)
    towers, carrier_of, geo = _place_towers(cfg, rng, net.origin)
    handover = _Handover(towers, carrier_of, cfg.carrier_count)
    by_pair = {(sg.source, sg.target): sid for sid, sg in net.segments.items()}
    members: dict[str, MemberTruth] = {}
    groups: dict[int, tuple[str, ...]] = {}
    records: list[CellRecord] = []

    def add_phone(uid, group, path, times):
        carrier = int(rng.integers(cfg.carrier_count))
        m = MemberTruth(uid, group, carrier, path, times)
        members[uid] = m
        interval = int(rng.integers(cfg.sample_interval_s[0], cfg.sample_interval_s[1] + 1))
        phase = int(rng.integers(interval))
        obs = _observe(m, net, handover, cfg, rng, interval, phase)
        for t, key in _inject_noise(obs, m, net, handover, cfg, noise_rng):
            records.append(CellRecord(uid, t, key[0], key[1]))

    for g in range(cfg.group_count):
        path, times = _trip(net, by_pair, cfg, rng)
        size = int(rng.integers(cfg.group_size[0], cfg.group_size[1] + 1))
        uids = tuple(f"g{g:03d}m{k}" for k in range(size))
        groups[g] = uids
        for uid in uids:
            add_phone(uid, g, path, times)
    for b in range(cfg.background_users):
        path, times = _trip(net, by_pair, cfg, rng)
        add_phone(f"bg{b:04d}", None, path, times)
    records.sort(key=lambda r: (r.user_id, r.timestamp))
    return BenchmarkWorld(cfg, net, doc, towers, carrier_of, geo, records, GroundTruth(members, groups))


# ------------------------------------------------------------------ storage
def save_world(world: BenchmarkWorld, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "network.json").write_text(json.dumps(world.network_doc, indent=1, sort_keys=True) + "\n")
    with open(d / "towers.csv", "w") as fh:
        fh.write(TOWER_HEADER + "\n")
        for key in sorted(world.towers):
            lon, lat = world.tower_geo[key]
            fh.write(f"{key[0]},{key[1]},{lon!r},{lat!r}\n")
    write_records(d / "records.csv", world.records)
    (d / "truth.json").write_text(json.dumps(world.truth.to_dict(), sort_keys=True) + "\n")
    cfg = asdict(world.config)
    cfg["tower_carrier"] = {f"{k[0]}:{k[1]}": c for k, c in sorted(world.tower_carrier.items())}
    (d / "config.json").write_text(json.dumps(cfg, sort_keys=True, indent=1) + "\n")
    return d


def load_world(directory) -> BenchmarkWorld:
    d = Path(directory)
    for name in WORLD_FILES:
        if not (d / name).exists():
            raise FileNotFoundError(f"world is missing {d / name}")
    doc = json.loads((d / "network.json").read_text())
    net = load_network(d / "network.json")
    towers = load_towers(d / "towers.csv", net.project)
    geo = {}
    for line in (d / "towers.csv").read_text().splitlines()[1:]:
        lac, cid, lon, lat = line.split(",")
        geo[(int(lac), int(cid))] = (float(lon), float(lat))
    records, _ = parse_records((d / "records.csv").read_text().splitlines())
    truth = GroundTruth.from_dict(json.loads((d / "truth.json").read_text()))
    raw = json.loads((d / "config.json").read_text())
    carrier = {tuple(int(v) for v in k.split(":")): c for k, c in raw.pop("tower_carrier").items()}
    return BenchmarkWorld(BenchmarkConfig.from_dict(raw), net, doc, towers, carrier, geo, records, truth)


# ------------------------------------------------------------------ metrics
@dataclass
class Metrics:
    precision: float = 0.0
    recall: float = 0.0
    f_measure: float = 0.0
    matching_precision: float = 0.0
    matching_recall: float = 0.0
    queries: int = 0
    excluded: int = 0
    per_query: dict = field(default_factory=dict)


def f_measure(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def evaluate_search(results: Mapping[str, Sequence[QueryResult | str]], truth: GroundTruth) -> Metrics:
    """Per-query precision/recall against the query's co-moving group,
    averaged over queries. An empty result list counts as precision 1."""
    ps, rs = [], []
    m = Metrics()
    for qid in sorted(results):
        relevant = set(truth.group_of(qid)) - {qid}
        ids = {r if isinstance(r, str) else r.entry_id for r in results[qid]}
        unknown = ids - set(truth.members)
        if unknown:
            raise KeyError(f"result ids not in ground truth: {sorted(unknown)[:5]}")
        if not relevant:
            m.excluded += 1
            continue
        retrieved = ids - {qid}
        hit = len(retrieved & relevant)
        p = hit / len(retrieved) if retrieved else 1.0
        r = hit / len(relevant)
        m.per_query[qid] = (p, r)
        ps.append(p)
        rs.append(r)
    m.queries = len(ps)
    if ps:
        m.precision = float(np.mean(ps))
        m.recall = float(np.mean(rs))
        m.f_measure = f_measure(m.precision, m.recall)
    return m


def trajectory_arcs(cand: CandidateTrajectory, net: RoadNetwork):
    """Directed (segment, lo, hi) intervals covered by a candidate."""
    out = []
    for path in cand.subpaths:
        last = len(path.segments) - 1
        for i, sid in enumerate(path.segments):
            a = path.entry_offset if i == 0 else 0.0
            b = path.exit_offset if i == last else net.segments[sid].length_m
            if b > a:
                out.append((sid, a, b))
    return out


def _measure(arcs) -> float:
    return arc_overlap(arcs, arcs)


def evaluate_matching(matched: Mapping[str, CandidateTrajectory], truth: GroundTruth,
                      net: RoadNetwork, clip_to_observed: bool = True) -> Metrics:
    """Length-based matching precision and recall over all sequences.

    Truth is clipped to the matched trajectory's time span, since route
    parts before the first or after the last observation are unobservable.
    """
    correct = out_len = truth_len = 0.0
    for uid in sorted(matched):
        cand = matched[uid]
        m_arcs = trajectory_arcs(cand, net)
        ts = cand.timestamps
        member = truth.members[uid]
        t_arcs = member.arcs(ts[0], ts[-1], net) if clip_to_observed else member.arcs(net=net)
        correct += arc_overlap(m_arcs, t_arcs)
        out_len += _measure(m_arcs)
        truth_len += _measure(t_arcs)
    m = Metrics(queries=len(matched))
    m.matching_precision = correct / out_len if out_len > 0 else 1.0
    m.matching_recall = correct / truth_len if truth_len > 0 else 1.0
    return m


def truth_overlap(cand: CandidateTrajectory, member: MemberTruth, net: RoadNetwork) -> float:
    """Share of the (observed part of the) true route the candidate covers."""
    ts = cand.timestamps
    t_arcs = member.arcs(ts[0], ts[-1], net)
    total = _measure(t_arcs)
    return arc_overlap(t_arcs, trajectory_arcs(cand, net)) / total if total > 0 else 0.0


def best_truth_overlap(cs: CandidateSet, member: MemberTruth, net: RoadNetwork, m: int | None = None) -> float:
    cands = cs.candidates if m is None else cs.candidates[:m]
    return max(truth_overlap(c, member, net) for c in cands)

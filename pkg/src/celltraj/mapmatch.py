"""HMM map matching of tower sequences onto the road network, with top-M
trajectory candidates.

Scores are log densities throughout. Emission uses a Gaussian on the
weighted tower-to-road distance; transitions decay exponentially with the
excess of a pair's network distance over the step's minimum.
"""
from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .ingest import CellTower, TowerKey, TowerSequence
from .roadnet import (
    MAX_SPEED_KMH,
    PathOnNetwork,
    Projection,
    RoadNetwork,
    SegmentPoint,
    angle_difference,
    angle_of,
    search_range,
)

logger = logging.getLogger(__name__)

_LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


class MatchError(Exception):
    pass


class TooShortError(MatchError):
    pass


class UnmatchablePointError(MatchError):
    def __init__(self, index: int):
        super().__init__(f"observation {index} has no candidate segment")
        self.index = index


@dataclass(frozen=True)
class MatchConfig:
    beta: float = 0.0096          # km
    c_speed: float = 0.08
    sigma_scale: float = 0.5
    w_d_floor: float = 0.25
    k_paths: int = 4
    path_slack: float = 0.10
    single_path_tol: float = 0.05
    m_max: int = 7
    max_candidates: int | None = None
    drop_unmatchable: bool = True

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be > 0")
        if not 0 <= self.c_speed < 1:
            raise ValueError("c_speed must be in [0, 1)")
        if not 0 < self.w_d_floor <= 1:
            raise ValueError("w_d_floor must be in (0, 1]")
        if self.k_paths < 1 or self.m_max < 1:
            raise ValueError("k_paths and m_max must be >= 1")


@dataclass(frozen=True)
class HmmState:
    """Candidate road position for one observation.

    ``emission`` is the heading-free density (direction weight 1).
    """

    index: int
    segment: int
    point: tuple[float, float]
    offset: float
    distance_m: float
    emission: float
    speed_weight: float

    @property
    def anchor(self) -> SegmentPoint:
        return SegmentPoint(self.segment, self.offset)


@dataclass(frozen=True)
class Anchor:
    """Matched position of one observation, shared by all candidates."""

    timestamp: float
    segment: int
    offset: float
    x: float
    y: float
    log_emission: float

    @property
    def point(self) -> SegmentPoint:
        return SegmentPoint(self.segment, self.offset)


@dataclass(frozen=True)
class CandidateTrajectory:
    anchors: tuple[Anchor, ...]
    subpaths: tuple[PathOnNetwork, ...]
    gap_log_probs: tuple[float, ...]
    raw_log_prob: float
    confidence: float = 1.0

    @property
    def length_m(self) -> float:
        total = 0.0
        for p in self.subpaths:
            total += p.length_m
        return total

    @property
    def timestamps(self) -> tuple[float, ...]:
        return tuple(a.timestamp for a in self.anchors)


@dataclass(frozen=True)
class CandidateSet:
    sequence_id: str
    candidates: tuple[CandidateTrajectory, ...]
    density: float = math.inf  # lowest local tower density at the endpoints

    def __len__(self) -> int:
        return len(self.candidates)

    def truncated(self, m: int) -> "CandidateSet":
        return CandidateSet(self.sequence_id, self.candidates[:m], self.density)

    def shared_gaps(self) -> list[bool]:
        """Per gap: True when every candidate uses the same sub-path."""
        first = self.candidates[0].subpaths
        return [all(c.subpaths[g] == first[g] for c in self.candidates[1:]) for g in range(len(first))]


@dataclass
class MatchStats:
    dropped_observations: int = 0
    radius_doublings: int = 0
    unreachable_steps: int = 0


# ------------------------------------------------------------------ weights
def direction_weight(heading: float | None, segment_angle: float, floor: float) -> float:
    """Heading-vs-road weight; 1 when no heading is known."""
    if heading is None:
        return 1.0
    return max(floor, angle_difference(heading, segment_angle) / (2 * math.pi))


def speed_weight(speed_limit_kmh: float, c_speed: float) -> float:
    return 1.0 - c_speed * (speed_limit_kmh / MAX_SPEED_KMH)


def log_emission(distance_m: float, w_d: float, w_s: float, sigma: float) -> float:
    z = w_d * w_s * distance_m / sigma
    return -math.log(sigma) - _LOG_SQRT_2PI - 0.5 * z * z


def tower_sigma(tower: CellTower, cfg: MatchConfig) -> float:
    return cfg.sigma_scale * search_range(tower.local_density)


def emission_probability(tower: CellTower, state: HmmState, heading: float | None,
                         net: RoadNetwork, cfg: MatchConfig = MatchConfig()) -> float:
    """Gaussian emission density of observing ``tower`` from ``state``."""
    seg = net.segments[state.segment]
    w_d = direction_weight(heading, seg.direction_angle, cfg.w_d_floor)
    w_s = speed_weight(seg.speed_limit_kmh, cfg.c_speed)
    return math.exp(log_emission(state.distance_m, w_d, w_s, tower_sigma(tower, cfg)))


def log_transition(distance_m: float, min_distance_m: float, beta: float) -> float:
    if not math.isfinite(distance_m):
        return -math.inf
    excess_km = abs(distance_m - min_distance_m) / 1000.0
    return -math.log(beta) - excess_km / beta


def transition_probability(prev_states: Sequence[HmmState], cur_states: Sequence[HmmState],
                           frm: HmmState, to: HmmState, net: RoadNetwork,
                           cfg: MatchConfig = MatchConfig()) -> tuple[float, PathOnNetwork | None]:
    """Transition density from ``frm`` to ``to`` and the path realising it."""
    if not prev_states:
        raise ValueError("prev_states must be non-empty")
    dm = net.distance_matrix([s.anchor for s in prev_states], [s.anchor for s in cur_states])
    finite = dm[np.isfinite(dm)]
    d = net.network_distance(frm.anchor, to.anchor)
    if not math.isfinite(d) or finite.size == 0:
        return 0.0, None
    return math.exp(log_transition(d, float(finite.min()), cfg.beta)), net.shortest_path(frm.anchor, to.anchor)


# ------------------------------------------------------------------- layers
@dataclass
class _Layer:
    index: int
    timestamp: float
    sigma: float
    density: float
    states: list[HmmState]


def _states_from(projs: Sequence[Projection], index, sigma, net, cfg, limit) -> list[HmmState]:
    if limit is not None and len(projs) > limit:
        projs = sorted(projs, key=lambda p: (p.distance_m, p.segment))[:limit]
        projs = sorted(projs, key=lambda p: p.segment)
    states = []
    for p in projs:
        w_s = speed_weight(net.segments[p.segment].speed_limit_kmh, cfg.c_speed)
        states.append(HmmState(index, p.segment, p.point, p.offset, p.distance_m,
                               math.exp(log_emission(p.distance_m, 1.0, w_s, sigma)), w_s))
    return states


def build_layers(seq: TowerSequence, towers: Mapping[TowerKey, CellTower], net: RoadNetwork,
                 cfg: MatchConfig, stats: MatchStats | None = None) -> list[_Layer]:
    stats = stats if stats is not None else MatchStats()
    layers = []
    for i, (ts, key) in enumerate(seq.points):
        tower = towers[key]
        radius = search_range(tower.local_density)
        projs = net.candidate_segments(tower, radius)
        if not projs:
            stats.radius_doublings += 1
            projs = net.candidate_segments(tower, 2 * radius)
        if not projs:
            if not cfg.drop_unmatchable:
                raise UnmatchablePointError(i)
            stats.dropped_observations += 1
            continue
        sigma = cfg.sigma_scale * radius
        layers.append(_Layer(i, float(ts), sigma, tower.local_density,
                             _states_from(projs, i, sigma, net, cfg, cfg.max_candidates)))
    return layers


def gps_layers(points: Sequence[tuple[float, float, float]], net: RoadNetwork, cfg: MatchConfig,
               radius: float = 60.0, sigma: float = 20.0) -> list[_Layer]:
    """Layers for a GPS trace of (t, x, y) fixes with a fixed radius/sigma."""
    layers = []
    for i, (t, x, y) in enumerate(points):
        projs = net.segments_within(x, y, radius) or net.segments_within(x, y, 4 * radius)
        if projs:
            layers.append(_Layer(i, float(t), sigma, math.inf,
                                 _states_from(projs, i, sigma, net, cfg, cfg.max_candidates)))
    return layers


# ------------------------------------------------------------------ viterbi
def _pair_terms(prev: _Layer, cur: _Layer, net: RoadNetwork, cfg: MatchConfig):
    """(emission, transition, distance) matrices for one step."""
    dm = net.distance_matrix([s.anchor for s in prev.states], [s.anchor for s in cur.states])
    finite = dm[np.isfinite(dm)]
    if finite.size == 0:
        return None
    dmin = float(finite.min())
    n_p, n_c = dm.shape
    em = np.empty((n_p, n_c))
    tr = np.empty((n_p, n_c))
    for j, c in enumerate(cur.states):
        seg_angle = net.segments[c.segment].direction_angle
        for i, p in enumerate(prev.states):
            dx, dy = c.point[0] - p.point[0], c.point[1] - p.point[1]
            if dx == 0.0 and dy == 0.0:
                w_d = cfg.w_d_floor
            else:
                w_d = direction_weight(angle_of(dx, dy), seg_angle, cfg.w_d_floor)
            em[i, j] = log_emission(c.distance_m, w_d, c.speed_weight, cur.sigma)
            tr[i, j] = log_transition(dm[i, j], dmin, cfg.beta)
    return em, tr, dm, dmin


@dataclass
class MatchDetail:
    """Viterbi output with the per-step quantities needed for expansion."""

    states: list[HmmState]
    layers: list[_Layer]
    emissions: list[float]
    transitions: list[float]
    min_distances: list[float]
    trajectory: CandidateTrajectory
    stats: MatchStats = field(default_factory=MatchStats)


def _better(score, length, segs, best):
    """Tie rule: higher score, then shorter length, then smaller segment ids."""
    if best is None:
        return True
    bs, bl, bsegs = best
    if score != bs:
        return score > bs
    if length != bl:
        return length < bl
    return segs < bsegs


def viterbi(layers: list[_Layer], net: RoadNetwork, cfg: MatchConfig,
            stats: MatchStats | None = None) -> MatchDetail:
    stats = stats if stats is not None else MatchStats()
    if len(layers) < 2:
        raise TooShortError(f"{len(layers)} usable observation(s); need at least 2")
    first = layers[0]
    score = [log_emission(s.distance_m, 1.0, s.speed_weight, first.sigma) for s in first.states]
    length = [0.0] * len(first.states)
    segs = [(s.segment,) for s in first.states]
    kept = [first]
    backs: list[list[int]] = []
    steps = []
    for cur in layers[1:]:
        prev = kept[-1]
        terms = _pair_terms(prev, cur, net, cfg)
        if terms is None:
            stats.unreachable_steps += 1
            stats.dropped_observations += 1
            continue
        em, tr, dm, dmin = terms
        new_score, new_length, new_segs, back = [], [], [], []
        for j, c in enumerate(cur.states):
            best = None
            arg = -1
            for i in range(len(prev.states)):
                if not math.isfinite(dm[i, j]):
                    continue
                sc = score[i] + (em[i, j] + tr[i, j])
                ln = length[i] + dm[i, j]
                key = (sc, ln, segs[i])
                if _better(*key, best):
                    best, arg = key, i
            if best is None:
                new_score.append(-math.inf)
                new_length.append(math.inf)
                new_segs.append(segs[0] + (c.segment,))
            else:
                new_score.append(best[0])
                new_length.append(best[1])
                new_segs.append(best[2] + (c.segment,))
            back.append(arg)
        score, length, segs = new_score, new_length, new_segs
        kept.append(cur)
        backs.append(back)
        steps.append((em, tr, dm, dmin))
    if len(kept) < 2:
        raise TooShortError("fewer than 2 connected observations")
    best, arg = None, -1
    for j in range(len(score)):
        if math.isfinite(score[j]) and _better(score[j], length[j], segs[j], best):
            best, arg = (score[j], length[j], segs[j]), j
    if arg < 0:
        raise MatchError("no connected state path")
    idx = [arg]
    for back in reversed(backs):
        idx.append(back[idx[-1]])
    idx.reverse()
    states = [layer.states[k] for layer, k in zip(kept, idx)]
    emissions = [log_emission(states[0].distance_m, 1.0, states[0].speed_weight, kept[0].sigma)]
    transitions, dmins, paths = [], [], []
    for g, (em, tr, dm, dmin) in enumerate(steps):
        i, j = idx[g], idx[g + 1]
        emissions.append(float(em[i, j]))
        transitions.append(float(tr[i, j]))
        dmins.append(dmin)
        path = net.shortest_path(states[g].anchor, states[g + 1].anchor)
        paths.append(path)
    raw = emissions[0]
    for e, t in zip(emissions[1:], transitions):
        raw = raw + (e + t)
    anchors = tuple(
        Anchor(layer.timestamp, s.segment, s.offset, s.point[0], s.point[1], e)
        for layer, s, e in zip(kept, states, emissions)
    )
    traj = CandidateTrajectory(anchors, tuple(paths), tuple(transitions), raw, 1.0)
    return MatchDetail(states, kept, emissions, transitions, dmins, traj, stats)


def match_detail(seq: TowerSequence, towers: Mapping[TowerKey, CellTower], net: RoadNetwork,
                 cfg: MatchConfig = MatchConfig()) -> MatchDetail:
    stats = MatchStats()
    layers = build_layers(seq, towers, net, cfg, stats)
    return viterbi(layers, net, cfg, stats)


def match_sequence(seq: TowerSequence, towers: Mapping[TowerKey, CellTower], net: RoadNetwork,
                   cfg: MatchConfig = MatchConfig()) -> CandidateTrajectory:
    """Most probable road trajectory for a filtered tower sequence."""
    return match_detail(seq, towers, net, cfg).trajectory


# ------------------------------------------------------- multiple candidates
def detect_single_path(frm: HmmState | SegmentPoint, to: HmmState | SegmentPoint,
                       net: RoadNetwork, cfg: MatchConfig = MatchConfig()) -> bool:
    """True when the shortest path between two matched points is (nearly)
    the straight line between them, i.e. no alternative route is plausible."""
    a, b = _as_point(frm), _as_point(to)
    d = net.network_distance(a, b)
    pa = net.segments[a.segment].point_at(a.offset)
    pb = net.segments[b.segment].point_at(b.offset)
    straight = math.hypot(pb[0] - pa[0], pb[1] - pa[1])
    return abs(d - straight) <= cfg.single_path_tol * straight


def _as_point(x) -> SegmentPoint:
    if isinstance(x, SegmentPoint):
        return x
    if isinstance(x, (HmmState, Anchor)):
        return SegmentPoint(x.segment, x.offset)
    raise TypeError(f"cannot use {type(x).__name__} as a segment point")


@dataclass(frozen=True)
class GapOption:
    path: PathOnNetwork
    log_prob: float
    rank: int


def gap_options(detail: MatchDetail, net: RoadNetwork, cfg: MatchConfig) -> list[list[GapOption]]:
    """Alternative sub-paths per gap, best first.

    Only gaps failing the single-path test get alternatives. Alternatives
    are never scored as shorter than the gap's shortest path.
    """
    traj = detail.trajectory
    options = []
    for g, path in enumerate(traj.subpaths):
        a, b = traj.anchors[g].point, traj.anchors[g + 1].point
        dmin = detail.min_distances[g]
        opts = [GapOption(path, detail.transitions[g], 0)]
        if not detect_single_path(a, b, net, cfg):
            alts = net.k_shortest_paths(a, b, cfg.k_paths, cfg.path_slack)
            for rank, alt in enumerate(alts[1:], 1):
                length = max(alt.length_m, path.length_m)
                opts.append(GapOption(alt, log_transition(length, dmin, cfg.beta), rank))
        opts.sort(key=lambda o: (-o.log_prob, o.path.length_m, o.rank))
        options.append(opts)
    return options


def splice_score(emissions: Sequence[float], options: Sequence[Sequence[GapOption]], choice) -> tuple[float, float]:
    """(log probability, total length) of one splice."""
    score = emissions[0]
    length = 0.0
    for g, k in enumerate(choice):
        o = options[g][k]
        score = score + (emissions[g + 1] + o.log_prob)
        length += o.path.length_m
    return score, length


def top_splices(emissions: Sequence[float], options: Sequence[Sequence[GapOption]], m: int):
    """The ``m`` best splices as (score, length, choice), best first.

    Best-first enumeration over the product of per-gap options; the order is
    (score desc, length asc, choice vector asc).
    """
    start = (0,) * len(options)
    s0, l0 = splice_score(emissions, options, start)
    heap = [(-s0, l0, start)]
    seen = {start}
    out = []
    while heap and len(out) < m:
        neg, length, choice = heapq.heappop(heap)
        out.append((-neg, length, choice))
        for g in range(len(choice)):
            if choice[g] + 1 < len(options[g]):
                nxt = choice[:g] + (choice[g] + 1,) + choice[g + 1:]
                if nxt not in seen:
                    seen.add(nxt)
                    s, ln = splice_score(emissions, options, nxt)
                    heapq.heappush(heap, (-s, ln, nxt))
    return out


def expand_detail(detail: MatchDetail, net: RoadNetwork, cfg: MatchConfig,
                  m: int | None = None, sequence_id: str = "", density: float = math.inf) -> CandidateSet:
    m = cfg.m_max if m is None else m
    if m < 1:
        raise ValueError("M must be >= 1")
    base = detail.trajectory
    options = gap_options(detail, net, cfg)
    ranked = top_splices(detail.emissions, options, m)
    top = ranked[0][0]
    cands = []
    for score, _, choice in ranked:
        picked = [options[g][k] for g, k in enumerate(choice)]
        cands.append(CandidateTrajectory(
            base.anchors,
            tuple(o.path for o in picked),
            tuple(o.log_prob for o in picked),
            score,
            math.exp(score - top),
        ))
    return CandidateSet(sequence_id, tuple(cands), density)


def expand_candidates(seq: TowerSequence, towers: Mapping[TowerKey, CellTower], net: RoadNetwork,
                      cfg: MatchConfig = MatchConfig(), m: int | None = None) -> CandidateSet:
    """Top-M candidate trajectories of a sequence, best first; the first one
    is the ``match_sequence`` result with confidence 1."""
    detail = match_detail(seq, towers, net, cfg)
    ends = [towers[seq.points[detail.layers[0].index][1]],
            towers[seq.points[detail.layers[-1].index][1]]]
    density = min(t.local_density for t in ends)
    return expand_detail(detail, net, cfg, m, seq.user_id, density)


def match_gps(sequence_id: str, points: Sequence[tuple[float, float, float]], net: RoadNetwork,
              cfg: MatchConfig = MatchConfig(), density: float = math.inf) -> CandidateSet:
    """Snap a GPS trace (t, x, y) to a single trajectory with confidence 1."""
    detail = viterbi(gps_layers(points, net, cfg), net, cfg)
    return CandidateSet(sequence_id, (detail.trajectory,), density)

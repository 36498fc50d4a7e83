"""Directed road network: loading, spatial lookup, projection and path queries.

All geometry lives in a local planar frame (meters). Longitude/latitude are
projected equirectangularly about an origin, which is either given in the
network file or taken as the node centroid.
"""
from __future__ import annotations

import heapq
import json
import math
import warnings
from collections import OrderedDict, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra as _csgraph_dijkstra

EARTH_RADIUS_M = 6_371_000.0
MAX_SPEED_KMH = 120.0
INF = math.inf

# dynamic search range breakpoints (towers/km^2 -> meters)
DENSE_TOWERS_PER_KM2 = 50.0
SPARSE_TOWERS_PER_KM2 = 5.0
DENSE_RANGE_M = 200.0
SPARSE_RANGE_M = 1000.0

NODE_KEYS = {"id", "lon", "lat"}
SEGMENT_KEYS = {"id", "from", "to", "speed_kmh", "oneway", "polyline", "reverse_id"}
TOP_KEYS = {"nodes", "segments", "origin"}


class NetworkFormatError(ValueError):
    """Road-network file could not be parsed."""


class NetworkValidationError(ValueError):
    """Road-network content violates a structural invariant."""


@dataclass(frozen=True)
class RoadNode:
    id: int
    x: float
    y: float


@dataclass(frozen=True)
class RoadSegment:
    """One directed road segment.

    ``source``/``target`` are the node ids the segment runs from and to.
    ``direction_angle`` is the angle of the chord source->target, counter
    clockwise from the +x (east) axis, in [0, 2*pi).
    """

    id: int
    source: int
    target: int
    polyline: tuple[tuple[float, float], ...]
    length_m: float
    speed_limit_kmh: float
    direction_angle: float
    cumulative: tuple[float, ...]

    def point_at(self, offset: float) -> tuple[float, float]:
        offset = min(max(offset, 0.0), self.length_m)
        cum = self.cumulative
        for i in range(1, len(cum)):
            if offset <= cum[i] or i == len(cum) - 1:
                piece = cum[i] - cum[i - 1]
                frac = 0.0 if piece <= 0 else (offset - cum[i - 1]) / piece
                (x0, y0), (x1, y1) = self.polyline[i - 1], self.polyline[i]
                return (x0 + frac * (x1 - x0), y0 + frac * (y1 - y0))
        return self.polyline[-1]


@dataclass(frozen=True)
class SegmentPoint:
    """A position on a directed segment, ``offset`` meters from its source."""

    segment: int
    offset: float


@dataclass(frozen=True)
class Projection:
    segment: int
    point: tuple[float, float]
    distance_m: float
    offset: float

    @property
    def anchor(self) -> SegmentPoint:
        return SegmentPoint(self.segment, self.offset)


@dataclass(frozen=True)
class PathOnNetwork:
    """Directed path from ``entry_offset`` on the first segment to
    ``exit_offset`` on the last one."""

    segments: tuple[int, ...]
    entry_offset: float
    exit_offset: float
    length_m: float


def search_range(density: float) -> float:
    """Candidate search radius (m) for a tower with the given local density
    (towers/km^2); linear between the sparse and dense breakpoints."""
    if density >= DENSE_TOWERS_PER_KM2:
        return DENSE_RANGE_M
    if density <= SPARSE_TOWERS_PER_KM2:
        return SPARSE_RANGE_M
    frac = (density - SPARSE_TOWERS_PER_KM2) / (DENSE_TOWERS_PER_KM2 - SPARSE_TOWERS_PER_KM2)
    return SPARSE_RANGE_M + frac * (DENSE_RANGE_M - SPARSE_RANGE_M)


def angle_of(dx: float, dy: float) -> float:
    return math.atan2(dy, dx) % (2 * math.pi)


def angle_difference(a: float, b: float) -> float:
    """Smallest absolute difference between two angles, in [0, pi]."""
    d = abs(a - b) % (2 * math.pi)
    return 2 * math.pi - d if d > math.pi else d


_M_PER_DEG = math.pi / 180.0 * EARTH_RADIUS_M


def project_point(origin, lon: float, lat: float) -> tuple[float, float]:
    """Equirectangular projection about ``origin`` (lon, lat), in meters."""
    lon0, lat0 = origin
    return ((lon - lon0) * _M_PER_DEG * math.cos(math.radians(lat0)), (lat - lat0) * _M_PER_DEG)


def unproject_point(origin, x: float, y: float) -> tuple[float, float]:
    lon0, lat0 = origin
    return (lon0 + x / (_M_PER_DEG * math.cos(math.radians(lat0))), lat0 + y / _M_PER_DEG)


def _project_on_piece(px, py, x0, y0, x1, y1):
    dx, dy = x1 - x0, y1 - y0
    seg2 = dx * dx + dy * dy
    if seg2 == 0.0:
        return 0.0, x0, y0
    t = ((px - x0) * dx + (py - y0) * dy) / seg2
    t = min(1.0, max(0.0, t))
    return t, x0 + t * dx, y0 + t * dy


def _make_segment(seg_id, source, target, polyline, speed_kmh) -> RoadSegment:
    pts = tuple((float(x), float(y)) for x, y in polyline)
    cum = [0.0]
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        cum.append(cum[-1] + math.hypot(x1 - x0, y1 - y0))
    length = cum[-1]
    if not length > 0:
        raise NetworkValidationError(f"segment {seg_id} has zero length")
    if not 0 < speed_kmh <= MAX_SPEED_KMH:
        raise NetworkValidationError(
            f"segment {seg_id}: speed {speed_kmh} km/h outside (0, {MAX_SPEED_KMH}]"
        )
    (x0, y0), (x1, y1) = pts[0], pts[-1]
    return RoadSegment(
        id=int(seg_id),
        source=int(source),
        target=int(target),
        polyline=pts,
        length_m=length,
        speed_limit_kmh=float(speed_kmh),
        direction_angle=angle_of(x1 - x0, y1 - y0),
        cumulative=tuple(cum),
    )


class RoadNetwork:
    """Immutable directed road graph with a uniform-grid spatial index.

    Shortest-path trees are memoised per source node; the memo is private and
    never changes the answer to any query.
    """

    def __init__(
        self,
        nodes: Iterable[RoadNode],
        segments: Iterable[RoadSegment],
        origin: tuple[float, float] = (0.0, 0.0),
        cell_size: float = 250.0,
        tree_cache_size: int = 4096,
    ):
        self.nodes: dict[int, RoadNode] = {n.id: n for n in nodes}
        self.segments: dict[int, RoadSegment] = {}
        for s in segments:
            if s.id in self.segments:
                raise NetworkValidationError(f"duplicate segment id {s.id}")
            self.segments[s.id] = s
        self.origin = origin
        for s in self.segments.values():
            for end in (s.source, s.target):
                if end not in self.nodes:
                    raise NetworkValidationError(
                        f"segment {s.id} references missing node {end}"
                    )
        out = defaultdict(list)
        for sid in sorted(self.segments):
            out[self.segments[sid].source].append(sid)
        self.adjacency: dict[int, tuple[int, ...]] = {
            n: tuple(out.get(n, ())) for n in self.nodes
        }
        self._build_index(cell_size)
        self._build_graph()
        self._trees: OrderedDict[int, tuple[np.ndarray, np.ndarray]] = OrderedDict()
        self._tree_cache_size = tree_cache_size

    # ------------------------------------------------------------------ frame
    def project(self, lon: float, lat: float) -> tuple[float, float]:
        return project_point(self.origin, lon, lat)

    def unproject(self, x: float, y: float) -> tuple[float, float]:
        return unproject_point(self.origin, x, y)

    # ---------------------------------------------------------- spatial index
    def _build_index(self, cell_size: float) -> None:
        self._cell = float(cell_size)
        grid: dict[tuple[int, int], list[int]] = defaultdict(list)
        for sid in sorted(self.segments):
            xs = [p[0] for p in self.segments[sid].polyline]
            ys = [p[1] for p in self.segments[sid].polyline]
            for cx in range(self._cell_of(min(xs)), self._cell_of(max(xs)) + 1):
                for cy in range(self._cell_of(min(ys)), self._cell_of(max(ys)) + 1):
                    grid[(cx, cy)].append(sid)
        self._grid = dict(grid)

    def _cell_of(self, v: float) -> int:
        return int(math.floor(v / self._cell))

    def segments_within(self, x: float, y: float, radius: float) -> list[Projection]:
        """Every segment whose geometry comes within ``radius`` of (x, y)."""
        seen: set[int] = set()
        found = []
        for cx in range(self._cell_of(x - radius), self._cell_of(x + radius) + 1):
            for cy in range(self._cell_of(y - radius), self._cell_of(y + radius) + 1):
                for sid in self._grid.get((cx, cy), ()):
                    if sid in seen:
                        continue
                    seen.add(sid)
                    proj = self.project_to_segment((x, y), sid)
                    if proj.distance_m <= radius:
                        found.append(proj)
        found.sort(key=lambda p: p.segment)
        return found

    def project_to_segment(self, p: Sequence[float], seg: int) -> Projection:
        """Closest point of segment ``seg`` to ``p``; feet falling beyond the
        polyline are clamped to the nearer endpoint."""
        s = self.segments[seg]
        px, py = float(p[0]), float(p[1])
        best = None
        for i in range(len(s.polyline) - 1):
            (x0, y0), (x1, y1) = s.polyline[i], s.polyline[i + 1]
            t, fx, fy = _project_on_piece(px, py, x0, y0, x1, y1)
            d = math.hypot(px - fx, py - fy)
            if best is None or d < best[0]:
                off = s.cumulative[i] + t * (s.cumulative[i + 1] - s.cumulative[i])
                best = (d, (fx, fy), off)
        d, pt, off = best
        return Projection(seg, pt, d, off)

    def candidate_segments(self, tower, radius: float | None = None) -> list[Projection]:
        """Segments intersecting the tower's search disc.

        The radius defaults to ``search_range(tower.local_density)``.
        """
        if radius is None:
            radius = search_range(tower.local_density)
        return self.segments_within(tower.x, tower.y, radius)

    # ------------------------------------------------------------ path search
    def _build_graph(self) -> None:
        ids = sorted(self.nodes)
        self._node_index = {nid: i for i, nid in enumerate(ids)}
        self._node_ids = ids
        # parallel segments collapse to the shortest one (ties: lowest id)
        best: dict[tuple[int, int], int] = {}
        for sid in sorted(self.segments):
            s = self.segments[sid]
            key = (self._node_index[s.source], self._node_index[s.target])
            if key not in best or s.length_m < self.segments[best[key]].length_m:
                best[key] = sid
        self._edge_segment = best
        n = len(ids)
        if best:
            rows, cols = zip(*best.keys())
            data = [self.segments[sid].length_m for sid in best.values()]
        else:
            rows, cols, data = (), (), ()
        self._csr = csr_matrix((data, (rows, cols)), shape=(n, n))

    def _tree(self, node: int) -> tuple[np.ndarray, np.ndarray]:
        tree = self._trees.get(node)
        if tree is not None:
            self._trees.move_to_end(node)
            return tree
        dist, pred = _csgraph_dijkstra(
            self._csr, directed=True, indices=self._node_index[node], return_predecessors=True
        )
        tree = (dist, pred)
        self._trees[node] = tree
        if len(self._trees) > self._tree_cache_size:
            self._trees.popitem(last=False)
        return tree

    def node_distance(self, u: int, v: int) -> float:
        return float(self._tree(u)[0][self._node_index[v]])

    def _node_path(self, u: int, v: int) -> list[int] | None:
        dist, pred = self._tree(u)
        iu, iv = self._node_index[u], self._node_index[v]
        if not np.isfinite(dist[iv]):
            return None
        segs = []
        cur = iv
        while cur != iu:
            prev = int(pred[cur])
            segs.append(self._edge_segment[(prev, cur)])
            cur = prev
        segs.reverse()
        return segs

    def shortest_path(self, a: SegmentPoint, b: SegmentPoint) -> PathOnNetwork | None:
        """Shortest directed path from ``a`` to ``b`` or None when unreachable."""
        sa, sb = self.segments[a.segment], self.segments[b.segment]
        if a.segment == b.segment and b.offset >= a.offset:
            return PathOnNetwork((a.segment,), a.offset, b.offset, b.offset - a.offset)
        mids = self._node_path(sa.target, sb.source)
        if mids is None:
            return None
        nd = self.node_distance(sa.target, sb.source)
        length = (sa.length_m - a.offset) + nd + b.offset
        return PathOnNetwork((a.segment, *mids, b.segment), a.offset, b.offset, length)

    def network_distance(self, a: SegmentPoint, b: SegmentPoint) -> float:
        """Directed network distance in meters, ``inf`` when unreachable."""
        sa, sb = self.segments[a.segment], self.segments[b.segment]
        if a.segment == b.segment and b.offset >= a.offset:
            return b.offset - a.offset
        nd = self.node_distance(sa.target, sb.source)
        if not math.isfinite(nd):
            return INF
        return (sa.length_m - a.offset) + nd + b.offset

    def distance_matrix(
        self, sources: Sequence[SegmentPoint], targets: Sequence[SegmentPoint]
    ) -> np.ndarray:
        """``network_distance`` for every (source, target) pair."""
        out = np.empty((len(sources), len(targets)))
        for i, a in enumerate(sources):
            for j, b in enumerate(targets):
                out[i, j] = self.network_distance(a, b)
        return out

    def path_length(self, segments: Sequence[int], entry: float, exit: float) -> float:
        if len(segments) == 1:
            return exit - entry
        total = 0.0
        for sid in segments[1:-1]:
            total += self.segments[sid].length_m
        return (self.segments[segments[0]].length_m - entry) + total + exit

    def _restricted_dijkstra(self, src, dst, banned_nodes, banned_segs, cutoff):
        dist = {src: 0.0}
        back: dict[int, tuple[int, int]] = {}
        heap = [(0.0, src)]
        done = set()
        while heap:
            d, u = heapq.heappop(heap)
            if u in done:
                continue
            if u == dst:
                segs = []
                while u != src:
                    prev, sid = back[u]
                    segs.append(sid)
                    u = prev
                segs.reverse()
                return segs
            done.add(u)
            for sid in self.adjacency[u]:
                if sid in banned_segs:
                    continue
                v = self.segments[sid].target
                if v in banned_nodes or v in done:
                    continue
                nd = d + self.segments[sid].length_m
                if nd > cutoff:
                    continue
                if nd < dist.get(v, INF):
                    dist[v] = nd
                    back[v] = (u, sid)
                    heapq.heappush(heap, (nd, v))
        return None

    def k_shortest_paths(
        self, a: SegmentPoint, b: SegmentPoint, k: int, slack: float = 0.10
    ) -> list[PathOnNetwork]:
        """Up to ``k`` loopless directed paths from ``a`` to ``b``, shortest
        first, each no longer than ``(1 + slack)`` times the shortest.

        Loopless means the nodes visited between the two anchor segments are
        all distinct. Enumeration is Yen's deviation search; the first path
        is always ``shortest_path(a, b)``.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        if slack < 0:
            raise ValueError("slack must be >= 0")
        first = self.shortest_path(a, b)
        if first is None:
            return []
        if len(first.segments) == 1:
            return [first]
        sa, sb = self.segments[a.segment], self.segments[b.segment]
        src, dst = sa.target, sb.source
        bound = (1.0 + slack) * first.length_m * (1.0 + 1e-12)
        fixed = (sa.length_m - a.offset) + b.offset

        def nodes_of(mids):
            nodes = [src]
            for sid in mids:
                nodes.append(self.segments[sid].target)
            return nodes

        def mids_length(mids):
            total = 0.0
            for sid in mids:
                total += self.segments[sid].length_m
            return total

        accepted = [first]
        accepted_mids = [first.segments[1:-1]]
        seen = {first.segments}
        heap: list[tuple[float, tuple[int, ...]]] = []
        while len(accepted) < k:
            prev_mids = accepted_mids[-1]
            prev_nodes = nodes_of(prev_mids)
            for i in range(len(prev_nodes) - 1):
                spur = prev_nodes[i]
                root_mids = prev_mids[:i]
                root_nodes = prev_nodes[: i + 1]
                banned_segs = {
                    m[i]
                    for m in accepted_mids
                    if len(m) > i and tuple(m[:i]) == tuple(root_mids)
                }
                root_len = mids_length(root_mids)
                remaining = bound - fixed - root_len
                if remaining < 0:
                    continue
                spur_mids = self._restricted_dijkstra(
                    spur, dst, set(root_nodes[:-1]), banned_segs, remaining
                )
                if spur_mids is None:
                    continue
                segs = (a.segment, *root_mids, *spur_mids, b.segment)
                if segs in seen:
                    continue
                seen.add(segs)
                length = self.path_length(segs, a.offset, b.offset)
                heapq.heappush(heap, (length, segs))
            if not heap:
                break
            length, segs = heapq.heappop(heap)
            if length > bound:
                break
            accepted.append(PathOnNetwork(segs, a.offset, b.offset, length))
            accepted_mids.append(segs[1:-1])
        return accepted

    def path_points(self, path: PathOnNetwork) -> list[tuple[float, float]]:
        """Polyline of a path, for reports and debugging."""
        pts = []
        for i, sid in enumerate(path.segments):
            s = self.segments[sid]
            lo = path.entry_offset if i == 0 else 0.0
            hi = path.exit_offset if i == len(path.segments) - 1 else s.length_m
            pts.append(s.point_at(lo))
            for off, p in zip(s.cumulative[1:-1], s.polyline[1:-1]):
                if lo < off < hi:
                    pts.append(p)
            pts.append(s.point_at(hi))
        return pts


def planar_network(nodes, edges, cell_size: float = 250.0) -> RoadNetwork:
    """Network straight from planar coordinates.

    ``nodes`` maps id -> (x, y) in meters. Each edge is
    ``(id, from, to, speed_kmh)`` with an optional fifth item listing interior
    polyline points; every edge is one directed segment.
    """
    rn = [RoadNode(int(n), float(x), float(y)) for n, (x, y) in nodes.items()]
    pos = {n.id: (n.x, n.y) for n in rn}
    segs = []
    for e in edges:
        sid, u, v, speed = e[:4]
        for end in (u, v):
            if end not in pos:
                raise NetworkValidationError(f"segment {sid} references missing node {end}")
        interior = [tuple(map(float, p)) for p in (e[4] if len(e) > 4 else ())]
        segs.append(_make_segment(int(sid), int(u), int(v), [pos[u], *interior, pos[v]], float(speed)))
    return RoadNetwork(rn, segs, cell_size=cell_size)


# ---------------------------------------------------------------- file format
def _require(obj, key, where):
    if key not in obj:
        raise NetworkFormatError(f"{where}: missing key '{key}'")
    return obj[key]


def _warn_unknown(obj, allowed, where, unknown):
    extra = set(obj) - allowed
    if extra:
        unknown.append(f"{where}: {', '.join(sorted(extra))}")


def network_from_dict(data: dict, cell_size: float = 250.0) -> RoadNetwork:
    """Build a network from the decoded road-network document.

    See ``load_network`` for the schema.
    """
    if not isinstance(data, dict):
        raise NetworkFormatError("top level must be an object")
    unknown: list[str] = []
    _warn_unknown(data, TOP_KEYS, "top level", unknown)
    raw_nodes = _require(data, "nodes", "top level")
    raw_segs = _require(data, "segments", "top level")
    if not isinstance(raw_nodes, list) or not isinstance(raw_segs, list):
        raise NetworkFormatError("'nodes' and 'segments' must be arrays")
    geo = {}
    for i, n in enumerate(raw_nodes):
        where = f"nodes[{i}]"
        if not isinstance(n, dict):
            raise NetworkFormatError(f"{where}: expected an object")
        _warn_unknown(n, NODE_KEYS, where, unknown)
        try:
            nid = int(_require(n, "id", where))
            geo[nid] = (float(_require(n, "lon", where)), float(_require(n, "lat", where)))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, NetworkFormatError):
                raise
            raise NetworkFormatError(f"{where}: {exc}") from None
    if "origin" in data:
        o = data["origin"]
        origin = (float(_require(o, "lon", "origin")), float(_require(o, "lat", "origin")))
    elif geo:
        origin = (
            sum(v[0] for v in geo.values()) / len(geo),
            sum(v[1] for v in geo.values()) / len(geo),
        )
    else:
        origin = (0.0, 0.0)
    nodes = {nid: RoadNode(nid, *project_point(origin, lon, lat)) for nid, (lon, lat) in geo.items()}

    parsed = []
    for i, s in enumerate(raw_segs):
        where = f"segments[{i}]"
        if not isinstance(s, dict):
            raise NetworkFormatError(f"{where}: expected an object")
        _warn_unknown(s, SEGMENT_KEYS, where, unknown)
        try:
            sid = int(_require(s, "id", where))
            u = int(_require(s, "from", where))
            v = int(_require(s, "to", where))
            speed = float(_require(s, "speed_kmh", where))
            oneway = bool(s.get("oneway", True))
            poly = s.get("polyline")
            rev = s.get("reverse_id")
            interior = [project_point(origin, float(lon), float(lat)) for lon, lat in (poly or [])[1:-1]]
        except (TypeError, ValueError) as exc:
            if isinstance(exc, NetworkFormatError):
                raise
            raise NetworkFormatError(f"{where}: {exc}") from None
        for end in (u, v):
            if end not in nodes:
                raise NetworkValidationError(f"{where}: segment {sid} references missing node {end}")
        parsed.append((sid, u, v, speed, oneway, interior, rev))
    if unknown:
        warnings.warn("unknown road-network keys ignored: " + "; ".join(unknown), stacklevel=3)

    next_id = max((p[0] for p in parsed), default=-1) + 1
    for p in parsed:
        if p[6] is not None:
            next_id = max(next_id, int(p[6]) + 1)
    segments = []
    for sid, u, v, speed, oneway, interior, rev in parsed:
        pu, pv = (nodes[u].x, nodes[u].y), (nodes[v].x, nodes[v].y)
        line = [pu, *interior, pv]
        segments.append(_make_segment(sid, u, v, line, speed))
        if not oneway:
            if rev is None:
                rev, next_id = next_id, next_id + 1
            segments.append(_make_segment(int(rev), v, u, line[::-1], speed))
    return RoadNetwork(nodes.values(), segments, origin=origin, cell_size=cell_size)


def load_network(source, cell_size: float = 250.0) -> RoadNetwork:
    """Load a road-network JSON file.

    Schema::

        {"origin": {"lon": .., "lat": ..},            # optional projection origin
         "nodes": [{"id": 1, "lon": .., "lat": ..}, ...],
         "segments": [{"id": 7, "from": 1, "to": 2, "speed_kmh": 50,
                       "oneway": false,                # default true
                       "polyline": [[lon, lat], ...],  # optional, endpoints included
                       "reverse_id": 8}, ...]}         # optional id of the reverse twin

    A two-way segment yields two directed segments; the reverse one takes
    ``reverse_id`` or the next free id. Unknown keys produce a warning.
    """
    text = Path(source).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NetworkFormatError(f"line {exc.lineno}: {exc.msg}") from None
    return network_from_dict(data, cell_size=cell_size)


def network_to_dict(net: RoadNetwork) -> dict:
    """Serialise a network as one-way segments (round-trips ``load_network``)."""
    nodes = []
    for nid in sorted(net.nodes):
        lon, lat = net.unproject(net.nodes[nid].x, net.nodes[nid].y)
        nodes.append({"id": nid, "lon": lon, "lat": lat})
    segs = []
    for sid in sorted(net.segments):
        s = net.segments[sid]
        entry = {"id": sid, "from": s.source, "to": s.target, "speed_kmh": s.speed_limit_kmh}
        if len(s.polyline) > 2:
            entry["polyline"] = [list(net.unproject(x, y)) for x, y in s.polyline]
        segs.append(entry)
    return {"origin": {"lon": net.origin[0], "lat": net.origin[1]}, "nodes": nodes, "segments": segs}

"""Scene geometry, collision checks and ray-cast depth sensing.

Conventions used throughout:

* Every car is an oriented rectangle centred on its reference point ``(x, y)``
  and aligned with ``yaw``. The range sensor sits at the same point.
* A depth scan has ``N_RAYS = 170`` entries spread uniformly over the closed
  interval ``[-45 deg, +45 deg]`` relative to the heading, angles measured
  counter-clockwise. Index 0 is the ray 45 deg to the right of the nose,
  index 169 the ray 45 deg to the left. Because 170 is even no ray points
  exactly forward; index 85 (+0.266 deg) is taken as the centre ray.
* Ranges are divided by ``max_range`` and clamped to ``[0, 1]``; 1.0 means
  nothing was hit.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .dynamics import VehicleState

N_RAYS = 170
FOV = np.pi / 2
CENTER_RAY = 85
DEFAULT_MAX_RANGE = 10.0
RAY_OFFSETS = np.linspace(-FOV / 2, FOV / 2, N_RAYS)


class UnusableScanError(ValueError):
    """Raised when the frontal sector of a range scan has no valid reading."""


@dataclass(frozen=True)
class Footprint:
    half_length: float = 0.25
    half_width: float = 0.14

    def __post_init__(self):
        if self.half_length <= 0 or self.half_width <= 0:
            raise ValueError("footprint extents must be positive")


@dataclass
class SceneGeometry:
    name: str
    boundary_segments: np.ndarray                 # (M, 2, 2)
    drivable_regions: list                        # list of (K_i, 2) convex polygons
    spawn_poses: dict = field(default_factory=dict)   # name -> (x, y, yaw)
    track_centerline: np.ndarray | None = None    # (N, 2), closed loop for racetracks
    lane_half_width: np.ndarray | None = None     # (N,)
    closed: bool = False

    def __post_init__(self):
        self.boundary_segments = np.asarray(self.boundary_segments, dtype=np.float64).reshape(-1, 2, 2)
        lengths = np.linalg.norm(self.boundary_segments[:, 1] - self.boundary_segments[:, 0], axis=1)
        if np.any(lengths <= 0):
            raise ValueError("boundary segments must have nonzero length")
        self.drivable_regions = [np.asarray(p, dtype=np.float64) for p in self.drivable_regions]
        self.spawn_poses = {k: tuple(float(c) for c in v) for k, v in self.spawn_poses.items()}
        # group polygons by vertex count so containment tests vectorise
        self._poly_groups = {}
        for poly in self.drivable_regions:
            self._poly_groups.setdefault(len(poly), []).append(_ccw(poly))
        self._poly_groups = {k: np.stack(v) for k, v in self._poly_groups.items()}
        if self.track_centerline is not None:
            self.track_centerline = np.asarray(self.track_centerline, dtype=np.float64)
            n = len(self.track_centerline)
            hw = self.lane_half_width
            self.lane_half_width = np.full(n, float(hw)) if np.ndim(hw) == 0 else np.asarray(hw, dtype=np.float64)
            self._init_centerline()

    # centerline helpers -------------------------------------------------
    def _init_centerline(self):
        pts = self.track_centerline
        nxt = np.roll(pts, -1, axis=0) if self.closed else np.vstack([pts[1:], pts[-1:]])
        seg = nxt - pts
        seg_len = np.linalg.norm(seg, axis=1)
        if not self.closed:
            seg_len[-1] = 0.0
        self.arclength = np.concatenate([[0.0], np.cumsum(seg_len)[:-1]])
        self.track_length = float(np.sum(seg_len))
        prev = np.roll(pts, 1, axis=0) if self.closed else np.vstack([pts[:1], pts[:-1]])
        tang = nxt - prev
        self.tangent_yaw = np.arctan2(tang[:, 1], tang[:, 0])
        self.curvature = _menger_curvature(prev, pts, nxt)

    def centerline_at(self, s):
        """Interpolated ``(x, y, yaw, curvature)`` at arclength ``s`` (wrapped for loops)."""
        s = np.asarray(s, dtype=np.float64)
        if self.closed:
            s = np.mod(s, self.track_length)
        pts = self.track_centerline
        i = np.clip(np.searchsorted(self.arclength, s, side="right") - 1, 0, len(pts) - 1)
        j = (i + 1) % len(pts) if self.closed else np.minimum(i + 1, len(pts) - 1)
        seg = np.linalg.norm(pts[j] - pts[i], axis=-1)
        frac = np.where(seg > 0, (s - self.arclength[i]) / np.where(seg > 0, seg, 1.0), 0.0)
        frac = np.clip(frac, 0.0, 1.0)
        xy = pts[i] + frac[..., None] * (pts[j] - pts[i])
        d = pts[j] - pts[i]
        yaw = np.where(seg > 0, np.arctan2(d[..., 1], d[..., 0]), self.tangent_yaw[i])
        kappa = (1 - frac) * self.curvature[i] + frac * self.curvature[j]
        return xy[..., 0], xy[..., 1], yaw, kappa

    def project(self, xy, hint=None, window: int = 24):
        """Closest-point projection of points ``(2,)`` or ``(n, 2)`` onto the centerline.

        Returns arclength. ``hint`` (arclengths, closed loops only) restricts
        the search to ``window`` vertices either side of the hinted vertex.
        """
        xy = np.asarray(xy, dtype=np.float64)
        pts2 = np.atleast_2d(xy)
        pts = self.track_centerline
        n_pts = len(pts)
        if hint is not None and self.closed and 2 * window + 1 < n_pts:
            h = np.searchsorted(self.arclength, np.mod(np.atleast_1d(hint), self.track_length), side="right") - 1
            cand = (h[:, None] + np.arange(-window, window + 1)[None]) % n_pts
        else:
            cand = np.broadcast_to(np.arange(n_pts), (len(pts2), n_pts))
        a = pts[cand]
        d = pts[(cand + 1) % n_pts] - a if self.closed else pts[np.minimum(cand + 1, n_pts - 1)] - a
        dd = np.maximum(np.einsum("nij,nij->ni", d, d), 1e-12)
        rel = pts2[:, None, :] - a
        t = np.clip(np.einsum("nij,nij->ni", rel, d) / dd, 0.0, 1.0)
        diff = rel - t[..., None] * d
        k = np.argmin(np.einsum("nij,nij->ni", diff, diff), axis=1)
        rows = np.arange(len(k))
        s = self.arclength[cand[rows, k]] + t[rows, k] * np.sqrt(dd[rows, k])
        return float(s[0]) if xy.ndim == 1 else s

    # serialisation ------------------------------------------------------
    def to_dict(self) -> dict:
        out = {
            "name": self.name,
            "boundary_segments": self.boundary_segments.tolist(),
            "drivable_regions": [p.tolist() for p in self.drivable_regions],
            "spawn_poses": {k: list(v) for k, v in self.spawn_poses.items()},
            "closed": self.closed,
        }
        if self.track_centerline is not None:
            out["track_centerline"] = self.track_centerline.tolist()
            out["lane_half_width"] = self.lane_half_width.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SceneGeometry":
        return cls(
            name=d["name"],
            boundary_segments=d["boundary_segments"],
            drivable_regions=d["drivable_regions"],
            spawn_poses=d.get("spawn_poses", {}),
            track_centerline=d.get("track_centerline"),
            lane_half_width=d.get("lane_half_width"),
            closed=bool(d.get("closed", False)),
        )


def _ccw(poly):
    poly = np.asarray(poly, dtype=np.float64)
    x, y = poly[:, 0], poly[:, 1]
    area2 = np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
    return poly if area2 >= 0 else poly[::-1].copy()


def _menger_curvature(a, b, c):
    """Signed curvature of the circle through three points (positive = left turn)."""
    ab, bc, ca = b - a, c - b, a - c
    cross = ab[:, 0] * bc[:, 1] - ab[:, 1] * bc[:, 0]
    denom = np.linalg.norm(ab, axis=1) * np.linalg.norm(bc, axis=1) * np.linalg.norm(ca, axis=1)
    return np.where(denom > 1e-12, 2.0 * cross / np.where(denom > 1e-12, denom, 1.0), 0.0)


# ---------------------------------------------------------------------------
# bundled scenes


def build_racetrack(straight: float = 30.0, radius: float = 8.0, half_width: float = 1.2,
                    arc_segments: int = 32, spacing: float = 0.2, n_spawn: int = 8) -> SceneGeometry:
    """Stadium-shaped closed loop driven counter-clockwise.

    Two straights of length ``straight`` joined by semicircles of centreline
    radius ``radius``. Walls are polylines offset by ``half_width``.
    """
    if half_width >= radius:
        raise ValueError("half_width must be smaller than the corner radius")

    def loop(r, arc_n, straight_n):
        pts = []
        h = straight / 2
        # bottom straight heading +x, then right arc, top straight heading -x, left arc
        for t in np.linspace(-h, h, straight_n, endpoint=False):
            pts.append((t, -r))
        for a in np.linspace(-np.pi / 2, np.pi / 2, arc_n, endpoint=False):
            pts.append((h + r * np.cos(a), r * np.sin(a)))
        for t in np.linspace(h, -h, straight_n, endpoint=False):
            pts.append((t, r))
        for a in np.linspace(np.pi / 2, 3 * np.pi / 2, arc_n, endpoint=False):
            pts.append((-h + r * np.cos(a), r * np.sin(a)))
        return np.array(pts)

    n_straight_c = max(2, int(round(straight / spacing)))
    n_arc_c = max(4, int(round(np.pi * radius / spacing)))
    centerline = loop(radius, n_arc_c, n_straight_c)
    inner = loop(radius - half_width, arc_segments, 1)
    outer = loop(radius + half_width, arc_segments, 1)

    segs = []
    for wall in (inner, outer):
        segs.extend([(wall[i], wall[(i + 1) % len(wall)]) for i in range(len(wall))])
    quads = [np.array([inner[i], outer[i], outer[(i + 1) % len(inner)], inner[(i + 1) % len(inner)]])
             for i in range(len(inner))]

    scene = SceneGeometry(
        name="racetrack",
        boundary_segments=np.array(segs),
        drivable_regions=quads,
        track_centerline=centerline,
        lane_half_width=half_width,
        closed=True,
    )
    spawn = {}
    for k in range(n_spawn):
        x, y, yaw, _ = scene.centerline_at(k * scene.track_length / n_spawn)
        spawn[f"s{k}"] = (float(x), float(y), float(yaw))
    scene.spawn_poses = spawn
    return scene


def build_intersection(arm: float = 8.0, half_width: float = 1.2, approach: float = 6.0) -> SceneGeometry:
    """Two perpendicular roads crossing at the origin.

    The ego enters from the south heading north; obstacle spawn poses sit on
    the east, north and west arms, ``approach`` metres from the centre.
    """
    w, a = half_width, arm
    segs = []
    for sx, sy in ((1, 1), (-1, 1), (-1, -1), (1, -1)):
        corner = (sx * w, sy * w)
        segs.append(((sx * w, sy * a), corner))
        segs.append((corner, (sx * a, sy * w)))
    regions = [
        np.array([(-a, -w), (a, -w), (a, w), (-a, w)]),
        np.array([(-w, -a), (w, -a), (w, a), (-w, a)]),
    ]
    spawn = {
        "ego_south": (0.0, -approach, np.pi / 2),
        "obs_east": (approach, 0.0, np.pi),
        "obs_north": (0.0, approach, -np.pi / 2),
        "obs_west": (-approach, 0.0, 0.0),
    }
    return SceneGeometry(name="intersection", boundary_segments=np.array(segs, dtype=np.float64),
                         drivable_regions=regions, spawn_poses=spawn)


BUNDLED_SCENES = {"racetrack": build_racetrack, "intersection": build_intersection}


def save_scene(scene: SceneGeometry, path) -> None:
    Path(path).write_text(json.dumps(scene.to_dict(), indent=1))


def load_scene(name_or_path) -> SceneGeometry:
    """Load a bundled scene by name (``racetrack``/``intersection``) or a JSON scene file."""
    if str(name_or_path) in BUNDLED_SCENES:
        text = resources.files("raceavoid").joinpath(f"scenes/{name_or_path}.json").read_text()
    else:
        path = Path(name_or_path)
        if not path.exists():
            raise FileNotFoundError(f"scene file not found: {path}")
        text = path.read_text()
    return SceneGeometry.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# rectangles and collisions


def rect_corners(states, fp: Footprint) -> np.ndarray:
    """Corners ``(n, 4, 2)`` (counter-clockwise) of rectangles for ``(n, >=3)`` pose rows."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    c, s = np.cos(states[:, 2]), np.sin(states[:, 2])
    local = np.array([[fp.half_length, -fp.half_width], [fp.half_length, fp.half_width],
                      [-fp.half_length, fp.half_width], [-fp.half_length, -fp.half_width]])
    rx = local[:, 0][None, :] * c[:, None] - local[:, 1][None, :] * s[:, None]
    ry = local[:, 0][None, :] * s[:, None] + local[:, 1][None, :] * c[:, None]
    return np.stack([rx + states[:, 0:1], ry + states[:, 1:2]], axis=-1)


def rect_edges(states, fp: Footprint) -> np.ndarray:
    """Edges ``(n*4, 2, 2)`` of oriented rectangles."""
    corners = rect_corners(states, fp)
    return np.stack([corners, np.roll(corners, -1, axis=1)], axis=2).reshape(-1, 2, 2)


def _as_pose_rows(x):
    if isinstance(x, VehicleState):
        return x.as_array()[None, :]
    return np.atleast_2d(np.asarray(x, dtype=np.float64))


def collisions(a, fa: Footprint, b, fb: Footprint) -> np.ndarray:
    """Pairwise separating-axis test between rectangles ``a[i]`` and ``b[i]`` (broadcasting).

    Touching rectangles count as overlapping.
    """
    a, b = _as_pose_rows(a), _as_pose_rows(b)
    ca, cb = rect_corners(a, fa), rect_corners(b, fb)
    ca, cb = np.broadcast_arrays(ca, cb)
    ya, yb = np.broadcast_arrays(a[:, 2], b[:, 2])
    axes = np.stack([
        np.stack([np.cos(ya), np.sin(ya)], -1), np.stack([-np.sin(ya), np.cos(ya)], -1),
        np.stack([np.cos(yb), np.sin(yb)], -1), np.stack([-np.sin(yb), np.cos(yb)], -1),
    ], axis=1)                                                  # (n, 4 axes, 2)
    pa = np.einsum("nkd,ncd->nkc", axes, ca)
    pb = np.einsum("nkd,ncd->nkc", axes, cb)
    separated = (pa.max(-1) < pb.min(-1)) | (pb.max(-1) < pa.min(-1))
    return ~np.any(separated, axis=1)


def detect_collision(a: VehicleState, fa: Footprint, b: VehicleState, fb: Footprint) -> bool:
    return bool(collisions(a, fa, b, fb)[0])


def points_on_track(points, scene: SceneGeometry, tol: float = 1e-9) -> np.ndarray:
    """Whether each point lies in at least one drivable polygon (edges count as inside)."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    inside = np.zeros(len(pts), dtype=bool)
    for polys in scene._poly_groups.values():
        a = polys                                   # (P, K, 2)
        b = np.roll(polys, -1, axis=1)
        e = b - a
        rel = pts[:, None, None, :] - a[None]       # (n, P, K, 2)
        cross = e[None, ..., 0] * rel[..., 1] - e[None, ..., 1] * rel[..., 0]
        inside |= np.any(np.all(cross >= -tol, axis=2), axis=1)
    return inside


def off_track(state: VehicleState, scene: SceneGeometry) -> bool:
    return not bool(points_on_track([[state.x, state.y]], scene)[0])


def segment_hits_segments(p, q) -> np.ndarray:
    """Proper or touching intersection between segment sets ``p (n,2,2)`` and ``q (m,2,2)``."""
    p, q = np.asarray(p)[:, None], np.asarray(q)[None, :]
    r = p[..., 1, :] - p[..., 0, :]
    s = q[..., 1, :] - q[..., 0, :]
    qp = q[..., 0, :] - p[..., 0, :]
    denom = r[..., 0] * s[..., 1] - r[..., 1] * s[..., 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (qp[..., 0] * s[..., 1] - qp[..., 1] * s[..., 0]) / denom
        u = (qp[..., 0] * r[..., 1] - qp[..., 1] * r[..., 0]) / denom
    return (denom != 0) & (t >= 0) & (t <= 1) & (u >= 0) & (u <= 1)


def footprint_hits_boundary(state: VehicleState, fp: Footprint, scene: SceneGeometry) -> bool:
    return bool(np.any(segment_hits_segments(rect_edges(_as_pose_rows(state), fp), scene.boundary_segments)))


# ---------------------------------------------------------------------------
# sensing


def point_segment_distance(points, segments):
    """Distances ``(n, m)`` from points ``(n, 2)`` to segments ``(m, 2, 2)``."""
    points = np.atleast_2d(points)
    a, b = segments[:, 0], segments[:, 1]
    d = b - a
    dd = np.maximum(np.einsum("ij,ij->i", d, d), 1e-300)
    rel = points[:, None, :] - a[None]
    t = np.clip(np.einsum("nmj,mj->nm", rel, d) / dd, 0.0, 1.0)
    diff = rel - t[..., None] * d[None]
    return np.sqrt(np.einsum("nmj,nmj->nm", diff, diff))


def scan_segments(x: float, y: float, yaw: float, segments: np.ndarray,
                  max_range: float = DEFAULT_MAX_RANGE, offsets=RAY_OFFSETS, normalize: bool = True) -> np.ndarray:
    """Depth scan from pose ``(x, y, yaw)`` against ``segments (m, 2, 2)``.

    Defaults give the normalised 170-ray frontal scan; pass other ``offsets``
    (radians from the heading) and ``normalize=False`` for raw ranges in metres.
    """
    ranges = np.full(len(offsets), float(max_range))
    if len(segments):
        # drop segments entirely out of reach
        near = point_segment_distance(np.array([[x, y]]), segments)[0] < max_range
        segments = segments[near]
    if len(segments):
        ang = yaw + np.asarray(offsets)
        dx, dy = np.cos(ang)[:, None], np.sin(ang)[:, None]
        px = segments[:, 0, 0][None] - x
        py = segments[:, 0, 1][None] - y
        ex = (segments[:, 1, 0] - segments[:, 0, 0])[None]
        ey = (segments[:, 1, 1] - segments[:, 0, 1])[None]
        denom = dx * ey - dy * ex
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (px * ey - py * ex) / denom
            u = (px * dy - py * dx) / denom
        hit = (denom != 0) & (t >= 0) & (u >= 0) & (u <= 1)
        t = np.where(hit, t, np.inf)
        ranges = np.minimum(ranges, t.min(axis=1))
    if not normalize:
        return ranges
    return np.clip(ranges / max_range, 0.0, 1.0)


def cast_rays(ego: VehicleState, scene: SceneGeometry, others=(), max_range: float = DEFAULT_MAX_RANGE) -> np.ndarray:
    """Depth scan seen by ``ego``; ``others`` is a sequence of ``(VehicleState, Footprint)``."""
    if max_range <= 0:
        raise ValueError("max_range must be positive")
    segs = [scene.boundary_segments]
    for st, fp in others:
        segs.append(rect_edges(_as_pose_rows(st), fp))
    return scan_segments(ego.x, ego.y, ego.yaw, np.concatenate(segs, axis=0), max_range)


def shape_scan(raw, ego_heading_index: int, max_range: float = DEFAULT_MAX_RANGE,
               spike_ratio: float = 3.0, ccw: bool = True) -> np.ndarray:
    """Turn a full 360 deg range scan into a 170-entry normalised frontal scan.

    ``raw`` holds evenly spaced readings over a full turn with index increasing
    counter-clockwise (pass ``ccw=False`` for clockwise scanners) and
    ``raw[ego_heading_index]`` pointing along the vehicle heading. Zeros,
    non-finite values, readings beyond ``max_range`` and isolated spikes
    (more than ``spike_ratio`` times off from both neighbours) are replaced by
    linear interpolation between the nearest valid readings.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if not ccw:
        raw = raw[::-1]
        ego_heading_index = len(raw) - 1 - ego_heading_index
    n = len(raw) // 4
    if n < N_RAYS:
        raise ValueError(f"frontal sector has {n} readings, need at least {N_RAYS}")
    idx = (ego_heading_index - n // 2 + np.arange(n)) % len(raw)
    sector = raw[idx]

    valid = np.isfinite(sector) & (sector > 0) & (sector <= max_range)
    left, right = sector[:-2], sector[2:]
    mid = sector[1:-1]
    both = valid[:-2] & valid[2:] & valid[1:-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        high = (mid > spike_ratio * left) & (mid > spike_ratio * right)
        low = (mid * spike_ratio < left) & (mid * spike_ratio < right)
    valid[1:-1] &= ~(both & (high | low))
    if not np.any(valid):
        raise UnusableScanError("no valid reading in the frontal sector")

    pos = np.arange(n)
    cleaned = np.interp(pos, pos[valid], sector[valid])
    pick = np.floor((np.arange(N_RAYS) + 0.5) * n / N_RAYS).astype(int)
    return np.clip(cleaned[pick] / max_range, 0.0, 1.0)

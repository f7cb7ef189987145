import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from scipy.interpolate import RegularGridInterpolator

from route_errors import InvalidInputError, OutOfDomainError, ScenarioError

EARTH_RADIUS_M = 6371008.8
NAUTICAL_MILE_M = 1852.0
DEFAULT_WAYPOINTS = 20 # free waypoints between departure and arrival
DEFAULT_QUADRATURE = 8 # midpoint subsamples per segment
FIELD_COLUMNS = ['x', 'y', 'vx', 'vy', 'wx', 'wy']

Point = Tuple[float, float]


@dataclass(frozen=True)
class PlanningFrame:
    """ Local equirectangular projection about the departure point followed by a rotation
    that puts the arrival on the positive x-axis at (span, 0).

    Geographic frames take (lat, lon) in degrees and measure in units of `scale` meters.
    Planar frames take already projected (x, y) coordinates. """
    origin: Point
    rotation: float
    scale: float
    span: float
    geographic: bool = True

    def _project(self, a, b):
        a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
        if self.geographic:
            lat0, lon0 = self.origin
            east = EARTH_RADIUS_M * math.cos(math.radians(lat0)) * np.radians(b - lon0) / self.scale
            north = EARTH_RADIUS_M * np.radians(a - lat0) / self.scale
        else:
            east = (a - self.origin[0]) / self.scale
            north = (b - self.origin[1]) / self.scale
        return east, north

    def _unproject(self, east, north):
        if self.geographic:
            lat0, lon0 = self.origin
            a = lat0 + np.degrees(north * self.scale / EARTH_RADIUS_M)
            b = lon0 + np.degrees(east * self.scale / (EARTH_RADIUS_M * math.cos(math.radians(lat0))))
        else:
            a = self.origin[0] + east * self.scale
            b = self.origin[1] + north * self.scale
        return a, b

    def to_frame(self, a, b):
        east, north = self._project(a, b)
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return c * east - s * north, s * east + c * north

    def from_frame(self, x, y):
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return self._unproject(c * x + s * y, -s * x + c * y)


def build_frame(departure: Point, arrival: Point, geographic: bool = True, scale: Optional[float] = None) -> PlanningFrame:
    if scale is None:
        scale = NAUTICAL_MILE_M if geographic else 1.0
    if scale <= 0:
        raise InvalidInputError(f"frame scale must be positive, got {scale}", param='scale')
    if tuple(departure) == tuple(arrival):
        raise InvalidInputError(f"departure and arrival coincide at {tuple(departure)}", param='arrival')
    if geographic:
        for name, (lat, lon) in (('departure', departure), ('arrival', arrival)):
            if not (-90.0 < lat < 90.0 and -180.0 <= lon <= 180.0):
                raise InvalidInputError(f"{name} {(lat, lon)} is not a valid lat/lon", param=name)

    base = PlanningFrame(origin=tuple(map(float, departure)), rotation=0.0, scale=scale, span=0.0, geographic=geographic)
    east, north = base._project(*arrival)
    span = float(math.hypot(east, north))
    if not span > 0.0:
        raise InvalidInputError("departure and arrival project to the same point", param='arrival')

    frame = PlanningFrame(origin=base.origin, rotation=-math.atan2(float(north), float(east)), scale=scale, span=span, geographic=geographic)
    logger.debug(f"Planning frame: origin={frame.origin}, rotation={frame.rotation:.6f} rad, span={span:.4f}")
    return frame


@dataclass(frozen=True, eq=False)
class Route:
    """ Piecewise-linear route through `points` (N, 2); abscissae strictly increasing. """
    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise InvalidInputError(f"a route needs at least 2 points of shape (N, 2), got {pts.shape}", param='points')
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("route coordinates must be finite", param='points')
        if not np.all(np.diff(pts[:, 0]) > 0):
            raise InvalidInputError("route abscissae must be strictly increasing", param='points')
        pts.setflags(write=False)
        object.__setattr__(self, 'points', pts)

    @classmethod
    def from_ordinates(cls, span: float, ordinates: Sequence[float]) -> 'Route':
        return cls(route_points(span, np.asarray(ordinates, dtype=float)))

    @property
    def xs(self) -> np.ndarray:
        return self.points[:, 0]

    @property
    def ys(self) -> np.ndarray:
        return self.points[:, 1]

    @property
    def span(self) -> float:
        return float(self.points[-1, 0] - self.points[0, 0])

    @property
    def n_segments(self) -> int:
        return len(self.points) - 1

    @property
    def ordinates(self) -> np.ndarray:
        """ The free ordinates (everything but the endpoints). """
        return self.points[1:-1, 1]

    def segment_lengths(self) -> np.ndarray:
        return segment_lengths(self.points)

    def length(self) -> float:
        return float(self.segment_lengths().sum())

    def is_framed(self, tol: float = 1e-9) -> bool:
        """ P_0 = (0,0), P_M = (d,0) and |y| <= d. """
        d = self.points[-1, 0]
        return bool(np.allclose(self.points[0], 0.0, atol=tol) and abs(self.points[-1, 1]) <= tol
                    and np.all(np.abs(self.ys) <= d * (1 + tol)))


def route_points(span: float, ordinates: np.ndarray) -> np.ndarray:
    """ Waypoints for free `ordinates` (..., M): uniform abscissae, endpoints (0,0) and (span,0). """
    ordinates = np.asarray(ordinates, dtype=float)
    m = ordinates.shape[-1]
    xs = np.linspace(0.0, span, m + 2)
    ys = np.zeros(ordinates.shape[:-1] + (m + 2,))
    ys[..., 1:-1] = ordinates
    return np.stack([np.broadcast_to(xs, ys.shape), ys], axis=-1)


def segment_lengths(points: np.ndarray) -> np.ndarray:
    seg = np.diff(points, axis=-2)
    return np.hypot(seg[..., 0], seg[..., 1])


def tangents(points: np.ndarray) -> np.ndarray:
    seg = np.diff(points, axis=-2)
    return seg / np.hypot(seg[..., 0], seg[..., 1])[..., None]


def segment_tangent(route: Route, k: int) -> np.ndarray:
    if not 1 <= k <= route.n_segments:
        raise InvalidInputError(f"segment index {k} outside 1..{route.n_segments}", param='k')
    seg = route.points[k] - route.points[k - 1]
    return seg / math.hypot(*seg)


@dataclass(frozen=True, eq=False)
class EnvironmentField:
    """ Wind `v` and wave `w` 2-vectors on a regular grid: node (i, j) sits at
    origin + (i, j) * cell; `wind` and `wave` have shape (nx, ny, 2). """
    origin: Point
    cell: float
    wind: np.ndarray
    wave: np.ndarray
    _interp: RegularGridInterpolator = field(init=False, repr=False)

    def __post_init__(self):
        wind, wave = np.array(self.wind, dtype=float), np.array(self.wave, dtype=float)
        if wind.ndim != 3 or wind.shape[-1] != 2 or wind.shape != wave.shape:
            raise InvalidInputError(f"wind/wave grids must share shape (nx, ny, 2), got {wind.shape} and {wave.shape}", param='field')
        if wind.shape[0] < 2 or wind.shape[1] < 2:
            raise InvalidInputError(f"field grid needs nx, ny >= 2, got {wind.shape[:2]}", param='field')
        if not self.cell > 0:
            raise InvalidInputError(f"cell size must be positive, got {self.cell}", param='cell')
        if not (np.all(np.isfinite(wind)) and np.all(np.isfinite(wave))):
            raise InvalidInputError("field values must be finite", param='field')
        wind.setflags(write=False)
        wave.setflags(write=False)
        object.__setattr__(self, 'wind', wind)
        object.__setattr__(self, 'wave', wave)
        object.__setattr__(self, 'origin', (float(self.origin[0]), float(self.origin[1])))

        nx, ny = wind.shape[:2]
        axes = (self.origin[0] + self.cell * np.arange(nx), self.origin[1] + self.cell * np.arange(ny))
        interp = RegularGridInterpolator(axes, np.concatenate([wind, wave], axis=-1), method='linear', bounds_error=False, fill_value=None)
        object.__setattr__(self, '_interp', interp)

    @property
    def nx(self) -> int:
        return self.wind.shape[0]

    @property
    def ny(self) -> int:
        return self.wind.shape[1]

    @property
    def bounds(self) -> Tuple[float, float, float, float]:
        x0, y0 = self.origin
        return x0, y0, x0 + self.cell * (self.nx - 1), y0 + self.cell * (self.ny - 1)

    def contains(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        xmin, ymin, xmax, ymax = self.bounds
        eps = 1e-9 * self.cell
        return (p[..., 0] >= xmin - eps) & (p[..., 0] <= xmax + eps) & (p[..., 1] >= ymin - eps) & (p[..., 1] <= ymax + eps)

    def sample(self, points) -> Tuple[np.ndarray, np.ndarray]:
        p = np.asarray(points, dtype=float)
        inside = self.contains(p)
        if not np.all(inside):
            bad = p[~inside].reshape(-1, 2)[0]
            raise OutOfDomainError(f"point {tuple(bad)} is outside the environment grid {self.bounds}", param='point')
        xmin, ymin, xmax, ymax = self.bounds
        flat = p.reshape(-1, 2)
        flat = np.column_stack([np.clip(flat[:, 0], xmin, xmax), np.clip(flat[:, 1], ymin, ymax)])
        vals = self._interp(flat).reshape(p.shape[:-1] + (4,))
        return vals[..., :2], vals[..., 2:]

    @classmethod
    def uniform(cls, bounds: Tuple[float, float, float, float], cell: float, wind=(0.0, 0.0), wave=(0.0, 0.0)) -> 'EnvironmentField':
        """ Constant field whose grid covers `bounds` (xmin, ymin, xmax, ymax). """
        xmin, ymin, xmax, ymax = bounds
        nx = max(2, int(math.ceil((xmax - xmin) / cell - 1e-9)) + 1)
        ny = max(2, int(math.ceil((ymax - ymin) / cell - 1e-9)) + 1)
        shape = (nx, ny, 2)
        return cls((xmin, ymin), cell, np.broadcast_to(np.asarray(wind, dtype=float), shape), np.broadcast_to(np.asarray(wave, dtype=float), shape))

    @classmethod
    def calm(cls, span: float, cell: Optional[float] = None) -> 'EnvironmentField':
        """ Zero field covering the whole planning rectangle [0, d] x [-d, d]. """
        cell = cell or span / 10.0
        return cls.uniform((-cell, -span - cell, span + cell, span + cell), cell)


def sample_field(env: EnvironmentField, p) -> Tuple[np.ndarray, np.ndarray]:
    return env.sample(p)


def load_field(csv_path, sidecar_path=None) -> EnvironmentField:
    """ Read a `x,y,vx,vy,wx,wy` CSV with a JSON sidecar holding origin, cell, nx, ny. """
    csv_path = Path(csv_path)
    sidecar_path = Path(sidecar_path) if sidecar_path else csv_path.with_suffix('.json')
    issues = []

    try:
        meta = json.loads(sidecar_path.read_text())
    except (OSError, ValueError) as e:
        raise ScenarioError([(str(sidecar_path), None, '', f"cannot read grid metadata: {e}")])
    for key in ('origin', 'cell', 'nx', 'ny'):
        if key not in meta:
            issues.append((str(sidecar_path), None, key, "missing"))
    if issues:
        raise ScenarioError(issues)

    x0, y0 = map(float, meta['origin'])
    cell, nx, ny = float(meta['cell']), int(meta['nx']), int(meta['ny'])
    wind = np.full((nx, ny, 2), np.nan)
    wave = np.full((nx, ny, 2), np.nan)

    try:
        f = open(csv_path, newline='')
    except OSError as e:
        raise ScenarioError([(str(csv_path), None, '', f"cannot read environment grid: {e}")])
    with f:
        reader = csv.DictReader(f)
        if reader.fieldnames != FIELD_COLUMNS:
            raise ScenarioError([(str(csv_path), 1, 'header', f"expected {','.join(FIELD_COLUMNS)}, got {reader.fieldnames}")])
        for row in reader:
            line = reader.line_num
            try:
                vals = {k: float(row[k]) for k in FIELD_COLUMNS}
            except (TypeError, ValueError):
                bad = [k for k in FIELD_COLUMNS if not _is_float(row.get(k))]
                issues.extend((str(csv_path), line, k, f"not a number: {row.get(k)!r}") for k in bad)
                continue
            i = (vals['x'] - x0) / cell
            j = (vals['y'] - y0) / cell
            ii, jj = int(round(i)), int(round(j))
            if abs(i - ii) > 1e-6 or abs(j - jj) > 1e-6 or not (0 <= ii < nx and 0 <= jj < ny):
                issues.append((str(csv_path), line, 'x,y', f"({vals['x']}, {vals['y']}) is not a grid node"))
                continue
            wind[ii, jj] = (vals['vx'], vals['vy'])
            wave[ii, jj] = (vals['wx'], vals['wy'])

    missing = int(np.isnan(wind[..., 0]).sum())
    if missing:
        issues.append((str(csv_path), None, '', f"{missing} of {nx * ny} grid nodes have no row"))
    if issues:
        raise ScenarioError(issues)

    logger.debug(f"Loaded environment grid {csv_path} ({nx}x{ny}, cell {cell})")
    return EnvironmentField((x0, y0), cell, wind, wave)


def _is_float(s) -> bool:
    try:
        float(s)
        return True
    except (TypeError, ValueError):
        return False


@dataclass(frozen=True, eq=False)
class ShipModel:
    """ Cruise speed `speed` (frame units per time unit), wind/wave response tensors and
    the largest heading change allowed at a waypoint (radians). """
    speed: float
    z_wind: np.ndarray = field(default_factory=lambda: np.eye(2))
    z_wave: np.ndarray = field(default_factory=lambda: np.eye(2))
    max_turn: float = math.pi / 3

    def __post_init__(self):
        if not self.speed > 0:
            raise InvalidInputError(f"ship speed must be positive, got {self.speed}", param='speed')
        for name in ('z_wind', 'z_wave'):
            z = np.array(getattr(self, name), dtype=float)
            if z.shape != (2, 2) or not np.all(np.isfinite(z)):
                raise InvalidInputError(f"{name} must be a finite 2x2 tensor", param=name)
            z.setflags(write=False)
            object.__setattr__(self, name, z)
        if not 0 < self.max_turn < math.pi:
            raise InvalidInputError(f"max_turn must lie in (0, pi), got {self.max_turn}", param='max_turn')

    def speed_response(self, v: np.ndarray, w: np.ndarray, t: np.ndarray) -> np.ndarray:
        """ Speed change F(v, w, t) caused by the weather. Fixed at zero. """
        return np.zeros(np.shape(t)[:-1])


@dataclass(frozen=True, eq=False)
class CostBreakdown:
    T: float
    C: float
    S: float
    alpha: float
    segment_time: np.ndarray
    segment_comfort: np.ndarray


def segment_times(points: np.ndarray, ship: ShipModel, env: Optional[EnvironmentField] = None) -> np.ndarray:
    seg = np.diff(points, axis=-2)
    lengths = np.hypot(seg[..., 0], seg[..., 1])
    t = seg / lengths[..., None]
    if env is None:
        v = w = np.zeros_like(t)
    else:
        v, w = env.sample(points[..., :-1, :] + 0.5 * seg)
    return lengths / (ship.speed + ship.speed_response(v, w, t))


def segment_comfort(points: np.ndarray, env: EnvironmentField, ship: ShipModel, quadrature: int = DEFAULT_QUADRATURE) -> np.ndarray:
    """ Composite midpoint rule for the integral of (v^T Z_v + w^T Z_w) . t along each segment. """
    if quadrature < 1:
        raise InvalidInputError(f"quadrature must be >= 1, got {quadrature}", param='quadrature')
    seg = np.diff(points, axis=-2)
    lengths = np.hypot(seg[..., 0], seg[..., 1])
    t = (seg / lengths[..., None])[..., None, :]
    frac = (np.arange(quadrature) + 0.5) / quadrature
    samples = points[..., :-1, None, :] + frac[:, None] * seg[..., None, :]
    v, w = env.sample(samples)
    integrand = ((v @ ship.z_wind) * t).sum(-1) + ((w @ ship.z_wave) * t).sum(-1)
    return lengths * integrand.mean(-1)


def voyage_time(route: Route, ship: ShipModel, env: Optional[EnvironmentField] = None) -> float:
    return float(segment_times(route.points, ship, env).sum())


def comfort_cost(route: Route, env: EnvironmentField, ship: ShipModel, quadrature: int = DEFAULT_QUADRATURE) -> float:
    return float(segment_comfort(route.points, env, ship, quadrature).sum())


def check_alpha(alpha: float) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInputError(f"alpha must lie in [0, 1], got {alpha}", param='alpha')
    return float(alpha)


def route_cost(route: Route, env: EnvironmentField, ship: ShipModel, alpha: float, quadrature: int = DEFAULT_QUADRATURE) -> CostBreakdown:
    alpha = check_alpha(alpha)
    seg_t = segment_times(route.points, ship, env)
    seg_c = segment_comfort(route.points, env, ship, quadrature)
    T, C = float(seg_t.sum()), float(seg_c.sum())
    return CostBreakdown(T=T, C=C, S=alpha * T + (1 - alpha) * C, alpha=alpha, segment_time=seg_t, segment_comfort=seg_c)


def route_costs(points: np.ndarray, env: EnvironmentField, ship: ShipModel, alpha: float, quadrature: int = DEFAULT_QUADRATURE) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """ Batched (T, C, S) for routes stacked along the leading axes of `points`. """
    T = segment_times(points, ship, env).sum(-1)
    C = segment_comfort(points, env, ship, quadrature).sum(-1)
    return T, C, alpha * T + (1 - alpha) * C

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
import shapely
from loguru import logger
from shapely.geometry import LinearRing, Polygon
from shapely.geometry.polygon import orient

from geo_env import (DEFAULT_QUADRATURE, EnvironmentField, Route, ShipModel, check_alpha,
                     route_costs, route_points)
from route_errors import InvalidInputError

DEFAULT_AREA_TOL = 1e-9 # relative to obstacle area
EXP_CLAMP = 700.0
FLOAT_CAP = 1e300


@dataclass(frozen=True, eq=False)
class Obstacle:
    """ An island: a simple polygon in the planning frame, stored counter-clockwise. """
    vertices: np.ndarray
    holes: Tuple[np.ndarray, ...] = ()
    name: str = ''
    polygon: Polygon = field(init=False, repr=False)

    def __post_init__(self):
        verts = np.array(self.vertices, dtype=float)
        if verts.ndim != 2 or verts.shape[1] != 2:
            raise InvalidInputError(f"obstacle {self.name!r}: vertices must have shape (K, 2), got {verts.shape}", param='vertices')
        if len(verts) > 1 and np.array_equal(verts[0], verts[-1]):
            verts = verts[:-1]
        if len(verts) < 3:
            raise InvalidInputError(f"obstacle {self.name!r}: a polygon needs at least 3 vertices", param='vertices')
        if not np.all(np.isfinite(verts)):
            raise InvalidInputError(f"obstacle {self.name!r}: vertices must be finite", param='vertices')
        if not LinearRing(verts).is_simple:
            raise InvalidInputError(f"obstacle {self.name!r}: polygon boundary intersects itself", param='vertices')

        poly = Polygon(verts, [np.asarray(h, dtype=float) for h in self.holes])
        if not poly.is_valid or not poly.area > 0:
            raise InvalidInputError(f"obstacle {self.name!r}: degenerate polygon ({shapely.is_valid_reason(poly)})", param='vertices')
        poly = orient(poly, sign=1.0)
        shapely.prepare(poly)

        ccw = np.asarray(poly.exterior.coords)[:-1]
        ccw.setflags(write=False)
        object.__setattr__(self, 'vertices', ccw)
        object.__setattr__(self, 'holes', tuple(np.asarray(r.coords)[:-1] for r in poly.interiors))
        object.__setattr__(self, 'polygon', poly)

    @property
    def area(self) -> float:
        return self.polygon.area

    @property
    def bounds(self) -> Tuple[float, float, float, float]:
        return self.polygon.bounds


@dataclass(frozen=True, eq=False)
class ConstraintReport:
    h: np.ndarray
    g: np.ndarray

    @property
    def feasible(self) -> bool:
        return bool(np.all(self.h == 0.0) and np.all(self.g >= 0.0))


@dataclass(frozen=True)
class PenaltyParams:
    """ Sharpness `a` of the smooth step, `b` of the smooth delta and the annealed `lam`.
    With `tie_lambda_to_a` both sharpnesses follow lam as it anneals. """
    a: float = 1.0
    b: float = 1.0
    lam: float = 1.0
    area_tol: float = DEFAULT_AREA_TOL
    tie_lambda_to_a: bool = True

    def __post_init__(self):
        for name in ('a', 'b', 'lam'):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"penalty parameter {name} must be positive, got {getattr(self, name)}", param=name)
        if self.area_tol < 0:
            raise InvalidInputError(f"area_tol must be >= 0, got {self.area_tol}", param='area_tol')

    def at(self, lam: float) -> 'PenaltyParams':
        if self.tie_lambda_to_a:
            return replace(self, a=lam, b=lam, lam=lam)
        return replace(self, lam=lam)


@dataclass(frozen=True)
class GeneralizedCost:
    S: float
    P: float
    E: float
    rho: float


def _inv_expm1(t):
    """ 1 / (e^t - 1), exponent clamped so that nothing overflows. """
    t = np.clip(t, 1e-300, EXP_CLAMP)
    return 1.0 / np.expm1(t)


def _scalar(out):
    return float(out) if np.ndim(out) == 0 else out


def smooth_step(x, a: float):
    x = np.asarray(x, dtype=float)
    out = np.ones_like(x)
    neg = x < 0
    with np.errstate(divide='ignore', over='ignore'):
        t = 1.0 / (a * x[neg]) ** 2
    out[neg] = -np.expm1(-t)
    return _scalar(out)


def smooth_delta_inv(x, a: float):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    lo, hi = x < -1.0 / a, x > 1.0 / a
    with np.errstate(divide='ignore', over='ignore'):
        out[lo] = _inv_expm1(1.0 / (a * x[lo] + 1.0) ** 2)
        out[hi] = _inv_expm1(1.0 / (a * x[hi] - 1.0) ** 2)
    return _scalar(out)


def step_ratio(g, a: float):
    """ (1 - u_a(g)) / u_a(g) written as e^-t / (1 - e^-t) = 1 / (e^t - 1), t = 1/(a g)^2. """
    g = np.asarray(g, dtype=float)
    out = np.zeros_like(g)
    neg = g < 0
    with np.errstate(divide='ignore', over='ignore'):
        out[neg] = _inv_expm1(1.0 / (a * g[neg]) ** 2)
    return _scalar(out)


def penalty_values(h: np.ndarray, g: np.ndarray, params: PenaltyParams) -> np.ndarray:
    """ Penalty P for stacked constraint arrays h (..., N) and g (..., K). """
    return np.asarray(step_ratio(g, params.a)).sum(-1) + np.asarray(smooth_delta_inv(h, params.b)).sum(-1)


def penalty(report: ConstraintReport, params: PenaltyParams) -> float:
    return float(penalty_values(report.h, report.g, params))


def ideal_penalty(report: ConstraintReport) -> float:
    """ The discontinuous reference: zero when feasible, infinite otherwise. """
    return 0.0 if report.feasible else math.inf


def generalized_costs(S, P, lam: float):
    """ Batched (E, rho): E = |S + iP| * rho, rho > 1 only once P leaves [0, 1/lam].

    Negative S (comfort gained from a following sea) uses E = S + P * rho, which meets
    the modulus form at S = 0 and stays increasing in S. """
    S, P = np.asarray(S, dtype=float), np.asarray(P, dtype=float)
    rho = np.ones(np.broadcast(S, P).shape)
    out = np.broadcast_to(P, rho.shape) > 1.0 / lam
    Pb = np.broadcast_to(P, rho.shape)
    with np.errstate(divide='ignore', over='ignore', invalid='ignore'):
        rho[out] = 1.0 + _inv_expm1(1.0 / (lam * Pb[out] - 1.0) ** 2)
        E = np.where(S >= 0, np.hypot(S, P) * rho, S + P * rho)
        E = np.minimum(E, FLOAT_CAP)
    return E, rho


def generalized_cost(S: float, P: float, lam: float) -> GeneralizedCost:
    if P < 0 or not lam > 0 or not math.isfinite(S):
        raise InvalidInputError(f"generalized cost needs finite S, P >= 0, lam > 0; got S={S}, P={P}, lam={lam}")
    E, rho = generalized_costs(S, P, lam)
    return GeneralizedCost(S=float(S), P=float(P), E=float(E), rho=float(rho))


def anneal(lam: float, g_rate: float) -> float:
    if not lam > 0 or g_rate < 0:
        raise InvalidInputError(f"anneal needs lam > 0 and g_rate >= 0, got lam={lam}, g_rate={g_rate}")
    return lam * (1.0 + g_rate)


def turn_slacks(points: np.ndarray, max_turn: float) -> np.ndarray:
    """ max_turn minus the heading change at each interior waypoint; >= 0 is allowed. """
    points = points.points if isinstance(points, Route) else np.asarray(points, dtype=float)
    seg = np.diff(points, axis=-2)
    d = seg / np.hypot(seg[..., 0], seg[..., 1])[..., None]
    cos = np.clip((d[..., :-1, :] * d[..., 1:, :]).sum(-1), -1.0, 1.0)
    return max_turn - np.arccos(cos)


def _route_y_range(xs: np.ndarray, ys: np.ndarray, lo: float, hi: float) -> Tuple[np.ndarray, np.ndarray]:
    """ Min and max of the piecewise-linear graphs ys (P, N) over lo <= x <= hi. """
    P = ys.shape[0]
    rows = np.arange(P)

    def interp(x):
        k = int(np.clip(np.searchsorted(xs, x) - 1, 0, len(xs) - 2))
        f = (x - xs[k]) / (xs[k + 1] - xs[k])
        return ys[rows, k] * (1 - f) + ys[rows, k + 1] * f

    ends = np.column_stack([interp(lo), interp(hi)])
    inner = ys[:, (xs > lo) & (xs < hi)]
    both = np.concatenate([ends, inner], axis=1)
    return both.min(1), both.max(1)


def split_areas(points: np.ndarray, obstacles: Sequence[Obstacle]) -> Tuple[np.ndarray, np.ndarray]:
    """ Area of each obstacle lying below each route graph.

    `points` is (P, N, 2) with abscissae shared by every route. Obstacles are first clipped
    to the route's x-span. Returns (below (P, K), clipped area (K,)). """
    points = np.asarray(points, dtype=float)
    P, K = points.shape[0], len(obstacles)
    below = np.zeros((P, K))
    if K == 0:
        return below, np.zeros(0)

    xs = points[0, :, 0]
    ys = points[..., 1]
    x0, x1 = xs[0], xs[-1]
    polys = np.array([o.polygon for o in obstacles], dtype=object)
    ymin = min(float(ys.min()), min(o.bounds[1] for o in obstacles)) - 1.0
    ymax = max(float(ys.max()), max(o.bounds[3] for o in obstacles)) + 1.0
    clipped = shapely.intersection(polys, shapely.box(x0, ymin, x1, ymax))
    clipped_area = shapely.area(clipped)

    # bounding-box shortcuts; only routes entering an obstacle's box need exact clipping
    pending = []
    for k, geom in enumerate(clipped):
        if clipped_area[k] <= 0.0:
            continue
        bx0, by0, bx1, by1 = geom.bounds
        rmin, rmax = _route_y_range(xs, ys, bx0, bx1)
        below[rmin >= by1, k] = clipped_area[k]
        for p in np.nonzero((rmin < by1) & (rmax > by0))[0]:
            pending.append((p, k))

    if pending:
        idx = np.array(pending)
        floor = np.array([[x1, ymin], [x0, ymin]])
        rings = np.concatenate([points[idx[:, 0]], np.broadcast_to(floor, (len(idx), 2, 2))], axis=1)
        regions = shapely.polygons(rings)
        below[idx[:, 0], idx[:, 1]] = shapely.area(shapely.intersection(regions, clipped[idx[:, 1]]))

    return below, clipped_area


def split_ratios(points: np.ndarray, obstacles: Sequence[Obstacle], area_tol: float = DEFAULT_AREA_TOL) -> np.ndarray:
    below, clipped_area = split_areas(points, obstacles)
    if not len(obstacles):
        return below
    above = np.maximum(clipped_area[None, :] - below, 0.0)
    small, large = np.minimum(below, above), np.maximum(below, above)
    full = np.array([o.area for o in obstacles])
    with np.errstate(divide='ignore', invalid='ignore'):
        h = np.where(small <= area_tol * full[None, :], 0.0, -small / large)
    return h


def split_ratio(route: Route, obstacle: Obstacle, area_tol: float = DEFAULT_AREA_TOL) -> float:
    return float(split_ratios(route.points[None], [obstacle], area_tol)[0, 0])


def constraint_report(route: Route, obstacles: Sequence[Obstacle], max_turn: float, area_tol: float = DEFAULT_AREA_TOL) -> ConstraintReport:
    return ConstraintReport(h=split_ratios(route.points[None], obstacles, area_tol)[0], g=turn_slacks(route.points, max_turn))


@dataclass(frozen=True, eq=False)
class RawEvaluation:
    """ Everything about a batch of routes that does not depend on lam: cost parts and
    constraint values. Scoring at a new lam reuses it without touching the geometry. """
    S: np.ndarray
    T: np.ndarray
    C: np.ndarray
    h: np.ndarray
    g: np.ndarray

    def __len__(self):
        return len(self.S)

    @property
    def feasible(self) -> np.ndarray:
        return np.all(self.h == 0.0, axis=-1) & np.all(self.g >= 0.0, axis=-1)

    def penalty(self, params: PenaltyParams) -> np.ndarray:
        return penalty_values(self.h, self.g, params)

    def score(self, params: PenaltyParams) -> np.ndarray:
        return generalized_costs(self.S, self.penalty(params), params.lam)[0]

    def take(self, idx) -> 'RawEvaluation':
        return RawEvaluation(self.S[idx], self.T[idx], self.C[idx], self.h[idx], self.g[idx])

    @classmethod
    def concat(cls, parts: Iterable['RawEvaluation']) -> 'RawEvaluation':
        parts = [p for p in parts if len(p)]
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in ('S', 'T', 'C', 'h', 'g')))


@dataclass(frozen=True, eq=False)
class RouteProblem:
    """ The evaluator bundle: routes with `n_free` free ordinates over span `span`. """
    span: float
    n_free: int
    env: EnvironmentField
    ship: ShipModel
    alpha: float = 1.0
    obstacles: Tuple[Obstacle, ...] = ()
    quadrature: int = DEFAULT_QUADRATURE
    area_tol: float = DEFAULT_AREA_TOL

    def __post_init__(self):
        check_alpha(self.alpha)
        if not self.span > 0:
            raise InvalidInputError(f"span must be positive, got {self.span}", param='span')
        if self.n_free < 1:
            raise InvalidInputError(f"need at least one free waypoint, got {self.n_free}", param='n_free')
        object.__setattr__(self, 'obstacles', tuple(self.obstacles))

    def route(self, ordinates) -> Route:
        return Route.from_ordinates(self.span, ordinates)

    def evaluate(self, ordinates) -> RawEvaluation:
        ordinates = np.atleast_2d(np.asarray(ordinates, dtype=float))
        pts = route_points(self.span, ordinates)
        T, C, S = route_costs(pts, self.env, self.ship, self.alpha, self.quadrature)
        return RawEvaluation(S=S, T=T, C=C, h=split_ratios(pts, self.obstacles, self.area_tol), g=turn_slacks(pts, self.ship.max_turn))

    def report(self, route: Route) -> ConstraintReport:
        return constraint_report(route, self.obstacles, self.ship.max_turn, self.area_tol)

    def with_obstacles(self, obstacles: Sequence[Obstacle]) -> 'RouteProblem':
        return replace(self, obstacles=tuple(obstacles))

    def in_span(self) -> Tuple[Obstacle, ...]:
        """ Obstacles with some area strictly between the endpoints' abscissae. """
        keep = []
        for o in self.obstacles:
            x0, _, x1, _ = o.bounds
            if x1 > 0.0 and x0 < self.span:
                keep.append(o)
        logger.debug(f"{len(keep)} of {len(self.obstacles)} obstacles lie within the route span")
        return tuple(keep)

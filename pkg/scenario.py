import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from shapely.geometry import shape

from archipelago import (DEFAULT_LEVELS, DEFAULT_MIGRATION_FRACTION, DEFAULT_MIGRATION_INTERVAL, DEFAULT_PLATEAU,
                         DEFAULT_POPULATION, EvolutionSettings, IslandNetwork, Termination, build_network)
from evo_core import DEFAULT_CROSSOVER_RATE, DEFAULT_ELITE_FRACTION, DEFAULT_GA_FRACTION
from geo_env import DEFAULT_QUADRATURE, DEFAULT_WAYPOINTS, EnvironmentField, PlanningFrame, Route, ShipModel, build_frame, load_field
from penalty import DEFAULT_AREA_TOL, Obstacle, PenaltyParams, RouteProblem
from route_errors import InvalidInputError, Issue, RoutingError, ScenarioError

SCHEMA_VERSION = 1
LATLON_DECIMALS = 6


class _Strict(BaseModel):
    model_config = ConfigDict(extra='forbid')


class FrameSpec(_Strict):
    departure: Tuple[float, float]
    arrival: Tuple[float, float]
    coordinates: Literal['latlon', 'frame'] = 'latlon' # latlon: (lat, lon) degrees; frame: planar (x, y)
    scale: Optional[float] = Field(None, gt=0) # meters per frame unit; default 1852 (nautical mile) or 1


class ShipSpec(_Strict):
    speed: float = Field(gt=0) # frame units per hour (knots for geographic frames)
    z_wind: List[List[float]] = [[1.0, 0.0], [0.0, 1.0]]
    z_wave: List[List[float]] = [[1.0, 0.0], [0.0, 1.0]]
    max_turn_deg: float = Field(60.0, gt=0, lt=180)


class EnvironmentSpec(_Strict):
    grid: str
    sidecar: Optional[str] = None


class PenaltySpec(_Strict):
    a: float = Field(1.0, gt=0)
    b: float = Field(1.0, gt=0)
    lam0: float = Field(1.0, gt=0)
    area_tol: float = Field(DEFAULT_AREA_TOL, ge=0)
    tie_lambda_to_a: bool = True


class LevelSpec(_Strict):
    resolution: int = Field(ge=1, le=52)
    islands: int = Field(1, ge=1)
    g_rate: float = Field(ge=0)


class TerminationSpec(_Strict):
    max_generations: int = Field(500, ge=1)
    plateau: Optional[int] = Field(DEFAULT_PLATEAU, ge=1)
    wall_time: Optional[float] = Field(None, gt=0)


class SASpec(_Strict):
    resolution: int = Field(10, ge=1, le=52)
    temperature: Optional[float] = Field(None, gt=0) # default: 5% of the straight route's cost
    cooling: float = Field(0.95, gt=0, lt=1)
    steps_per_temp: int = Field(50, ge=1)
    stages: int = Field(200, ge=1)
    step_cells: int = Field(4, ge=1)
    g_rate: float = Field(0.05, ge=0)
    max_evaluations: Optional[int] = Field(None, ge=1)


class BypassSpec(_Strict):
    cap: int = Field(14, ge=0)
    resolution: int = Field(10, ge=1, le=52)
    population_size: int = Field(20, ge=2)
    generations: int = Field(100, ge=1)
    spread_cells: int = Field(8, ge=0)
    margin: float = Field(0.02, ge=0) # seed standoff, as a fraction of the span


class BruteSpec(_Strict):
    resolution: Optional[int] = Field(None, ge=1, le=24) # default: the finest island level
    feasible_only: bool = True


class SolverSpec(_Strict):
    waypoints: int = Field(DEFAULT_WAYPOINTS, ge=1)
    population_size: int = Field(DEFAULT_POPULATION, ge=2)
    levels: List[LevelSpec] = [LevelSpec(resolution=l, islands=c, g_rate=g) for l, c, g in DEFAULT_LEVELS]
    migration_interval: int = Field(DEFAULT_MIGRATION_INTERVAL, ge=1)
    migration_fraction: float = Field(DEFAULT_MIGRATION_FRACTION, gt=0, lt=1)
    elite_fraction: float = Field(DEFAULT_ELITE_FRACTION, gt=0, le=1)
    ga_fraction: float = Field(DEFAULT_GA_FRACTION, ge=0, le=1)
    crossover_rate: float = Field(DEFAULT_CROSSOVER_RATE, ge=0, le=1)
    mutation_rate: Optional[float] = Field(None, ge=0, le=1) # default 1/L
    gray: bool = False
    quadrature: int = Field(DEFAULT_QUADRATURE, ge=1)
    clearance: float = Field(0.0, ge=0)
    seed: Optional[int] = None
    deterministic: bool = True
    workers: int = Field(1, ge=1)
    sa: SASpec = SASpec()
    bypass: BypassSpec = BypassSpec()
    brute: BruteSpec = BruteSpec()

    @model_validator(mode='after')
    def seed_when_deterministic(self):
        if self.deterministic and self.seed is None:
            raise ValueError("deterministic mode requires a seed")
        return self


class ScenarioSpec(_Strict):
    schema_version: Literal[1]
    name: str = ''
    frame: FrameSpec
    obstacles: Optional[str] = None # GeoJSON file, relative to the scenario
    obstacles_crs: Literal['frame', 'lonlat'] = 'frame'
    environment: Optional[EnvironmentSpec] = None # default: calm sea
    ship: ShipSpec
    alpha: float = Field(1.0, ge=0, le=1)
    penalty: PenaltySpec = PenaltySpec()
    termination: TerminationSpec = TerminationSpec()
    solver: SolverSpec


@dataclass(eq=False)
class Scenario:
    """ A validated scenario with every referenced file loaded. """
    spec: ScenarioSpec
    path: Path
    frame: PlanningFrame
    obstacles: Tuple[Obstacle, ...]
    env: EnvironmentField
    ship: ShipModel
    problem: RouteProblem

    @property
    def name(self) -> str:
        return self.spec.name or self.path.stem

    def penalty_params(self) -> PenaltyParams:
        p = self.spec.penalty
        return PenaltyParams(a=p.a, b=p.b, lam=p.lam0, area_tol=p.area_tol, tie_lambda_to_a=p.tie_lambda_to_a)

    def network(self) -> IslandNetwork:
        s = self.spec.solver
        return build_network([(l.resolution, l.islands, l.g_rate) for l in s.levels], population_size=s.population_size,
                             lam0=self.spec.penalty.lam0, migration_interval=s.migration_interval)

    def termination(self) -> Termination:
        t = self.spec.termination
        return Termination(t.max_generations, t.plateau, t.wall_time)

    def settings(self) -> EvolutionSettings:
        s = self.spec.solver
        return EvolutionSettings(crossover_rate=s.crossover_rate, mutation_rate=s.mutation_rate, ga_fraction=s.ga_fraction,
                                 elite_fraction=s.elite_fraction, migration_fraction=s.migration_fraction, gray=s.gray,
                                 penalty=self.penalty_params())

    def final_lambda(self) -> float:
        """ lam reached by the slowest-annealing level at the generation limit. """
        g = min(l.g_rate for l in self.spec.solver.levels)
        return self.spec.penalty.lam0 * (1.0 + g) ** self.spec.termination.max_generations

    def to_latlon(self, points: np.ndarray) -> np.ndarray:
        a, b = self.frame.from_frame(points[:, 0], points[:, 1])
        return np.column_stack([a, b])


def _line_of(text: str, loc) -> Optional[int]:
    """ Line of the innermost key of a validation `loc` found in the JSON source.
    List indices pick the matching occurrence of the key that follows them. """
    pos, line, skip = 0, None, 0
    for key in loc:
        if isinstance(key, int):
            skip = key
            continue
        pattern = re.compile(rf'"{re.escape(str(key))}"\s*:')
        for _ in range(skip + 1):
            m = pattern.search(text, pos)
            if m is None:
                return line
            pos = m.end()
        skip = 0
        line = text.count('\n', 0, m.start()) + 1
    return line


def _issues_from_validation(fname: str, err: ValidationError, text: str = '') -> List[Issue]:
    return [(fname, _line_of(text, e['loc']), '.'.join(str(p) for p in e['loc']), e['msg']) for e in err.errors()]


def _read_text(path: Path) -> str:
    try:
        return path.read_text()
    except OSError as e:
        raise ScenarioError([(str(path), None, '', f"cannot read: {e.strerror or e}")])


def _read_json(path: Path, text: Optional[str] = None):
    try:
        return json.loads(_read_text(path) if text is None else text)
    except json.JSONDecodeError as e:
        raise ScenarioError([(str(path), e.lineno, '', f"invalid JSON: {e.msg}")])


def load_obstacles(path, frame: Optional[PlanningFrame] = None, crs: str = 'frame') -> Tuple[Obstacle, ...]:
    """ Polygons from a GeoJSON FeatureCollection; `lonlat` coordinates are projected into `frame`. """
    path = Path(path)
    data = _read_json(path)
    fname = str(path)
    features = data.get('features') if isinstance(data, dict) else None
    if not isinstance(features, list) or data.get('type') != 'FeatureCollection':
        raise ScenarioError([(fname, None, 'type', "expected a GeoJSON FeatureCollection")])
    if crs == 'lonlat' and (frame is None or not frame.geographic):
        raise ScenarioError([(fname, None, 'obstacles_crs', "lonlat obstacles need a latlon planning frame")])

    obstacles, issues = [], []
    for i, feat in enumerate(features):
        where = f"features[{i}]"
        try:
            geom = shape(feat['geometry'])
        except Exception as e:
            issues.append((fname, None, f"{where}.geometry", f"unreadable geometry: {e}"))
            continue
        name = str((feat.get('properties') or {}).get('name', i))
        polys = list(geom.geoms) if geom.geom_type == 'MultiPolygon' else [geom]
        for poly in polys:
            if poly.geom_type != 'Polygon':
                issues.append((fname, None, f"{where}.geometry", f"expected Polygon or MultiPolygon, got {poly.geom_type}"))
                continue
            rings = [np.asarray(poly.exterior.coords)] + [np.asarray(r.coords) for r in poly.interiors]
            if crs == 'lonlat':
                rings = [np.column_stack(frame.to_frame(r[:, 1], r[:, 0])) for r in rings]
            try:
                obstacles.append(Obstacle(rings[0], tuple(rings[1:]), name=name))
            except InvalidInputError as e:
                issues.append((fname, None, where, e.message))
    if issues:
        raise ScenarioError(issues)

    logger.debug(f"Loaded {len(obstacles)} obstacle(s) from {path}")
    return tuple(obstacles)


def load_scenario(path) -> Scenario:
    path = Path(path)
    fname = str(path)
    text = _read_text(path)
    try:
        spec = ScenarioSpec.model_validate(_read_json(path, text))
    except ValidationError as e:
        raise ScenarioError(_issues_from_validation(fname, e, text))

    issues: List[Issue] = []
    base = path.parent
    f = spec.frame
    try:
        frame = build_frame(f.departure, f.arrival, geographic=f.coordinates == 'latlon', scale=f.scale)
    except InvalidInputError as e:
        raise ScenarioError([(fname, _line_of(text, ('frame', e.param or 'departure')), f"frame.{e.param or 'departure'}", e.message)])

    ship = None
    try:
        ship = ShipModel(spec.ship.speed, np.array(spec.ship.z_wind), np.array(spec.ship.z_wave), math.radians(spec.ship.max_turn_deg))
    except InvalidInputError as e:
        issues.append((fname, _line_of(text, ('ship', e.param or 'speed')), f"ship.{e.param}", e.message))

    obstacles: Tuple[Obstacle, ...] = ()
    if spec.obstacles:
        try:
            obstacles = load_obstacles(base / spec.obstacles, frame, spec.obstacles_crs)
        except ScenarioError as e:
            issues.extend(e.issues)

    env = EnvironmentField.calm(frame.span)
    if spec.environment:
        grid = base / spec.environment.grid
        sidecar = base / spec.environment.sidecar if spec.environment.sidecar else None
        try:
            env = load_field(grid, sidecar)
            corners = np.array([[0.0, -frame.span], [frame.span, frame.span]])
            if not np.all(env.contains(corners)):
                issues.append((str(grid), None, 'origin', f"grid {env.bounds} does not cover the planning rectangle "
                                                          f"[0, {frame.span:.6g}] x [{-frame.span:.6g}, {frame.span:.6g}]"))
        except ScenarioError as e:
            issues.extend(e.issues)

    if issues:
        raise ScenarioError(issues)

    problem = RouteProblem(frame.span, spec.solver.waypoints, env, ship, spec.alpha, obstacles, spec.solver.quadrature, spec.penalty.area_tol)
    logger.info(f"Scenario {spec.name or path.stem}: span {frame.span:.4g}, {len(obstacles)} obstacle(s), alpha={spec.alpha}")
    return Scenario(spec, path, frame, obstacles, env, ship, problem)


def _latlon(scenario: Scenario, points: np.ndarray) -> list:
    return np.round(scenario.to_latlon(points), LATLON_DECIMALS).tolist()


def route_geojson(outcome, scenario: Scenario) -> dict:
    latlon = _latlon(scenario, outcome.points)
    coords = [[lon, lat] for lat, lon in latlon] if scenario.frame.geographic else latlon
    return {
        'type': 'Feature',
        'geometry': {'type': 'LineString', 'coordinates': coords},
        'properties': {'scenario': scenario.name, 'solver': outcome.solver, 'feasible': outcome.feasible},
    }


def emit_result(outcome, scenario: Scenario, out_dir, metadata: Optional[dict] = None) -> dict:
    """ Write route.geojson, result.json and convergence.csv into `out_dir`. """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {'route': out / 'route.geojson', 'result': out / 'result.json', 'log': out / 'convergence.csv'}

    paths['route'].write_text(json.dumps(route_geojson(outcome, scenario), indent=2) + '\n')

    result = {
        'schema_version': SCHEMA_VERSION,
        'scenario': scenario.name,
        'solver': outcome.solver,
        'feasible': outcome.feasible,
        'waypoints_frame': outcome.points.tolist(),
        'waypoints_latlon': _latlon(scenario, outcome.points),
        'cost': {'T': outcome.T, 'C': outcome.C, 'S': outcome.S, 'alpha': scenario.problem.alpha,
                 'P': outcome.P, 'E': outcome.E, 'lambda': outcome.lam},
        'constraints': {'h': outcome.report.h.tolist(), 'g': outcome.report.g.tolist(), 'feasible': outcome.report.feasible},
        'metadata': {'generations': outcome.generations, 'evaluations': outcome.evaluations, 'wall_ms': outcome.wall_ms,
                     'lambda_final': outcome.lam, **(metadata or {}), **outcome.extra},
        'summary': outcome.summary(),
    }
    paths['result'].write_text(json.dumps(result, indent=2) + '\n')
    outcome.log.to_csv(paths['log'])

    logger.info(f"Wrote {', '.join(str(p) for p in paths.values())}")
    return paths


def load_route(path) -> Route:
    """ Re-read the frame waypoints of an emitted result.json. """
    path = Path(path)
    data = _read_json(path)
    if not isinstance(data, dict) or data.get('schema_version') != SCHEMA_VERSION or 'waypoints_frame' not in data:
        raise ScenarioError([(str(path), None, 'waypoints_frame', f"not a schema_version {SCHEMA_VERSION} route result")])
    try:
        return Route(np.array(data['waypoints_frame'], dtype=float))
    except (RoutingError, ValueError) as e:
        raise ScenarioError([(str(path), None, 'waypoints_frame', str(e))])

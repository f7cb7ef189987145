from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import networkx as nx
import shapely
from shapely.geometry import Point, Polygon
from shapely.ops import unary_union

from geo_env import segment_times, segment_comfort
from archipelago import LogRow
from penalty import Obstacle, generalized_costs, penalty_values, turn_slacks
from route_solver import *

# visibility graph over clearance-inflated obstacle vertices


@dataclass(frozen=True, eq=False)
class ShortestPath:
    points: np.ndarray
    length: float
    found: bool = True


def inflate(obstacles: Sequence[Union[Obstacle, Polygon]], clearance: float = 0.0):
    polys = [o.polygon if isinstance(o, Obstacle) else o for o in obstacles]
    if clearance > 0:
        polys = [p.buffer(clearance, join_style='mitre') for p in polys]
    return unary_union(polys)


def _vertices(region) -> np.ndarray:
    geoms = getattr(region, 'geoms', [region])
    rings = [r for g in geoms if not g.is_empty for r in [g.exterior, *g.interiors]]
    if not rings:
        return np.zeros((0, 2))
    return np.concatenate([np.asarray(r.coords)[:-1] for r in rings])


def shortest_feasible_path(obstacles: Sequence[Union[Obstacle, Polygon]], start, end, clearance: float = 0.0) -> ShortestPath:
    """ Shortest polyline from `start` to `end` that never enters an obstacle interior. """
    if clearance < 0:
        raise InvalidInputError(f"clearance must be >= 0, got {clearance}", param='clearance')
    start, end = tuple(map(float, start)), tuple(map(float, end))
    region = inflate(obstacles, clearance)

    for name, p in (('start', start), ('end', end)):
        if not region.is_empty and region.contains(Point(p)):
            raise InvalidInputError(f"{name} {p} lies inside an obstacle", param=name)

    nodes = np.concatenate([np.array([start, end]), _vertices(region)])
    nodes = np.unique(nodes, axis=0) if len(nodes) > 2 else nodes
    idx_start = int(np.flatnonzero((nodes == start).all(1))[0])
    idx_end = int(np.flatnonzero((nodes == end).all(1))[0])

    i, j = np.triu_indices(len(nodes), k=1)
    lines = shapely.linestrings(np.stack([nodes[i], nodes[j]], axis=1))
    ok = np.ones(len(lines), dtype=bool)
    if not region.is_empty:
        shapely.prepare(region)
        touching = shapely.intersects(region, lines)
        ok[touching] = ~shapely.relate_pattern(region, lines[touching], 'T********')

    graph = nx.Graph()
    graph.add_nodes_from(range(len(nodes)))
    lengths = np.hypot(*(nodes[j] - nodes[i]).T)
    graph.add_weighted_edges_from(zip(i[ok].tolist(), j[ok].tolist(), lengths[ok].tolist()))

    try:
        length, path = nx.single_source_dijkstra(graph, idx_start, idx_end, weight='weight')
    except nx.NetworkXNoPath:
        logger.warning(f"No obstacle-free path from {start} to {end}")
        return ShortestPath(np.array([start, end]), float('inf'), found=False)

    logger.debug(f"Visibility graph: {len(nodes)} nodes, {int(ok.sum())} edges, shortest length {length:.6g}")
    return ShortestPath(nodes[path], float(length))


def polyline_costs(points: np.ndarray, problem) -> Tuple[float, float, float]:
    T = float(segment_times(points, problem.ship, problem.env).sum())
    C = float(segment_comfort(points, problem.env, problem.ship, problem.quadrature).sum()) if problem.alpha < 1 else 0.0
    return T, C, problem.alpha * T + (1 - problem.alpha) * C


class RouteSolver(RouteSolverBase):
    solver_name: str = "shortest"

    def __init__(self, scenario: Scenario, extra_params: dict = {}):
        super().__init__(scenario, extra_params)

        self.clearance = extra_params.get('clearance', self.config.clearance)

        self.loaded_banner()

    def solve(self) -> SolveOutcome:
        clock = Stopwatch()
        path = shortest_feasible_path(self.problem.obstacles, (0.0, 0.0), (self.problem.span, 0.0), self.clearance)
        T, C, S = polyline_costs(path.points, self.problem)
        g = turn_slacks(path.points, self.problem.ship.max_turn) if len(path.points) > 2 else np.zeros(0)
        report = ConstraintReport(h=np.zeros(len(self.problem.obstacles)), g=g)
        params = self.penalty_base
        P = float(penalty_values(report.h, g, params))
        E = float(generalized_costs(S, P, params.lam)[0])
        log = ConvergenceLog([LogRow(self.solver_name, 0, params.lam, S, S, P, clock.ms)])
        return SolveOutcome(self.solver_name, path.points, path.found and report.feasible, S, T, C, P, E, params.lam, report,
                            log=log, evaluations=1, wall_ms=clock.ms, extra={'length': path.length if path.found else None, 'clearance': self.clearance})

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from typing import List, Optional, Sequence, Tuple

from shapely.geometry import box
from shapely.ops import unary_union

from archipelago import LogRow
from backend.shortest import shortest_feasible_path
from evo_core import Encoding, Fitness, Population, ga_offspring, next_generation
from penalty import Obstacle, RawEvaluation, RouteProblem
from route_errors import RefusalError
from route_solver import *

# one death-penalty GA per homotopy class of side choices

DEFAULT_CAP = 14


@dataclass(eq=False)
class BypassClass:
    """ Side choice per obstacle between the endpoints: True passes above it. """
    sides: Tuple[bool, ...]
    obstacles: Tuple[Obstacle, ...]
    start: Tuple[float, float]
    end: Tuple[float, float]
    clearance: float = 0.0
    margin: float = 0.0

    @property
    def label(self) -> str:
        return ''.join('A' if s else 'B' for s in self.sides) or '-'

    def curtains(self) -> list:
        """ Each obstacle joined to a box reaching away from the chosen side, so any path must pass on that side. """
        span = self.end[0] - self.start[0]
        depth = 2.0 * span + max([max(abs(o.bounds[1]), abs(o.bounds[3])) for o in self.obstacles], default=0.0)
        out = []
        for o, above in zip(self.obstacles, self.sides):
            poly = o.polygon.buffer(self.margin, join_style='mitre') if self.margin > 0 else o.polygon
            x0, y0, x1, y1 = poly.bounds
            out.append(unary_union([poly, box(x0, -depth, x1, y0) if above else box(x0, y1, x1, depth)]))
        return out

    @cached_property
    def seed_points(self) -> np.ndarray:
        straight = np.array([self.start, self.end], dtype=float)
        if not self.obstacles:
            return straight
        try:
            path = shortest_feasible_path(self.curtains(), self.start, self.end, self.clearance)
        except InvalidInputError as e:
            logger.debug(f"bypass class {self.label}: no seed path ({e.message}), seeding straight")
            return straight
        return path.points if path.found else straight

    def seed_ordinates(self, n_free: int) -> np.ndarray:
        pts = self.seed_points
        span = self.end[0] - self.start[0]
        xs = np.linspace(self.start[0], self.end[0], n_free + 2)[1:-1]
        ys = np.interp(xs, np.maximum.accumulate(pts[:, 0]), pts[:, 1])
        return np.clip(ys, -span, span)


def obstacles_between(obstacles: Sequence[Obstacle], start, end) -> Tuple[Obstacle, ...]:
    inside = [o for o in obstacles if o.bounds[2] > start[0] and o.bounds[0] < end[0]]
    return tuple(sorted(inside, key=lambda o: (o.bounds[0], o.bounds[2])))


def enumerate_bypasses(obstacles: Sequence[Obstacle], start, end, cap: int = DEFAULT_CAP, clearance: float = 0.0,
                       margin: float = 0.0) -> List[BypassClass]:
    start, end = tuple(map(float, start)), tuple(map(float, end))
    between = obstacles_between(obstacles, start, end)
    n = len(between)
    if n > cap:
        raise RefusalError(f"{n} obstacles lie between the endpoints: 2^{n} = {2 ** n} bypass classes exceed the cap of "
                           f"2^{cap} = {2 ** cap}; the class count doubles with every obstacle", param='cap')
    logger.debug(f"{n} obstacle(s) between the endpoints, {2 ** n} bypass classes")
    return [BypassClass(tuple(sides), between, start, end, clearance, margin) for sides in itertools.product((False, True), repeat=n)]


class DeathPenaltyFitness(Fitness):
    def score(self, raw: RawEvaluation) -> np.ndarray:
        return np.where(raw.feasible, raw.S, np.inf)


def evolve_class(cls: BypassClass, problem: RouteProblem, enc: Encoding, generations: int, size: int, spread: int,
                 seed: np.random.SeedSequence) -> Tuple[Population, DeathPenaltyFitness, ConvergenceLog]:
    rng = np.random.default_rng(seed)
    fitness = DeathPenaltyFitness(problem, enc, PenaltyParams())
    base = enc.codes(enc.encode(cls.seed_ordinates(problem.n_free)))
    codes = np.clip(base + rng.integers(-spread, spread + 1, size=(size, problem.n_free)), 0, enc.levels)
    codes[0] = base
    pop = Population.from_bits(enc.bits_for(codes), fitness)
    log = ConvergenceLog()
    name = f"class-{cls.label}"
    for gen in range(generations):
        pop = next_generation(pop, ga_offspring(pop, size, rng), [], fitness)
        log.add(LogRow(name, gen + 1, 1.0, pop.best_fitness, float(pop.raw.S[0]), 0.0 if pop.raw.feasible[0] else float('inf'), 0.0))
    return pop, fitness, log


def bypass_solver(classes: Sequence[BypassClass], problem: RouteProblem, generations: int = 100, seed: int = 0,
                  population_size: int = 20, resolution: int = 10, spread_cells: int = 8, workers: int = 1,
                  gray: bool = False, penalty: PenaltyParams = PenaltyParams()) -> SolveOutcome:
    if not classes:
        raise InvalidInputError("bypass_solver needs at least one class")
    clock = Stopwatch()
    enc = Encoding(problem.n_free, resolution, problem.span, gray)
    seeds = np.random.SeedSequence(seed).spawn(len(classes))

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(lambda a: evolve_class(a[0], problem, enc, generations, population_size, spread_cells, a[1]), zip(classes, seeds)))

    log = ConvergenceLog()
    per_class = {}
    for cls, (pop, fitness, class_log) in zip(classes, results):
        log.extend(class_log.rows)
        per_class[cls.label] = pop.best_fitness if np.isfinite(pop.best_fitness) else None
    evaluations = sum(f.evaluations for _, f, _ in results)

    feasible = [(pop.best_fitness, k) for k, (pop, _, _) in enumerate(results) if np.isfinite(pop.best_fitness)]
    k = min(feasible)[1] if feasible else 0
    pop = results[k][0]
    raw = pop.raw.take([0])
    logger.info(f"Bypass search over {len(classes)} class(es), {evaluations} evaluations in {clock.ms / 1000:.2f}s: "
                f"{len(feasible)} feasible, best class {classes[k].label if feasible else None}")

    params = penalty
    return SolveOutcome(
        solver='bypass', points=problem.route(enc.ordinates(pop.bits[0])).points, feasible=bool(feasible),
        S=float(raw.S[0]), T=float(raw.T[0]), C=float(raw.C[0]), P=float(raw.penalty(params)[0]), E=float(raw.score(params)[0]),
        lam=params.lam, report=ConstraintReport(raw.h[0], raw.g[0]), log=log, generations=generations,
        evaluations=evaluations, wall_ms=clock.ms, extra={'classes': len(classes), 'best_class': classes[k].label, 'class_costs': per_class},
    )


@dataclass(frozen=True)
class ScalingRow:
    obstacles: int
    classes: int
    wall_ms: float
    best_cost: float # inf when no class is feasible


SCALING_COLUMNS = ['N', 'classes', 'wall_ms', 'best_cost']


def bypass_scaling(problem: RouteProblem, max_obstacles: int, generations: int = 100, seed: int = 0, population_size: int = 20,
                   resolution: int = 10, spread_cells: int = 8, workers: int = 1, gray: bool = False, cap: int = DEFAULT_CAP,
                   clearance: float = 0.0, margin: float = 0.0) -> List[ScalingRow]:
    """ Bypass search on the first N = 0..max_obstacles obstacles between the endpoints:
    class count, wall time and best cost as the instance grows. """
    start, end = (0.0, 0.0), (problem.span, 0.0)
    between = obstacles_between(problem.obstacles, start, end)
    if not 0 <= max_obstacles <= len(between):
        raise InvalidInputError(f"max_obstacles must lie in 0..{len(between)}, got {max_obstacles}", param='max_obstacles')

    rows = []
    for n in range(max_obstacles + 1):
        sub = problem.with_obstacles(between[:n])
        clock = Stopwatch()
        classes = enumerate_bypasses(sub.obstacles, start, end, cap, clearance, margin)
        out = bypass_solver(classes, sub, generations, seed, population_size, resolution, spread_cells, workers, gray)
        rows.append(ScalingRow(n, len(classes), clock.ms, out.S if out.feasible else np.inf))
        logger.info(f"N={n}: {len(classes)} class(es) in {rows[-1].wall_ms:.1f} ms, best cost {rows[-1].best_cost:.6g}")
    return rows


class RouteSolver(RouteSolverBase):
    solver_name: str = "bypass"

    def __init__(self, scenario: Scenario, extra_params: dict = {}):
        super().__init__(scenario, extra_params)

        self.spec = self.config.bypass
        self.margin = self.spec.margin * self.problem.span

        self.loaded_banner()

    def solve(self) -> SolveOutcome:
        s = self.spec
        classes = enumerate_bypasses(self.problem.obstacles, (0.0, 0.0), (self.problem.span, 0.0), s.cap,
                                     self.config.clearance, self.margin)
        return bypass_solver(classes, self.problem, s.generations, self.seed, s.population_size, s.resolution,
                             s.spread_cells, self.workers, self.config.gray, self.penalty_base)

    def scaling(self, max_obstacles: int, generations: Optional[int] = None) -> List[ScalingRow]:
        s = self.spec
        return bypass_scaling(self.problem, max_obstacles, generations or s.generations, self.seed, s.population_size,
                              s.resolution, s.spread_cells, self.workers, self.config.gray, s.cap, self.config.clearance, self.margin)

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from loguru import logger

from archipelago import ConvergenceLog
from geo_env import Route
from penalty import ConstraintReport, PenaltyParams, RawEvaluation
from route_errors import InvalidInputError
from scenario import Scenario


@dataclass(eq=False)
class SolveOutcome:
    """ What every solver hands back: the route polyline in frame coordinates plus
    its cost breakdown, constraint values and a convergence log. """
    solver: str
    points: np.ndarray
    feasible: bool
    S: float
    T: float
    C: float
    P: float
    E: float
    lam: float
    report: ConstraintReport
    log: ConvergenceLog = field(default_factory=ConvergenceLog)
    generations: int = 0
    evaluations: int = 0
    wall_ms: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def route(self) -> Optional[Route]:
        """ The polyline as a route graph, or None when it doubles back in x. """
        if np.all(np.diff(self.points[:, 0]) > 0):
            return Route(self.points)
        return None

    def summary(self) -> dict:
        return {
            'solver': self.solver,
            'best_cost': self.S,
            'feasible': self.feasible,
            'wall_ms': self.wall_ms,
        }


class RouteSolverBase:
    solver_name: str = None

    def __init__(self, scenario: Scenario, extra_params: dict = {}):
        self.scenario = scenario
        self.problem = scenario.problem
        self.config = scenario.spec.solver
        self.seed = extra_params.get('seed', self.config.seed)
        self.workers = extra_params.get('workers', self.config.workers)
        self.deterministic = extra_params.get('deterministic', self.config.deterministic)
        self.extra_params = extra_params
        if self.seed is None:
            if self.deterministic:
                raise InvalidInputError("a seed is required in deterministic mode", param='seed')
            self.seed = int(np.random.SeedSequence().entropy % (2 ** 32))
            logger.info(f"No seed given, using {self.seed}")
        self.penalty_base = scenario.penalty_params()

    def loaded_banner(self):
        logger.info(f"Loaded {self.solver_name} solver for {self.scenario.name} "
                    f"[{self.problem.n_free} waypoints, {len(self.problem.obstacles)} obstacles, alpha={self.problem.alpha}]")

    def solve(self) -> SolveOutcome:
        raise NotImplementedError

    def outcome(self, ordinates, params: PenaltyParams, feasible: Optional[bool] = None, raw: Optional[RawEvaluation] = None, **kwargs) -> SolveOutcome:
        """ Package free ordinates as an outcome, scored at `params`. """
        ordinates = np.asarray(ordinates, dtype=float)
        if raw is None:
            raw = self.problem.evaluate(ordinates[None])
        P = float(raw.penalty(params)[0])
        report = ConstraintReport(h=raw.h[0], g=raw.g[0])
        return SolveOutcome(
            solver=self.solver_name,
            points=self.problem.route(ordinates).points,
            feasible=report.feasible if feasible is None else feasible,
            S=float(raw.S[0]), T=float(raw.T[0]), C=float(raw.C[0]), P=P,
            E=float(raw.score(params)[0]), lam=params.lam, report=report,
            **kwargs,
        )


class Stopwatch:
    def __init__(self):
        self.t0 = time.perf_counter()

    @property
    def ms(self) -> float:
        return (time.perf_counter() - self.t0) * 1000.0


def guess_solver(name: str) -> str:
    solver = name.lower().replace('_', '-')

    solver_match_map = {
        'gaeda': ['gaeda', 'ga-eda', 'ga', 'eda', 'island', 'archipelago'],
        'sa': ['sa', 'anneal', 'simulated-annealing'],
        'shortest': ['shortest', 'visibility', 'shortest-path'],
        'bypass': ['bypass', 'death-penalty'],
        'brute': ['brute', 'exhaustive', 'brute-force'],
    }
    for backend, options in solver_match_map.items():
        if solver in options:
            return backend

    raise InvalidInputError(f"unknown solver {name!r}, choose one of {', '.join(solver_match_map)}", param='solver')

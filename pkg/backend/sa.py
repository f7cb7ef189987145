import math
from dataclasses import dataclass
from typing import Optional

from archipelago import LogRow
from evo_core import Encoding, Fitness
from penalty import RouteProblem, anneal
from route_solver import *

# simulated annealing over the same binary encoding and generalized cost as the islands


@dataclass(frozen=True)
class SAParams:
    temperature: float = 1.0
    cooling: float = 0.95
    steps_per_temp: int = 50
    step_cells: int = 4 # largest proposal step, in decoding cells
    stages: int = 200
    g_rate: float = 0.05 # lam annealing per temperature stage
    resolution: int = 10
    max_evaluations: Optional[int] = None

    def __post_init__(self):
        if not self.temperature > 0:
            raise InvalidInputError(f"temperature must be positive, got {self.temperature}", param='temperature')
        if not 0 < self.cooling < 1:
            raise InvalidInputError(f"cooling factor must lie in (0, 1), got {self.cooling}", param='cooling')
        if self.steps_per_temp < 1 or self.stages < 1 or self.step_cells < 1:
            raise InvalidInputError("steps_per_temp, stages and step_cells must be >= 1")


def metropolis_accept(dE: float, temperature: float, u: float) -> bool:
    if dE <= 0:
        return True
    return u < math.exp(-dE / temperature)


def simulated_annealing(problem: RouteProblem, params: SAParams, seed: int, penalty: PenaltyParams = PenaltyParams(),
                        gray: bool = False, name: str = 'sa') -> SolveOutcome:
    clock = Stopwatch()
    rng = np.random.default_rng(seed)
    enc = Encoding(problem.n_free, params.resolution, problem.span, gray)
    lam = penalty.lam
    fitness = Fitness(problem, enc, penalty.at(lam))
    log = ConvergenceLog()

    trace = []

    def note_best():
        # every evaluated route counts, accepted or not
        if fitness.best_raw is not None and (not trace or fitness.best_raw.S[0] < trace[-1][1]):
            trace.append((clock.ms, float(fitness.best_raw.S[0])))

    codes = rng.integers(0, enc.levels + 1, size=problem.n_free)
    raw = fitness.evaluate(enc.bits_for(codes))
    E = float(fitness.score(raw)[0])
    note_best()
    temp = params.temperature
    stage = 0

    for stage in range(params.stages):
        for _ in range(params.steps_per_temp):
            i = rng.integers(problem.n_free)
            step = rng.integers(1, params.step_cells + 1) * (1 if rng.random() < 0.5 else -1)
            new = codes.copy()
            new[i] = np.clip(codes[i] + step, 0, enc.levels)
            if new[i] == codes[i]:
                continue
            new_raw = fitness.evaluate(enc.bits_for(new))
            new_E = float(fitness.score(new_raw)[0])
            note_best()
            dE = new_E - E
            if metropolis_accept(dE, temp, rng.random() if dE > 0 else 0.0):
                codes, raw, E = new, new_raw, new_E
            if params.max_evaluations and fitness.evaluations >= params.max_evaluations:
                break

        P = float(raw.penalty(fitness.params)[0])
        log.add(LogRow(name, stage, lam, E, float(raw.S[0]), P, clock.ms))
        if params.max_evaluations and fitness.evaluations >= params.max_evaluations:
            break
        temp *= params.cooling
        lam = anneal(lam, params.g_rate)
        fitness.params = penalty.at(lam)
        E = float(fitness.score(raw)[0])

    feasible = fitness.best_raw is not None
    if feasible:
        best_codes, best_raw = enc.codes(fitness.best_bits), fitness.best_raw
    else:
        best_codes, best_raw = codes, raw
    logger.info(f"Annealed {stage + 1} stages, {fitness.evaluations} evaluations in {clock.ms / 1000:.2f}s, "
                f"best S={best_raw.S[0]:.6g}, feasible={feasible}")
    final = fitness.params
    return SolveOutcome(
        solver=name, points=problem.route(enc.ordinates(enc.bits_for(best_codes))).points, feasible=feasible,
        S=float(best_raw.S[0]), T=float(best_raw.T[0]), C=float(best_raw.C[0]), P=float(best_raw.penalty(final)[0]),
        E=float(best_raw.score(final)[0]), lam=lam, report=ConstraintReport(best_raw.h[0], best_raw.g[0]),
        log=log, generations=stage + 1, evaluations=fitness.evaluations, wall_ms=clock.ms, extra={'feasible_trace': [list(t) for t in trace]},
    )


class RouteSolver(RouteSolverBase):
    solver_name: str = "sa"

    def __init__(self, scenario: Scenario, extra_params: dict = {}):
        super().__init__(scenario, extra_params)

        s = self.config.sa
        temperature = s.temperature
        if temperature is None:
            straight = self.problem.evaluate(np.zeros((1, self.problem.n_free)))
            temperature = 0.05 * float(straight.S[0]) or 1.0
        self.params = SAParams(temperature, s.cooling, s.steps_per_temp, s.step_cells, s.stages, s.g_rate, s.resolution, s.max_evaluations)

        self.loaded_banner()

    def solve(self) -> SolveOutcome:
        return simulated_annealing(self.problem, self.params, self.seed, self.penalty_base, self.config.gray, self.solver_name)

from dataclasses import dataclass

from archipelago import LogRow
from evo_core import Encoding, Fitness
from penalty import RouteProblem
from route_errors import RefusalError
from route_solver import *

# exhaustive enumeration oracle for small instances

MAX_BITS = 24
BATCH = 4096
TIE_RTOL = 1e-12 # costs this close count as equal


@dataclass(frozen=True, eq=False)
class ExhaustiveResult:
    bits: np.ndarray
    ordinates: np.ndarray
    E: float
    S: float
    feasible: bool
    evaluations: int


def _tie(E: float) -> float:
    return TIE_RTOL * max(1.0, abs(E))


def exhaustive_search(problem: RouteProblem, resolution: int, params: PenaltyParams = PenaltyParams(),
                      feasible_only: bool = False, gray: bool = False, batch: int = BATCH) -> ExhaustiveResult:
    """ Score every chromosome; ties, within TIE_RTOL, go to the lexicographically smallest bit string. """
    enc = Encoding(problem.n_free, resolution, problem.span, gray)
    L = enc.length
    if L > MAX_BITS:
        raise RefusalError(f"exhaustive search over {L} bits means 2^{L} evaluations; refusing above {MAX_BITS} bits", param='resolution')

    fitness = Fitness(problem, enc, params)
    shifts = np.arange(L - 1, -1, -1, dtype=np.int64)
    best_E, best_idx, best_raw = np.inf, -1, None
    for lo in range(0, 2 ** L, batch):
        idx = np.arange(lo, min(lo + batch, 2 ** L), dtype=np.int64)
        bits = ((idx[:, None] >> shifts) & 1).astype(bool)
        raw = fitness.evaluate(bits)
        E = fitness.score(raw)
        if feasible_only:
            E = np.where(raw.feasible, E, np.inf)
        m = float(E.min())
        if not np.isfinite(m):
            continue
        k = int(np.argmax(E <= m + _tie(m)))
        if best_raw is None or m < best_E - _tie(best_E):
            best_E, best_idx, best_raw = float(E[k]), int(idx[k]), raw.take([k])

    if best_raw is None:
        # nothing feasible; report the first chromosome unscored
        best_idx = 0
        best_raw = fitness.evaluate(np.zeros((1, L), dtype=bool))
    bits = ((best_idx >> shifts) & 1).astype(bool)
    logger.debug(f"exhaustive search: {fitness.evaluations} evaluations, best E {best_E:.6g}")
    return ExhaustiveResult(bits, enc.ordinates(bits), best_E, float(best_raw.S[0]), bool(best_raw.feasible[0]), fitness.evaluations)


class RouteSolver(RouteSolverBase):
    solver_name: str = "brute"

    def __init__(self, scenario: Scenario, extra_params: dict = {}):
        super().__init__(scenario, extra_params)

        spec = self.config.brute
        self.resolution = spec.resolution or max(l.resolution for l in self.config.levels)
        self.feasible_only = spec.feasible_only
        self.params = self.penalty_base.at(scenario.final_lambda())

        self.loaded_banner()

    def solve(self) -> SolveOutcome:
        clock = Stopwatch()
        res = exhaustive_search(self.problem, self.resolution, self.params, self.feasible_only, self.config.gray)
        out = self.outcome(res.ordinates, self.params, evaluations=res.evaluations, wall_ms=clock.ms)
        out.log.add(LogRow(self.solver_name, 0, self.params.lam, out.E, out.S, out.P, clock.ms))
        return out

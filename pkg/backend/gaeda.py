import archipelago
from route_solver import *

# hierarchical GA-EDA island network


class RouteSolver(RouteSolverBase):
    solver_name: str = "gaeda"

    def __init__(self, scenario: Scenario, extra_params: dict = {}):
        super().__init__(scenario, extra_params)

        self.network = scenario.network()
        self.termination = extra_params.get('termination', scenario.termination())
        self.settings = scenario.settings()

        self.loaded_banner()

    def solve(self) -> SolveOutcome:
        res = archipelago.run(self.network, self.problem, self.termination, seed=self.seed, workers=self.workers,
                              deterministic=self.deterministic, settings=self.settings)
        params = self.penalty_base.at(res.lam_final)
        return self.outcome(res.candidate.ordinates, params, feasible=res.feasible, raw=res.candidate.raw,
                            log=res.log, generations=res.generations, evaluations=res.evaluations, wall_ms=res.wall_ms,
                            extra={'island': res.candidate.island, 'islands': len(self.network.islands),
                                   'feasible_trace': [list(t) for t in res.feasible_trace]})

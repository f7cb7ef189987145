#!/usr/bin/env python3
import argparse
import csv
import importlib
import json
import os
import statistics
import sys
from dataclasses import replace
from pathlib import Path

from loguru import logger

from backend.bypass import SCALING_COLUMNS
from route_errors import NoFeasibleSolutionError, RoutingError
from route_solver import guess_solver
from scenario import emit_result, load_scenario

EXIT_OK = 0
BENCH_COLUMNS = ['workers', 'wall_ms', 'speedup']


def solver_params(args) -> dict:
    """ CLI overrides on top of the scenario's solver section. """
    extra_params = {}
    if args.seed is not None:
        extra_params['seed'] = args.seed
    if args.workers is not None:
        extra_params['workers'] = args.workers
    if args.deterministic is not None:
        extra_params['deterministic'] = args.deterministic
    return extra_params


def load_solver(name: str, scenario, extra_params: dict):
    name = guess_solver(name)
    logger.info(f"Loading RouteSolver[{name}] for {scenario.name}")
    backend = importlib.import_module(f'backend.{name}')
    return backend.RouteSolver(scenario, extra_params)


def run_solver(name: str, args) -> int:
    scenario = load_scenario(args.scenario)
    extra_params = solver_params(args)
    solver = load_solver(name, scenario, extra_params)
    outcome = solver.solve()

    metadata = {'seed': solver.seed, 'workers': solver.workers, 'deterministic': solver.deterministic}
    emit_result(outcome, scenario, args.out, metadata)
    print(json.dumps(outcome.summary()))

    if not outcome.feasible:
        err = NoFeasibleSolutionError(f"{outcome.solver}: no feasible route; best candidate has P={outcome.P:.6g}")
        logger.warning(repr(err))
        return err.code
    return EXIT_OK


def cmd_solve(args) -> int:
    return run_solver('gaeda', args)


def cmd_baseline(args) -> int:
    return run_solver(args.solver, args)


def cmd_bench(args) -> int:
    """ Same workload at each worker count, free-running; speedup is relative to the first count. """
    scenario = load_scenario(args.scenario)
    termination = scenario.termination()
    termination = replace(termination, plateau=None, wall_time=None,
                          max_generations=args.generations or termination.max_generations)

    rows = []
    for workers in args.workers:
        times = []
        for r in range(args.repeats):
            extra_params = {**solver_params(args), 'workers': workers, 'deterministic': False, 'termination': termination}
            if 'seed' not in extra_params:
                extra_params['seed'] = scenario.spec.solver.seed if scenario.spec.solver.seed is not None else 0
            outcome = load_solver('gaeda', scenario, extra_params).solve()
            times.append(outcome.wall_ms)
        rows.append([workers, statistics.median(times)])
        logger.info(f"{workers} worker(s): median {rows[-1][1]:.1f} ms over {args.repeats} repeat(s)")

    base = rows[0][1]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / 'bench.csv', 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(BENCH_COLUMNS)
        for workers, wall_ms in rows:
            writer.writerow([workers, f"{wall_ms:.3f}", f"{base / wall_ms:.4f}"])
    logger.info(f"Wrote {out / 'bench.csv'}")
    return EXIT_OK


def cmd_bypass_scaling(args) -> int:
    """ Bypass class count, wall time and best cost for the first N = 0..K obstacles between the endpoints. """
    scenario = load_scenario(args.scenario)
    solver = load_solver('bypass', scenario, solver_params(args))
    rows = solver.scaling(args.max_obstacles, args.generations)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / 'bypass_scaling.csv', 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(SCALING_COLUMNS)
        for r in rows:
            writer.writerow([r.obstacles, r.classes, f"{r.wall_ms:.3f}", repr(r.best_cost)])
    logger.info(f"Wrote {out / 'bypass_scaling.csv'}")
    return EXIT_OK


def cmd_validate(args) -> int:
    scenario = load_scenario(args.scenario)
    s = scenario.spec.solver
    network = scenario.network()
    print(f"{scenario.path}: ok ({scenario.name}, span {scenario.frame.span:.6g}, {len(scenario.obstacles)} obstacle(s), "
          f"{len(network.islands)} island(s), {s.waypoints} waypoints)")
    return EXIT_OK


def parse_args(argv=None):
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('-s', '--scenario', action='store', required=True, help="Scenario JSON file")
    common.add_argument('-o', '--out', action='store', default='out', help="Output directory")
    common.add_argument('--seed', action='store', type=int, default=None, help="Override the scenario seed")
    mode = common.add_mutually_exclusive_group()
    mode.add_argument('--deterministic', dest='deterministic', action='store_true', default=None, help="Lock-step islands, reproducible output")
    mode.add_argument('--free-running', dest='deterministic', action='store_false', help="Asynchronous islands")
    common.add_argument('-L', '--log-level', default=os.environ.get('ROUTING_LOG_LEVEL', "INFO"), choices=["TRACE", "DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"], help="Set the log level")

    parser = argparse.ArgumentParser(
        description='Island GA-EDA ship route planner',
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('solve', parents=[common], help="Plan a route with the island network")
    p.add_argument('-w', '--workers', action='store', type=int, default=None, help="Worker threads")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser('baseline', parents=[common], help="Plan a route with a reference solver")
    p.add_argument('--solver', action='store', required=True, help="sa, shortest, bypass or brute")
    p.add_argument('-w', '--workers', action='store', type=int, default=None, help="Worker threads")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser('bench', parents=[common], help="Wall time against worker count")
    p.add_argument('-w', '--workers', action='store', type=int, nargs='+', default=[1, 2, 4], help="Worker counts to time")
    p.add_argument('--repeats', action='store', type=int, default=3, help="Repeats per worker count (median is reported)")
    p.add_argument('--generations', action='store', type=int, default=None, help="Generations per run")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser('bypass-scaling', parents=[common], help="Bypass search cost as obstacles are added one by one")
    p.add_argument('--max-obstacles', action='store', type=int, required=True, help="Largest obstacle count N")
    p.add_argument('--generations', action='store', type=int, default=None, help="Generations per bypass class")
    p.add_argument('-w', '--workers', action='store', type=int, default=None, help="Worker threads")
    p.set_defaults(func=cmd_bypass_scaling)

    p = sub.add_parser('validate', parents=[common], help="Check a scenario and its files")
    p.set_defaults(func=cmd_validate, workers=None)

    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)

    logger.remove()
    logger.add(sink=sys.stderr, level=args.log_level)

    try:
        return args.func(args)
    except RoutingError as e:
        logger.opt(exception=e).debug("solver error")
        logger.error(repr(e))
        return e.code


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
